//! Reverse-mode automatic differentiation over `f64` ndarray tensors.
//!
//! A [`Graph`] is a tape: forward calls append nodes, `backward` walks the
//! tape once in reverse and returns per-parameter gradients. Design points
//! that the rest of the crate relies on:
//!
//! - Deterministic: fixed iteration order everywhere, no threads inside ops.
//! - `stop_grad` registers no parent edge, so a detached branch contributes
//!   nothing to upstream gradients — not even a `+0.0` rounding event.
//! - Gradients accumulate only into subgraphs that can reach a parameter;
//!   everything else is skipped.
//!
//! All tensors are `f64`. The optional reduced-precision mode rounds GEMM
//! operands and results through `f32`, emulating mixed-precision matmuls
//! while keeping `f64` master weights.

pub mod gradcheck;
pub mod kernels;
pub mod params;

pub use params::{ParamGroup, ParamId, ParamStore};

use ndarray::{Array2, ArrayD, Axis, Ix2, Ix3, IxDyn, Slice};

use kernels::*;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
#[allow(dead_code)] // some payloads exist only to make tape dumps readable
enum Op {
    Leaf,
    Param(ParamId),
    StopGrad,
    MatMul,
    Bmm,
    TransposeLast2,
    Add,
    Sub,
    Mul,
    Neg,
    Scale(f64),
    AddScalar(f64),
    AddBias,
    MulBias,
    AddPerSample,
    MulBatchScalar,
    Gelu,
    Sigmoid,
    Tanh,
    Exp,
    Relu,
    Abs,
    Square,
    Pow(f64),
    SoftmaxLast,
    LogSoftmaxLast,
    Clamp { lo: f64, hi: f64 },
    LayerNorm { eps: f64 },
    GroupNorm { groups: usize, eps: f64 },
    MeanAxis(usize),
    SumAxis(usize),
    MeanAll,
    Reshape,
    Concat { axis: usize },
    SelectLast(usize),
    GatherCols(Vec<usize>),
    EmbedRows(Vec<usize>),
    Conv1d { k: usize, pad: usize, stride: usize },
    UpsampleNearest2,
    PadTime { before: usize, after: usize },
    CropTime { offset: usize, len: usize },
    SplitHeads { heads: usize },
    MergeHeads { heads: usize },
    MaskDiagLast2,
    DiagSumLast2,
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    parents: Vec<NodeId>,
    needs_grad: bool,
}

/// Per-parameter gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    by_param: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&ArrayD<f64>> {
        self.by_param.get(id.index()).and_then(|g| g.as_ref())
    }

    /// Gradient or a zero tensor of the parameter's shape.
    pub fn get_or_zeros(&self, store: &ParamStore, id: ParamId) -> ArrayD<f64> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(store.value(id).raw_dim()),
        }
    }
}

/// Reverse-mode tape.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
    reduced_precision: bool,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
            reduced_precision: false,
        }
    }

    pub fn with_reduced_precision(params: &'p ParamStore, on: bool) -> Self {
        let mut g = Graph::new(params);
        g.reduced_precision = on;
        g
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    /// Value of a node that must hold exactly one element.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id.0].value;
        assert_eq!(v.len(), 1, "expected scalar node");
        *v.iter().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, parents: Vec<NodeId>) -> NodeId {
        let needs_grad = match op {
            Op::Param(_) => true,
            Op::Leaf | Op::StopGrad => false,
            _ => parents.iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            parents,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    // ---- leaves ----------------------------------------------------------

    pub fn constant(&mut self, v: ArrayD<f64>) -> NodeId {
        self.push(v, Op::Leaf, vec![])
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    /// Enter a parameter into the graph (memoized per parameter).
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.index()] {
            return n;
        }
        let v = self.params.value(id).clone();
        let n = self.push(v, Op::Param(id), vec![]);
        self.param_nodes[id.index()] = Some(n);
        n
    }

    /// Detach: value flows, gradient does not.
    pub fn stop_grad(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.clone();
        // No parent edge on purpose: backward never visits the branch.
        self.push(v, Op::StopGrad, vec![])
    }

    // ---- linear algebra --------------------------------------------------

    fn gemm(&self, a: &ArrayD<f64>, b: &ArrayD<f64>) -> ArrayD<f64> {
        let a2 = a.view().into_dimensionality::<Ix2>().expect("matmul lhs must be 2-D");
        let b2 = b.view().into_dimensionality::<Ix2>().expect("matmul rhs must be 2-D");
        assert_eq!(a2.ncols(), b2.nrows(), "matmul inner dims {} vs {}", a2.ncols(), b2.nrows());
        if self.reduced_precision {
            let a32 = a2.mapv(|v| v as f32);
            let b32 = b2.mapv(|v| v as f32);
            a32.dot(&b32).mapv(|v| v as f64).into_dyn()
        } else {
            a2.dot(&b2).into_dyn()
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.gemm(&self.nodes[a.0].value, &self.nodes[b.0].value);
        self.push(v, Op::MatMul, vec![a, b])
    }

    /// Batched matmul: `[B, m, k] @ [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.nodes[a.0].value.view().into_dimensionality::<Ix3>().expect("bmm lhs 3-D");
        let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix3>().expect("bmm rhs 3-D");
        let (bb, m, k) = av.dim();
        let (bb2, k2, n) = bv.dim();
        assert_eq!(bb, bb2, "bmm batch dims");
        assert_eq!(k, k2, "bmm inner dims");
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[bb, m, n]));
        {
            let mut o3 = out.view_mut().into_dimensionality::<Ix3>().unwrap();
            for bi in 0..bb {
                let prod = if self.reduced_precision {
                    let a32 = av.index_axis(Axis(0), bi).mapv(|v| v as f32);
                    let b32 = bv.index_axis(Axis(0), bi).mapv(|v| v as f32);
                    a32.dot(&b32).mapv(|v| v as f64)
                } else {
                    av.index_axis(Axis(0), bi).dot(&bv.index_axis(Axis(0), bi))
                };
                o3.index_axis_mut(Axis(0), bi).assign(&prod);
            }
        }
        self.push(out, Op::Bmm, vec![a, b])
    }

    pub fn transpose_last2(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        let nd = v.ndim();
        assert!(nd >= 2);
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        let t = v
            .view()
            .permuted_axes(IxDyn(&axes))
            .as_standard_layout()
            .to_owned();
        self.push(t, Op::TransposeLast2, vec![x])
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape(), "add shapes");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape(), "sub shapes");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape(), "mul shapes");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul, vec![a, b])
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.mapv(|v| -v);
        self.push(v, Op::Neg, vec![x])
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.nodes[x.0].value.mapv(|v| v * c);
        self.push(v, Op::Scale(c), vec![x])
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.nodes[x.0].value.mapv(|v| v + c);
        self.push(v, Op::AddScalar(c), vec![x])
    }

    /// `x[..., d] + b[d]`.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(bv.ndim(), 1, "bias must be 1-D");
        let d = bv.shape()[0];
        assert_eq!(*xv.shape().last().unwrap(), d, "bias length");
        let mut v = xv.clone();
        let bs = bv.as_slice().unwrap();
        for mut lane in v.lanes_mut(Axis(xv.ndim() - 1)) {
            for (o, &b) in lane.iter_mut().zip(bs) {
                *o += b;
            }
        }
        self.push(v, Op::AddBias, vec![x, b])
    }

    /// `x[..., d] * v[d]`.
    pub fn mul_bias(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        assert_eq!(wv.ndim(), 1);
        let d = wv.shape()[0];
        assert_eq!(*xv.shape().last().unwrap(), d);
        let mut v = xv.clone();
        let ws = wv.as_slice().unwrap();
        for mut lane in v.lanes_mut(Axis(xv.ndim() - 1)) {
            for (o, &w) in lane.iter_mut().zip(ws) {
                *o *= w;
            }
        }
        self.push(v, Op::MulBias, vec![x, w])
    }

    /// `x[B, L, C] + y[B, C]`, broadcasting over the middle axis.
    pub fn add_per_sample(&mut self, x: NodeId, y: NodeId) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().expect("x 3-D");
        let yv = self.nodes[y.0].value.view().into_dimensionality::<Ix2>().expect("y 2-D");
        let (b, l, c) = xv.dim();
        assert_eq!(yv.dim(), (b, c), "per-sample add shapes");
        let mut v = xv.to_owned();
        for bi in 0..b {
            let yr = yv.row(bi);
            for li in 0..l {
                let mut row = v.index_axis_mut(Axis(0), bi);
                let mut row = row.index_axis_mut(Axis(0), li);
                row += &yr;
            }
        }
        self.push(v.into_dyn(), Op::AddPerSample, vec![x, y])
    }

    /// `x[B, ...] * s[B]` with a scalar per batch entry.
    pub fn mul_batch_scalar(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let sv = &self.nodes[s.0].value;
        assert_eq!(sv.ndim(), 1);
        let b = sv.shape()[0];
        assert_eq!(xv.shape()[0], b, "batch sizes");
        let mut v = xv.clone();
        let ss = sv.as_slice().unwrap();
        for (bi, mut sl) in v.axis_iter_mut(Axis(0)).enumerate() {
            sl.mapv_inplace(|e| e * ss[bi]);
        }
        self.push(v, Op::MulBatchScalar, vec![x, s])
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.mapv(gelu);
        self.push(v, Op::Gelu, vec![x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.mapv(sigmoid);
        self.push(v, Op::Sigmoid, vec![x])
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.mapv(f64::tanh);
        self.push(v, Op::Tanh, vec![x])
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.mapv(f64::exp);
        self.push(v, Op::Exp, vec![x])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.mapv(|v| v.max(0.0));
        self.push(v, Op::Relu, vec![x])
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.mapv(f64::abs);
        self.push(v, Op::Abs, vec![x])
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.mapv(|v| v * v);
        self.push(v, Op::Square, vec![x])
    }

    /// Elementwise `x^p` for strictly positive `x`.
    pub fn pow(&mut self, x: NodeId, p: f64) -> NodeId {
        let v = self.nodes[x.0].value.mapv(|v| v.powf(p));
        self.push(v, Op::Pow(p), vec![x])
    }

    pub fn softmax_last(&mut self, x: NodeId) -> NodeId {
        let v = softmax_last(&self.nodes[x.0].value);
        self.push(v, Op::SoftmaxLast, vec![x])
    }

    pub fn log_softmax_last(&mut self, x: NodeId) -> NodeId {
        let v = log_softmax_last(&self.nodes[x.0].value);
        self.push(v, Op::LogSoftmaxLast, vec![x])
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.nodes[x.0].value.mapv(|v| v.clamp(lo, hi));
        self.push(v, Op::Clamp { lo, hi }, vec![x])
    }

    /// Normalize over the last axis (no affine part; pair with
    /// [`Graph::mul_bias`] and [`Graph::add_bias`] for gain and offset).
    pub fn layer_norm(&mut self, x: NodeId, eps: f64) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let (mean, inv_std) = layernorm_stats(xv, eps);
        let mut v = xv.clone();
        let last = v.ndim() - 1;
        for ((mut lane, &m), &is) in v
            .lanes_mut(Axis(last))
            .into_iter()
            .zip(mean.iter())
            .zip(inv_std.iter())
        {
            lane.mapv_inplace(|e| (e - m) * is);
        }
        self.push(v, Op::LayerNorm { eps }, vec![x])
    }

    /// Group normalization of `[B, L, C]` over `(L, C/groups)` regions.
    pub fn group_norm(&mut self, x: NodeId, groups: usize, eps: f64) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().expect("gn 3-D");
        let (b, l, c) = xv.dim();
        assert!(c % groups == 0, "channels {c} not divisible by groups {groups}");
        let cg = c / groups;
        let mut v = xv.to_owned();
        for bi in 0..b {
            for gi in 0..groups {
                let c0 = gi * cg;
                let mut region = v.slice_mut(ndarray::s![bi, .., c0..c0 + cg]);
                let n = (l * cg) as f64;
                let mean = region.sum() / n;
                let mut var = 0.0;
                for &e in region.iter() {
                    let d = e - mean;
                    var += d * d;
                }
                var /= n;
                let inv = 1.0 / (var + eps).sqrt();
                region.mapv_inplace(|e| (e - mean) * inv);
            }
        }
        self.push(v.into_dyn(), Op::GroupNorm { groups, eps }, vec![x])
    }

    // ---- reductions and shape ops ----------------------------------------

    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> NodeId {
        let v = self.nodes[x.0].value.mean_axis(Axis(axis)).expect("nonempty axis");
        self.push(v, Op::MeanAxis(axis), vec![x])
    }

    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> NodeId {
        let v = self.nodes[x.0].value.sum_axis(Axis(axis));
        self.push(v, Op::SumAxis(axis), vec![x])
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let m = xv.sum() / xv.len() as f64;
        self.push(ArrayD::from_elem(IxDyn(&[]), m), Op::MeanAll, vec![x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.len(), shape.iter().product::<usize>(), "reshape size");
        let v = xv
            .to_shape(IxDyn(shape))
            .expect("reshape of standard-layout tensor")
            .to_owned();
        self.push(v, Op::Reshape, vec![x])
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> NodeId {
        assert!(!xs.is_empty());
        let views: Vec<_> = xs.iter().map(|x| self.nodes[x.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        self.push(v, Op::Concat { axis }, xs.to_vec())
    }

    /// Select one index of the last axis: `x[..., K] -> x[...][i]`.
    pub fn select_last(&mut self, x: NodeId, i: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let last = xv.ndim() - 1;
        let v = xv.index_axis(Axis(last), i).to_owned();
        self.push(v, Op::SelectLast(i), vec![x])
    }

    /// Per-row column gather: `x[B, C]`, indices `[B]` -> `[B]`.
    pub fn gather_cols(&mut self, x: NodeId, idx: &[usize]) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix2>().expect("gather 2-D");
        assert_eq!(xv.nrows(), idx.len());
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[idx.len()]));
        for (bi, &c) in idx.iter().enumerate() {
            out[bi] = xv[[bi, c]];
        }
        self.push(out, Op::GatherCols(idx.to_vec()), vec![x])
    }

    /// Row lookup into an embedding table: `table[V, d]`, indices `[B]` -> `[B, d]`.
    pub fn embed_rows(&mut self, table: NodeId, idx: &[usize]) -> NodeId {
        let tv = self.nodes[table.0].value.view().into_dimensionality::<Ix2>().expect("table 2-D");
        let d = tv.ncols();
        let mut out = Array2::<f64>::zeros((idx.len(), d));
        for (bi, &r) in idx.iter().enumerate() {
            assert!(r < tv.nrows(), "embedding index {r} out of range {}", tv.nrows());
            out.row_mut(bi).assign(&tv.row(r));
        }
        self.push(out.into_dyn(), Op::EmbedRows(idx.to_vec()), vec![table])
    }

    /// 1-D convolution over time. `x[B, L, C_in]`, weight `[k*C_in, C_out]`.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, k: usize, pad: usize, stride: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let c_in = xv.shape()[2];
        assert_eq!(wv.shape()[0], k * c_in, "conv weight rows");
        let b = xv.shape()[0];
        let c_out = wv.shape()[1];
        let (cols, l_out) = im2col(xv, k, pad, stride);
        let out2 = if self.reduced_precision {
            let a32 = cols.mapv(|v| v as f32);
            let w32 = wv.view().into_dimensionality::<Ix2>().unwrap().mapv(|v| v as f32);
            a32.dot(&w32).mapv(|v| v as f64)
        } else {
            cols.dot(&wv.view().into_dimensionality::<Ix2>().unwrap())
        };
        let v = out2
            .into_dyn()
            .to_shape(IxDyn(&[b, l_out, c_out]))
            .unwrap()
            .to_owned();
        self.push(v, Op::Conv1d { k, pad, stride }, vec![x, w])
    }

    /// Nearest-neighbor upsample of the time axis by 2.
    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().expect("up 3-D");
        let (b, l, c) = xv.dim();
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[b, 2 * l, c]));
        {
            let mut o = out.view_mut().into_dimensionality::<Ix3>().unwrap();
            for bi in 0..b {
                for li in 0..l {
                    let src = xv.slice(ndarray::s![bi, li, ..]);
                    o.slice_mut(ndarray::s![bi, 2 * li, ..]).assign(&src);
                    o.slice_mut(ndarray::s![bi, 2 * li + 1, ..]).assign(&src);
                }
            }
        }
        self.push(out, Op::UpsampleNearest2, vec![x])
    }

    /// Zero-pad the time axis of `[B, L, C]`.
    pub fn pad_time(&mut self, x: NodeId, before: usize, after: usize) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().expect("pad 3-D");
        let (b, l, c) = xv.dim();
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[b, before + l + after, c]));
        out.slice_axis_mut(Axis(1), Slice::from(before..before + l))
            .assign(&xv);
        self.push(out, Op::PadTime { before, after }, vec![x])
    }

    /// Crop the time axis of `[B, L, C]` to `[offset, offset+len)`.
    pub fn crop_time(&mut self, x: NodeId, offset: usize, len: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let v = xv
            .slice_axis(Axis(1), Slice::from(offset..offset + len))
            .to_owned();
        self.push(v, Op::CropTime { offset, len }, vec![x])
    }

    /// `[B, L, H] -> [B*heads, L, H/heads]`.
    pub fn split_heads(&mut self, x: NodeId, heads: usize) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().expect("split 3-D");
        let (b, l, h) = xv.dim();
        assert!(h % heads == 0, "H {h} not divisible by heads {heads}");
        let dh = h / heads;
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[b * heads, l, dh]));
        {
            let mut o = out.view_mut().into_dimensionality::<Ix3>().unwrap();
            for bi in 0..b {
                for hi in 0..heads {
                    for li in 0..l {
                        let src = xv.slice(ndarray::s![bi, li, hi * dh..(hi + 1) * dh]);
                        o.slice_mut(ndarray::s![bi * heads + hi, li, ..]).assign(&src);
                    }
                }
            }
        }
        self.push(out, Op::SplitHeads { heads }, vec![x])
    }

    /// `[B*heads, L, dh] -> [B, L, heads*dh]`.
    pub fn merge_heads(&mut self, x: NodeId, heads: usize) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().expect("merge 3-D");
        let (bh, l, dh) = xv.dim();
        assert!(bh % heads == 0);
        let b = bh / heads;
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[b, l, heads * dh]));
        {
            let mut o = out.view_mut().into_dimensionality::<Ix3>().unwrap();
            for bi in 0..b {
                for hi in 0..heads {
                    for li in 0..l {
                        let src = xv.slice(ndarray::s![bi * heads + hi, li, ..]);
                        o.slice_mut(ndarray::s![bi, li, hi * dh..(hi + 1) * dh]).assign(&src);
                    }
                }
            }
        }
        self.push(out, Op::MergeHeads { heads }, vec![x])
    }

    /// Zero the diagonal of the trailing `[d, d]` block.
    pub fn mask_diag(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let nd = xv.ndim();
        let d = xv.shape()[nd - 1];
        assert_eq!(xv.shape()[nd - 2], d, "trailing block must be square");
        let mut v = xv.clone();
        let rows = v.len() / (d * d);
        {
            let mut flat = v.view_mut().into_shape_with_order((rows, d, d)).unwrap();
            for r in 0..rows {
                for i in 0..d {
                    flat[[r, i, i]] = 0.0;
                }
            }
        }
        self.push(v, Op::MaskDiagLast2, vec![x])
    }

    /// Trace of each trailing `[d, d]` block: `[B, d, d] -> [B]`.
    pub fn diag_sum(&mut self, x: NodeId) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().expect("trace 3-D");
        let (b, d, d2) = xv.dim();
        assert_eq!(d, d2);
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[b]));
        for bi in 0..b {
            let mut t = 0.0;
            for i in 0..d {
                t += xv[[bi, i, i]];
            }
            out[bi] = t;
        }
        self.push(out, Op::DiagSumLast2, vec![x])
    }

    // ---- backward --------------------------------------------------------

    /// Backpropagate from a scalar node; returns per-parameter gradients.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        let mut node_grads: Vec<Option<ArrayD<f64>>> = Vec::with_capacity(self.nodes.len());
        node_grads.resize_with(self.nodes.len(), || None);
        node_grads[root.0] = Some(ArrayD::ones(self.nodes[root.0].value.raw_dim()));

        for i in (0..=root.0).rev() {
            if node_grads[i].is_none() {
                continue;
            }
            let node = &self.nodes[i];
            if node.parents.is_empty() {
                continue; // Leaf, Param, StopGrad
            }
            if !node.parents.iter().any(|p| self.nodes[p.0].needs_grad) {
                node_grads[i] = None;
                continue;
            }
            let g = node_grads[i].take().unwrap();
            let contribs = self.backward_op(i, &g);
            for (pid, contrib) in contribs {
                if !self.nodes[pid.0].needs_grad {
                    continue;
                }
                match &mut node_grads[pid.0] {
                    Some(acc) => *acc += &contrib,
                    slot @ None => {
                        // Keep stored grads in standard layout so callers can
                        // rely on `as_slice`.
                        let c = if contrib.is_standard_layout() {
                            contrib
                        } else {
                            contrib.as_standard_layout().to_owned()
                        };
                        *slot = Some(c);
                    }
                }
            }
        }

        let mut by_param: Vec<Option<ArrayD<f64>>> = Vec::with_capacity(self.params.len());
        by_param.resize_with(self.params.len(), || None);
        for (pi, pn) in self.param_nodes.iter().enumerate() {
            if let Some(n) = pn {
                by_param[pi] = node_grads[n.0].take();
            }
        }
        Gradients { by_param }
    }

    fn backward_op(&self, i: usize, g: &ArrayD<f64>) -> Vec<(NodeId, ArrayD<f64>)> {
        let node = &self.nodes[i];
        let p = &node.parents;
        let pv = |j: usize| &self.nodes[p[j].0].value;
        match &node.op {
            Op::Leaf | Op::Param(_) | Op::StopGrad => vec![],
            Op::MatMul => {
                let a2 = pv(0).view().into_dimensionality::<Ix2>().unwrap();
                let b2 = pv(1).view().into_dimensionality::<Ix2>().unwrap();
                let bt = b2.t().to_owned().into_dyn();
                let at = a2.t().to_owned().into_dyn();
                let da = self.gemm(g, &bt);
                let db = self.gemm(&at, g);
                vec![(p[0], da), (p[1], db)]
            }
            Op::Bmm => {
                let a = pv(0).view().into_dimensionality::<Ix3>().unwrap();
                let b = pv(1).view().into_dimensionality::<Ix3>().unwrap();
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let (bb, m, k) = a.dim();
                let n = b.dim().2;
                let mut da = ArrayD::<f64>::zeros(IxDyn(&[bb, m, k]));
                let mut db = ArrayD::<f64>::zeros(IxDyn(&[bb, k, n]));
                {
                    let mut da3 = da.view_mut().into_dimensionality::<Ix3>().unwrap();
                    let mut db3 = db.view_mut().into_dimensionality::<Ix3>().unwrap();
                    for bi in 0..bb {
                        let gb = g3.index_axis(Axis(0), bi);
                        let ab = a.index_axis(Axis(0), bi);
                        let bbv = b.index_axis(Axis(0), bi);
                        da3.index_axis_mut(Axis(0), bi).assign(&gb.dot(&bbv.t()));
                        db3.index_axis_mut(Axis(0), bi).assign(&ab.t().dot(&gb));
                    }
                }
                vec![(p[0], da), (p[1], db)]
            }
            Op::TransposeLast2 => {
                let nd = g.ndim();
                let mut axes: Vec<usize> = (0..nd).collect();
                axes.swap(nd - 2, nd - 1);
                vec![(p[0], g.view().permuted_axes(IxDyn(&axes)).to_owned())]
            }
            Op::Add => vec![(p[0], g.clone()), (p[1], g.clone())],
            Op::Sub => vec![(p[0], g.clone()), (p[1], g.mapv(|v| -v))],
            Op::Mul => vec![(p[0], g * pv(1)), (p[1], g * pv(0))],
            Op::Neg => vec![(p[0], g.mapv(|v| -v))],
            Op::Scale(c) => vec![(p[0], g.mapv(|v| v * c))],
            Op::AddScalar(_) => vec![(p[0], g.clone())],
            Op::AddBias => {
                let db = sum_to_last_axis(g).into_dyn();
                vec![(p[0], g.clone()), (p[1], db)]
            }
            Op::MulBias => {
                let w = pv(1);
                let ws = w.as_slice().unwrap();
                let mut dx = g.clone();
                for mut lane in dx.lanes_mut(Axis(g.ndim() - 1)) {
                    for (o, &wv) in lane.iter_mut().zip(ws) {
                        *o *= wv;
                    }
                }
                let dv = sum_to_last_axis(&(g * pv(0))).into_dyn();
                vec![(p[0], dx), (p[1], dv)]
            }
            Op::AddPerSample => {
                let dy = g
                    .view()
                    .into_dimensionality::<Ix3>()
                    .unwrap()
                    .sum_axis(Axis(1))
                    .into_dyn();
                vec![(p[0], g.clone()), (p[1], dy)]
            }
            Op::MulBatchScalar => {
                let x = pv(0);
                let s = pv(1);
                let ss = s.as_slice().unwrap();
                let mut dx = g.clone();
                for (bi, mut sl) in dx.axis_iter_mut(Axis(0)).enumerate() {
                    sl.mapv_inplace(|e| e * ss[bi]);
                }
                let b = s.shape()[0];
                let mut ds = ArrayD::<f64>::zeros(IxDyn(&[b]));
                for bi in 0..b {
                    let gx = g.index_axis(Axis(0), bi);
                    let xx = x.index_axis(Axis(0), bi);
                    ds[bi] = (&gx * &xx).sum();
                }
                vec![(p[0], dx), (p[1], ds)]
            }
            Op::Gelu => {
                let x = pv(0);
                let mut dx = g.clone();
                for (o, &xi) in dx.iter_mut().zip(x.iter()) {
                    *o *= gelu_grad(xi);
                }
                vec![(p[0], dx)]
            }
            Op::Sigmoid => {
                let y = &node.value;
                vec![(p[0], g * &y.mapv(|v| v * (1.0 - v)))]
            }
            Op::Tanh => {
                let y = &node.value;
                vec![(p[0], g * &y.mapv(|v| 1.0 - v * v))]
            }
            Op::Exp => vec![(p[0], g * &node.value)],
            Op::Relu => {
                let x = pv(0);
                let mut dx = g.clone();
                for (o, &xi) in dx.iter_mut().zip(x.iter()) {
                    if xi <= 0.0 {
                        *o = 0.0;
                    }
                }
                vec![(p[0], dx)]
            }
            Op::Abs => {
                let x = pv(0);
                let mut dx = g.clone();
                for (o, &xi) in dx.iter_mut().zip(x.iter()) {
                    *o *= if xi > 0.0 {
                        1.0
                    } else if xi < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
                vec![(p[0], dx)]
            }
            Op::Square => {
                let x = pv(0);
                vec![(p[0], g * &x.mapv(|v| 2.0 * v))]
            }
            Op::Pow(e) => {
                let x = pv(0);
                let mut dx = g.clone();
                for (o, &xi) in dx.iter_mut().zip(x.iter()) {
                    *o *= e * xi.powf(e - 1.0);
                }
                vec![(p[0], dx)]
            }
            Op::SoftmaxLast => {
                let y = &node.value;
                let last = y.ndim() - 1;
                let mut dx = g.clone();
                for (mut glane, ylane) in dx.lanes_mut(Axis(last)).into_iter().zip(y.lanes(Axis(last))) {
                    let dot: f64 = glane.iter().zip(ylane.iter()).map(|(a, b)| a * b).sum();
                    for (o, &yv) in glane.iter_mut().zip(ylane.iter()) {
                        *o = yv * (*o - dot);
                    }
                }
                vec![(p[0], dx)]
            }
            Op::LogSoftmaxLast => {
                let y = &node.value;
                let last = y.ndim() - 1;
                let mut dx = g.clone();
                for (mut glane, ylane) in dx.lanes_mut(Axis(last)).into_iter().zip(y.lanes(Axis(last))) {
                    let gsum: f64 = glane.iter().sum();
                    for (o, &yv) in glane.iter_mut().zip(ylane.iter()) {
                        *o -= yv.exp() * gsum;
                    }
                }
                vec![(p[0], dx)]
            }
            Op::Clamp { lo, hi } => {
                let x = pv(0);
                let mut dx = g.clone();
                for (o, &xi) in dx.iter_mut().zip(x.iter()) {
                    if xi < *lo || xi > *hi {
                        *o = 0.0;
                    }
                }
                vec![(p[0], dx)]
            }
            Op::LayerNorm { eps } => {
                let x = pv(0);
                let y = &node.value;
                let (_, inv_std) = layernorm_stats(x, *eps);
                let last = x.ndim() - 1;
                let d = x.shape()[last] as f64;
                let mut dx = g.clone();
                for ((mut glane, ylane), &is) in dx
                    .lanes_mut(Axis(last))
                    .into_iter()
                    .zip(y.lanes(Axis(last)))
                    .zip(inv_std.iter())
                {
                    let gmean: f64 = glane.iter().sum::<f64>() / d;
                    let gydot: f64 =
                        glane.iter().zip(ylane.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
                    for (o, &yv) in glane.iter_mut().zip(ylane.iter()) {
                        *o = is * (*o - gmean - yv * gydot);
                    }
                }
                vec![(p[0], dx)]
            }
            Op::GroupNorm { groups, eps } => {
                let groups = *groups;
                let x = pv(0).view().into_dimensionality::<Ix3>().unwrap();
                let y = node.value.view().into_dimensionality::<Ix3>().unwrap();
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let (b, l, c) = x.dim();
                let cg = c / groups;
                let n = (l * cg) as f64;
                let mut dx = ArrayD::<f64>::zeros(IxDyn(&[b, l, c]));
                {
                    let mut dx3 = dx.view_mut().into_dimensionality::<Ix3>().unwrap();
                    for bi in 0..b {
                        for gi in 0..groups {
                            let c0 = gi * cg;
                            let xr = x.slice(ndarray::s![bi, .., c0..c0 + cg]);
                            let yr = y.slice(ndarray::s![bi, .., c0..c0 + cg]);
                            let gr = g3.slice(ndarray::s![bi, .., c0..c0 + cg]);
                            let mean = xr.sum() / n;
                            let mut var = 0.0;
                            for &e in xr.iter() {
                                let d = e - mean;
                                var += d * d;
                            }
                            var /= n;
                            let inv = 1.0 / (var + eps).sqrt();
                            let gmean = gr.sum() / n;
                            let gydot = gr
                                .iter()
                                .zip(yr.iter())
                                .map(|(a, b)| a * b)
                                .sum::<f64>()
                                / n;
                            let mut dr = dx3.slice_mut(ndarray::s![bi, .., c0..c0 + cg]);
                            for ((o, &gv), &yv) in dr.iter_mut().zip(gr.iter()).zip(yr.iter()) {
                                *o = inv * (gv - gmean - yv * gydot);
                            }
                        }
                    }
                }
                vec![(p[0], dx)]
            }
            Op::MeanAxis(ax) => {
                let x = pv(0);
                let len = x.shape()[*ax] as f64;
                let mut dx = ArrayD::<f64>::zeros(x.raw_dim());
                let scaled = g.mapv(|v| v / len);
                for mut sl in dx.axis_iter_mut(Axis(*ax)) {
                    sl += &scaled;
                }
                vec![(p[0], dx)]
            }
            Op::SumAxis(ax) => {
                let x = pv(0);
                let mut dx = ArrayD::<f64>::zeros(x.raw_dim());
                for mut sl in dx.axis_iter_mut(Axis(*ax)) {
                    sl += g;
                }
                vec![(p[0], dx)]
            }
            Op::MeanAll => {
                let x = pv(0);
                let gv = *g.iter().next().unwrap() / x.len() as f64;
                vec![(p[0], ArrayD::from_elem(x.raw_dim(), gv))]
            }
            Op::Reshape => {
                let x = pv(0);
                let dx = g.to_shape(x.raw_dim()).unwrap().to_owned();
                vec![(p[0], dx)]
            }
            Op::Concat { axis } => {
                let mut out = Vec::with_capacity(p.len());
                let mut start = 0usize;
                for pj in p.iter() {
                    let w = self.nodes[pj.0].value.shape()[*axis];
                    let dx = g
                        .slice_axis(Axis(*axis), Slice::from(start..start + w))
                        .to_owned();
                    out.push((*pj, dx));
                    start += w;
                }
                out
            }
            Op::SelectLast(i2) => {
                let x = pv(0);
                let last = x.ndim() - 1;
                let mut dx = ArrayD::<f64>::zeros(x.raw_dim());
                dx.index_axis_mut(Axis(last), *i2).assign(g);
                vec![(p[0], dx)]
            }
            Op::GatherCols(idx) => {
                let x = pv(0);
                let mut dx = ArrayD::<f64>::zeros(x.raw_dim());
                {
                    let mut dx2 = dx.view_mut().into_dimensionality::<Ix2>().unwrap();
                    for (bi, &c) in idx.iter().enumerate() {
                        dx2[[bi, c]] += g[bi];
                    }
                }
                vec![(p[0], dx)]
            }
            Op::EmbedRows(idx) => {
                let t = pv(0);
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dt = ArrayD::<f64>::zeros(t.raw_dim());
                {
                    let mut dt2 = dt.view_mut().into_dimensionality::<Ix2>().unwrap();
                    for (bi, &r) in idx.iter().enumerate() {
                        let mut row = dt2.row_mut(r);
                        row += &g2.row(bi);
                    }
                }
                vec![(p[0], dt)]
            }
            Op::Conv1d { k, pad, stride } => {
                let x = pv(0);
                let w = pv(1);
                let (b, l, c_in) = {
                    let s = x.shape();
                    (s[0], s[1], s[2])
                };
                let c_out = w.shape()[1];
                let (cols, l_out) = im2col(x, *k, *pad, *stride);
                let g2 = g.to_shape((b * l_out, c_out)).unwrap().to_owned();
                let w2 = w.view().into_dimensionality::<Ix2>().unwrap();
                let (dcols, dw) = if self.reduced_precision {
                    let g32 = g2.mapv(|v| v as f32);
                    let w32 = w2.mapv(|v| v as f32);
                    let c32 = cols.mapv(|v| v as f32);
                    (
                        g32.dot(&w32.t()).mapv(|v| v as f64),
                        c32.t().dot(&g32).mapv(|v| v as f64),
                    )
                } else {
                    (g2.dot(&w2.t()), cols.t().dot(&g2))
                };
                let dx = col2im(&dcols, b, l, c_in, *k, *pad, *stride);
                vec![(p[0], dx), (p[1], dw.into_dyn())]
            }
            Op::UpsampleNearest2 => {
                let x = pv(0);
                let (b, l, c) = {
                    let s = x.shape();
                    (s[0], s[1], s[2])
                };
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut dx = ArrayD::<f64>::zeros(IxDyn(&[b, l, c]));
                {
                    let mut dx3 = dx.view_mut().into_dimensionality::<Ix3>().unwrap();
                    for bi in 0..b {
                        for li in 0..l {
                            let a = g3.slice(ndarray::s![bi, 2 * li, ..]);
                            let bb = g3.slice(ndarray::s![bi, 2 * li + 1, ..]);
                            let mut d = dx3.slice_mut(ndarray::s![bi, li, ..]);
                            d.assign(&(&a + &bb));
                        }
                    }
                }
                vec![(p[0], dx)]
            }
            Op::PadTime { before, after: _ } => {
                let x = pv(0);
                let l = x.shape()[1];
                let dx = g
                    .slice_axis(Axis(1), Slice::from(*before..before + l))
                    .to_owned();
                vec![(p[0], dx)]
            }
            Op::CropTime { offset, len } => {
                let x = pv(0);
                let mut dx = ArrayD::<f64>::zeros(x.raw_dim());
                dx.slice_axis_mut(Axis(1), Slice::from(*offset..offset + len))
                    .assign(g);
                vec![(p[0], dx)]
            }
            Op::SplitHeads { heads } => {
                let x = pv(0);
                let (b, l, h) = {
                    let s = x.shape();
                    (s[0], s[1], s[2])
                };
                let dh = h / heads;
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut dx = ArrayD::<f64>::zeros(IxDyn(&[b, l, h]));
                {
                    let mut dx3 = dx.view_mut().into_dimensionality::<Ix3>().unwrap();
                    for bi in 0..b {
                        for hi in 0..*heads {
                            for li in 0..l {
                                let src = g3.slice(ndarray::s![bi * heads + hi, li, ..]);
                                dx3.slice_mut(ndarray::s![bi, li, hi * dh..(hi + 1) * dh])
                                    .assign(&src);
                            }
                        }
                    }
                }
                vec![(p[0], dx)]
            }
            Op::MergeHeads { heads } => {
                let x = pv(0);
                let (bh, l, dh) = {
                    let s = x.shape();
                    (s[0], s[1], s[2])
                };
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut dx = ArrayD::<f64>::zeros(IxDyn(&[bh, l, dh]));
                {
                    let mut dx3 = dx.view_mut().into_dimensionality::<Ix3>().unwrap();
                    let b = bh / heads;
                    for bi in 0..b {
                        for hi in 0..*heads {
                            for li in 0..l {
                                let src = g3.slice(ndarray::s![bi, li, hi * dh..(hi + 1) * dh]);
                                dx3.slice_mut(ndarray::s![bi * heads + hi, li, ..]).assign(&src);
                            }
                        }
                    }
                }
                vec![(p[0], dx)]
            }
            Op::MaskDiagLast2 => {
                let mut dx = g.clone();
                let nd = dx.ndim();
                let d = dx.shape()[nd - 1];
                let rows = dx.len() / (d * d);
                {
                    let mut flat = dx.view_mut().into_shape_with_order((rows, d, d)).unwrap();
                    for r in 0..rows {
                        for i2 in 0..d {
                            flat[[r, i2, i2]] = 0.0;
                        }
                    }
                }
                vec![(p[0], dx)]
            }
            Op::DiagSumLast2 => {
                let x = pv(0);
                let (b, d) = (x.shape()[0], x.shape()[1]);
                let mut dx = ArrayD::<f64>::zeros(x.raw_dim());
                {
                    let mut dx3 = dx.view_mut().into_dimensionality::<Ix3>().unwrap();
                    for bi in 0..b {
                        for i2 in 0..d {
                            dx3[[bi, i2, i2]] = g[bi];
                        }
                    }
                }
                vec![(p[0], dx)]
            }
        }
    }
}
