//! Unimodal sequence encoders: linear or convolutional front-end plus a
//! shared pre-norm transformer backbone. Every encoder maps `[B, L, D_m]`
//! to `[B, L, H]` without temporal downsampling.

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autodiff::params::{linear_init, ones, zeros};
use crate::autodiff::{Graph, NodeId, ParamGroup, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::rng::StreamRng;

use super::{FwdCtx, Mode};

/// Encoder hyperparameters shared by all three modalities.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Hidden width H.
    pub hidden: usize,
    /// Transformer depth.
    pub layers: usize,
    /// Attention heads.
    pub heads: usize,
    /// Convolution kernel for the audio front-end.
    pub audio_kernel: usize,
    /// Convolution kernel for the video front-end.
    pub video_kernel: usize,
    /// Dropout rate inside transformer blocks (train only).
    pub dropout: f64,
    /// Feed-forward expansion ratio.
    pub ff_mult: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hidden: 128,
            layers: 2,
            heads: 4,
            audio_kernel: 5,
            video_kernel: 3,
            dropout: 0.1,
            ff_mult: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if self.hidden % 2 != 0 {
            return Err(Error::Config("hidden width must be even for sinusoidal positions".into()));
        }
        for (name, k) in [("audio_kernel", self.audio_kernel), ("video_kernel", self.video_kernel)] {
            if k % 2 == 0 {
                return Err(Error::Config(format!("{name} must be odd, got {k}")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        if self.layers == 0 || self.ff_mult == 0 {
            return Err(Error::Config("layers and ff_mult must be positive".into()));
        }
        Ok(())
    }

    /// GroupNorm group count: 8 when the width allows, else 1.
    pub fn gn_groups(width: usize) -> usize {
        if width >= 32 && width % 8 == 0 {
            8
        } else {
            1
        }
    }
}

/// Sinusoidal positional encoding matrix `[L, H]`:
/// `PE[pos, 2i] = sin(pos / 10000^(2i/H))`, `PE[pos, 2i+1] = cos(same)`.
pub fn positional_encoding(l: usize, h: usize) -> Result<Array2<f64>> {
    if h % 2 != 0 {
        return Err(Error::Config(format!("positional encoding needs even H, got {h}")));
    }
    let mut pe = Array2::<f64>::zeros((l, h));
    for pos in 0..l {
        for i in 0..h / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / h as f64);
            pe[[pos, 2 * i]] = angle.sin();
            pe[[pos, 2 * i + 1]] = angle.cos();
        }
    }
    Ok(pe)
}

// ---- building blocks -------------------------------------------------------

/// Dense layer with bias, applied to the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn build(
        ps: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        group: ParamGroup,
        rng: &mut StreamRng,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), linear_init(rng, &[in_dim, out_dim], in_dim), group);
        let b = ps.add(format!("{name}.b"), zeros(&[out_dim]), group);
        Linear { w, b, in_dim, out_dim }
    }

    /// `[.., in] -> [.., out]`, flattening leading axes for the GEMM.
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let shape = g.value(x).shape().to_vec();
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let x2 = g.reshape(x, &[rows, self.in_dim]);
        let w = g.param(self.w);
        let y2 = g.matmul(x2, w);
        let b = g.param(self.b);
        let y2 = g.add_bias(y2, b);
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        g.reshape(y2, &out_shape)
    }
}

/// Bias-free dense layer (pure projection).
#[derive(Debug, Clone)]
pub struct Projection {
    pub w: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Projection {
    pub fn build(
        ps: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        group: ParamGroup,
        rng: &mut StreamRng,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), linear_init(rng, &[in_dim, out_dim], in_dim), group);
        Projection { w, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let shape = g.value(x).shape().to_vec();
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let x2 = g.reshape(x, &[rows, self.in_dim]);
        let w = g.param(self.w);
        let y2 = g.matmul(x2, w);
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        g.reshape(y2, &out_shape)
    }
}

/// Layer normalization with learned gain and offset.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn build(ps: &mut ParamStore, name: &str, dim: usize, group: ParamGroup) -> Self {
        LayerNorm {
            gain: ps.add(format!("{name}.gain"), ones(&[dim]), group),
            bias: ps.add(format!("{name}.bias"), zeros(&[dim]), group),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let n = g.layer_norm(x, LN_EPS);
        let gain = g.param(self.gain);
        let y = g.mul_bias(n, gain);
        let bias = g.param(self.bias);
        g.add_bias(y, bias)
    }
}

/// Inverted dropout driven by the forward context's stream. Identity at eval.
pub fn dropout(g: &mut Graph, x: NodeId, rate: f64, ctx: &mut FwdCtx) -> NodeId {
    if ctx.mode == Mode::Eval || rate == 0.0 {
        return x;
    }
    use rand::Rng;
    let shape = g.value(x).shape().to_vec();
    let keep = 1.0 - rate;
    let mut mask = ArrayD::<f64>::zeros(IxDyn(&shape));
    for v in mask.iter_mut() {
        *v = if ctx.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 };
    }
    let m = g.constant(mask);
    g.mul(x, m)
}

/// One pre-norm transformer block: self-attention and a GELU feed-forward,
/// each behind a residual connection.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    ln1: LayerNorm,
    ln2: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ff1: Linear,
    ff2: Linear,
    heads: usize,
    dropout: f64,
}

impl TransformerLayer {
    pub fn build(
        ps: &mut ParamStore,
        name: &str,
        cfg: &EncoderConfig,
        group: ParamGroup,
        rng: &mut StreamRng,
    ) -> Self {
        let h = cfg.hidden;
        TransformerLayer {
            ln1: LayerNorm::build(ps, &format!("{name}.ln1"), h, group),
            ln2: LayerNorm::build(ps, &format!("{name}.ln2"), h, group),
            wq: Linear::build(ps, &format!("{name}.attn.q"), h, h, group, rng),
            wk: Linear::build(ps, &format!("{name}.attn.k"), h, h, group, rng),
            wv: Linear::build(ps, &format!("{name}.attn.v"), h, h, group, rng),
            wo: Linear::build(ps, &format!("{name}.attn.o"), h, h, group, rng),
            ff1: Linear::build(ps, &format!("{name}.ff1"), h, cfg.ff_mult * h, group, rng),
            ff2: Linear::build(ps, &format!("{name}.ff2"), cfg.ff_mult * h, h, group, rng),
            heads: cfg.heads,
            dropout: cfg.dropout,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId, ctx: &mut FwdCtx) -> NodeId {
        let h = g.value(x).shape()[2];
        let dh = h / self.heads;

        let n1 = self.ln1.forward(g, x);
        let q = self.wq.forward(g, n1);
        let k = self.wk.forward(g, n1);
        let v = self.wv.forward(g, n1);
        let qh = g.split_heads(q, self.heads);
        let kh = g.split_heads(k, self.heads);
        let vh = g.split_heads(v, self.heads);
        let kt = g.transpose_last2(kh);
        let scores = g.bmm(qh, kt);
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax_last(scores);
        let ctx_h = g.bmm(attn, vh);
        let merged = g.merge_heads(ctx_h, self.heads);
        let out = self.wo.forward(g, merged);
        let out = dropout(g, out, self.dropout, ctx);
        let x = g.add(x, out);

        let n2 = self.ln2.forward(g, x);
        let f = self.ff1.forward(g, n2);
        let f = g.gelu(f);
        let f = self.ff2.forward(g, f);
        let f = dropout(g, f, self.dropout, ctx);
        g.add(x, f)
    }
}

/// Which front-end precedes the transformer backbone.
#[derive(Debug, Clone)]
enum FrontEnd {
    /// Dense projection (text).
    Linear(Linear),
    /// 1-D convolution + GroupNorm + GELU (audio, video).
    Conv {
        w: ParamId,
        b: ParamId,
        kernel: usize,
        groups: usize,
    },
}

/// One modality encoder.
#[derive(Debug, Clone)]
pub struct ModalityEncoder {
    front: FrontEnd,
    layers: Vec<TransformerLayer>,
    final_ln: LayerNorm,
    pe: Array2<f64>,
    pub hidden: usize,
    pub in_dim: usize,
}

impl ModalityEncoder {
    /// `kernel = None` selects the dense front-end.
    pub fn build(
        ps: &mut ParamStore,
        name: &str,
        in_dim: usize,
        seq_len: usize,
        kernel: Option<usize>,
        cfg: &EncoderConfig,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden;
        let group = ParamGroup::Backbone;
        let front = match kernel {
            None => FrontEnd::Linear(Linear::build(ps, &format!("{name}.proj"), in_dim, h, group, rng)),
            Some(k) => {
                let w = ps.add(
                    format!("{name}.conv.w"),
                    linear_init(rng, &[k * in_dim, h], k * in_dim),
                    group,
                );
                let b = ps.add(format!("{name}.conv.b"), zeros(&[h]), group);
                FrontEnd::Conv {
                    w,
                    b,
                    kernel: k,
                    groups: EncoderConfig::gn_groups(h),
                }
            }
        };
        let layers = (0..cfg.layers)
            .map(|i| TransformerLayer::build(ps, &format!("{name}.layer{i}"), cfg, group, rng))
            .collect();
        Ok(ModalityEncoder {
            front,
            layers,
            final_ln: LayerNorm::build(ps, &format!("{name}.ln_out"), h, group),
            pe: positional_encoding(seq_len, h)?,
            hidden: h,
            in_dim,
        })
    }

    /// `[B, L, D] -> [B, L, H]`.
    pub fn forward(&self, g: &mut Graph, x: NodeId, ctx: &mut FwdCtx) -> NodeId {
        let shape = g.value(x).shape().to_vec();
        assert_eq!(shape.len(), 3, "encoder input must be [B, L, D]");
        assert_eq!(shape[2], self.in_dim, "encoder fed {} features, built for {}", shape[2], self.in_dim);
        let (b, l) = (shape[0], shape[1]);
        let mut h = match &self.front {
            FrontEnd::Linear(lin) => lin.forward(g, x),
            FrontEnd::Conv { w, b: bias, kernel, groups } => {
                let wn = g.param(*w);
                let y = g.conv1d(x, wn, *kernel, (kernel - 1) / 2, 1);
                let bn = g.param(*bias);
                let y = g.add_bias(y, bn);
                let y = g.group_norm(y, *groups, LN_EPS);
                g.gelu(y)
            }
        };
        // Positional encoding, broadcast over the batch.
        let mut pe = ArrayD::<f64>::zeros(IxDyn(&[b, l, self.hidden]));
        for bi in 0..b {
            pe.slice_mut(ndarray::s![bi, .., ..]).assign(&self.pe.slice(ndarray::s![..l, ..]));
        }
        let pe = g.constant(pe);
        h = g.add(h, pe);
        for layer in &self.layers {
            h = layer.forward(g, h, ctx);
        }
        self.final_ln.forward(g, h)
    }
}

/// Closed-form count of the dense parameters inside one transformer layer
/// (attention projections plus feed-forward, weights and biases).
pub fn transformer_layer_linear_params(h: usize, ff_mult: usize) -> usize {
    let attn = 4 * (h * h + h);
    let ff = h * (ff_mult * h) + ff_mult * h + (ff_mult * h) * h + h;
    attn + ff
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check_random_coords, max_rel_error};
    use crate::rng::stream;
    use ndarray::Array3;

    fn ctx(mode: Mode) -> FwdCtx {
        FwdCtx::new(mode, stream(77, "test-fwd", &[]))
    }

    #[test]
    fn positional_encoding_reference_values() {
        let pe = positional_encoding(4, 6).unwrap();
        assert_eq!(pe[[0, 0]], 0.0); // sin 0
        assert_eq!(pe[[0, 1]], 1.0); // cos 0
        assert!((pe[[1, 0]] - 1f64.sin()).abs() < 1e-12); // sin(1) ~ 0.841471
        assert!((pe[[1, 0]] - 0.841471).abs() < 1e-6);
        // second frequency pair at pos 1: angle = 1/10000^(2/6)
        let angle = 1.0 / 10000f64.powf(2.0 / 6.0);
        assert!((pe[[1, 2]] - angle.sin()).abs() < 1e-12);
        assert!((pe[[1, 3]] - angle.cos()).abs() < 1e-12);
    }

    #[test]
    fn positional_encoding_rejects_odd_width() {
        assert!(positional_encoding(4, 5).is_err());
    }

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            hidden: 8,
            layers: 1,
            heads: 2,
            dropout: 0.0,
            ff_mult: 2,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn output_shape_contract() {
        let mut ps = ParamStore::new();
        let mut rng = stream(1, "enc", &[]);
        let enc = ModalityEncoder::build(&mut ps, "enc.text", 12, 6, None, &tiny_cfg(), &mut rng).unwrap();
        let mut g = Graph::new(&ps);
        let x = g.constant(Array3::<f64>::from_elem((2, 6, 12), 0.3).into_dyn());
        let y = enc.forward(&mut g, x, &mut ctx(Mode::Eval));
        assert_eq!(g.value(y).shape(), &[2, 6, 8]);
    }

    #[test]
    fn conv_front_end_keeps_length_and_finiteness() {
        let mut ps = ParamStore::new();
        let mut rng = stream(2, "enc", &[]);
        for kernel in [3usize, 5] {
            let enc =
                ModalityEncoder::build(&mut ps, &format!("enc.k{kernel}"), 7, 9, Some(kernel), &tiny_cfg(), &mut rng)
                    .unwrap();
            let mut g = Graph::new(&ps);
            // all-zero input stays finite
            let x = g.constant(Array3::<f64>::zeros((2, 9, 7)).into_dyn());
            let y = enc.forward(&mut g, x, &mut ctx(Mode::Eval));
            assert_eq!(g.value(y).shape(), &[2, 9, 8]);
            assert!(g.value(y).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn batch_entries_are_independent_and_eval_is_deterministic() {
        let mut ps = ParamStore::new();
        let mut rng = stream(3, "enc", &[]);
        let enc = ModalityEncoder::build(&mut ps, "enc.t", 5, 4, None, &tiny_cfg(), &mut rng).unwrap();
        let row = Array3::from_shape_fn((1, 4, 5), |(_, l, d)| (l * 5 + d) as f64 * 0.1 - 0.7);
        let mut two = Array3::<f64>::zeros((2, 4, 5));
        two.slice_mut(ndarray::s![0, .., ..]).assign(&row.slice(ndarray::s![0, .., ..]));
        two.slice_mut(ndarray::s![1, .., ..]).assign(&row.slice(ndarray::s![0, .., ..]));

        let mut g = Graph::new(&ps);
        let x = g.constant(two.into_dyn());
        let y = enc.forward(&mut g, x, &mut ctx(Mode::Eval));
        let yv = g.value(y);
        for l in 0..4 {
            for d in 0..8 {
                assert_eq!(yv[[0, l, d]].to_bits(), yv[[1, l, d]].to_bits());
            }
        }

        // run twice: bit-identical in eval mode
        let mut g2 = Graph::new(&ps);
        let row2 = g2.constant(row.clone().into_dyn());
        let y2 = enc.forward(&mut g2, row2, &mut ctx(Mode::Eval));
        let mut g3 = Graph::new(&ps);
        let row3 = g3.constant(row.into_dyn());
        let y3 = enc.forward(&mut g3, row3, &mut ctx(Mode::Eval));
        for (a, b) in g2.value(y2).iter().zip(g3.value(y3).iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        // Scalar probe of the encoder output on a tiny config (H=8, L=6, depth 1).
        let mut ps = ParamStore::new();
        let mut rng = stream(4, "enc-grad", &[]);
        let enc = ModalityEncoder::build(&mut ps, "enc", 5, 6, Some(3), &tiny_cfg(), &mut rng).unwrap();
        let input = Array3::from_shape_fn((2, 6, 5), |(b, l, d)| ((b + l + d) as f64 * 0.37).sin());
        // Random-projection probe: a plain mean of squares is nearly
        // invariant after the final LayerNorm and its gradients vanish.
        let probe = Array3::from_shape_fn((2, 6, 8), |(b, l, d)| ((b * 48 + l * 8 + d) as f64 * 0.61).cos());
        let ids: Vec<_> = ps.ids().collect();
        let loss = |store: &ParamStore| {
            let mut g = Graph::new(store);
            let x = g.constant(input.clone().into_dyn());
            let y = enc.forward(&mut g, x, &mut ctx(Mode::Eval));
            let r = g.constant(probe.clone().into_dyn());
            let yr = g.mul(y, r);
            let act = g.gelu(yr);
            let m = g.mean_all(act);
            let grads = g.backward(m);
            (g.scalar(m), grads)
        };
        let mut pick = stream(5, "enc-grad-pick", &[]);
        let checks = check_random_coords(&mut ps, &ids, loss, 60, 1e-6, &mut pick);
        let worst = max_rel_error(&checks, 1e-8);
        assert!(worst < 1e-4, "worst rel err {worst}");
    }

    #[test]
    fn layer_param_count_formula_matches_store() {
        let cfg = tiny_cfg();
        let mut ps = ParamStore::new();
        let mut rng = stream(6, "count", &[]);
        let before = ps.num_scalars();
        let _layer = TransformerLayer::build(&mut ps, "l", &cfg, ParamGroup::Backbone, &mut rng);
        let dense = transformer_layer_linear_params(cfg.hidden, cfg.ff_mult);
        let norms = 2 * (2 * cfg.hidden);
        assert_eq!(ps.num_scalars() - before, dense + norms);
    }
}
