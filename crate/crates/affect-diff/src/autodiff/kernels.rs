//! Plain array math shared by the graph ops.
//!
//! Everything here is deterministic: fixed loop order, no threading, no
//! accumulation-order surprises.

use ndarray::{Array1, Array2, ArrayD, ArrayView2, Axis, Ix3, IxDyn};

/// `x @ w` for 2-D views.
pub fn matmul2(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    a.dot(&b)
}

/// Round every element through f32. Used by the reduced-precision path.
pub fn round_f32(a: &mut ArrayD<f64>) {
    a.mapv_inplace(|v| v as f32 as f64);
}

/// tanh-form GELU, smooth everywhere so analytic and numerical gradients agree.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax over the last axis, in place on a copy.
pub fn softmax_last(x: &ArrayD<f64>) -> ArrayD<f64> {
    let mut out = x.clone();
    let last = out.ndim() - 1;
    for mut row in out.lanes_mut(Axis(last)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// log-softmax over the last axis.
pub fn log_softmax_last(x: &ArrayD<f64>) -> ArrayD<f64> {
    let mut out = x.clone();
    let last = out.ndim() - 1;
    for mut row in out.lanes_mut(Axis(last)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter() {
            sum += (*v - m).exp();
        }
        let lse = m + sum.ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Layer-norm statistics over the last axis: returns (mean, inv_std) with
/// shapes equal to `x` minus its last axis.
pub fn layernorm_stats(x: &ArrayD<f64>, eps: f64) -> (ArrayD<f64>, ArrayD<f64>) {
    let last = x.ndim() - 1;
    let d = x.shape()[last] as f64;
    let mean = x.mean_axis(Axis(last)).unwrap();
    let mut var = ArrayD::zeros(mean.raw_dim());
    for (lane, v) in x.lanes(Axis(last)).into_iter().zip(var.iter_mut()) {
        let m = lane.sum() / d;
        let mut acc = 0.0;
        for &e in lane.iter() {
            let c = e - m;
            acc += c * c;
        }
        *v = acc / d;
    }
    let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
    (mean, inv_std)
}

/// im2col for 1-D convolution.
///
/// Input `[B, L, C_in]`, kernel size `k`, symmetric zero padding `pad`,
/// stride `s`. Output `[B * L_out, k * C_in]` with L_out = (L + 2*pad - k)/s + 1.
pub fn im2col(x: &ArrayD<f64>, k: usize, pad: usize, stride: usize) -> (Array2<f64>, usize) {
    let x = x.view().into_dimensionality::<Ix3>().expect("conv input must be 3-D");
    let (b, l, c) = x.dim();
    let l_out = (l + 2 * pad - k) / stride + 1;
    let mut cols = Array2::<f64>::zeros((b * l_out, k * c));
    for bi in 0..b {
        for t_out in 0..l_out {
            let row = bi * l_out + t_out;
            let start = (t_out * stride) as isize - pad as isize;
            for ki in 0..k {
                let t_in = start + ki as isize;
                if t_in < 0 || t_in >= l as isize {
                    continue;
                }
                let src = x.index_axis(Axis(0), bi);
                let src_row = src.index_axis(Axis(0), t_in as usize);
                let mut dst = cols.row_mut(row);
                let dst = &mut dst.as_slice_mut().unwrap()[ki * c..(ki + 1) * c];
                dst.copy_from_slice(src_row.as_slice().unwrap());
            }
        }
    }
    (cols, l_out)
}

/// Adjoint of [`im2col`]: scatter column gradients back onto input positions.
pub fn col2im(
    cols: &Array2<f64>,
    b: usize,
    l: usize,
    c: usize,
    k: usize,
    pad: usize,
    stride: usize,
) -> ArrayD<f64> {
    let l_out = (l + 2 * pad - k) / stride + 1;
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[b, l, c]));
    {
        let mut out3 = out.view_mut().into_dimensionality::<Ix3>().unwrap();
        for bi in 0..b {
            for t_out in 0..l_out {
                let row = cols.row(bi * l_out + t_out);
                let row = row.as_slice().unwrap();
                let start = (t_out * stride) as isize - pad as isize;
                for ki in 0..k {
                    let t_in = start + ki as isize;
                    if t_in < 0 || t_in >= l as isize {
                        continue;
                    }
                    let mut dst = out3.index_axis_mut(Axis(0), bi);
                    let mut dst_row = dst.index_axis_mut(Axis(0), t_in as usize);
                    let dst_slice = dst_row.as_slice_mut().unwrap();
                    for ci in 0..c {
                        dst_slice[ci] += row[ki * c + ci];
                    }
                }
            }
        }
    }
    out
}

/// Sum an array of gradients over all leading axes onto a 1-D bias of the
/// last-axis length.
pub fn sum_to_last_axis(g: &ArrayD<f64>) -> Array1<f64> {
    let last = g.ndim() - 1;
    let d = g.shape()[last];
    let mut out = Array1::<f64>::zeros(d);
    for lane in g.lanes(Axis(last)) {
        for (o, &v) in out.iter_mut().zip(lane.iter()) {
            *o += v;
        }
    }
    out
}

/// View a dynamic array as 2-D collapsing all leading axes.
pub fn as_2d(x: &ArrayD<f64>) -> Array2<f64> {
    let last = x.ndim() - 1;
    let d = x.shape()[last];
    let rows = x.len() / d;
    x.to_shape((rows, d)).unwrap().to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = array![[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]].into_dyn();
        let s = softmax_last(&x);
        for row in s.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        // softmax of zeros is uniform
        assert!((s[[1, 0]] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn gelu_grad_matches_fd() {
        for &x in &[-2.0, -0.5, 0.0, 0.3, 1.7] {
            let e = 1e-6;
            let fd = (gelu(x + e) - gelu(x - e)) / (2.0 * e);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn im2col_identity_kernel() {
        // k=1, pad=0, stride=1 is a flatten.
        let x = ArrayD::from_shape_vec(IxDyn(&[1, 3, 2]), vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let (cols, l_out) = im2col(&x, 1, 0, 1);
        assert_eq!(l_out, 3);
        assert_eq!(cols.shape(), &[3, 2]);
        assert_eq!(cols[[1, 1]], 4.0);
    }

    #[test]
    fn col2im_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random-ish data.
        let x = ArrayD::from_shape_vec(
            IxDyn(&[2, 5, 3]),
            (0..30).map(|i| (i as f64) * 0.1 - 1.0).collect(),
        )
        .unwrap();
        let (cols, l_out) = im2col(&x, 3, 1, 2);
        let y = Array2::from_shape_fn(cols.raw_dim(), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let lhs: f64 = (&cols * &y).sum();
        let back = col2im(&y, 2, 5, 3, 3, 1, 2);
        let rhs: f64 = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        assert_eq!(l_out, 3);
    }
}
