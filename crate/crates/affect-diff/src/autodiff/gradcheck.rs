//! Central finite-difference checking of analytic gradients.
//!
//! The checker treats the loss as a black-box function of the parameter
//! store: it perturbs one scalar coordinate at a time and compares the
//! central difference against the gradient reported by `backward`.

use ndarray::ArrayD;

use super::{Gradients, ParamId, ParamStore};

/// Relative error between an analytic and a numerical derivative.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Result of one checked coordinate.
#[derive(Debug, Clone)]
pub struct CoordCheck {
    pub param: String,
    pub flat_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Check `count` randomly chosen parameter coordinates of `loss` against
/// central finite differences with step `eps`.
///
/// `loss` must be a deterministic function of the store (fix every random
/// draw before calling). `pick` supplies the random coordinate choices so
/// callers control the stream.
pub fn check_random_coords<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    mut loss: F,
    count: usize,
    eps: f64,
    rng: &mut crate::rng::StreamRng,
) -> Vec<CoordCheck>
where
    F: FnMut(&ParamStore) -> (f64, Gradients),
{
    use rand::Rng;
    let (_, grads) = loss(store);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let pid = ids[rng.gen_range(0..ids.len())];
        let n = store.value(pid).len();
        let idx = rng.gen_range(0..n);
        let analytic = grads
            .get(pid)
            .map(|g| g.as_slice().unwrap()[idx])
            .unwrap_or(0.0);

        let orig = store.value(pid).as_slice().unwrap()[idx];
        set_flat(store.value_mut(pid), idx, orig + eps);
        let (f_plus, _) = loss(store);
        set_flat(store.value_mut(pid), idx, orig - eps);
        let (f_minus, _) = loss(store);
        set_flat(store.value_mut(pid), idx, orig);

        let numeric = (f_plus - f_minus) / (2.0 * eps);
        out.push(CoordCheck {
            param: store.name(pid).to_string(),
            flat_index: idx,
            analytic,
            numeric,
            rel_error: rel_error(analytic, numeric),
        });
    }
    out
}

fn set_flat(a: &mut ArrayD<f64>, idx: usize, v: f64) {
    a.as_slice_mut().unwrap()[idx] = v;
}

/// Check an explicit list of coordinates. Callers typically pre-select
/// coordinates whose analytic gradient is large enough that finite
/// differences are informative (central differences on nearly-zero
/// derivatives measure rounding noise, not correctness).
pub fn check_given_coords<F>(
    store: &mut ParamStore,
    coords: &[(ParamId, usize)],
    mut loss: F,
    eps: f64,
) -> Vec<CoordCheck>
where
    F: FnMut(&ParamStore) -> (f64, Gradients),
{
    let (_, grads) = loss(store);
    let mut out = Vec::with_capacity(coords.len());
    for &(pid, idx) in coords {
        let analytic = grads
            .get(pid)
            .map(|g| g.as_slice().unwrap()[idx])
            .unwrap_or(0.0);
        let orig = store.value(pid).as_slice().unwrap()[idx];
        set_flat(store.value_mut(pid), idx, orig + eps);
        let (f_plus, _) = loss(store);
        set_flat(store.value_mut(pid), idx, orig - eps);
        let (f_minus, _) = loss(store);
        set_flat(store.value_mut(pid), idx, orig);
        let numeric = (f_plus - f_minus) / (2.0 * eps);
        out.push(CoordCheck {
            param: store.name(pid).to_string(),
            flat_index: idx,
            analytic,
            numeric,
            rel_error: rel_error(analytic, numeric),
        });
    }
    out
}

/// Pick `count` coordinates whose analytic gradient magnitude is at least
/// `frac` of the largest one (relaxing the threshold if too few qualify).
pub fn informative_coords(
    store: &ParamStore,
    ids: &[ParamId],
    grads: &Gradients,
    count: usize,
    frac: f64,
    rng: &mut crate::rng::StreamRng,
) -> Vec<(ParamId, usize)> {
    use rand::seq::SliceRandom;
    let mut max_abs = 0.0f64;
    for &id in ids {
        if let Some(g) = grads.get(id) {
            for &v in g.iter() {
                max_abs = max_abs.max(v.abs());
            }
        }
    }
    let mut threshold = frac * max_abs;
    loop {
        let mut candidates: Vec<(ParamId, usize)> = Vec::new();
        for &id in ids {
            if let Some(g) = grads.get(id) {
                for (i, &v) in g.as_slice().unwrap().iter().enumerate() {
                    if v.abs() >= threshold {
                        candidates.push((id, i));
                    }
                }
            }
        }
        if candidates.len() >= count || threshold < 1e-300 {
            candidates.shuffle(rng);
            candidates.truncate(count);
            return candidates;
        }
        threshold /= 10.0;
    }
}

/// Worst relative error in a batch of coordinate checks, treating pairs
/// where both sides are tiny as exact.
pub fn max_rel_error(checks: &[CoordCheck], absolute_floor: f64) -> f64 {
    checks
        .iter()
        .map(|c| {
            if c.analytic.abs() < absolute_floor && c.numeric.abs() < absolute_floor {
                0.0
            } else {
                c.rel_error
            }
        })
        .fold(0.0, f64::max)
}
