//! Concat+MLP fusion of the gated sequences and the variational bottleneck.

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamGroup, ParamStore};
use crate::rng::StreamRng;

use super::encoders::{Linear, LayerNorm, Projection};
use super::{FwdCtx, Mode};

/// Bottleneck hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    /// Latent width d_z.
    pub latent: usize,
    /// KL weight beta.
    pub beta: f64,
    /// Free-bits threshold in nats per latent dimension.
    pub free_bits: f64,
    /// Optional reconstruction decoder (off by default, weight 0).
    pub use_decoder: bool,
    pub recon_weight: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            latent: 128,
            beta: 0.1,
            free_bits: 0.25,
            use_decoder: false,
            recon_weight: 0.0,
        }
    }
}

pub const LOGVAR_LO: f64 = -10.0;
pub const LOGVAR_HI: f64 = 5.0;

/// Posterior parameter nodes.
pub struct LatentPosterior {
    pub mu: NodeId,
    /// Clamped to `[-10, 5]` exactly.
    pub logvar: NodeId,
}

/// Fusion MLP plus VAE projections (and the optional decoder).
#[derive(Debug, Clone)]
pub struct FusionVae {
    fuse1: Linear,
    fuse_ln: LayerNorm,
    fuse2: Linear,
    w_mu: Projection,
    w_sigma: Projection,
    /// Deterministic projection used by the "no VAE" ablation.
    w_det: Projection,
    decoder: Option<(Linear, Linear)>,
    pub hidden: usize,
    pub latent: usize,
}

impl FusionVae {
    pub fn build(
        ps: &mut ParamStore,
        name: &str,
        hidden: usize,
        cfg: &VaeConfig,
        rng: &mut StreamRng,
    ) -> Self {
        let group = ParamGroup::Backbone;
        let decoder = if cfg.use_decoder {
            Some((
                Linear::build(ps, &format!("{name}.dec1"), cfg.latent, hidden, group, rng),
                Linear::build(ps, &format!("{name}.dec2"), hidden, hidden, group, rng),
            ))
        } else {
            None
        };
        FusionVae {
            fuse1: Linear::build(ps, &format!("{name}.fuse1"), 3 * hidden, hidden, group, rng),
            fuse_ln: LayerNorm::build(ps, &format!("{name}.fuse_ln"), hidden, group),
            fuse2: Linear::build(ps, &format!("{name}.fuse2"), hidden, hidden, group, rng),
            w_mu: Projection::build(ps, &format!("{name}.w_mu"), hidden, cfg.latent, group, rng),
            w_sigma: Projection::build(ps, &format!("{name}.w_sigma"), hidden, cfg.latent, group, rng),
            w_det: Projection::build(ps, &format!("{name}.w_det"), hidden, cfg.latent, group, rng),
            decoder,
            hidden,
            latent: cfg.latent,
        }
    }

    /// Concatenate the gated sequences along features and project back to H:
    /// `[B, L, H] x3 -> [B, L, 3H] -> MLP -> [B, L, H]`.
    pub fn fuse(&self, g: &mut Graph, gated: [NodeId; 3]) -> NodeId {
        for n in gated {
            assert_eq!(
                g.value(n).shape()[2],
                self.hidden,
                "fusion inputs must be [B, L, H]"
            );
        }
        let cat = g.concat(&gated, 2);
        let x = self.fuse1.forward(g, cat);
        let x = self.fuse_ln.forward(g, x);
        let x = g.gelu(x);
        self.fuse2.forward(g, x)
    }

    /// VAE posterior parameters: `mu = W_mu F`, `logvar = clamp(W_sigma F)`.
    pub fn posterior(&self, g: &mut Graph, fused: NodeId) -> LatentPosterior {
        let mu = self.w_mu.forward(g, fused);
        let raw = self.w_sigma.forward(g, fused);
        let logvar = g.clamp(raw, LOGVAR_LO, LOGVAR_HI);
        LatentPosterior { mu, logvar }
    }

    /// Deterministic projection used by the "no VAE" ablation.
    pub fn deterministic_latent(&self, g: &mut Graph, fused: NodeId) -> NodeId {
        self.w_det.forward(g, fused)
    }

    /// Reconstruct the fused sequence from the latent (decoder flag only).
    pub fn reconstruct(&self, g: &mut Graph, z: NodeId) -> Option<NodeId> {
        let (d1, d2) = self.decoder.as_ref()?;
        let x = d1.forward(g, z);
        let x = g.gelu(x);
        Some(d2.forward(g, x))
    }
}

/// Reparameterization: `z = mu + eps * exp(logvar / 2)` in training;
/// the posterior mean exactly at evaluation time.
pub fn reparameterize(g: &mut Graph, post: &LatentPosterior, ctx: &mut FwdCtx) -> NodeId {
    if ctx.mode == Mode::Eval {
        return post.mu;
    }
    let shape = g.value(post.mu).shape().to_vec();
    let mut eps = ArrayD::<f64>::zeros(IxDyn(&shape));
    for v in eps.iter_mut() {
        *v = crate::rng::normal(&mut ctx.rng);
    }
    let eps = g.constant(eps);
    let half = g.scale(post.logvar, 0.5);
    let sigma = g.exp(half);
    let noise = g.mul(eps, sigma);
    g.add(post.mu, noise)
}

/// Beta-weighted free-bits KL to the standard normal prior:
/// per-dimension `KL_d = 0.5 (mu^2 + sigma^2 - 1 - logvar)`, hinged at the
/// free-bits threshold, summed over latent dimensions and averaged over
/// batch and timesteps.
pub fn kl_free_bits(g: &mut Graph, post: &LatentPosterior, beta: f64, free_bits: f64) -> NodeId {
    let mu2 = g.square(post.mu);
    let var = g.exp(post.logvar);
    let a = g.add(mu2, var);
    let b = g.sub(a, post.logvar);
    let kl2 = g.add_scalar(b, -1.0);
    let kl = g.scale(kl2, 0.5);
    let hinged = g.add_scalar(kl, -free_bits);
    let hinged = g.relu(hinged);
    let per_pos = g.sum_axis(hinged, 2);
    let mean = g.mean_all(per_pos);
    g.scale(mean, beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check_random_coords, max_rel_error};
    use crate::autodiff::ParamStore;
    use crate::rng::stream;
    use ndarray::Array3;

    fn ctx(mode: Mode) -> FwdCtx {
        FwdCtx::new(mode, stream(42, "fusion-test", &[]))
    }

    fn build(hidden: usize, latent: usize) -> (ParamStore, FusionVae) {
        let mut ps = ParamStore::new();
        let mut rng = stream(1, "fusion", &[]);
        let cfg = VaeConfig {
            latent,
            ..VaeConfig::default()
        };
        let fv = FusionVae::build(&mut ps, "fv", hidden, &cfg, &mut rng);
        (ps, fv)
    }

    #[test]
    fn fuse_shape_contract_and_batch_equivariance() {
        let (ps, fv) = build(6, 4);
        let mut g = Graph::new(&ps);
        let mk = |g: &mut Graph, seedmul: f64| {
            g.constant(
                Array3::from_shape_fn((2, 5, 6), |(b, l, d)| ((b * 30 + l * 6 + d) as f64 * seedmul).sin())
                    .into_dyn(),
            )
        };
        let a = mk(&mut g, 0.1);
        let b = mk(&mut g, 0.2);
        let c = mk(&mut g, 0.3);
        let f = fv.fuse(&mut g, [a, b, c]);
        assert_eq!(g.value(f).shape(), &[2, 5, 6]);

        // permuting batch entries permutes outputs identically
        let swap = |n: NodeId, g: &Graph| {
            let v = g.value(n);
            let mut s = v.clone();
            s.slice_mut(ndarray::s![0, .., ..]).assign(&v.slice(ndarray::s![1, .., ..]));
            s.slice_mut(ndarray::s![1, .., ..]).assign(&v.slice(ndarray::s![0, .., ..]));
            s
        };
        let (sa, sb, sc) = (swap(a, &g), swap(b, &g), swap(c, &g));
        let a2 = g.constant(sa);
        let b2 = g.constant(sb);
        let c2 = g.constant(sc);
        let f2 = fv.fuse(&mut g, [a2, b2, c2]);
        let fv1 = g.value(f);
        let fv2 = g.value(f2);
        for l in 0..5 {
            for d in 0..6 {
                assert_eq!(fv1[[0, l, d]].to_bits(), fv2[[1, l, d]].to_bits());
                assert_eq!(fv1[[1, l, d]].to_bits(), fv2[[0, l, d]].to_bits());
            }
        }
    }

    #[test]
    fn all_zero_inputs_give_timestep_constant_output() {
        let (ps, fv) = build(6, 4);
        let mut g = Graph::new(&ps);
        let z = g.constant(Array3::<f64>::zeros((1, 4, 6)).into_dyn());
        let f = fv.fuse(&mut g, [z, z, z]);
        let v = g.value(f);
        for l in 1..4 {
            for d in 0..6 {
                assert_eq!(v[[0, l, d]].to_bits(), v[[0, 0, d]].to_bits());
            }
        }
    }

    #[test]
    fn logvar_clamp_bounds_are_exact() {
        let (mut ps, fv) = build(4, 3);
        // Force the sigma projection to produce huge raw values.
        *ps.value_mut(fv.w_sigma.w) = ArrayD::from_elem(IxDyn(&[4, 3]), 100.0);
        let mut g = Graph::new(&ps);
        let f = g.constant(Array3::from_elem((1, 2, 4), 1.0).into_dyn());
        let post = fv.posterior(&mut g, f);
        assert!(g.value(post.logvar).iter().all(|&v| v == LOGVAR_HI));
        drop(g);
        *ps.value_mut(fv.w_sigma.w) = ArrayD::from_elem(IxDyn(&[4, 3]), -100.0);
        let mut g = Graph::new(&ps);
        let f = g.constant(Array3::from_elem((1, 2, 4), 1.0).into_dyn());
        let post = fv.posterior(&mut g, f);
        assert!(g.value(post.logvar).iter().all(|&v| v == LOGVAR_LO));
    }

    #[test]
    fn eval_mode_returns_posterior_mean_exactly() {
        let (ps, fv) = build(4, 3);
        let mut g = Graph::new(&ps);
        let f = g.constant(Array3::from_shape_fn((2, 3, 4), |(b, l, d)| (b + l + d) as f64 * 0.2).into_dyn());
        let post = fv.posterior(&mut g, f);
        let z = reparameterize(&mut g, &post, &mut ctx(Mode::Eval));
        assert_eq!(z, post.mu);
        for (a, b) in g.value(z).iter().zip(g.value(post.mu).iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn sampled_z_has_posterior_variance() {
        // Monte-Carlo: var(z - mu) ~ exp(logvar) within 3 sigma bounds.
        let ps = ParamStore::new();
        let logvar_val = -1.3f64;
        let n = 100_000usize;
        let mut g = Graph::new(&ps);
        let mu = g.constant(ArrayD::zeros(IxDyn(&[1, 1, n])));
        let raw = g.constant(ArrayD::from_elem(IxDyn(&[1, 1, n]), logvar_val));
        let logvar = g.clamp(raw, LOGVAR_LO, LOGVAR_HI);
        let post = LatentPosterior { mu, logvar };
        let mut c = ctx(Mode::Train);
        let z = reparameterize(&mut g, &post, &mut c);
        let zv = g.value(z);
        let var = zv.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let expect = logvar_val.exp();
        // var of the sample variance of a normal: 2 sigma^4 / n
        let sd = (2.0 * expect * expect / n as f64).sqrt();
        assert!(
            (var - expect).abs() < 3.0 * sd,
            "sample var {var} vs {expect} +- {}",
            3.0 * sd
        );
    }

    #[test]
    fn kl_zero_at_prior_and_closed_form_case() {
        let ps = ParamStore::new();
        let mut g = Graph::new(&ps);
        // mu = 0, logvar = 0 -> loss = 0 exactly
        let mu = g.constant(ArrayD::zeros(IxDyn(&[2, 3, 4])));
        let lv = g.constant(ArrayD::zeros(IxDyn(&[2, 3, 4])));
        let loss = kl_free_bits(&mut g, &LatentPosterior { mu, logvar: lv }, 0.1, 0.25);
        assert_eq!(g.scalar(loss), 0.0);

        // mu = 1, logvar = 0, d_z = 1: per-dim KL = 0.5, hinge 0.25, beta 0.1
        let mu = g.constant(ArrayD::ones(IxDyn(&[1, 1, 1])));
        let lv = g.constant(ArrayD::zeros(IxDyn(&[1, 1, 1])));
        let loss = kl_free_bits(&mut g, &LatentPosterior { mu, logvar: lv }, 0.1, 0.25);
        assert!((g.scalar(loss) - 0.025).abs() < 1e-9);
    }

    #[test]
    fn kl_free_floor_soaks_small_posteriors() {
        // any posterior with per-dim KL <= free bits everywhere -> loss 0
        let ps = ParamStore::new();
        let mut g = Graph::new(&ps);
        // mu small: KL = 0.5 mu^2 = 0.18 < 0.25
        let mu = g.constant(ArrayD::from_elem(IxDyn(&[2, 2, 3]), 0.6));
        let lv = g.constant(ArrayD::zeros(IxDyn(&[2, 2, 3])));
        let loss = kl_free_bits(&mut g, &LatentPosterior { mu, logvar: lv }, 0.1, 0.25);
        assert_eq!(g.scalar(loss), 0.0);
    }

    #[test]
    fn kl_nonnegative_property() {
        use rand::Rng;
        let ps = ParamStore::new();
        let mut rng = stream(9, "kl-prop", &[]);
        for _ in 0..50 {
            let mut g = Graph::new(&ps);
            let mu = g.constant(ArrayD::from_shape_fn(IxDyn(&[2, 3, 4]), |_| rng.gen_range(-3.0..3.0)));
            let lv = g.constant(ArrayD::from_shape_fn(IxDyn(&[2, 3, 4]), |_| rng.gen_range(-5.0..3.0)));
            let loss = kl_free_bits(&mut g, &LatentPosterior { mu, logvar: lv }, 0.1, 0.25);
            assert!(g.scalar(loss) >= 0.0);
        }
    }

    #[test]
    fn kl_gradient_zero_when_hinge_inactive_and_matches_fd_when_active() {
        // Inactive hinge: grad wrt mu is exactly zero.
        let mut ps = ParamStore::new();
        let mid = ps.add("mu", ArrayD::from_elem(IxDyn(&[1, 2, 2]), 0.1), ParamGroup::Backbone);
        let mut g = Graph::new(&ps);
        let mu = g.param(mid);
        let lv = g.constant(ArrayD::zeros(IxDyn(&[1, 2, 2])));
        let loss = kl_free_bits(&mut g, &LatentPosterior { mu, logvar: lv }, 0.1, 0.25);
        let grads = g.backward(loss);
        match grads.get(mid) {
            None => {}
            Some(gm) => assert!(gm.iter().all(|&v| v == 0.0)),
        }
        drop(g);

        // Active hinge: matches finite differences.
        *ps.value_mut(mid) = ArrayD::from_elem(IxDyn(&[1, 2, 2]), 1.5);
        let loss_fn = |store: &ParamStore| {
            let mut g = Graph::new(store);
            let mu = g.param(mid);
            let lv = g.constant(ArrayD::zeros(IxDyn(&[1, 2, 2])));
            let loss = kl_free_bits(&mut g, &LatentPosterior { mu, logvar: lv }, 0.1, 0.25);
            let grads = g.backward(loss);
            (g.scalar(loss), grads)
        };
        let mut pick = stream(10, "kl-pick", &[]);
        let checks = check_random_coords(&mut ps, &[mid], loss_fn, 8, 1e-6, &mut pick);
        assert!(max_rel_error(&checks, 1e-12) < 1e-6);
    }

    #[test]
    fn inference_is_deterministic_end_to_end() {
        let (ps, fv) = build(5, 4);
        let input = Array3::from_shape_fn((2, 3, 5), |(b, l, d)| ((b * 17 + l * 5 + d) as f64 * 0.11).cos());
        let run = || {
            let mut g = Graph::new(&ps);
            let f = g.constant(input.clone().into_dyn());
            let fused = fv.fuse(&mut g, [f, f, f]);
            let post = fv.posterior(&mut g, fused);
            let z = reparameterize(&mut g, &post, &mut ctx(Mode::Eval));
            g.value(z).clone()
        };
        let z1 = run();
        let z2 = run();
        for (a, b) in z1.iter().zip(z2.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn deterministic_latent_path_runs_without_posterior() {
        let (ps, fv) = build(5, 4);
        let mut g = Graph::new(&ps);
        let f = g.constant(Array3::from_elem((1, 3, 5), 0.4).into_dyn());
        let fused = fv.fuse(&mut g, [f, f, f]);
        let z = fv.deterministic_latent(&mut g, fused);
        assert_eq!(g.value(z).shape(), &[1, 3, 4]);
        assert!(g.value(z).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn decoder_round_trip_when_enabled() {
        let mut ps = ParamStore::new();
        let mut rng = stream(2, "fusion-dec", &[]);
        let cfg = VaeConfig {
            latent: 3,
            use_decoder: true,
            recon_weight: 1.0,
            ..VaeConfig::default()
        };
        let fv = FusionVae::build(&mut ps, "fv", 5, &cfg, &mut rng);
        let mut g = Graph::new(&ps);
        let z = g.constant(Array3::from_elem((1, 2, 3), 0.2).into_dyn());
        let rec = fv.reconstruct(&mut g, z).expect("decoder enabled");
        assert_eq!(g.value(rec).shape(), &[1, 2, 5]);
    }
}
