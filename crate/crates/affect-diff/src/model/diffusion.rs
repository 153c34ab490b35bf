//! Conditional denoising diffusion prior over the latent sequence: cosine
//! schedule, triply-conditioned 1-D U-Net noise predictor, deterministic
//! DDIM sampling with classifier-free guidance, and an EMA shadow of the
//! denoiser weights.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::params::{linear_init, ones, zeros};
use crate::autodiff::{Graph, NodeId, ParamGroup, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::rng::StreamRng;

use super::encoders::{EncoderConfig, Linear};
use super::FwdCtx;

/// Diffusion hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    /// Forward-process steps T.
    pub steps: usize,
    /// U-Net base channel count; multipliers are (1, 2, 4).
    pub base: usize,
    /// DDIM sampling steps.
    pub ddim_steps: usize,
    /// Classifier-free guidance scale s.
    pub cfg_scale: f64,
    /// Probability of replacing the label with the null token in training.
    pub null_drop: f64,
    /// EMA decay for the shadow copy of denoiser weights.
    pub ema_decay: f64,
    /// Write a DDIM sample dump at the end of training.
    pub dump_samples: bool,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            steps: 1000,
            base: 128,
            ddim_steps: 50,
            cfg_scale: 3.0,
            null_drop: 0.2,
            ema_decay: 0.999,
            dump_samples: false,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::Config("diffusion steps must be >= 2".into()));
        }
        if self.ddim_steps == 0 || self.ddim_steps > self.steps {
            return Err(Error::Config("ddim_steps must be in [1, steps]".into()));
        }
        if !(0.0..=1.0).contains(&self.null_drop) {
            return Err(Error::Config("null_drop must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must be in [0, 1]".into()));
        }
        if self.base == 0 || self.base % 2 != 0 {
            return Err(Error::Config("U-Net base width must be positive and even".into()));
        }
        Ok(())
    }
}

// ---- schedule ---------------------------------------------------------------

const COSINE_S: f64 = 0.008;
const BETA_MAX: f64 = 0.999;

/// Precomputed cumulative noise coefficients for `t = 0..=T`.
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    pub steps: usize,
    /// `alpha_bar[t]`, length T+1, strictly decreasing, `alpha_bar[0] = 1`.
    pub alpha_bar: Vec<f64>,
    /// Per-step betas, length T+1 with `betas[0] = 0` unused.
    pub betas: Vec<f64>,
}

/// Cosine schedule: `alpha_bar(t) = f(t)/f(0)` with
/// `f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2)`, s = 0.008, and per-step betas
/// clipped at 0.999 before the cumulative product is rebuilt.
pub fn build_schedule(steps: usize) -> Result<DiffusionSchedule> {
    if steps < 2 {
        return Err(Error::Config("schedule needs T >= 2".into()));
    }
    let f = |t: f64| {
        let x = ((t / steps as f64 + COSINE_S) / (1.0 + COSINE_S)) * std::f64::consts::FRAC_PI_2;
        x.cos().powi(2)
    };
    let f0 = f(0.0);
    let mut alpha_bar = vec![1.0f64; steps + 1];
    let mut betas = vec![0.0f64; steps + 1];
    let mut raw_prev = 1.0f64;
    for t in 1..=steps {
        let raw = f(t as f64) / f0;
        let beta = (1.0 - raw / raw_prev).min(BETA_MAX);
        betas[t] = beta;
        alpha_bar[t] = alpha_bar[t - 1] * (1.0 - beta);
        raw_prev = raw;
    }
    Ok(DiffusionSchedule {
        steps,
        alpha_bar,
        betas,
    })
}

impl DiffusionSchedule {
    /// `z_t = sqrt(alpha_bar_t) z_0 + sqrt(1 - alpha_bar_t) eps` with a
    /// per-sample timestep vector.
    pub fn q_sample(&self, g: &mut Graph, z0: NodeId, t: &[usize], eps: NodeId) -> NodeId {
        let b = g.value(z0).shape()[0];
        assert_eq!(b, t.len(), "timestep vector length");
        for &ti in t {
            assert!(ti >= 1 && ti <= self.steps, "timestep {ti} out of [1, {}]", self.steps);
        }
        let signal: Vec<f64> = t.iter().map(|&ti| self.alpha_bar[ti].sqrt()).collect();
        let noise: Vec<f64> = t.iter().map(|&ti| (1.0 - self.alpha_bar[ti]).sqrt()).collect();
        let sn = g.constant(ArrayD::from_shape_vec(IxDyn(&[b]), signal).unwrap());
        let nn = g.constant(ArrayD::from_shape_vec(IxDyn(&[b]), noise).unwrap());
        let a = g.mul_batch_scalar(z0, sn);
        let e = g.mul_batch_scalar(eps, nn);
        g.add(a, e)
    }

    /// DDIM timestep ladder: `round(T*k/steps)` for k = steps..1, deduplicated,
    /// descending, then a final hop to 0.
    pub fn ddim_timesteps(&self, ddim_steps: usize) -> Vec<usize> {
        let mut ts: Vec<usize> = (1..=ddim_steps)
            .rev()
            .map(|k| ((self.steps * k) as f64 / ddim_steps as f64).round() as usize)
            .filter(|&t| t >= 1)
            .collect();
        ts.dedup();
        ts
    }
}

// ---- conditioning ------------------------------------------------------------

/// Sinusoidal embedding of integer timesteps into `dim` channels.
pub fn timestep_embedding(t: &[usize], dim: usize) -> Array2<f64> {
    let half = dim / 2;
    let mut out = Array2::<f64>::zeros((t.len(), dim));
    for (row, &ti) in t.iter().enumerate() {
        for i in 0..half {
            let denom = if half > 1 { (half - 1) as f64 } else { 1.0 };
            let freq = (-(10000f64.ln()) * i as f64 / denom).exp();
            let angle = ti as f64 * freq;
            out[[row, 2 * i]] = angle.sin();
            out[[row, 2 * i + 1]] = angle.cos();
        }
    }
    out
}

/// The three conditioning branches, combined by exact summation:
/// `c = MLP_t(t) + Emb_y(y) + MLP_w(w)`.
#[derive(Debug, Clone)]
pub struct Conditioning {
    t1: Linear,
    t2: Linear,
    /// `[C+1, cond]`; the last row is the null token.
    pub label_table: ParamId,
    w1: Linear,
    w2: Linear,
    pub cond_dim: usize,
    pub classes: usize,
}

impl Conditioning {
    pub fn build(ps: &mut ParamStore, name: &str, cond_dim: usize, classes: usize, rng: &mut StreamRng) -> Self {
        let group = ParamGroup::Diffusion;
        Conditioning {
            t1: Linear::build(ps, &format!("{name}.t1"), cond_dim, cond_dim, group, rng),
            t2: Linear::build(ps, &format!("{name}.t2"), cond_dim, cond_dim, group, rng),
            label_table: ps.add(
                format!("{name}.label_emb"),
                crate::autodiff::params::normal_init(rng, &[classes + 1, cond_dim], 0.02),
                group,
            ),
            w1: Linear::build(ps, &format!("{name}.w1"), super::graph::GRAPH_NODES, cond_dim, group, rng),
            w2: Linear::build(ps, &format!("{name}.w2"), cond_dim, cond_dim, group, rng),
            cond_dim,
            classes,
        }
    }

    pub fn null_token(&self) -> usize {
        self.classes
    }

    pub fn time_branch(&self, g: &mut Graph, t: &[usize]) -> NodeId {
        let emb = g.constant(timestep_embedding(t, self.cond_dim).into_dyn());
        let x = self.t1.forward(g, emb);
        let x = g.gelu(x);
        self.t2.forward(g, x)
    }

    pub fn label_branch(&self, g: &mut Graph, tokens: &[usize]) -> NodeId {
        let table = g.param(self.label_table);
        g.embed_rows(table, tokens)
    }

    pub fn weight_branch(&self, g: &mut Graph, w: NodeId) -> NodeId {
        let x = self.w1.forward(g, w);
        let x = g.gelu(x);
        self.w2.forward(g, x)
    }

    /// `[B, cond]` summed conditioning vector.
    pub fn forward(&self, g: &mut Graph, t: &[usize], tokens: &[usize], w: NodeId) -> NodeId {
        let a = self.time_branch(g, t);
        let b = self.label_branch(g, tokens);
        let c = self.weight_branch(g, w);
        let ab = g.add(a, b);
        g.add(ab, c)
    }
}

// ---- U-Net -------------------------------------------------------------------

#[derive(Debug, Clone)]
struct Conv {
    w: ParamId,
    b: ParamId,
    k: usize,
    stride: usize,
}

impl Conv {
    fn build(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize, rng: &mut StreamRng) -> Self {
        Conv {
            w: ps.add(format!("{name}.w"), linear_init(rng, &[k * cin, cout], k * cin), ParamGroup::Diffusion),
            b: ps.add(format!("{name}.b"), zeros(&[cout]), ParamGroup::Diffusion),
            k,
            stride,
        }
    }

    fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let w = g.param(self.w);
        let y = g.conv1d(x, w, self.k, (self.k - 1) / 2, self.stride);
        let b = g.param(self.b);
        g.add_bias(y, b)
    }
}

#[derive(Debug, Clone)]
struct GroupNorm {
    gain: ParamId,
    bias: ParamId,
    groups: usize,
}

impl GroupNorm {
    fn build(ps: &mut ParamStore, name: &str, ch: usize) -> Self {
        GroupNorm {
            gain: ps.add(format!("{name}.gain"), ones(&[ch]), ParamGroup::Diffusion),
            bias: ps.add(format!("{name}.bias"), zeros(&[ch]), ParamGroup::Diffusion),
            groups: EncoderConfig::gn_groups(ch),
        }
    }

    fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let n = g.group_norm(x, self.groups, 1e-5);
        let gain = g.param(self.gain);
        let y = g.mul_bias(n, gain);
        let bias = g.param(self.bias);
        g.add_bias(y, bias)
    }
}

/// Residual block with feature-wise conditioning injected between the convs.
#[derive(Debug, Clone)]
struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv,
    cond: Linear,
    gn2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    fn build(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, cond_dim: usize, rng: &mut StreamRng) -> Self {
        ResBlock {
            gn1: GroupNorm::build(ps, &format!("{name}.gn1"), cin),
            conv1: Conv::build(ps, &format!("{name}.conv1"), cin, cout, 3, 1, rng),
            cond: Linear::build(ps, &format!("{name}.cond"), cond_dim, cout, ParamGroup::Diffusion, rng),
            gn2: GroupNorm::build(ps, &format!("{name}.gn2"), cout),
            conv2: Conv::build(ps, &format!("{name}.conv2"), cout, cout, 3, 1, rng),
            skip: if cin == cout {
                None
            } else {
                Some(Conv::build(ps, &format!("{name}.skip"), cin, cout, 1, 1, rng))
            },
        }
    }

    fn forward(&self, g: &mut Graph, x: NodeId, c: NodeId) -> NodeId {
        let h = self.gn1.forward(g, x);
        let h = g.gelu(h);
        let h = self.conv1.forward(g, h);
        let cproj = self.cond.forward(g, c);
        let h = g.add_per_sample(h, cproj);
        let h = self.gn2.forward(g, h);
        let h = g.gelu(h);
        let h = self.conv2.forward(g, h);
        let res = match &self.skip {
            None => x,
            Some(conv) => conv.forward(g, x),
        };
        g.add(h, res)
    }
}

/// Three-resolution encoder-bottleneck-decoder over `[B, L, d_z]` with skip
/// connections merged by addition after channel-matching projections.
#[derive(Debug, Clone)]
pub struct UNet1d {
    in_conv: Conv,
    enc0: ResBlock,
    down0: Conv,
    enc1: ResBlock,
    down1: Conv,
    mid: ResBlock,
    up1_conv: Conv,
    up1: ResBlock,
    up0_conv: Conv,
    up0: ResBlock,
    out_gn: GroupNorm,
    out_conv: Conv,
    pub latent: usize,
    pub base: usize,
}

impl UNet1d {
    pub fn build(ps: &mut ParamStore, name: &str, latent: usize, base: usize, cond_dim: usize, rng: &mut StreamRng) -> Self {
        let b = base;
        UNet1d {
            in_conv: Conv::build(ps, &format!("{name}.in"), latent, b, 3, 1, rng),
            enc0: ResBlock::build(ps, &format!("{name}.enc0"), b, b, cond_dim, rng),
            down0: Conv::build(ps, &format!("{name}.down0"), b, 2 * b, 3, 2, rng),
            enc1: ResBlock::build(ps, &format!("{name}.enc1"), 2 * b, 2 * b, cond_dim, rng),
            down1: Conv::build(ps, &format!("{name}.down1"), 2 * b, 4 * b, 3, 2, rng),
            mid: ResBlock::build(ps, &format!("{name}.mid"), 4 * b, 4 * b, cond_dim, rng),
            up1_conv: Conv::build(ps, &format!("{name}.up1c"), 4 * b, 2 * b, 3, 1, rng),
            up1: ResBlock::build(ps, &format!("{name}.up1"), 2 * b, 2 * b, cond_dim, rng),
            up0_conv: Conv::build(ps, &format!("{name}.up0c"), 2 * b, b, 3, 1, rng),
            up0: ResBlock::build(ps, &format!("{name}.up0"), b, b, cond_dim, rng),
            out_gn: GroupNorm::build(ps, &format!("{name}.out_gn"), b),
            out_conv: Conv::build(ps, &format!("{name}.out"), b, latent, 3, 1, rng),
            latent,
            base,
        }
    }

    /// Noise prediction `[B, L, d_z] -> [B, L, d_z]`. Lengths not divisible
    /// by 4 are zero-padded on the right internally and cropped on output.
    pub fn forward(&self, g: &mut Graph, z_t: NodeId, c: NodeId) -> NodeId {
        let shape = g.value(z_t).shape().to_vec();
        let l = shape[1];
        let pad = (4 - l % 4) % 4;
        let x = if pad > 0 { g.pad_time(z_t, 0, pad) } else { z_t };

        let x = self.in_conv.forward(g, x);
        let e0 = self.enc0.forward(g, x, c);
        let d0 = self.down0.forward(g, e0);
        let e1 = self.enc1.forward(g, d0, c);
        let d1 = self.down1.forward(g, e1);
        let m = self.mid.forward(g, d1, c);

        let u = g.upsample2(m);
        let u = self.up1_conv.forward(g, u);
        let u = g.add(u, e1);
        let u = self.up1.forward(g, u, c);

        let u = g.upsample2(u);
        let u = self.up0_conv.forward(g, u);
        let u = g.add(u, e0);
        let u = self.up0.forward(g, u, c);

        let o = self.out_gn.forward(g, u);
        let o = g.gelu(o);
        let o = self.out_conv.forward(g, o);
        if pad > 0 {
            g.crop_time(o, 0, l)
        } else {
            o
        }
    }
}

// ---- the prior ---------------------------------------------------------------

/// Denoiser + conditioning + schedule.
#[derive(Debug, Clone)]
pub struct DiffusionPrior {
    pub cond: Conditioning,
    pub unet: UNet1d,
    pub schedule: DiffusionSchedule,
    pub cfg: DiffusionConfig,
}

/// Draws consumed by one diffusion-loss evaluation, produced up front so the
/// loss is a deterministic function of them.
#[derive(Debug, Clone)]
pub struct DiffusionDraws {
    pub t: Vec<usize>,
    pub tokens: Vec<usize>,
    pub eps: ArrayD<f64>,
}

impl DiffusionPrior {
    pub fn build(
        ps: &mut ParamStore,
        name: &str,
        latent: usize,
        classes: usize,
        cfg: &DiffusionConfig,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        cfg.validate()?;
        let cond_dim = cfg.base;
        Ok(DiffusionPrior {
            cond: Conditioning::build(ps, &format!("{name}.cond"), cond_dim, classes, rng),
            unet: UNet1d::build(ps, &format!("{name}.unet"), latent, cfg.base, cond_dim, rng),
            schedule: build_schedule(cfg.steps)?,
            cfg: cfg.clone(),
        })
    }

    /// Sample timesteps, null-token replacements, and noise for a batch.
    pub fn draw(&self, shape: &[usize], labels: &[usize], ctx: &mut FwdCtx) -> DiffusionDraws {
        let b = labels.len();
        let mut t = Vec::with_capacity(b);
        let mut tokens = Vec::with_capacity(b);
        for &y in labels {
            t.push(ctx.rng.gen_range(1..=self.schedule.steps));
            let dropped = ctx.rng.gen::<f64>() < self.cfg.null_drop;
            tokens.push(if dropped { self.cond.null_token() } else { y });
        }
        let mut eps = ArrayD::<f64>::zeros(IxDyn(shape));
        for v in eps.iter_mut() {
            *v = crate::rng::normal(&mut ctx.rng);
        }
        DiffusionDraws { t, tokens, eps }
    }

    /// Noise-prediction MSE on the (usually detached) latent.
    pub fn loss(
        &self,
        g: &mut Graph,
        z0: NodeId,
        w_cond: NodeId,
        draws: &DiffusionDraws,
    ) -> NodeId {
        let eps = g.constant(draws.eps.clone());
        let z_t = self.schedule.q_sample(g, z0, &draws.t, eps);
        let c = self.cond.forward(g, &draws.t, &draws.tokens, w_cond);
        let pred = self.unet.forward(g, z_t, c);
        let diff = g.sub(eps, pred);
        let sq = g.square(diff);
        g.mean_all(sq)
    }

    /// Guided noise prediction `eps_u + s (eps_c - eps_u)` (plain arrays).
    pub fn guided_eps(
        &self,
        store: &ParamStore,
        z: &Array3<f64>,
        t: usize,
        labels: &[usize],
        w: &Array2<f64>,
        scale: f64,
    ) -> Array3<f64> {
        let b = labels.len();
        let t_vec = vec![t; b];
        let null = vec![self.cond.null_token(); b];
        let mut g = Graph::new(store);
        let zn = g.constant(z.clone().into_dyn());
        let wn = g.constant(w.clone().into_dyn());
        let c_cond = self.cond.forward(&mut g, &t_vec, labels, wn);
        let c_null = self.cond.forward(&mut g, &t_vec, &null, wn);
        let eps_c = self.unet.forward(&mut g, zn, c_cond);
        let eps_u = self.unet.forward(&mut g, zn, c_null);
        let ec = g.value(eps_c);
        let eu = g.value(eps_u);
        let mut out = eu.clone();
        out.zip_mut_with(ec, |u, &c| *u += scale * (c - *u));
        out.into_dimensionality().unwrap()
    }

    /// Deterministic DDIM sampling (eta = 0) with classifier-free guidance.
    /// The caller passes the store to read the denoiser weights from (the
    /// EMA copy at test time) and a stream for the initial noise only.
    pub fn ddim_sample(
        &self,
        store: &ParamStore,
        n: usize,
        seq_len: usize,
        labels: &[usize],
        w: &Array2<f64>,
        rng: &mut StreamRng,
    ) -> Result<Array3<f64>> {
        if n == 0 {
            return Err(Error::Numeric("ddim_sample needs n > 0".into()));
        }
        assert_eq!(labels.len(), n);
        assert_eq!(w.nrows(), n);
        let mut z = Array3::<f64>::zeros((n, seq_len, self.unet.latent));
        for v in z.iter_mut() {
            *v = crate::rng::normal(rng);
        }
        let ts = self.schedule.ddim_timesteps(self.cfg.ddim_steps);
        for (i, &t) in ts.iter().enumerate() {
            let t_next = if i + 1 < ts.len() { ts[i + 1] } else { 0 };
            let eps_hat = self.guided_eps(store, &z, t, labels, w, self.cfg.cfg_scale);
            let ab_t = self.schedule.alpha_bar[t];
            let ab_n = self.schedule.alpha_bar[t_next];
            let z0_hat = (&z - &(&eps_hat * (1.0 - ab_t).sqrt())) / ab_t.sqrt();
            z = &z0_hat * ab_n.sqrt() + &eps_hat * (1.0 - ab_n).sqrt();
        }
        Ok(z)
    }
}

// ---- EMA ---------------------------------------------------------------------

/// Exponential moving average of one parameter group. The shadow copies
/// never receive gradient; they are plain tensors updated once per
/// optimizer step.
#[derive(Debug, Clone)]
pub struct Ema {
    pub decay: f64,
    pub ids: Vec<ParamId>,
    pub shadows: Vec<ArrayD<f64>>,
}

impl Ema {
    /// Shadow every parameter currently in `group`.
    pub fn new(store: &ParamStore, group: ParamGroup, decay: f64) -> Self {
        let ids: Vec<ParamId> = store.ids().filter(|&id| store.group(id) == group).collect();
        let shadows = ids.iter().map(|&id| store.value(id).clone()).collect();
        Ema { decay, ids, shadows }
    }

    /// `shadow <- decay * shadow + (1 - decay) * live`, element-wise.
    pub fn update(&mut self, store: &ParamStore) {
        for (shadow, &id) in self.shadows.iter_mut().zip(self.ids.iter()) {
            let live = store.value(id);
            assert_eq!(shadow.shape(), live.shape(), "EMA shape mismatch for {}", store.name(id));
            shadow.zip_mut_with(live, |s, &l| *s = self.decay * *s + (1.0 - self.decay) * l);
        }
    }

    /// A copy of the store with the shadows written over the live weights.
    pub fn apply_to(&self, store: &ParamStore) -> ParamStore {
        let mut out = store.clone();
        for (shadow, &id) in self.shadows.iter().zip(self.ids.iter()) {
            *out.value_mut(id) = shadow.clone();
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.shadows.iter().map(|s| s.len()).sum()
    }
}
