//! The full model: three unimodal encoders, a causal modality graph, gated
//! concat+MLP fusion with a variational bottleneck, a stop-gradiented
//! conditional diffusion prior over the latent sequence, and an
//! attention-pooled classifier head.

pub mod classifier;
pub mod diffusion;
pub mod encoders;
pub mod fusion;
pub mod graph;

pub use classifier::{task_loss, ClassifierHead, TaskLossConfig};
pub use diffusion::{build_schedule, DiffusionConfig, DiffusionPrior, DiffusionSchedule, Ema};
pub use encoders::{positional_encoding, EncoderConfig, ModalityEncoder};
pub use fusion::{kl_free_bits, reparameterize, FusionVae, VaeConfig};
pub use graph::{CausalGraph, CausalGraphState};

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamGroup, ParamStore};
use crate::data::{Batch, DatasetConfig};
use crate::error::{Error, Result};
use crate::rng::{stream, StreamRng};

/// Train/eval switch. Evaluation disables dropout, augmentation, and
/// sampling: the latent is the posterior mean and the whole path is a pure
/// function of the inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-forward-pass context: mode plus the stream all stochastic pieces
/// (dropout masks, reparameterization noise, diffusion draws) consume in a
/// fixed order. Rebuilding a context with the same key replays the same
/// draws exactly.
pub struct FwdCtx {
    pub mode: Mode,
    pub rng: StreamRng,
}

impl FwdCtx {
    pub fn new(mode: Mode, rng: StreamRng) -> Self {
        FwdCtx { mode, rng }
    }

    pub fn eval() -> Self {
        FwdCtx {
            mode: Mode::Eval,
            rng: stream(0, "eval-unused", &[]),
        }
    }
}

/// Single-toggle model variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    NoDiffusion,
    NoCausalGraph,
    Gumbel,
    NoStopGradient,
    NoVae,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::None,
        Ablation::NoDiffusion,
        Ablation::NoCausalGraph,
        Ablation::Gumbel,
        Ablation::NoStopGradient,
        Ablation::NoVae,
    ];

    pub fn parse(token: &str) -> Result<Self> {
        Ok(match token {
            "none" => Ablation::None,
            "no_diffusion" => Ablation::NoDiffusion,
            "no_causal_graph" => Ablation::NoCausalGraph,
            "gumbel" => Ablation::Gumbel,
            "no_stop_gradient" => Ablation::NoStopGradient,
            "no_vae" => Ablation::NoVae,
            other => return Err(Error::Config(format!("unknown ablation token '{other}'"))),
        })
    }

    pub fn token(&self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoDiffusion => "no_diffusion",
            Ablation::NoCausalGraph => "no_causal_graph",
            Ablation::Gumbel => "gumbel",
            Ablation::NoStopGradient => "no_stop_gradient",
            Ablation::NoVae => "no_vae",
        }
    }

    /// Human-readable row label for ablation tables.
    pub fn display_name(&self) -> &'static str {
        match self {
            Ablation::None => "Full Model",
            Ablation::NoDiffusion => "No Diffusion Prior",
            Ablation::NoCausalGraph => "No Causal Graph",
            Ablation::Gumbel => "No NOTEARS (Gumbel)",
            Ablation::NoStopGradient => "No Stop-Gradient",
            Ablation::NoVae => "No VAE (deterministic)",
        }
    }
}

/// Architecture hyperparameters (everything except the training loop).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub vae: VaeConfig,
    pub diffusion: DiffusionConfig,
    pub task: TaskLossConfig,
}

/// Gumbel relaxation temperature for the NOTEARS ablation.
pub const GUMBEL_TAU: f64 = 1.0;

/// Loss nodes and logged values from one forward pass.
pub struct LossNodes {
    pub logits: NodeId,
    pub task: NodeId,
    pub kl: Option<NodeId>,
    pub diff: Option<NodeId>,
    pub causal: Option<NodeId>,
    pub recon: Option<NodeId>,
    pub graph_state: CausalGraphState,
}

/// The assembled model.
pub struct AffectDiff {
    pub params: ParamStore,
    pub data_cfg: DatasetConfig,
    pub cfg: ModelConfig,
    pub ablation: Ablation,
    text_enc: ModalityEncoder,
    audio_enc: ModalityEncoder,
    video_enc: ModalityEncoder,
    causal: Option<CausalGraph>,
    fusion: FusionVae,
    pub prior: Option<DiffusionPrior>,
    head: ClassifierHead,
    pub ema: Option<Ema>,
}

impl AffectDiff {
    /// Deterministic construction from (configs, ablation, seed).
    pub fn build(
        data_cfg: &DatasetConfig,
        cfg: &ModelConfig,
        ablation: Ablation,
        seed: u64,
    ) -> Result<Self> {
        data_cfg.validate()?;
        cfg.encoder.validate()?;
        cfg.diffusion.validate()?;
        cfg.task.validate(data_cfg.classes)?;
        let mut ps = ParamStore::new();
        let mut rng = stream(seed, "model-init", &[]);
        let h = cfg.encoder.hidden;
        let text_enc = ModalityEncoder::build(
            &mut ps, "enc.text", data_cfg.text_dim, data_cfg.seq_len, None, &cfg.encoder, &mut rng,
        )?;
        let audio_enc = ModalityEncoder::build(
            &mut ps, "enc.audio", data_cfg.audio_dim, data_cfg.seq_len,
            Some(cfg.encoder.audio_kernel), &cfg.encoder, &mut rng,
        )?;
        let video_enc = ModalityEncoder::build(
            &mut ps, "enc.video", data_cfg.video_dim, data_cfg.seq_len,
            Some(cfg.encoder.video_kernel), &cfg.encoder, &mut rng,
        )?;
        let causal = if ablation == Ablation::NoCausalGraph {
            None
        } else {
            Some(CausalGraph::build(&mut ps, "graph", h, &mut rng))
        };
        let fusion = FusionVae::build(&mut ps, "fusion", h, &cfg.vae, &mut rng);
        let head = ClassifierHead::build(
            &mut ps, "head", cfg.vae.latent, data_cfg.classes, cfg.task.head_dropout, &mut rng,
        );
        let prior = if ablation == Ablation::NoDiffusion {
            None
        } else {
            Some(DiffusionPrior::build(
                &mut ps, "diff", cfg.vae.latent, data_cfg.classes, &cfg.diffusion, &mut rng,
            )?)
        };
        let ema = prior
            .as_ref()
            .map(|_| Ema::new(&ps, ParamGroup::Diffusion, cfg.diffusion.ema_decay));
        Ok(AffectDiff {
            params: ps,
            data_cfg: data_cfg.clone(),
            cfg: cfg.clone(),
            ablation,
            text_enc,
            audio_enc,
            video_enc,
            causal,
            fusion,
            prior,
            head,
            ema,
        })
    }

    /// Full loss computation for one batch. `lambda_d_on` controls whether
    /// diffusion draws are consumed (they always are when a prior exists, so
    /// loss-weight changes never shift the draw stream).
    pub fn losses(&self, g: &mut Graph, batch: &Batch, ctx: &mut FwdCtx) -> Result<LossNodes> {
        let b = batch.len();
        if b == 0 {
            return Err(Error::Numeric("empty batch".into()));
        }
        let xt = g.constant(batch.text.clone().into_dyn());
        let xa = g.constant(batch.audio.clone().into_dyn());
        let xv = g.constant(batch.video.clone().into_dyn());

        let ht = self.text_enc.forward(g, xt, ctx);
        let ha = self.audio_enc.forward(g, xa, ctx);
        let hv = self.video_enc.forward(g, xv, ctx);

        // Mean-pooled node embeddings feed the graph; weights gate the
        // full sequences.
        let (weights, causal_loss, graph_state) = match (&self.causal, self.ablation) {
            (Some(cg), ablation) => {
                let pt = g.mean_axis(ht, 1);
                let pa = g.mean_axis(ha, 1);
                let pv = g.mean_axis(hv, 1);
                let cat = g.concat(&[pt, pa, pv], 1);
                let pooled = g.reshape(cat, &[b, graph::GRAPH_NODES, self.cfg.encoder.hidden]);
                let out = if ablation == Ablation::Gumbel && ctx.mode == Mode::Train {
                    cg.forward_gumbel(g, pooled, GUMBEL_TAU, &mut ctx.rng)
                } else {
                    cg.forward(g, pooled)
                };
                let state = graph::state_from_graph(g, &out);
                let penalty = g.mean_all(out.notears);
                (out.weights, Some(penalty), state)
            }
            (None, _) => {
                let w = g.constant(ArrayD::from_elem(
                    IxDyn(&[b, graph::GRAPH_NODES]),
                    1.0 / graph::GRAPH_NODES as f64,
                ));
                let state = CausalGraphState {
                    scores: vec![0.0; 9],
                    adjacency: vec![0.0; 9],
                    weights: [1.0 / 3.0; 3],
                    notears_value: 0.0,
                };
                (w, None, state)
            }
        };

        let gt = graph::gate_modality(g, ht, weights, 0);
        let ga = graph::gate_modality(g, ha, weights, 1);
        let gv = graph::gate_modality(g, hv, weights, 2);
        let fused = self.fusion.fuse(g, [gt, ga, gv]);

        let (z, kl) = if self.ablation == Ablation::NoVae {
            (self.fusion.deterministic_latent(g, fused), None)
        } else {
            let post = self.fusion.posterior(g, fused);
            let z = reparameterize(g, &post, ctx);
            let kl = kl_free_bits(g, &post, self.cfg.vae.beta, self.cfg.vae.free_bits);
            (z, Some(kl))
        };

        let recon = if self.cfg.vae.use_decoder {
            self.fusion.reconstruct(g, z).map(|rec| {
                let target = g.stop_grad(fused);
                let d = g.sub(rec, target);
                let sq = g.square(d);
            g.mean_all(sq)
            })
        } else {
            None
        };

        let diff = match &self.prior {
            None => None,
            Some(prior) => {
                // The denoiser sees a detached latent unless the
                // stop-gradient ablation is active; the importance weights
                // are always detached before conditioning.
                let z_diff = if self.ablation == Ablation::NoStopGradient {
                    z
                } else {
                    g.stop_grad(z)
                };
                let w_cond = g.stop_grad(weights);
                let shape = g.value(z).shape().to_vec();
                let draws = prior.draw(&shape, &batch.labels, ctx);
                Some(prior.loss(g, z_diff, w_cond, &draws))
            }
        };

        let pooled = self.head.attention_pool(g, z);
        let logits = self.head.classify(g, pooled, ctx);
        let task = task_loss(g, logits, &batch.labels, &self.cfg.task)?;

        Ok(LossNodes {
            logits,
            task,
            kl,
            diff,
            causal: causal_loss,
            recon,
            graph_state,
        })
    }

    /// Deterministic inference: predictions and softmax scores for a batch.
    pub fn predict(&self, batch: &Batch) -> Result<(Vec<usize>, Array2<f64>)> {
        let mut g = Graph::new(&self.params);
        let mut ctx = FwdCtx::eval();
        let nodes = self.losses(&mut g, batch, &mut ctx)?;
        let probs = g.softmax_last(nodes.logits);
        let pv = g.value(probs);
        let (b, c) = (pv.shape()[0], pv.shape()[1]);
        let mut scores = Array2::<f64>::zeros((b, c));
        let mut preds = Vec::with_capacity(b);
        for bi in 0..b {
            let mut best = 0usize;
            for ci in 0..c {
                scores[[bi, ci]] = pv[[bi, ci]];
                if pv[[bi, ci]] > pv[[bi, best]] {
                    best = ci;
                }
            }
            preds.push(best);
        }
        Ok((preds, scores))
    }

    /// Trainable scalar count (the live parameters).
    pub fn trainable_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Total scalar count including the frozen EMA shadow.
    pub fn total_params(&self) -> usize {
        self.trainable_params() + self.ema.as_ref().map_or(0, |e| e.num_scalars())
    }
}
