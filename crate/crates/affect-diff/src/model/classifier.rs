//! Attention pooling over the latent sequence, the classification head, and
//! the focal + label-smoothed task loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::params::normal_init;
use crate::autodiff::{Graph, NodeId, ParamGroup, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::rng::StreamRng;

use super::encoders::{dropout, LayerNorm, Linear};
use super::FwdCtx;

/// Task-loss hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TaskLossConfig {
    /// Label smoothing alpha.
    pub label_smoothing: f64,
    /// Focal exponent gamma.
    pub focal_gamma: f64,
    /// Head dropout rate (train only).
    pub head_dropout: f64,
    /// Optional per-class loss weights (the milder-imbalance preset).
    pub class_weights: Option<Vec<f64>>,
}

impl Default for TaskLossConfig {
    fn default() -> Self {
        TaskLossConfig {
            label_smoothing: 0.1,
            focal_gamma: 2.0,
            head_dropout: 0.3,
            class_weights: None,
        }
    }
}

impl TaskLossConfig {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must be in [0, 1)".into()));
        }
        if self.focal_gamma < 0.0 {
            return Err(Error::Config("focal_gamma must be >= 0".into()));
        }
        if let Some(w) = &self.class_weights {
            if w.len() != classes {
                return Err(Error::Config(format!(
                    "class_weights length {} != classes {classes}",
                    w.len()
                )));
            }
        }
        Ok(())
    }
}

/// Learnable attention pooling plus a two-layer MLP head.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub query: ParamId,
    lin1: Linear,
    ln: LayerNorm,
    lin2: Linear,
    dropout_rate: f64,
    latent: usize,
    pub classes: usize,
}

impl ClassifierHead {
    pub fn build(
        ps: &mut ParamStore,
        name: &str,
        latent: usize,
        classes: usize,
        dropout_rate: f64,
        rng: &mut StreamRng,
    ) -> Self {
        let group = ParamGroup::Backbone;
        ClassifierHead {
            query: ps.add(format!("{name}.pool_query"), normal_init(rng, &[latent], 0.02), group),
            lin1: Linear::build(ps, &format!("{name}.lin1"), latent, latent, group, rng),
            ln: LayerNorm::build(ps, &format!("{name}.ln"), latent, group),
            lin2: Linear::build(ps, &format!("{name}.lin2"), latent, classes, group, rng),
            dropout_rate,
            latent,
            classes,
        }
    }

    /// Softmax-weighted temporal average with the learned query:
    /// `a = softmax_l(q . z_l / sqrt(d_z))`, `z_bar = sum_l a_l z_l`.
    pub fn attention_pool(&self, g: &mut Graph, z: NodeId) -> NodeId {
        let shape = g.value(z).shape().to_vec();
        let (b, l, d) = (shape[0], shape[1], shape[2]);
        assert_eq!(d, self.latent);
        let q = g.param(self.query);
        let scored = g.mul_bias(z, q);
        let scores = g.sum_axis(scored, 2);
        let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = g.softmax_last(scores);
        let attn3 = g.reshape(attn, &[b, 1, l]);
        let pooled = g.bmm(attn3, z);
        g.reshape(pooled, &[b, d])
    }

    /// `[B, d_z] -> [B, C]` logits.
    pub fn classify(&self, g: &mut Graph, pooled: NodeId, ctx: &mut FwdCtx) -> NodeId {
        let x = self.lin1.forward(g, pooled);
        let x = self.ln.forward(g, x);
        let x = g.gelu(x);
        let x = dropout(g, x, self.dropout_rate, ctx);
        self.lin2.forward(g, x)
    }
}

/// Focal-modulated, label-smoothed cross-entropy:
/// per sample `(1 - p_y)^gamma * sum_c(-t_c log p_c)` with
/// `t_c = (1-alpha) 1[c=y] + alpha/C`; batch mean. Optional class weights
/// multiply each sample's loss by `w_y`.
pub fn task_loss(
    g: &mut Graph,
    logits: NodeId,
    labels: &[usize],
    cfg: &TaskLossConfig,
) -> Result<NodeId> {
    let shape = g.value(logits).shape().to_vec();
    let (b, c) = (shape[0], shape[1]);
    assert_eq!(b, labels.len(), "logits/labels batch size");
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Numeric(format!("label {bad} out of range [0, {c})")));
    }
    cfg.validate(c)?;
    let alpha = cfg.label_smoothing;

    let logp = g.log_softmax_last(logits);
    let logp_y = g.gather_cols(logp, labels);
    let sum_logp = g.sum_axis(logp, 1);
    // ce = -(1-alpha) log p_y - (alpha/C) sum_c log p_c
    let a1 = g.scale(logp_y, -(1.0 - alpha));
    let a2 = g.scale(sum_logp, -(alpha / c as f64));
    let ce = g.add(a1, a2);

    // focal factor (1 - p_y)^gamma
    let p_y = g.exp(logp_y);
    let neg = g.neg(p_y);
    let base = g.add_scalar(neg, 1.0);
    let focal = g.pow(base, cfg.focal_gamma);
    let mut per_sample = g.mul(focal, ce);

    if let Some(w) = &cfg.class_weights {
        let wv: Vec<f64> = labels.iter().map(|&y| w[y]).collect();
        let wn = g.constant(ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[b]), wv).unwrap());
        per_sample = g.mul(per_sample, wn);
    }
    Ok(g.mean_all(per_sample))
}

/// Analytic lower bound of the smoothed cross-entropy over all possible
/// predictive distributions: `inf_p -sum_c t_c ln p_c = H(t)`, the entropy
/// of the smoothed target. Strictly positive whenever alpha > 0, so the
/// loss never reaches zero under smoothing. Exposed for tests.
pub fn smoothed_ce_lower_bound(alpha: f64, classes: usize) -> f64 {
    let c = classes as f64;
    let t_true = 1.0 - alpha + alpha / c;
    let t_other = alpha / c;
    -(t_true * t_true.ln() + (c - 1.0) * t_other * t_other.ln())
}
