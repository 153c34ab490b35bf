//! Training orchestration: joint objective with curriculum warmups, the
//! optimization loop, early stopping on validation balanced accuracy,
//! checkpointing, and ablation wiring.

pub mod checkpoint;
pub mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, LoadedCheckpoint};
pub use optim::{cosine_lr, AdamW, DenseGrads};

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{augment_batch, collate, AugmentationPolicy, Batch, PreparedDataset, Split};
use crate::error::{Error, Result};
use crate::model::{Ablation, AffectDiff, FwdCtx, LossNodes, Mode, ModelConfig};
use crate::rng::stream;

/// Optimization and loop hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Maximum epochs for this run.
    pub epochs: usize,
    /// Cosine annealing horizon in epochs.
    pub lr_horizon: usize,
    /// Global L2 gradient clip.
    pub grad_clip: f64,
    pub batch: usize,
    /// Early-stopping patience on validation balanced accuracy.
    pub patience: usize,
    pub seed: u64,
    /// Diffusion loss weight.
    pub lambda_diff: f64,
    /// Acyclicity loss weight.
    pub lambda_causal: f64,
    /// Warmup denominator for the diffusion ramp (epochs).
    pub diff_warmup: usize,
    /// Optional delayed start of the diffusion ramp.
    pub diff_warmup_start: usize,
    /// Warmup denominator for the KL ramp (epochs).
    pub kl_warmup: usize,
    /// Reduced-precision GEMM path (f32 matmuls, f64 master weights).
    pub mixed_precision: bool,
    pub ablation: Ablation,
    /// Samples per data-parallel gradient chunk (fixed, so results do not
    /// depend on worker count).
    pub chunk: usize,
    pub augment: AugmentationPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            weight_decay: 1e-4,
            epochs: 100,
            lr_horizon: 100,
            grad_clip: 1.0,
            batch: 64,
            patience: 35,
            seed: 42,
            lambda_diff: 0.05,
            lambda_causal: 0.05,
            diff_warmup: 20,
            diff_warmup_start: 0,
            kl_warmup: 30,
            mixed_precision: false,
            ablation: Ablation::None,
            chunk: 8,
            augment: AugmentationPolicy::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if self.lambda_diff < 0.0 || self.lambda_causal < 0.0 || self.lr < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("weights and rates must be nonnegative".into()));
        }
        if self.batch == 0 || self.chunk == 0 || self.epochs == 0 {
            return Err(Error::Config("batch, chunk, and epochs must be positive".into()));
        }
        if self.diff_warmup == 0 || self.kl_warmup == 0 || self.lr_horizon == 0 {
            return Err(Error::Config("warmup and horizon denominators must be positive".into()));
        }
        self.augment.validate()
    }

    /// The config for an ablation run: identical except for the single
    /// toggled field.
    pub fn apply_ablation(&self, token: &str) -> Result<TrainConfig> {
        let ablation = Ablation::parse(token)?;
        let mut out = self.clone();
        out.ablation = ablation;
        Ok(out)
    }
}

/// Curriculum ramps: `gamma = clamp((epoch - start)/denom, 0, 1)` for the
/// diffusion term (start 0 by default) and `gamma_kl = min(1, epoch/denom)`.
pub fn warmup_factors(epoch: usize, cfg: &TrainConfig) -> (f64, f64) {
    let e = epoch.saturating_sub(cfg.diff_warmup_start) as f64;
    let gamma = (e / cfg.diff_warmup as f64).min(1.0);
    let gamma_kl = (epoch as f64 / cfg.kl_warmup as f64).min(1.0);
    (gamma, gamma_kl)
}

/// The logged loss terms of one epoch (or one batch), with the warmup
/// factors that weighted them.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct LossBreakdown {
    pub task: f64,
    pub kl: f64,
    pub diff: f64,
    pub causal: f64,
    pub recon: f64,
    pub total: f64,
    pub gamma_diff: f64,
    pub gamma_kl: f64,
}

impl LossBreakdown {
    /// The joint objective recombined from the stored parts; `total` is
    /// always written from this expression, so the identity holds exactly.
    pub fn recombine(&self, cfg: &TrainConfig, recon_weight: f64) -> f64 {
        self.task
            + self.gamma_kl * self.kl
            + self.gamma_diff * cfg.lambda_diff * self.diff
            + cfg.lambda_causal * self.causal
            + recon_weight * self.recon
    }
}

/// One line of `epochs.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub val_balanced_accuracy: f64,
    pub causal_weights: [f64; 3],
    pub notears_value: f64,
    pub grad_norm_mean: f64,
    pub is_best: bool,
}

/// Everything a finished run leaves behind.
#[derive(Debug)]
pub struct RunArtifacts {
    pub run_dir: PathBuf,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_balacc: f64,
    pub epochs_run: usize,
}

/// Slice a collated batch into fixed-size chunks for data-parallel
/// gradient evaluation.
fn split_batch(batch: &Batch, chunk: usize) -> Vec<Batch> {
    let n = batch.len();
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        out.push(Batch {
            ids: batch.ids[start..end].to_vec(),
            text: batch.text.slice(ndarray::s![start..end, .., ..]).to_owned(),
            audio: batch.audio.slice(ndarray::s![start..end, .., ..]).to_owned(),
            video: batch.video.slice(ndarray::s![start..end, .., ..]).to_owned(),
            labels: batch.labels[start..end].to_vec(),
        });
        start = end;
    }
    out
}

/// Per-chunk forward/backward result.
struct ChunkResult {
    n: usize,
    parts: LossBreakdown,
    grads: crate::autodiff::Gradients,
    weights: [f64; 3],
    notears: f64,
}

/// Assemble the joint objective on the tape and return the weighted total
/// node plus the raw part values.
fn joint_loss_node(
    g: &mut Graph,
    nodes: &LossNodes,
    gamma_diff: f64,
    gamma_kl: f64,
    cfg: &TrainConfig,
    recon_weight: f64,
) -> (crate::autodiff::NodeId, LossBreakdown) {
    let mut parts = LossBreakdown {
        task: g.scalar(nodes.task),
        gamma_diff,
        gamma_kl,
        ..LossBreakdown::default()
    };
    let mut total = nodes.task;
    if let Some(kl) = nodes.kl {
        parts.kl = g.scalar(kl);
        let w = g.scale(kl, gamma_kl);
        total = g.add(total, w);
    }
    if let Some(diff) = nodes.diff {
        parts.diff = g.scalar(diff);
        let w = g.scale(diff, gamma_diff * cfg.lambda_diff);
        total = g.add(total, w);
    }
    if let Some(causal) = nodes.causal {
        parts.causal = g.scalar(causal);
        let w = g.scale(causal, cfg.lambda_causal);
        total = g.add(total, w);
    }
    if let Some(recon) = nodes.recon {
        parts.recon = g.scalar(recon);
        let w = g.scale(recon, recon_weight);
        total = g.add(total, w);
    }
    parts.total = parts.recombine(cfg, recon_weight);
    (total, parts)
}

/// Deterministic evaluation of a split: predictions, labels, and class
/// scores, with batches fanned out in parallel and reassembled in order.
pub fn evaluate_split(
    model: &AffectDiff,
    data: &PreparedDataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<(Vec<usize>, Vec<usize>, Array2<f64>)> {
    if indices.is_empty() {
        return Err(Error::Numeric("evaluation split is empty".into()));
    }
    let chunks: Vec<&[usize]> = indices.chunks(batch_size).collect();
    let results: Vec<Result<(Vec<usize>, Array2<f64>)>> = chunks
        .par_iter()
        .map(|idx| {
            let batch = collate(&data.samples, idx);
            model.predict(&batch)
        })
        .collect();
    let mut preds = Vec::with_capacity(indices.len());
    let mut scores_rows = Vec::new();
    for r in results {
        let (p, s) = r?;
        preds.extend(p);
        scores_rows.push(s);
    }
    let views: Vec<_> = scores_rows.iter().map(|s| s.view()).collect();
    let scores = ndarray::concatenate(ndarray::Axis(0), &views)
        .map_err(|e| Error::Shape(format!("score concat: {e}")))?;
    let labels = data.labels_of(indices);
    Ok((preds, labels, scores))
}

/// Train a model on the prepared dataset, logging one record per epoch and
/// keeping the best checkpoint (max validation balanced accuracy) under
/// `run_dir/checkpoint-best`. Returns the run artifacts.
pub fn train(
    data: &PreparedDataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    run_dir: &Path,
    resume_from: Option<&Path>,
) -> Result<RunArtifacts> {
    cfg.validate()?;
    std::fs::create_dir_all(run_dir)?;
    if data.splits.train.is_empty() || data.splits.val.is_empty() {
        return Err(Error::Format("train/val splits must be non-empty".into()));
    }

    let (mut model, mut opt, start_epoch, mut best_val, mut best_epoch) = match resume_from {
        None => {
            let model = AffectDiff::build(&data.config, model_cfg, cfg.ablation, cfg.seed)?;
            let opt = AdamW::new(&model.params, cfg.weight_decay);
            (model, opt, 0usize, f64::NEG_INFINITY, 0usize)
        }
        Some(ckpt) => {
            let loaded = load_checkpoint(ckpt)?;
            let epoch = loaded.epoch + 1;
            let best = loaded.best_val_balacc;
            let best_ep = loaded.epoch;
            (loaded.model, loaded.opt, epoch, best, best_ep)
        }
    };

    let recon_weight = if model_cfg.vae.use_decoder {
        model_cfg.vae.recon_weight
    } else {
        0.0
    };

    let log_path = run_dir.join("epochs.jsonl");
    let mut log_file = std::io::BufWriter::new(if start_epoch == 0 {
        std::fs::File::create(&log_path)?
    } else {
        std::fs::OpenOptions::new().create(true).append(true).open(&log_path)?
    });
    let mut log = Vec::new();

    let mut epochs_run = start_epoch;
    for epoch in start_epoch..cfg.epochs {
        epochs_run = epoch + 1;
        let lr = cosine_lr(cfg.lr, epoch, cfg.lr_horizon);
        let (gamma_diff, gamma_kl) = warmup_factors(epoch, cfg);

        // Deterministic per-epoch shuffle of the training indices.
        let mut order: Vec<usize> = data.splits.train.to_vec();
        let mut shuffle_rng = stream(cfg.seed, "shuffle", &[epoch as u64]);
        order.shuffle(&mut shuffle_rng);

        let mut epoch_parts = LossBreakdown {
            gamma_diff,
            gamma_kl,
            ..LossBreakdown::default()
        };
        let mut epoch_weights = [0.0f64; 3];
        let mut epoch_notears = 0.0;
        let mut grad_norm_sum = 0.0;
        let mut seen = 0usize;
        let n_batches = order.len().div_ceil(cfg.batch);

        for (batch_idx, idx) in order.chunks(cfg.batch).enumerate() {
            let mut batch = collate(&data.samples, idx);
            let mut aug_rng = stream(cfg.seed, "augment", &[epoch as u64, batch_idx as u64]);
            augment_batch(&mut batch, &cfg.augment, &mut aug_rng);

            let chunks = split_batch(&batch, cfg.chunk);
            let n_total = batch.len();
            let results: Vec<Result<ChunkResult>> = chunks
                .par_iter()
                .enumerate()
                .map(|(ci, cb)| {
                    let mut g = Graph::with_reduced_precision(&model.params, cfg.mixed_precision);
                    let mut ctx = FwdCtx::new(
                        Mode::Train,
                        stream(cfg.seed, "fwd", &[epoch as u64, batch_idx as u64, ci as u64]),
                    );
                    let nodes = model.losses(&mut g, cb, &mut ctx)?;
                    let (total, parts) =
                        joint_loss_node(&mut g, &nodes, gamma_diff, gamma_kl, cfg, recon_weight);
                    let grads = g.backward(total);
                    Ok(ChunkResult {
                        n: cb.len(),
                        parts,
                        grads,
                        weights: nodes.graph_state.weights,
                        notears: nodes.graph_state.notears_value,
                    })
                })
                .collect();

            let mut dense = DenseGrads::zeros_like(&model.params);
            let mut batch_parts = LossBreakdown {
                gamma_diff,
                gamma_kl,
                ..LossBreakdown::default()
            };
            for r in results {
                let r = r?;
                let wfrac = r.n as f64 / n_total as f64;
                dense.accumulate(&model.params, &r.grads, wfrac);
                batch_parts.task += wfrac * r.parts.task;
                batch_parts.kl += wfrac * r.parts.kl;
                batch_parts.diff += wfrac * r.parts.diff;
                batch_parts.causal += wfrac * r.parts.causal;
                batch_parts.recon += wfrac * r.parts.recon;
                for m in 0..3 {
                    epoch_weights[m] += wfrac * r.weights[m] * n_total as f64;
                }
                epoch_notears += wfrac * r.notears * n_total as f64;
            }
            batch_parts.total = batch_parts.recombine(cfg, recon_weight);
            if !batch_parts.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch} batch {batch_idx}: task={} kl={} diff={} causal={} recon={}",
                    batch_parts.task, batch_parts.kl, batch_parts.diff, batch_parts.causal, batch_parts.recon
                )));
            }

            grad_norm_sum += dense.clip_global_norm(cfg.grad_clip);
            opt.step(&mut model.params, &dense, lr);
            if let Some(ema) = model.ema.as_mut() {
                ema.update(&model.params);
            }

            let w = n_total as f64;
            epoch_parts.task += batch_parts.task * w;
            epoch_parts.kl += batch_parts.kl * w;
            epoch_parts.diff += batch_parts.diff * w;
            epoch_parts.causal += batch_parts.causal * w;
            epoch_parts.recon += batch_parts.recon * w;
            seen += n_total;
        }

        let n = seen as f64;
        epoch_parts.task /= n;
        epoch_parts.kl /= n;
        epoch_parts.diff /= n;
        epoch_parts.causal /= n;
        epoch_parts.recon /= n;
        epoch_parts.total = epoch_parts.recombine(cfg, recon_weight);
        for m in 0..3 {
            epoch_weights[m] /= n;
        }
        epoch_notears /= n;

        // Validation with the deterministic mean-latent path.
        let (preds, labels, _) = evaluate_split(model.as_eval(), data, &data.splits.val, cfg.batch)?;
        let val_balacc = crate::metrics::balanced_accuracy(&preds, &labels, data.config.classes)?;

        let is_best = val_balacc > best_val;
        if is_best {
            best_val = val_balacc;
            best_epoch = epoch;
            save_checkpoint(
                &run_dir.join("checkpoint-best"),
                &model,
                &opt,
                cfg,
                epoch,
                best_val,
            )?;
        }

        let record = EpochRecord {
            epoch,
            lr,
            loss: epoch_parts.clone(),
            val_balanced_accuracy: val_balacc,
            causal_weights: epoch_weights,
            notears_value: epoch_notears,
            grad_norm_mean: grad_norm_sum / n_batches as f64,
            is_best,
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::Format(format!("log encode: {e}")))?;
        log_file.write_all(line.as_bytes())?;
        log_file.write_all(b"\n")?;
        log_file.flush()?;
        log.push(record);

        if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    drop(log_file);

    if let (Some(prior), true) = (&model.prior, model_cfg.diffusion.dump_samples) {
        dump_samples(&model, prior, data, cfg, run_dir)?;
    }

    Ok(RunArtifacts {
        run_dir: run_dir.to_path_buf(),
        log,
        best_epoch,
        best_val_balacc: best_val,
        epochs_run,
    })
}

impl AffectDiff {
    /// Cheap identity helper so evaluation call-sites read explicitly.
    pub fn as_eval(&self) -> &AffectDiff {
        self
    }
}

/// Write a small DDIM sample dump (latents plus conditioning) using the EMA
/// denoiser weights, in the flat tensor container format.
fn dump_samples(
    model: &AffectDiff,
    prior: &crate::model::DiffusionPrior,
    data: &PreparedDataset,
    cfg: &TrainConfig,
    run_dir: &Path,
) -> Result<()> {
    let n = 16usize;
    let labels: Vec<usize> = (0..n).map(|i| i % data.config.classes).collect();
    let w = Array2::from_elem((n, 3), 1.0 / 3.0);
    let store = match &model.ema {
        Some(ema) => ema.apply_to(&model.params),
        None => model.params.clone(),
    };
    let mut rng = stream(cfg.seed, "sample-dump", &[]);
    let z = prior.ddim_sample(&store, n, data.config.seq_len, &labels, &w, &mut rng)?;
    let labels_arr = ndarray::ArrayD::from_shape_vec(
        ndarray::IxDyn(&[n]),
        labels.iter().map(|&l| l as f64).collect(),
    )
    .unwrap();
    let named = vec![
        ("latents".to_string(), z.clone().into_dyn()),
        ("labels".to_string(), labels_arr),
        ("weights".to_string(), w.into_dyn()),
    ];
    let refs: Vec<(String, &ndarray::ArrayD<f64>)> =
        named.iter().map(|(s, a)| (s.clone(), a)).collect();
    let metas = crate::data::format::tensors::write_tensors(&run_dir.join("samples.affd"), &refs)?;
    let meta_json = serde_json::to_string_pretty(&metas)
        .map_err(|e| Error::Format(format!("sample meta encode: {e}")))?;
    std::fs::write(run_dir.join("samples.json"), meta_json)?;
    Ok(())
}

/// Train/val/test index sets often used together.
pub fn split_of_dataset(data: &PreparedDataset, split: Split) -> &[usize] {
    data.split_indices(split)
}
