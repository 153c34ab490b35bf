//! Run outputs: flat key-value metric files, tabular (CSV) files with a
//! stable column order, plot-data emission from stored logs, and the run
//! manifest.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{EfficiencyStats, MetricsReport, RobustnessRow};
use crate::train::EpochRecord;

/// One row of the ablation comparison table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub token: String,
    pub val_balacc: f64,
    /// Signed difference from the full model's val balanced accuracy.
    pub delta: f64,
    pub test_macro_f1: f64,
    pub test_auroc: Option<f64>,
    pub best_epoch: usize,
}

/// Provenance of one run directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_toml: String,
    pub seeds: Vec<u64>,
    /// SHA-256 over the input dataset files and the config snapshot.
    pub input_hash: String,
    pub created_unix: u64,
    /// Every file the run emitted, relative to the run directory.
    pub artifacts: Vec<String>,
}

/// Hash the dataset directory (manifest + modality files) plus the config
/// snapshot.
pub fn input_hash(dataset_dir: Option<&Path>, config_toml: &str) -> Result<String> {
    let mut hasher = Sha256::new();
    hasher.update(config_toml.as_bytes());
    if let Some(dir) = dataset_dir {
        let mut names: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        names.sort();
        for path in names {
            hasher.update(path.file_name().unwrap().to_string_lossy().as_bytes());
            let bytes = std::fs::read(&path)?;
            hasher.update(&bytes);
        }
    }
    Ok(format!("{:x}", hasher.finalize()))
}

/// Write the run manifest, listing every file currently under `run_dir`
/// (except the manifest itself).
pub fn write_run_manifest(
    run_dir: &Path,
    config_toml: &str,
    seeds: &[u64],
    dataset_dir: Option<&Path>,
) -> Result<PathBuf> {
    let mut artifacts = Vec::new();
    collect_files(run_dir, run_dir, &mut artifacts)?;
    artifacts.retain(|a| a != "run_manifest.json");
    artifacts.sort();
    let manifest = RunManifest {
        config_toml: config_toml.to_string(),
        seeds: seeds.to_vec(),
        input_hash: input_hash(dataset_dir, config_toml)?,
        created_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        artifacts,
    };
    let path = run_dir.join("run_manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest encode: {e}")))?;
    std::fs::write(&path, json)?;
    Ok(path)
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(
                path.strip_prefix(root)
                    .unwrap()
                    .to_string_lossy()
                    .replace('\\', "/"),
            );
        }
    }
    Ok(())
}

/// Flat `key = value` metric file.
pub fn write_metrics_txt(report: &MetricsReport, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "balanced_accuracy = {}", report.balanced_accuracy)?;
    writeln!(f, "accuracy = {}", report.accuracy)?;
    writeln!(f, "macro_f1 = {}", report.macro_f1)?;
    match report.auroc_macro_ovr {
        Some(a) => writeln!(f, "auroc_macro_ovr = {a}")?,
        None => writeln!(f, "auroc_macro_ovr = undefined")?,
    }
    for (c, v) in report.per_class_f1.iter().enumerate() {
        writeln!(f, "f1_class_{c} = {v}")?;
    }
    for (c, s) in report.support.iter().enumerate() {
        writeln!(f, "support_class_{c} = {s}")?;
    }
    for (r, row) in report.confusion.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(f, "confusion_row_{r} = {}", cells.join(","))?;
    }
    f.flush()?;
    Ok(())
}

/// Per-class F1 table.
pub fn write_per_class_f1_csv(report: &MetricsReport, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "class,f1,support")?;
    for (c, (v, s)) in report.per_class_f1.iter().zip(report.support.iter()).enumerate() {
        writeln!(f, "{c},{v},{s}")?;
    }
    f.flush()?;
    Ok(())
}

/// Robustness table: one row per condition, stable column order.
pub fn write_robustness_csv(rows: &[RobustnessRow], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "condition,balanced_accuracy,accuracy,macro_f1,auroc_macro_ovr,delta_balanced_accuracy,delta_macro_f1"
    )?;
    for r in rows {
        let auroc = r
            .report
            .auroc_macro_ovr
            .map(|a| a.to_string())
            .unwrap_or_else(|| "".into());
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            r.condition,
            r.report.balanced_accuracy,
            r.report.accuracy,
            r.report.macro_f1,
            auroc,
            r.delta_balanced_accuracy,
            r.delta_macro_f1
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Ablation table: the full model first, then one row per disabled
/// component, each with its signed delta against the full model.
pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "config,token,val_balacc,delta,test_macro_f1,test_auroc,best_epoch")?;
    for r in rows {
        let auroc = r.test_auroc.map(|a| a.to_string()).unwrap_or_default();
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            r.config, r.token, r.val_balacc, r.delta, r.test_macro_f1, auroc, r.best_epoch
        )?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_efficiency_csv(rows: &[(String, EfficiencyStats)], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "model,total_params,trainable_params,mean_latency_ms")?;
    for (name, s) in rows {
        writeln!(f, "{name},{},{},{}", s.total_params, s.trainable_params, s.mean_latency_ms)?;
    }
    f.flush()?;
    Ok(())
}

/// Read `epochs.jsonl` back.
pub fn read_epoch_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Format(format!("missing epoch log {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("epoch log line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

/// Regenerate all plot-data files a run's logs support. Missing inputs are
/// reported as skipped, not fatal. Returns (written, skipped).
pub fn emit_plot_data(run_dir: &Path) -> Result<(Vec<String>, Vec<String>)> {
    let plots = run_dir.join("plots");
    std::fs::create_dir_all(&plots)?;
    let mut written = Vec::new();
    let mut skipped = Vec::new();

    let log_path = run_dir.join("epochs.jsonl");
    if log_path.is_file() {
        let log = read_epoch_log(&log_path)?;

        let p = plots.join("val_balacc_curve.csv");
        let mut f = std::io::BufWriter::new(std::fs::File::create(&p)?);
        writeln!(f, "epoch,val_balanced_accuracy,is_best")?;
        for r in &log {
            writeln!(f, "{},{},{}", r.epoch, r.val_balanced_accuracy, r.is_best)?;
        }
        f.flush()?;
        written.push("plots/val_balacc_curve.csv".into());

        let p = plots.join("causal_weights.csv");
        let mut f = std::io::BufWriter::new(std::fs::File::create(&p)?);
        writeln!(f, "epoch,w_text,w_audio,w_video,notears")?;
        for r in &log {
            writeln!(
                f,
                "{},{},{},{},{}",
                r.epoch, r.causal_weights[0], r.causal_weights[1], r.causal_weights[2], r.notears_value
            )?;
        }
        f.flush()?;
        written.push("plots/causal_weights.csv".into());

        let p = plots.join("loss_decomposition.csv");
        let mut f = std::io::BufWriter::new(std::fs::File::create(&p)?);
        writeln!(f, "epoch,task,kl,diff,causal,recon,total,gamma_diff,gamma_kl,lr,grad_norm_mean")?;
        for r in &log {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.epoch,
                r.loss.task,
                r.loss.kl,
                r.loss.diff,
                r.loss.causal,
                r.loss.recon,
                r.loss.total,
                r.loss.gamma_diff,
                r.loss.gamma_kl,
                r.lr,
                r.grad_norm_mean
            )?;
        }
        f.flush()?;
        written.push("plots/loss_decomposition.csv".into());

        let p = plots.join("warmup_schedule.csv");
        let mut f = std::io::BufWriter::new(std::fs::File::create(&p)?);
        writeln!(f, "epoch,gamma_diff,gamma_kl")?;
        for r in &log {
            writeln!(f, "{},{},{}", r.epoch, r.loss.gamma_diff, r.loss.gamma_kl)?;
        }
        f.flush()?;
        written.push("plots/warmup_schedule.csv".into());
    } else {
        skipped.push("epochs.jsonl (missing)".into());
    }

    // Tables copied into plot-data form when the corresponding run files
    // exist.
    for (src, dst) in [
        ("eval/per_class_f1.csv", "plots/per_class_f1.csv"),
        ("robustness.csv", "plots/robustness.csv"),
        ("efficiency.csv", "plots/efficiency.csv"),
        ("ablation_table.csv", "plots/ablation_table.csv"),
        ("seed_curves.csv", "plots/seed_curves.csv"),
    ] {
        let s = run_dir.join(src);
        if s.is_file() {
            std::fs::copy(&s, run_dir.join(dst))?;
            written.push(dst.into());
        } else {
            skipped.push(format!("{src} (missing)"));
        }
    }

    Ok((written, skipped))
}

/// Overlay of validation curves across seed runs.
pub fn write_seed_curves(per_seed: &[(u64, Vec<EpochRecord>)], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = std::iter::once("epoch".to_string())
        .chain(per_seed.iter().map(|(s, _)| format!("val_balacc_seed_{s}")))
        .collect();
    writeln!(f, "{}", header.join(","))?;
    let max_len = per_seed.iter().map(|(_, l)| l.len()).max().unwrap_or(0);
    for e in 0..max_len {
        let mut row = vec![e.to_string()];
        for (_, log) in per_seed {
            row.push(
                log.get(e)
                    .map(|r| r.val_balanced_accuracy.to_string())
                    .unwrap_or_default(),
            );
        }
        writeln!(f, "{}", row.join(","))?;
    }
    f.flush()?;
    Ok(())
}
