//! Command-line surface: dataset generation, training, evaluation, the
//! ablation and seed harnesses, robustness and efficiency suites, and
//! report regeneration.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data or format error,
//! 3 numerical abort.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::Config;
use crate::data::{collate, generate_synthetic, load_and_prepare, PreparedDataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{compute_report, robustness_suite, RobustnessCondition};
use crate::model::{Ablation, AffectDiff};
use crate::report::{
    emit_plot_data, read_epoch_log, write_ablation_csv, write_efficiency_csv, write_metrics_txt,
    write_per_class_f1_csv, write_robustness_csv, write_run_manifest, write_seed_curves,
    AblationRow,
};
use crate::train::{evaluate_split, load_checkpoint, train, TrainConfig};

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "AFFD_OUT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "affect-diff", version, about = "Imbalanced tri-modal sequence classification with a causal graph, variational bottleneck, and latent diffusion prior")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// Config file (TOML). Overrides the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in preset: desk (default), paper, or sentiment.
    #[arg(long)]
    preset: Option<String>,
    /// Dotted-key overrides, e.g. --set train.lr=1e-3 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (default: $AFFD_OUT_ROOT/<verb> or runs/<verb>).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Verb {
    /// Generate a synthetic dataset in the portable format.
    GenData {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train one model and evaluate the best checkpoint on the test split.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Dataset directory (portable format).
        #[arg(long)]
        data: PathBuf,
        /// Resume from this run's best checkpoint after a crash.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on a dataset split.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory (manifest.json + tensors.affd).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split to evaluate: train, val, or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train all six single-toggle variants and emit the comparison table.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
        /// Run the variants concurrently (disjoint output subdirectories).
        #[arg(long)]
        parallel: bool,
    },
    /// Evaluate a checkpoint under missing-modality and corruption probes.
    Robustness {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Parameter counts and forward latency for the configured model.
    Efficiency {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train seeds 42/43/44 and emit the overlay curve data.
    Seeds {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        parallel: bool,
    },
    /// Regenerate tables and plot data from a run's stored logs.
    Report {
        /// Run directory holding epochs.jsonl and friends.
        #[arg(long)]
        run: PathBuf,
    },
}

fn default_out(verb: &str) -> PathBuf {
    let root = std::env::var(OUT_ROOT_ENV).unwrap_or_else(|_| "runs".into());
    Path::new(&root).join(verb)
}

fn out_dir(common: &CommonArgs, verb: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| default_out(verb))
}

/// Entry point used by the binary and by tests. Never panics on user error.
pub fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version with success-style errors
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.verb {
        Verb::GenData { common } => gen_data(&common),
        Verb::Train { common, data, resume } => train_verb(&common, &data, resume),
        Verb::Evaluate {
            common,
            data,
            checkpoint,
            split,
        } => evaluate_verb(&common, &data, &checkpoint, &split),
        Verb::Ablate { common, data, parallel } => ablate(&common, &data, parallel),
        Verb::Robustness {
            common,
            data,
            checkpoint,
        } => robustness(&common, &data, &checkpoint),
        Verb::Efficiency { common } => efficiency(&common),
        Verb::Seeds { common, data, parallel } => seeds(&common, &data, parallel),
        Verb::Report { run } => report(&run),
    }
}

fn resolve_config(common: &CommonArgs) -> Result<Config> {
    Config::resolve(common.config.as_deref(), common.preset.as_deref(), &common.overrides)
}

fn gen_data(common: &CommonArgs) -> Result<()> {
    let cfg = resolve_config(common)?;
    let out = out_dir(common, "dataset");
    generate_synthetic(&out, &cfg.data, &cfg.synthetic)?;
    let report = crate::data::ingest(&out, &cfg.data)?;
    let mut counts = vec![0usize; cfg.data.classes];
    for s in &report.samples {
        counts[s.label] += 1;
    }
    println!("wrote {} samples to {}", report.samples.len(), out.display());
    for (c, n) in counts.iter().enumerate() {
        println!(
            "class {c}: {n} ({:.1}%)",
            100.0 * *n as f64 / report.samples.len() as f64
        );
    }
    Ok(())
}

/// Shared: train into `run_dir` and evaluate the best checkpoint on test.
fn train_into(
    cfg: &Config,
    train_cfg: &TrainConfig,
    data: &PreparedDataset,
    dataset_dir: &Path,
    run_dir: &Path,
    resume: bool,
) -> Result<crate::train::RunArtifacts> {
    let resume_path = run_dir.join("checkpoint-best");
    let resume_from = if resume {
        if !resume_path.join("manifest.json").is_file() {
            return Err(Error::Usage(format!(
                "--resume requested but {} has no checkpoint",
                resume_path.display()
            )));
        }
        Some(resume_path.as_path())
    } else {
        None
    };
    let artifacts = train(data, &cfg.model_config(), train_cfg, run_dir, resume_from)?;

    // Test-split evaluation from the best checkpoint.
    if !data.splits.test.is_empty() {
        let loaded = load_checkpoint(&run_dir.join("checkpoint-best"))?;
        let (preds, labels, scores) =
            evaluate_split(&loaded.model, data, &data.splits.test, train_cfg.batch)?;
        let report = compute_report(&preds, &labels, scores.view(), data.config.classes)?;
        let eval_dir = run_dir.join("eval");
        std::fs::create_dir_all(&eval_dir)?;
        write_metrics_txt(&report, &eval_dir.join("metrics.txt"))?;
        write_per_class_f1_csv(&report, &eval_dir.join("per_class_f1.csv"))?;
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::Format(format!("metrics encode: {e}")))?;
        std::fs::write(eval_dir.join("metrics.json"), json)?;
    }

    let mut snapshot = cfg.clone();
    snapshot.train = train_cfg.clone();
    std::fs::write(run_dir.join("config.toml"), snapshot.to_toml()?)?;
    emit_plot_data(run_dir)?;
    write_run_manifest(run_dir, &snapshot.to_toml()?, &[train_cfg.seed], Some(dataset_dir))?;
    Ok(artifacts)
}

fn train_verb(common: &CommonArgs, dataset_dir: &Path, resume: bool) -> Result<()> {
    let cfg = resolve_config(common)?;
    let out = out_dir(common, "train");
    let data = load_and_prepare(dataset_dir, &cfg.data)?;
    let artifacts = train_into(&cfg, &cfg.train, &data, dataset_dir, &out, resume)?;
    println!(
        "trained {} epochs; best val balanced accuracy {:.4} at epoch {}",
        artifacts.epochs_run, artifacts.best_val_balacc, artifacts.best_epoch
    );
    println!("artifacts in {}", out.display());
    Ok(())
}

fn parse_split(name: &str) -> Result<Split> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(Error::Usage(format!("unknown split '{other}'"))),
    }
}

fn evaluate_verb(common: &CommonArgs, dataset_dir: &Path, checkpoint: &Path, split: &str) -> Result<()> {
    let cfg = resolve_config(common)?;
    let out = out_dir(common, "evaluate");
    std::fs::create_dir_all(&out)?;
    let split = parse_split(split)?;
    let loaded = load_checkpoint(checkpoint)?;
    let data = load_and_prepare(dataset_dir, &loaded.model.data_cfg)?;
    let indices = data.split_indices(split);
    let (preds, labels, scores) = evaluate_split(&loaded.model, &data, indices, cfg.train.batch)?;
    let report = compute_report(&preds, &labels, scores.view(), data.config.classes)?;
    write_metrics_txt(&report, &out.join("metrics.txt"))?;
    write_per_class_f1_csv(&report, &out.join("per_class_f1.csv"))?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Format(format!("metrics encode: {e}")))?;
    std::fs::write(out.join("metrics.json"), json)?;
    println!(
        "balanced accuracy {:.4}, accuracy {:.4}, macro F1 {:.4}",
        report.balanced_accuracy, report.accuracy, report.macro_f1
    );
    println!("metrics in {}", out.display());
    Ok(())
}

fn run_one_variant(
    cfg: &Config,
    data: &PreparedDataset,
    dataset_dir: &Path,
    run_dir: &Path,
    token: &str,
) -> Result<AblationRow> {
    let train_cfg = cfg.train.apply_ablation(token)?;
    let artifacts = train_into(cfg, &train_cfg, data, dataset_dir, run_dir, false)?;
    let eval_json = run_dir.join("eval/metrics.json");
    let (f1, auroc) = if eval_json.is_file() {
        let report: crate::metrics::MetricsReport =
            serde_json::from_str(&std::fs::read_to_string(eval_json)?)
                .map_err(|e| Error::Format(format!("metrics decode: {e}")))?;
        (report.macro_f1, report.auroc_macro_ovr)
    } else {
        (0.0, None)
    };
    let ablation = Ablation::parse(token)?;
    Ok(AblationRow {
        config: ablation.display_name().to_string(),
        token: token.to_string(),
        val_balacc: artifacts.best_val_balacc,
        delta: 0.0,
        test_macro_f1: f1,
        test_auroc: auroc,
        best_epoch: artifacts.best_epoch,
    })
}

fn ablate(common: &CommonArgs, dataset_dir: &Path, parallel: bool) -> Result<()> {
    let cfg = resolve_config(common)?;
    let out = out_dir(common, "ablate");
    std::fs::create_dir_all(&out)?;
    let data = load_and_prepare(dataset_dir, &cfg.data)?;
    let tokens: Vec<&str> = Ablation::ALL.iter().map(|a| a.token()).collect();

    let results: Vec<Result<AblationRow>> = if parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = tokens
                .iter()
                .map(|token| {
                    let cfg = &cfg;
                    let data = &data;
                    let run_dir = out.join(token);
                    scope.spawn(move || run_one_variant(cfg, data, dataset_dir, &run_dir, token))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("variant thread"))
                .collect()
        })
    } else {
        tokens
            .iter()
            .map(|token| run_one_variant(&cfg, &data, dataset_dir, &out.join(token), token))
            .collect()
    };
    let mut rows: Vec<AblationRow> = results.into_iter().collect::<Result<Vec<_>>>()?;

    let full = rows
        .iter()
        .find(|r| r.token == "none")
        .map(|r| r.val_balacc)
        .unwrap_or(0.0);
    for r in rows.iter_mut() {
        r.delta = r.val_balacc - full;
    }
    write_ablation_csv(&rows, &out.join("ablation_table.csv"))?;
    let mut txt = String::new();
    for r in &rows {
        txt.push_str(&format!(
            "{:<24} val_balacc = {:.4}  delta = {:+.4}\n",
            r.config, r.val_balacc, r.delta
        ));
    }
    std::fs::write(out.join("ablation_table.txt"), &txt)?;
    write_run_manifest(&out, &cfg.to_toml()?, &[cfg.train.seed], Some(dataset_dir))?;
    print!("{txt}");
    println!("table in {}", out.join("ablation_table.csv").display());
    Ok(())
}

fn robustness(common: &CommonArgs, dataset_dir: &Path, checkpoint: &Path) -> Result<()> {
    let cfg = resolve_config(common)?;
    let out = out_dir(common, "robustness");
    std::fs::create_dir_all(&out)?;
    let loaded = load_checkpoint(checkpoint)?;
    let data = load_and_prepare(dataset_dir, &loaded.model.data_cfg)?;
    let test = &data.splits.test;
    if test.is_empty() {
        return Err(Error::Format("test split is empty".into()));
    }
    let batches: Vec<_> = test
        .chunks(cfg.train.batch)
        .map(|idx| collate(&data.samples, idx))
        .collect();
    let model = &loaded.model;
    let rows = robustness_suite(
        &batches,
        data.config.classes,
        &RobustnessCondition::standard_suite(),
        cfg.train.seed,
        |b| model.predict(b).expect("prediction on perturbed batch"),
    )?;
    write_robustness_csv(&rows, &out.join("robustness.csv"))?;
    let mut txt = String::new();
    for r in &rows {
        txt.push_str(&format!(
            "{:<18} macro_f1 = {:.4} ({:+.4})  bal_acc = {:.4} ({:+.4})\n",
            r.condition,
            r.report.macro_f1,
            r.delta_macro_f1,
            r.report.balanced_accuracy,
            r.delta_balanced_accuracy
        ));
    }
    std::fs::write(out.join("robustness.txt"), &txt)?;
    write_run_manifest(&out, &cfg.to_toml()?, &[cfg.train.seed], Some(dataset_dir))?;
    print!("{txt}");
    Ok(())
}

fn efficiency(common: &CommonArgs) -> Result<()> {
    let cfg = resolve_config(common)?;
    let out = out_dir(common, "efficiency");
    std::fs::create_dir_all(&out)?;
    let mut rows = Vec::new();
    for ablation in [Ablation::None, Ablation::NoDiffusion, Ablation::NoVae] {
        let model = AffectDiff::build(&cfg.data, &cfg.model_config(), ablation, cfg.train.seed)?;
        let batch = synthetic_eval_batch(&cfg, 1);
        let stats = crate::metrics::efficiency_stats(
            model.total_params(),
            model.trainable_params(),
            || {
                model.predict(&batch).expect("forward pass");
            },
        );
        println!(
            "{:<24} total {:>10} trainable {:>10} latency {:.2} ms",
            ablation.display_name(),
            stats.total_params,
            stats.trainable_params,
            stats.mean_latency_ms
        );
        rows.push((ablation.display_name().to_string(), stats));
    }
    write_efficiency_csv(&rows, &out.join("efficiency.csv"))?;
    write_run_manifest(&out, &cfg.to_toml()?, &[cfg.train.seed], None)?;
    println!("table in {}", out.join("efficiency.csv").display());
    Ok(())
}

/// Deterministic random inputs shaped by the config, for latency probes.
fn synthetic_eval_batch(cfg: &Config, b: usize) -> crate::data::Batch {
    use rand::Rng;
    let mut rng = crate::rng::stream(cfg.train.seed, "latency-batch", &[]);
    let l = cfg.data.seq_len;
    let mut mk = |d: usize| {
        ndarray::Array3::from_shape_fn((b, l, d), |_| rng.gen_range(-1.0..1.0))
    };
    crate::data::Batch {
        ids: (0..b).map(|i| format!("probe{i}")).collect(),
        text: mk(cfg.data.text_dim),
        audio: mk(cfg.data.audio_dim),
        video: mk(cfg.data.video_dim),
        labels: vec![0; b],
    }
}

fn seeds(common: &CommonArgs, dataset_dir: &Path, parallel: bool) -> Result<()> {
    let cfg = resolve_config(common)?;
    let out = out_dir(common, "seeds");
    std::fs::create_dir_all(&out)?;
    let data = load_and_prepare(dataset_dir, &cfg.data)?;
    let seed_list: [u64; 3] = [42, 43, 44];

    let run_seed = |seed: u64| -> Result<(u64, crate::train::RunArtifacts)> {
        let mut train_cfg = cfg.train.clone();
        train_cfg.seed = seed;
        let run_dir = out.join(format!("seed-{seed}"));
        let artifacts = train_into(&cfg, &train_cfg, &data, dataset_dir, &run_dir, false)?;
        Ok((seed, artifacts))
    };

    let results: Vec<Result<(u64, crate::train::RunArtifacts)>> = if parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = seed_list
                .iter()
                .map(|&s| scope.spawn(move || run_seed(s)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("seed thread")).collect()
        })
    } else {
        seed_list.iter().map(|&s| run_seed(s)).collect()
    };

    let mut per_seed = Vec::new();
    let mut best = Vec::new();
    for r in results {
        let (seed, artifacts) = r?;
        best.push((seed, artifacts.best_val_balacc, artifacts.best_epoch));
        per_seed.push((seed, read_epoch_log(&out.join(format!("seed-{seed}/epochs.jsonl")))?));
    }
    write_seed_curves(&per_seed, &out.join("seed_curves.csv"))?;
    let mean: f64 = best.iter().map(|(_, v, _)| v).sum::<f64>() / best.len() as f64;
    let mut txt = String::new();
    for (s, v, e) in &best {
        txt.push_str(&format!("seed {s}: best val_balacc = {v:.4} at epoch {e}\n"));
    }
    txt.push_str(&format!("mean best val_balacc = {mean:.4}\n"));
    std::fs::write(out.join("seeds_summary.txt"), &txt)?;
    write_run_manifest(&out, &cfg.to_toml()?, &seed_list, Some(dataset_dir))?;
    print!("{txt}");
    Ok(())
}

fn report(run: &Path) -> Result<()> {
    let (written, skipped) = emit_plot_data(run)?;
    for w in &written {
        println!("wrote {}", run.join(w).display());
    }
    for s in &skipped {
        println!("skipped {s}");
    }
    Ok(())
}
