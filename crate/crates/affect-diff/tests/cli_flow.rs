//! End-to-end exercise of every CLI verb on a tiny configuration, plus the
//! exit-code contract.

use std::path::Path;

use affect_diff::cli::run;

fn cli(args: &[&str]) -> i32 {
    let argv: Vec<String> = std::iter::once("affect-diff".to_string())
        .chain(args.iter().map(|s| s.to_string()))
        .collect();
    run(&argv)
}

fn write_tiny_config(path: &Path) {
    let text = r#"
[data]
text_dim = 12
audio_dim = 8
video_dim = 6
seq_len = 8

[encoder]
hidden = 8
layers = 1
heads = 2
ff_mult = 2

[vae]
latent = 8

[diffusion]
steps = 20
base = 8
ddim_steps = 5

[synthetic]
samples = 90
min_len = 5
max_len = 10

[train]
batch = 16
chunk = 4
epochs = 2
"#;
    std::fs::write(path, text).unwrap();
}

#[test]
fn full_verb_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("tiny.toml");
    write_tiny_config(&cfg_path);
    let cfgs = cfg_path.to_str().unwrap();
    let data = tmp.path().join("dataset");
    let datas = data.to_str().unwrap();

    // gen-data
    assert_eq!(cli(&["gen-data", "--config", cfgs, "--out", datas]), 0);
    assert!(data.join("manifest.jsonl").is_file());
    for m in ["text.affd", "audio.affd", "video.affd"] {
        assert!(data.join(m).is_file(), "missing {m}");
    }

    // train
    let runs = tmp.path().join("run");
    assert_eq!(
        cli(&["train", "--config", cfgs, "--data", datas, "--out", runs.to_str().unwrap()]),
        0
    );
    assert!(runs.join("epochs.jsonl").is_file());
    assert!(runs.join("checkpoint-best/manifest.json").is_file());
    assert!(runs.join("checkpoint-best/tensors.affd").is_file());
    assert!(runs.join("eval/metrics.txt").is_file());
    assert!(runs.join("config.toml").is_file());
    assert!(runs.join("run_manifest.json").is_file());
    assert!(runs.join("plots/val_balacc_curve.csv").is_file());
    assert!(runs.join("plots/warmup_schedule.csv").is_file());

    // the run manifest lists every artifact
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(runs.join("run_manifest.json")).unwrap())
            .unwrap();
    let artifacts: Vec<String> = manifest["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect();
    for expect in ["epochs.jsonl", "eval/metrics.txt", "plots/val_balacc_curve.csv", "config.toml"] {
        assert!(artifacts.contains(&expect.to_string()), "manifest missing {expect}");
    }

    // evaluate
    let ev = tmp.path().join("eval");
    assert_eq!(
        cli(&[
            "evaluate",
            "--config",
            cfgs,
            "--data",
            datas,
            "--checkpoint",
            runs.join("checkpoint-best").to_str().unwrap(),
            "--out",
            ev.to_str().unwrap(),
        ]),
        0
    );
    assert!(ev.join("metrics.txt").is_file());
    let metrics = std::fs::read_to_string(ev.join("metrics.txt")).unwrap();
    assert!(metrics.contains("balanced_accuracy = "));
    assert!(metrics.contains("macro_f1 = "));

    // robustness
    let rb = tmp.path().join("robust");
    assert_eq!(
        cli(&[
            "robustness",
            "--config",
            cfgs,
            "--data",
            datas,
            "--checkpoint",
            runs.join("checkpoint-best").to_str().unwrap(),
            "--out",
            rb.to_str().unwrap(),
        ]),
        0
    );
    let csv = std::fs::read_to_string(rb.join("robustness.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11, "header + 10 conditions");
    assert!(csv.lines().nth(1).unwrap().starts_with("clean,"));
    for cond in ["missing_text", "missing_audio", "missing_vision", "noise_0.5", "frame_mask_0.25"] {
        assert!(csv.contains(cond), "missing condition {cond}");
    }

    // efficiency
    let ef = tmp.path().join("eff");
    assert_eq!(cli(&["efficiency", "--config", cfgs, "--out", ef.to_str().unwrap()]), 0);
    let csv = std::fs::read_to_string(ef.join("efficiency.csv")).unwrap();
    assert!(csv.contains("Full Model"));
    assert!(csv.contains("No Diffusion Prior"));

    // report twice from the same logs: byte-identical output files
    assert_eq!(cli(&["report", "--run", runs.to_str().unwrap()]), 0);
    let before: Vec<(String, Vec<u8>)> = ["plots/val_balacc_curve.csv", "plots/loss_decomposition.csv"]
        .iter()
        .map(|p| (p.to_string(), std::fs::read(runs.join(p)).unwrap()))
        .collect();
    assert_eq!(cli(&["report", "--run", runs.to_str().unwrap()]), 0);
    for (p, bytes) in before {
        assert_eq!(bytes, std::fs::read(runs.join(&p)).unwrap(), "{p} changed across reruns");
    }
}

#[test]
fn seeds_and_ablate_verbs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("tiny.toml");
    write_tiny_config(&cfg_path);
    let cfgs = cfg_path.to_str().unwrap();
    let data = tmp.path().join("dataset");
    let datas = data.to_str().unwrap();
    assert_eq!(cli(&["gen-data", "--config", cfgs, "--out", datas]), 0);

    // seeds: three runs whose manifests differ only in the seed field
    let sd = tmp.path().join("seeds");
    assert_eq!(
        cli(&["seeds", "--config", cfgs, "--data", datas, "--out", sd.to_str().unwrap(), "--set", "train.epochs=1"]),
        0
    );
    for s in [42u64, 43, 44] {
        assert!(sd.join(format!("seed-{s}/epochs.jsonl")).is_file());
        let m: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(sd.join(format!("seed-{s}/checkpoint-best/manifest.json"))).unwrap(),
        )
        .unwrap();
        assert_eq!(m["train_cfg"]["seed"].as_u64().unwrap(), s);
    }
    // configs differ only in the seed
    let mut cfga: toml::Table = std::fs::read_to_string(sd.join("seed-42/config.toml"))
        .unwrap()
        .parse()
        .unwrap();
    let mut cfgb: toml::Table = std::fs::read_to_string(sd.join("seed-43/config.toml"))
        .unwrap()
        .parse()
        .unwrap();
    cfga.get_mut("train").unwrap().as_table_mut().unwrap().remove("seed");
    cfgb.get_mut("train").unwrap().as_table_mut().unwrap().remove("seed");
    assert_eq!(cfga, cfgb);
    assert!(sd.join("seed_curves.csv").is_file());
    let curves = std::fs::read_to_string(sd.join("seed_curves.csv")).unwrap();
    assert!(curves.starts_with("epoch,val_balacc_seed_42,val_balacc_seed_43,val_balacc_seed_44"));

    // ablate: six rows, full-model delta exactly zero
    let ab = tmp.path().join("ablate");
    assert_eq!(
        cli(&["ablate", "--config", cfgs, "--data", datas, "--out", ab.to_str().unwrap(), "--set", "train.epochs=1"]),
        0
    );
    let table = std::fs::read_to_string(ab.join("ablation_table.csv")).unwrap();
    assert_eq!(table.lines().count(), 7, "header + 6 variants");
    let full_row = table.lines().find(|l| l.starts_with("Full Model")).unwrap();
    let delta: f64 = full_row.split(',').nth(3).unwrap().parse().unwrap();
    assert_eq!(delta, 0.0, "the full model's delta column is 0 by definition");
    for token in ["no_diffusion", "no_causal_graph", "gumbel", "no_stop_gradient", "no_vae"] {
        assert!(table.contains(token), "missing ablation row {token}");
        assert!(ab.join(token).join("epochs.jsonl").is_file());
    }
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    // usage error: unknown verb
    assert_eq!(cli(&["frobnicate"]), 1);
    // usage error: bad override key
    let data = tmp.path().join("nonexistent");
    assert_eq!(
        cli(&["train", "--data", data.to_str().unwrap(), "--set", "bogus.key=1", "--out", tmp.path().join("o").to_str().unwrap()]),
        1
    );
    // data/format error: missing dataset
    assert_eq!(
        cli(&["train", "--data", data.to_str().unwrap(), "--out", tmp.path().join("o2").to_str().unwrap()]),
        2
    );
    // help exits 0
    assert_eq!(cli(&["--help"]), 0);
}

#[test]
fn numeric_abort_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("tiny.toml");
    write_tiny_config(&cfg_path);
    let cfgs = cfg_path.to_str().unwrap();
    let data = tmp.path().join("dataset");
    assert_eq!(cli(&["gen-data", "--config", cfgs, "--out", data.to_str().unwrap()]), 0);
    let code = cli(&[
        "train",
        "--config",
        cfgs,
        "--data",
        data.to_str().unwrap(),
        "--out",
        tmp.path().join("blowup").to_str().unwrap(),
        "--set",
        "train.lr=1e18",
        "--set",
        "train.epochs=10",
    ]);
    assert_eq!(code, 3, "NaN abort must exit with code 3");
}
