use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::Command;

use stdfnc_cli::config::{DataSource, ExperimentConfig};
use stdfnc_cli::report::RunManifest;
use stdfnc_cli::{run_experiment, CliError};

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("stdfnc-pipeline-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn tiny(output: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::desk(output);
    let DataSource::Synth { cohort } = &mut c.data else { unreachable!() };
    cohort.n_negative = 8;
    cohort.positive[0].n_subjects = 8;
    cohort.timepoints = 30;
    c.train.epochs = 2;
    c.folds = 2;
    c.interpret.random_maps = 2;
    c
}

fn files_under(root: &Path) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_string_lossy().into_owned());
            }
        }
    }
    out
}

fn listed(m: &RunManifest) -> BTreeSet<String> {
    m.stages.values().flat_map(|s| s.outputs.iter().cloned()).collect()
}

#[test]
fn every_output_is_listed_and_reruns_are_identical() {
    let a = scratch("a");
    let summary = run_experiment(&tiny(&a), 1).unwrap();
    assert_eq!(summary.folds.len(), 2);
    assert_eq!(summary.cams.len(), 2);
    let m = &summary.manifest;
    for stage in ["config", "synth", "dfnc", "train", "eval", "cam", "report"] {
        assert_eq!(m.stages[stage].status, "ok", "{stage}");
    }
    let mut on_disk = files_under(&a);
    assert!(on_disk.remove("manifest.json"));
    assert_eq!(on_disk, listed(m));
    for f in ["checkpoints/fold1.ckpt", "checkpoints/fold2.ckpt", "metrics.csv", "attention/fold1.json", "report/fold1_difference.svg", "report/summary.md"] {
        assert!(on_disk.contains(f), "{f}");
    }
    assert!(m.seeds.contains_key("root") && m.seeds.contains_key("train.fold2"));

    // two threads, same bytes
    let b = scratch("b");
    run_experiment(&tiny(&b), 2).unwrap();
    let b_files = files_under(&b);
    for f in &on_disk {
        if f == "config.json" {
            continue;
        }
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    assert_eq!(b_files.len(), on_disk.len() + 1);

    // paired comparison against the first run
    let c = scratch("c");
    let mut cfg = tiny(&c);
    cfg.baseline_metrics = Some(a.join("metrics.csv"));
    run_experiment(&cfg, 1).unwrap();
    let ttest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(c.join("ttest.json")).unwrap()).unwrap();
    assert_eq!(ttest["acc"]["p"], 1.0);
    assert_eq!(ttest["acc"]["t"], 0.0);
    for d in [a, b, c] {
        std::fs::remove_dir_all(d).unwrap();
    }
}

#[test]
fn too_few_positives_fail_fast_with_stratification_error() {
    let dir = scratch("strat");
    let mut c = tiny(&dir);
    let DataSource::Synth { cohort } = &mut c.data else { unreachable!() };
    cohort.positive[0].n_subjects = 3;
    c.folds = 5;
    let err = run_experiment(&c, 1).unwrap_err();
    match &err {
        CliError::Stage { stage, source } => {
            assert_eq!(stage, "prepare");
            assert!(matches!(**source, CliError::Core(stdfnc::Error::Stratification { class: 1, count: 3, k: 5 })), "{source:?}");
        }
        other => panic!("{other:?}"),
    }
    let manifest: RunManifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.stages["prepare"].status, "failed");
    assert!(manifest.stages["prepare"].error.as_ref().unwrap().contains("3 members"));
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn subcommands_run_stage_by_stage() {
    let dir = scratch("cli");
    let config = dir.with_extension("json");
    std::fs::write(&config, tiny(&dir).to_json()).unwrap();
    let bin = env!("CARGO_BIN_EXE_stdfnc");
    let run = |args: &[&str]| Command::new(bin).args(args).arg("--config").arg(&config).output().unwrap();

    let early = run(&["eval"]);
    assert!(!early.status.success());
    assert!(String::from_utf8_lossy(&early.stderr).contains("eval"));

    for stage in ["synth", "dfnc", "train", "eval", "cam", "report"] {
        let out = run(&[stage]);
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let manifest: RunManifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest.stages.values().all(|s| s.status == "ok"));
    let mut on_disk = files_under(&dir);
    on_disk.remove("manifest.json");
    assert_eq!(on_disk, listed(&manifest));

    let printed = Command::new(bin).args(["config", "--seed", "42", "--out", "elsewhere"]).output().unwrap();
    let c = ExperimentConfig::from_json(&String::from_utf8(printed.stdout).unwrap()).unwrap();
    assert_eq!((c.seed, c.output), (42, PathBuf::from("elsewhere")));
    std::fs::remove_dir_all(&dir).unwrap();
    std::fs::remove_file(config).unwrap();
}
