use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use intentmob::harness::{ExperimentConfig, ExperimentReport, PredictionsFile, RefinedFile};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_intentmob"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "intentmob {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn quick_config(dir: &Path) -> PathBuf {
    let mut c = ExperimentConfig::quick();
    c.clip.epochs = 2;
    c.predictor.model.base_epochs = 3;
    c.predictor.model.fusion_epochs = 2;
    let path = dir.join("quick.toml");
    std::fs::write(&path, c.to_toml()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn example_config_parses_to_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/experiment.toml");
    let c = ExperimentConfig::load(&path).unwrap();
    assert_eq!(c, ExperimentConfig::default());
}

#[test]
fn show_config_round_trips() {
    let out = run(&["show-config", "--quick", "--seed", "9"]);
    let c = ExperimentConfig::from_toml(&stdout(&out)).unwrap();
    let mut expected = ExperimentConfig::quick();
    expected.seed = 9;
    assert_eq!(c, expected);
}

#[test]
fn staged_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = quick_config(d);
    let corpora = d.join("corpora");
    let space = d.join("space.json");
    let index = d.join("index.json");
    let clip = d.join("clip.json");
    let pred = d.join("pred.json");
    let refined = d.join("refined.json");
    let model = d.join("model.json");

    run(&["generate-world", "--config", s(&cfg), "--seed", "4", "--out", s(&d.join("w"))]);
    assert!(d.join("w/world.json").exists());
    run(&["generate-corpora", "--config", s(&cfg), "--seed", "4", "--out", s(&corpora)]);
    for f in ["world.json", "d_ns.jsonl", "d_ds.jsonl", "d_nt.jsonl", "d_dt.jsonl", "split.json"] {
        assert!(corpora.join(f).exists(), "{f}");
    }
    run(&["fit-space", "--config", s(&cfg), "--corpora", s(&corpora), "--out", s(&space)]);
    run(&["build-index", "--corpora", s(&corpora), "--space", s(&space), "--out", s(&index)]);

    let first = std::fs::read_to_string(corpora.join("d_dt.jsonl")).unwrap();
    let line = first.lines().nth(1).unwrap();
    let id = serde_json::from_str::<serde_json::Value>(line).unwrap()["id"]
        .as_str()
        .unwrap()
        .to_string();
    let table = stdout(&run(&[
        "query-index", "--index", s(&index), "--space", s(&space), "--corpora", s(&corpora),
        "--traj", &id, "--level", "4", "--k", "2",
    ]));
    assert!(table.contains("rank"));
    // Two source and two target rows below the two header lines.
    assert_eq!(table.lines().count(), 2 + 4, "{table}");

    run(&["train-clip", "--config", s(&cfg), "--corpora", s(&corpora), "--space", s(&space), "--out", s(&clip)]);
    run(&["predict-intentions", "--corpora", s(&corpora), "--space", s(&space), "--clip", s(&clip), "--out", s(&pred)]);
    let p: PredictionsFile = serde_json::from_str(&std::fs::read_to_string(&pred).unwrap()).unwrap();
    assert!(!p.samples.is_empty());

    run(&[
        "refine", "--config", s(&cfg), "--backend", "stub", "--in", s(&pred), "--index", s(&index),
        "--space", s(&space), "--out", s(&refined),
    ]);
    let r: RefinedFile = serde_json::from_str(&std::fs::read_to_string(&refined).unwrap()).unwrap();
    assert_eq!(r.samples.len(), p.samples.len());
    assert!(r.samples.iter().all(|x| x.references > 0 && x.prefix));

    run(&[
        "train-predictor", "--config", s(&cfg), "--corpora", s(&corpora), "--base", "freq", "--mode", "concat",
        "--space", s(&space), "--out", s(&model),
    ]);
    let rankings = d.join("rank.jsonl");
    let table = stdout(&run(&["predict", "--model", s(&model), "--refined", s(&refined), "--out", s(&rankings)]));
    assert!(table.starts_with("rows"));
    assert!(table.contains("concat"));
    let lines = std::fs::read_to_string(&rankings).unwrap();
    assert_eq!(lines.lines().count(), r.samples.len());

    run(&["vocab", "export", "--config", s(&cfg), "--out", s(&d.join("vocab.txt"))]);
    assert!(d.join("vocab.txt").exists());
}

#[test]
fn refine_without_llm_keeps_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = quick_config(d);
    let corpora = d.join("c");
    let (space, index, clip, pred, refined) =
        (d.join("s.json"), d.join("i.json"), d.join("m.json"), d.join("p.json"), d.join("r.json"));
    run(&["generate-corpora", "--config", s(&cfg), "--out", s(&corpora)]);
    run(&["fit-space", "--config", s(&cfg), "--corpora", s(&corpora), "--out", s(&space)]);
    run(&["build-index", "--corpora", s(&corpora), "--space", s(&space), "--out", s(&index)]);
    run(&["train-clip", "--config", s(&cfg), "--corpora", s(&corpora), "--space", s(&space), "--out", s(&clip)]);
    run(&["predict-intentions", "--corpora", s(&corpora), "--space", s(&space), "--clip", s(&clip), "--out", s(&pred)]);
    run(&[
        "refine", "--backend", "stub", "--in", s(&pred), "--index", s(&index), "--space", s(&space),
        "--out", s(&refined), "--ablate", "llm_refining,rag",
    ]);
    let r: RefinedFile = serde_json::from_str(&std::fs::read_to_string(&refined).unwrap()).unwrap();
    assert!(r
        .samples
        .iter()
        .all(|x| x.refinement.class == x.sample.predicted_class && x.references == 0));
}

#[test]
fn run_emits_json_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = quick_config(d);
    let out = d.join("out");
    let json = stdout(&run(&["run", "--config", s(&cfg), "--ablate", "rag", "--json", "--out", s(&out)]));
    let report: ExperimentReport = serde_json::from_str(&json).unwrap();
    assert_eq!(report.variant, "w/o rag");
    assert!(!report.ablation.rag);
    assert_eq!(std::fs::read_to_string(out.join("report.json")).unwrap(), json);
    let table = std::fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(table.contains("modulated/disaster"));
    let samples = std::fs::read_to_string(out.join("samples.jsonl")).unwrap();
    assert_eq!(samples.lines().count(), report.audit.samples);
}

#[test]
fn rejects_bad_arguments() {
    let bad_backend = bin()
        .args(["refine", "--backend", "gpt", "--in", "x", "--index", "y", "--space", "z", "--out", "w"])
        .output()
        .unwrap();
    assert!(!bad_backend.status.success());
    assert!(String::from_utf8_lossy(&bad_backend.stderr).contains("unknown backend"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    let bad_flag = bin().args(["run", "--config", s(&cfg), "--ablate", "memory"]).output().unwrap();
    assert!(!bad_flag.status.success());

    let bad_config = dir.path().join("bad.toml");
    std::fs::write(&bad_config, "[world]\nno_such_key = 1\n").unwrap();
    let out = bin().args(["run", "--config", s(&bad_config)]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
}
