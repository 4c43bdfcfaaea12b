use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vcp_core::checker;
use vcp_core::datagen::PromptExample;
use vcp_core::metrics::Report;
use vcp_core::model::decode::ScoredOutput;
use vcp_core::mr::parse_mr;
use vcp_core::pipeline::PipelineResult;

fn vcp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vcp")).args(args).output().expect("vcp runs")
}

fn ok(args: &[&str]) -> Output {
    let out = vcp(args);
    assert!(
        out.status.success(),
        "vcp {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn lines(p: &Path) -> usize {
    std::fs::read_to_string(p).unwrap().lines().count()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

const TINY: &str = r#"{
  "seeds": 1,
  "held_out_rounds": 2,
  "corpus": {"train": 1000, "val": 20, "test": 20},
  "model": {"d_model": 32, "heads": 2, "enc_layers": 1, "dec_layers": 1, "ff_dim": 64},
  "train": {
    "base": {"stage": "base", "learning_rate": 0.005, "epochs": 10},
    "prompt_init": {"stage": "prompt_init", "learning_rate": 0.01, "epochs": 2},
    "prompt_tune": {"stage": "prompt_tune", "learning_rate": 0.03, "epochs": 2},
    "whole_ablation": {"stage": "whole_model_ablation", "learning_rate": 0.005, "epochs": 2}
  },
  "datagen": {"limit": 20, "max_rounds": 2, "beam": 10},
  "pipeline": {"beam": 3, "sample_n": 3}
}"#;

#[test]
fn gen_corpus_writes_default_splits_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["gen-corpus", "--out", s(&a)]);
    ok(&["gen-corpus", "--out", s(&b)]);
    assert_eq!(lines(&a.join("train.jsonl")), 3000);
    assert_eq!(lines(&a.join("val.jsonl")), 300);
    assert_eq!(lines(&a.join("test.jsonl")), 500);
    for f in ["train.jsonl", "val.jsonl", "test.jsonl", "vocab.txt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn bad_config_values_exit_2_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.json", r#"{"grammar": {"omission_rate": 1.5}}"#);
    let out = vcp(&["gen-corpus", "--config", s(&cfg), "--out", s(&dir.path().join("c"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("omission_rate"));

    let cfg = write(dir.path(), "typo.json", r#"{"sedes": 3}"#);
    let out = vcp(&["gen-corpus", "--config", s(&cfg), "--out", s(&dir.path().join("c"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sedes"));
}

#[test]
fn missing_files_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = vcp(&[
        "eval",
        "--results",
        s(&dir.path().join("none.jsonl")),
        "--references",
        s(&dir.path().join("none.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn prompt_stages_need_a_base_model() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let cfg = write(dir.path(), "tiny.json", TINY);
    ok(&["gen-corpus", "--config", s(&cfg), "--out", s(&corpus)]);
    let data = write(dir.path(), "empty.jsonl", "");
    for stage in ["prompt-init", "prompt-tune", "whole-ablation"] {
        let out = vcp(&[
            "train",
            "--stage",
            stage,
            "--config",
            s(&cfg),
            "--corpus",
            s(&corpus),
            "--data",
            s(&data),
            "--out",
            s(&dir.path().join("p.ckpt")),
        ]);
        assert_eq!(out.status.code(), Some(2), "{stage}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("--model"), "{stage}");
    }
}

#[test]
fn eval_on_the_identity_corpus_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let cfg = write(dir.path(), "clean.json", r#"{"grammar": {"omission_rate": 0.0}}"#);
    ok(&["gen-corpus", "--config", s(&cfg), "--out", s(&corpus)]);
    let refs = corpus.join("test.jsonl");
    let mut results = String::new();
    for line in std::fs::read_to_string(&refs).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let mr = parse_mr(v["mr"].as_str().unwrap()).unwrap();
        let text = v["refs"][0].as_str().unwrap().to_string();
        let initial = ScoredOutput {
            tokens: vec![],
            text: text.clone(),
            logprob: 0.0,
            normalized_logprob: 0.0,
        };
        let r = PipelineResult {
            initial_report: checker::check(&mr, &text),
            mr,
            initial,
            prompted_input: None,
            regenerated: None,
            regenerated_report: None,
            final_text: text,
            rounds_used: 0,
        };
        results.push_str(&serde_json::to_string(&r).unwrap());
        results.push('\n');
    }
    let results = write(dir.path(), "results.jsonl", &results);
    let report_path = dir.path().join("report.json");
    ok(&[
        "eval",
        "--results",
        s(&results),
        "--references",
        s(&refs),
        "--out",
        s(&report_path),
    ]);
    let report: Report = serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report.n, 500);
    assert_eq!(report.bleu, 100.0);
    assert_eq!(report.ser_final, 0.0);
}

/// The experiment and the individual commands, run on the same config,
/// produce identical artifacts.
#[test]
fn experiment_matches_the_individual_commands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write(d, "tiny.json", TINY);
    let exp = d.join("exp");
    ok(&["experiment", "--config", s(&cfg), "--out", s(&exp)]);
    let inst = exp.join("seed_0");

    let corpus = d.join("corpus");
    ok(&["gen-corpus", "--config", s(&cfg), "--out", s(&corpus)]);
    let c = |name: &str| d.join(name);
    let common = ["--config", s(&cfg), "--corpus", s(&corpus)];
    let run = |extra: &[&str]| {
        let mut args: Vec<&str> = extra.to_vec();
        args.extend(common);
        ok(&args);
    };
    run(&["train", "--stage", "base", "--out", s(&c("base.ckpt"))]);
    run(&["datagen", "--kind", "init", "--model", s(&c("base.ckpt")), "--out", s(&c("init.jsonl"))]);
    run(&[
        "train",
        "--stage",
        "prompt-init",
        "--model",
        s(&c("base.ckpt")),
        "--data",
        s(&c("init.jsonl")),
        "--out",
        s(&c("prompt_init.ckpt")),
    ]);
    run(&[
        "datagen",
        "--kind",
        "tune",
        "--model",
        s(&c("base.ckpt")),
        "--prompts",
        s(&c("prompt_init.ckpt")),
        "--out",
        s(&c("tune.jsonl")),
    ]);
    run(&[
        "train",
        "--stage",
        "prompt-tune",
        "--model",
        s(&c("base.ckpt")),
        "--prompts",
        s(&c("prompt_init.ckpt")),
        "--data",
        s(&c("tune.jsonl")),
        "--out",
        s(&c("vcp.ckpt")),
    ]);
    run(&[
        "infer",
        "--mode",
        "vcp",
        "--model",
        s(&c("base.ckpt")),
        "--prompts",
        s(&c("vcp.ckpt")),
        "--out",
        s(&c("results_vcp.jsonl")),
    ]);
    ok(&[
        "eval",
        "--results",
        s(&c("results_vcp.jsonl")),
        "--references",
        s(&corpus.join("test.jsonl")),
        "--mode",
        "vcp",
        "--out",
        s(&c("report_vcp.json")),
    ]);

    for f in ["train.jsonl", "val.jsonl", "test.jsonl", "vocab.txt"] {
        assert_eq!(std::fs::read(corpus.join(f)).unwrap(), std::fs::read(exp.join("corpus").join(f)).unwrap(), "{f}");
    }
    for f in [
        "base.ckpt",
        "init.jsonl",
        "prompt_init.ckpt",
        "tune.jsonl",
        "vcp.ckpt",
        "results_vcp.jsonl",
        "report_vcp.json",
    ] {
        assert_eq!(std::fs::read(c(f)).unwrap(), std::fs::read(inst.join(f)).unwrap(), "{f}");
    }

    // Every tune target passes the checker on its own MR.
    for line in std::fs::read_to_string(c("tune.jsonl")).unwrap().lines() {
        let e: PromptExample = serde_json::from_str(line).unwrap();
        assert!(checker::check(&e.mr, &e.target).is_clean(), "{}", e.target);
    }

    // Prompts trained on another base are refused as an integrity failure.
    let out = vcp(&[
        "infer",
        "--mode",
        "vcp",
        "--config",
        s(&cfg),
        "--corpus",
        s(&corpus),
        "--model",
        s(&inst.join("whole_ablation.ckpt")),
        "--prompts",
        s(&c("vcp.ckpt")),
        "--out",
        s(&c("x.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}
