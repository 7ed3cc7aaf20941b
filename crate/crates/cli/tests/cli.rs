//! End-to-end runs of the `routelens` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_routelens"));
    c.env("RUST_LOG", "error");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

struct Planted {
    dir: TempDir,
}

impl Planted {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let model = dir.path().join("model");
        let o = run(&["plant", "--out", model.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        Self { dir }
    }

    fn model(&self) -> String {
        self.dir.path().join("model").display().to_string()
    }

    fn corpus(&self) -> String {
        self.dir.path().join("model/corpus.jsonl").display().to_string()
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn cmd(&self, command: &str, out: &str, extra: &[&str]) -> Output {
        let (model, corpus, out) = (self.model(), self.corpus(), self.out(out).display().to_string());
        let mut args = vec![command, "--model", &model, "--corpus", &corpus, "--template", "toy", "--out", &out];
        args.extend_from_slice(extra);
        run(&args)
    }
}

#[test]
fn config_file_is_merged_and_echoed() {
    let p = Planted::new();
    let cfg = p.out("exp.toml");
    fs::write(
        &cfg,
        format!(
            "model = {:?}\ncorpus = {:?}\ntemplate = \"toy\"\nout = \"results\"\nseed = 7\nmass = 0.8\njobs = 1\n",
            p.model(),
            p.corpus()
        ),
    )
    .unwrap();
    let o = run(&["localize", "--config", cfg.to_str().unwrap(), "--seed", "9"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    // Relative paths resolve against the config file's directory.
    let report = json(p.out("results/localize.json"));
    let meta = &report["metadata"];
    assert_eq!(meta["tool"], "routelens");
    assert_eq!(meta["command"], "localize");
    assert_eq!(meta["seed"], 9);
    assert_eq!(meta["config"]["mass"], 0.8);
    assert_eq!(meta["config"]["template"], "toy");
    assert_eq!(meta["config_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(meta["model_sha256"].as_str().unwrap().len(), 64);
    assert!(meta["created_unix"].as_u64().unwrap() > 0);
    assert_eq!(report["decision_head"], "L1H2");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let p = Planted::new();
    let cfg = p.out("bad.toml");
    fs::write(&cfg, "modle = \"x\"\n").unwrap();
    let o = run(&["localize", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("modle"));
}

#[test]
fn geometry_csv_schema() {
    let p = Planted::new();
    assert_eq!(code(&p.cmd("localize", "o", &[])), 0);
    let o = p.cmd("geometry", "o", &["--format", "csv"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(p.out("o/geometry.csv")).unwrap();
    let mut lines = text.lines();
    let meta = lines.next().unwrap();
    assert!(meta.starts_with("# routelens ") && meta.contains("config_sha256=") && meta.contains("model_sha256="));
    assert_eq!(lines.next().unwrap(), "example_id,condition,x,y,z,vertex");
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert!(!rows.is_empty());
    for r in &rows {
        assert_eq!(r.len(), 6);
        assert!(["clean", "persuasive"].contains(&r[1]), "{r:?}");
        for v in &r[2..5] {
            v.parse::<f64>().unwrap();
        }
        assert!(r[5].parse::<usize>().unwrap() < 4);
    }
    // JSON is always written alongside.
    assert!(p.out("o/geometry.json").exists());
}

#[test]
fn json_only_without_csv_format() {
    let p = Planted::new();
    assert_eq!(code(&p.cmd("prompts", "o", &[])), 0);
    assert!(p.out("o/prompts.json").exists());
    assert!(!p.out("o/prompts.csv").exists());
}

#[test]
fn zero_alpha_matches_baseline() {
    let p = Planted::new();
    for c in ["localize", "qk"] {
        let o = p.cmd(c, "o", &["--folds", "5"]);
        assert_eq!(code(&o), 0, "{c}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = p.cmd("steer", "o", &["--alphas", "0"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s = json(p.out("o/steer.json"));
    let baseline = s["baseline"].as_array().unwrap();
    let curves = s["curves"].as_array().unwrap();
    assert_eq!(baseline.len(), curves.len());
    for (b, c) in baseline.iter().zip(curves) {
        let point = &c["points"][0];
        assert_eq!(point["alpha"], 0.0);
        assert_eq!(point["argmax"], b["argmax"]);
        for (x, y) in point["raw"].as_array().unwrap().iter().zip(b["raw"].as_array().unwrap()) {
            assert!((x.as_f64().unwrap() - y.as_f64().unwrap()).abs() <= 1e-6);
        }
    }
}

#[test]
fn single_example_degenerate_run() {
    let p = Planted::new();
    let one = p.out("one.jsonl");
    let first = fs::read_to_string(p.corpus()).unwrap().lines().next().unwrap().to_string();
    fs::write(&one, first + "\n").unwrap();
    let one = one.display().to_string();
    let out = p.out("single").display().to_string();
    let base = ["--model", &p.model(), "--corpus", &one, "--template", "toy", "--out", &out];
    let args = |c: &'static str, extra: &[&'static str]| {
        let mut v: Vec<String> = vec![c.into()];
        v.extend(base.iter().map(|s| s.to_string()));
        v.extend(extra.iter().map(|s| s.to_string()));
        bin().args(&v).output().unwrap()
    };
    assert_eq!(code(&args("localize", &[])), 0);
    let o = args("geometry", &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let g = json(p.out("single/geometry.json"));
    assert_eq!(g["n_examples"], 1);
    assert_eq!(g["degenerate"], true);
    // Cross-validation cannot split one example.
    let o = args("qk", &["--folds", "2"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("folds"));
}

#[test]
fn exit_codes() {
    let p = Planted::new();
    let missing = p.out("nope").display().to_string();
    let o = run(&["localize", "--model", &missing, "--corpus", &p.corpus()]);
    assert_eq!(code(&o), 2, "missing model");

    let o = p.cmd("localize", "o", &["--alphas", "1:0"]);
    assert_eq!(code(&o), 2, "bad alpha grid");

    let empty = p.out("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let out = p.out("e").display().to_string();
    let o = run(&[
        "localize",
        "--model",
        &p.model(),
        "--corpus",
        empty.to_str().unwrap(),
        "--template",
        "toy",
        "--out",
        &out,
    ]);
    assert_eq!(code(&o), 3, "empty corpus: {}", String::from_utf8_lossy(&o.stderr));

    let o = run(&["localize", "--model", &p.model(), "--corpus", &p.model(), "--out", &out]);
    assert_ne!(code(&o), 0, "directory as corpus");
}

/// A random fixture model where two iterations cannot converge.
#[test]
fn convergence_warning_exit_code() {
    let dir = TempDir::new().unwrap();
    let words = ["the", "capital", "of", "france", "is", "paris", "japan", "tokyo", "city", "summit"];
    let mut lines = String::new();
    for i in 0..40usize {
        let w = |k: usize| words[(i * 7 + k * 3) % words.len()];
        let correct = i % 4;
        let target = (correct + 1 + i % 3) % 4;
        lines.push_str(
            &serde_json::json!({
                "id": format!("h{i}"),
                "question": format!("{} {}", w(0), w(1)),
                "options": [w(2), w(3), w(4), w(5)],
                "correct_index": correct,
                "target_index": target,
                "persuasion_text": format!("{} {} {}", w(6), w(7), w(8)),
            })
            .to_string(),
        );
        lines.push('\n');
    }
    let corpus = dir.path().join("c.jsonl");
    fs::write(&corpus, lines).unwrap();
    let model = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/hf_gpt2");
    let out = dir.path().join("o");
    let args = [
        "qk",
        "--model",
        model.to_str().unwrap(),
        "--corpus",
        corpus.to_str().unwrap(),
        "--template",
        "toy",
        "--out",
        out.to_str().unwrap(),
        "--head",
        "L1H0",
        "--folds",
        "2",
        "--max-iter",
        "2",
    ];
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("did not converge"));
    assert_eq!(json(out.join("qk.json"))["feature"]["converged"], false);
    let mut strict = args.to_vec();
    strict.push("--strict");
    assert_eq!(code(&run(&strict)), 4);
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let p = Planted::new();
    let strip = |v: &mut Value| {
        let m = v["metadata"].as_object_mut().unwrap();
        m.remove("created_unix");
        m.remove("config");
        m.remove("config_sha256");
    };
    let mut reports = Vec::new();
    for jobs in ["1", "3"] {
        let out = format!("j{jobs}");
        for c in ["localize", "geometry"] {
            assert_eq!(code(&p.cmd(c, &out, &["--jobs", jobs])), 0);
        }
        let mut a = json(p.out(&out).join("localize.json"));
        let mut b = json(p.out(&out).join("geometry.json"));
        strip(&mut a);
        strip(&mut b);
        reports.push((a, b));
    }
    assert_eq!(reports[0], reports[1]);
}
