mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use common::MockServer;

const BIN: &str = env!("CARGO_BIN_EXE_hierprompt");

fn fixture(name: &str) -> String {
    format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("OPENAI_API_KEY").output().unwrap()
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// synth, classify and evaluate into `dir`.
fn pipeline(dir: &Path, branching: &str, crm: bool) {
    ok(&["synth", "--branching", branching, "--seed", "7", "--out", s(dir)]);
    let mut classify = vec![
        "classify",
        "--hierarchy",
        s(&dir.join("hierarchy.tsv")),
        "--text",
        s(&dir.join("text.jsonl")),
        "--images",
        s(&dir.join("images.jsonl")),
        "--strategy",
        "embedding",
        "--out",
        s(&dir.join("predictions.jsonl")),
    ]
    .into_iter()
    .map(String::from)
    .collect::<Vec<_>>();
    classify.push(if crm { "--crm".into() } else { "--no-crm".into() });
    ok(&classify.iter().map(String::as_str).collect::<Vec<_>>());
    ok(&[
        "evaluate",
        "--hierarchy",
        s(&dir.join("hierarchy.tsv")),
        "--predictions",
        s(&dir.join("predictions.jsonl")),
        "--dataset",
        "synth",
        "--histogram",
        s(&dir.join("histogram.csv")),
        "--out",
        s(&dir.join("report.json")),
    ]);
}

#[test]
fn build_prompts_matches_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("prompts.jsonl");
    ok(&["build-prompts", "--hierarchy", &fixture("tools.tsv"), "--plan", "lp,ap,g", "--out", s(&out)]);
    let got = fs::read_to_string(&out).unwrap();
    assert_eq!(got, fs::read_to_string(fixture("tools_prompts.jsonl")).unwrap());

    let cleaver: Vec<String> = got
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v["class"] == "cleaver")
        .map(|v| v["text"].as_str().unwrap().to_string())
        .collect();
    let mut want = vec![
        "How does cleaver look differently from letter opener?",
        "How does cleaver look differently from hatchet?",
        "How does cleaver look differently from power tool?",
        "What does cleaver (a type of knife) look like?",
        "Describe a picture of cleaver (a type of knife).",
        "What are the unique characteristics of cleaver (a type of knife)?",
        "What does cleaver (a type of edge tool) look like?",
        "Describe a picture of cleaver (a type of edge tool).",
        "What are the unique characteristics of cleaver (a type of edge tool)?",
    ];
    let mut got_sorted: Vec<&str> = cleaver.iter().map(String::as_str).collect();
    got_sorted.sort();
    want.sort();
    assert_eq!(got_sorted, want);
}

#[test]
fn every_plan_is_accepted_and_bad_plans_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p.jsonl");
    for plan in ["lp", "ap", "g", "lp,ap", "lp,g", "ap,g", "lp,ap,g"] {
        ok(&["build-prompts", "--hierarchy", &fixture("tools.tsv"), "--plan", plan, "--out", s(&out)]);
    }
    for plan in ["", "lp,xx", "all"] {
        let r = run(&["build-prompts", "--hierarchy", &fixture("tools.tsv"), "--plan", plan, "--out", s(&out)]);
        assert_eq!(r.status.code(), Some(2), "{plan}");
    }
}

#[test]
fn data_errors_exit_1_with_error_record() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.tsv");
    fs::write(&bad, "ROOT\ttool\nknife\tedge tool\nknife\tpower tool\n").unwrap();
    let r = run(&["build-prompts", "--hierarchy", s(&bad), "--out", s(&dir.path().join("o"))]);
    assert_eq!(r.status.code(), Some(1));
    let record: serde_json::Value = serde_json::from_slice(&r.stderr).unwrap();
    assert_eq!(record["error"], "MultiParent");
    assert_eq!(record["module"], "hierarchy");
}

#[test]
fn crm_on_a_flat_hierarchy_changes_nothing() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path(), "6", false);
    pipeline(b.path(), "6", true);
    let predicted = |d: &Path| -> Vec<String> {
        fs::read_to_string(d.join("predictions.jsonl"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["predicted"].to_string())
            .collect()
    };
    assert_eq!(predicted(a.path()), predicted(b.path()));
}

#[test]
fn full_pipeline_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path(), "2,4,4", true);
    pipeline(b.path(), "2,4,4", true);
    for f in ["hierarchy.tsv", "text.jsonl", "images.jsonl", "predictions.jsonl", "report.json", "histogram.csv"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f} differs"
        );
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["n_total"], 320);
    assert_eq!(report["strategy"], "embedding+crm");
    assert_eq!(report["dataset"], "synth");
}

#[test]
fn aggregated_class_file_classifies_like_prompt_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&[
        "synth", "--branching", "2,3", "--prompts-per-class", "4", "--prompt-noise", "0.2", "--out", s(d),
    ]);
    let h = d.join("hierarchy.tsv");
    ok(&["aggregate", "--hierarchy", s(&h), "--text", s(&d.join("text.jsonl")), "--out", s(&d.join("classes.bin"))]);
    assert!(d.join("classes.bin.json").exists());
    for (text, out) in [("text.jsonl", "p1.jsonl"), ("classes.bin", "p2.jsonl")] {
        ok(&[
            "classify", "--hierarchy", s(&h), "--text", s(&d.join(text)), "--images", s(&d.join("images.jsonl")),
            "--out", s(&d.join(out)),
        ]);
    }
    assert_eq!(fs::read(d.join("p1.jsonl")).unwrap(), fs::read(d.join("p2.jsonl")).unwrap());

    ok(&[
        "classify", "--hierarchy", s(&h), "--text", s(&d.join("text.jsonl")), "--images", s(&d.join("images.jsonl")),
        "--strategy", "logit", "--out", s(&d.join("p3.jsonl")),
    ]);
    let first = fs::read_to_string(d.join("p3.jsonl")).unwrap();
    assert!(first.lines().next().unwrap().contains("\"strategy\":\"logit\""));
}

#[test]
fn run_manifest_and_average() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--branching", "2,4", "--out", s(d)]);
    let manifest = serde_json::json!({
        "hierarchy": "hierarchy.tsv",
        "plan": "lp,ap,g",
        "prompt_manifest": "out/prompts.jsonl",
        "text_embeddings": "text.jsonl",
        "images": "images.jsonl",
        "predictions": "out/predictions.jsonl",
        "report": "out/report.json",
        "crm": true,
        "dataset": "toy",
    });
    fs::write(d.join("run.json"), manifest.to_string()).unwrap();
    ok(&["run", "--manifest", s(&d.join("run.json"))]);
    assert!(d.join("out/prompts.jsonl").exists());
    let report = d.join("out/report.json");
    ok(&["average", s(&report), s(&report), "--out", s(&d.join("avg.csv"))]);
    let csv = fs::read_to_string(d.join("avg.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().last().unwrap().starts_with("average,"));

    let missing = serde_json::json!({
        "hierarchy": "nope.tsv", "text_embeddings": "text.jsonl", "images": "images.jsonl",
        "predictions": "p.jsonl", "report": "r.json",
    });
    fs::write(d.join("bad.json"), missing.to_string()).unwrap();
    let r = run(&["run", "--manifest", s(&d.join("bad.json"))]);
    assert_eq!(r.status.code(), Some(1));
    assert!(!d.join("p.jsonl").exists());
}

#[test]
fn gen_image_prompts_against_mock_server() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let prompts = d.join("prompts.jsonl");
    ok(&["build-prompts", "--hierarchy", &fixture("tools.tsv"), "--plan", "g", "--out", s(&prompts)]);

    let r = run(&["gen-image-prompts", "--prompts", s(&prompts), "--out", s(&d.join("c"))]);
    assert_eq!(r.status.code(), Some(1));
    let record: serde_json::Value = serde_json::from_slice(&r.stderr).unwrap();
    assert_eq!(record["error"], "ConfigError");

    let server = MockServer::start(vec![]);
    let gen = |out: &str| {
        let o = Command::new(BIN)
            .args([
                "gen-image-prompts",
                "--prompts",
                s(&prompts),
                "--hierarchy",
                &fixture("tools.tsv"),
                "--base-url",
                &server.base_url,
                "--cache-dir",
                s(&d.join("cache")),
                "--out",
                s(&d.join(out)),
            ])
            .env("OPENAI_API_KEY", "k")
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    gen("c1");
    let cold = server.requests();
    assert_eq!(cold, 21);
    gen("c2");
    assert_eq!(server.requests(), cold);
    for f in fs::read_dir(d.join("c1")).unwrap() {
        let name = f.unwrap().file_name();
        assert_eq!(
            fs::read(d.join("c1").join(&name)).unwrap(),
            fs::read(d.join("c2").join(&name)).unwrap()
        );
    }
}
