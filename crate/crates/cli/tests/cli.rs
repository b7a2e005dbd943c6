use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn tad(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tad")).current_dir(dir).args(args).output().unwrap()
}

fn error_line(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().unwrap_or_default();
    serde_json::from_str(last).unwrap_or_else(|_| panic!("not a JSON error line: {stderr}"))
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    assert!(tad(dir.path(), &["synth", "--out", "suite"]).status.success());
    std::fs::write(
        dir.path().join("run.toml"),
        "seed = 7\nmethod = \"tcogmap\"\nparallelism = 4\n[paths]\nbundles = \"suite/bundles\"\nlabels = \"suite/labels\"\nqa = \"qa.jsonl\"\nruns = \"runs\"\nimages = \"suite\"\n",
    )
    .unwrap();
    dir
}

#[test]
fn config_drives_generation_and_flags_override_it() {
    let dir = setup();
    let d = dir.path();
    assert!(tad(d, &["--config", "run.toml", "generate-qa"]).status.success());
    let from_config = std::fs::read(d.join("qa.jsonl")).unwrap();
    assert!(tad(d, &["--config", "run.toml", "generate-qa", "--seed", "7", "--out", "again.jsonl"]).status.success());
    assert_eq!(from_config, std::fs::read(d.join("again.jsonl")).unwrap());
    assert!(tad(d, &["--config", "run.toml", "generate-qa", "--seed", "8", "--out", "other.jsonl"]).status.success());
    assert_ne!(from_config, std::fs::read(d.join("other.jsonl")).unwrap());

    let ego = tad(d, &["--config", "run.toml", "generate-qa", "--non-ego-only", "--tasks", "temporal_object_localization", "--out", "obj.jsonl"]);
    assert!(ego.status.success());
    let text = std::fs::read_to_string(d.join("obj.jsonl")).unwrap();
    assert!(text.lines().count() > 0);
    assert!(text.lines().all(|l| l.contains("\"task\":\"temporal_object_localization\"") || l.contains("temporal_object_localization")));
}

#[test]
fn errors_are_single_json_lines_with_keys() {
    let dir = setup();
    let d = dir.path();
    std::fs::write(d.join("bad.toml"), "[segments]\nnum_segments = 0\n").unwrap();
    let out = tad(d, &["--config", "bad.toml", "partition", "--bundles", "suite/bundles"]);
    assert!(!out.status.success());
    assert_eq!(error_line(&out)["key"], "segments");

    let out = tad(d, &["generate-qa", "--bundles", "missing", "--labels", "suite/labels", "--out", "x.jsonl"]);
    assert!(!out.status.success());
    assert_eq!(error_line(&out)["key"], "bundles");

    let out = tad(d, &["--config", "run.toml", "run", "--ablation", "sideways", "--endpoint", "mock"]);
    assert_eq!(error_line(&out)["key"], "ablation");

    let out = tad(d, &["chance", "--policy", "psychic", "--config", "run.toml"]);
    assert_eq!(error_line(&out)["key"], "policy");
}

#[test]
fn run_resumes_and_report_enforces_the_parse_limit() {
    let dir = setup();
    let d = dir.path();
    assert!(tad(d, &["--config", "run.toml", "generate-qa"]).status.success());
    let select = ["--tasks", "exact_answer_action_recognition,multiple_choice_action_recognition", "--ego-only"];
    let mut args = vec!["--config", "run.toml", "run", "--endpoint", "mock", "--out", "runs/tc.jsonl"];
    args.extend(select);
    let first = tad(d, &args);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let lines = std::fs::read_to_string(d.join("runs/tc.jsonl")).unwrap().lines().count();
    assert!(lines > 0);
    assert!(d.join("runs/tc.config.json").exists());

    // simulate an interrupted run: drop the last record and tear the one before it
    let text = std::fs::read_to_string(d.join("runs/tc.jsonl")).unwrap();
    let kept: Vec<&str> = text.lines().take(lines - 2).collect();
    let torn = &text.lines().nth(lines - 2).unwrap()[..20];
    std::fs::write(d.join("runs/tc.jsonl"), format!("{}\n{torn}", kept.join("\n"))).unwrap();
    let second = tad(d, &args);
    assert!(second.status.success());
    let stderr = String::from_utf8_lossy(&second.stderr);
    assert!(stderr.contains("answered 2,"), "{stderr}");
    let records: Vec<Value> =
        std::fs::read_to_string(d.join("runs/tc.jsonl")).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), lines);
    assert!(records.iter().all(|r| r["score"] == 1.0));

    let ok = tad(d, &["report", "--run", "runs/tc.jsonl", "--max-unparseable", "0", "--json", "report.json"]);
    assert!(ok.status.success());
    let report: Value = serde_json::from_slice(&std::fs::read(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["macro_average"], 100.0);

    let mut blind = vec!["--config", "run.toml", "run", "--endpoint", "mock", "--ablation", "blind", "--out", "runs/blind.jsonl"];
    blind.extend(select);
    assert!(tad(d, &blind).status.success());
    let strict = tad(d, &["report", "--run", "runs/blind.jsonl", "--max-unparseable", "0.01"]);
    assert!(!strict.status.success());
    assert_eq!(error_line(&strict)["key"], "max_unparseable");
}

#[test]
fn score_command_matches_perfect_answers() {
    let dir = setup();
    let d = dir.path();
    assert!(tad(d, &["--config", "run.toml", "generate-qa"]).status.success());
    let items: Vec<tad_core::qa::QaItem> =
        std::fs::read_to_string(d.join("qa.jsonl")).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let answers: String = items
        .iter()
        .map(|i| serde_json::json!({"id": i.id, "raw": tad_core::eval::perfect_answer(i)}).to_string() + "\n")
        .collect();
    std::fs::write(d.join("answers.jsonl"), answers).unwrap();
    assert!(tad(d, &["--config", "run.toml", "score", "--answers", "answers.jsonl", "--out", "scored.jsonl"]).status.success());
    let report = tad(d, &["report", "--run", "scored.jsonl", "--json", "r.json"]);
    assert!(report.status.success());
    let r: Value = serde_json::from_slice(&std::fs::read(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(r["macro_average"], 100.0);
    assert_eq!(r["total"], items.len());
}
