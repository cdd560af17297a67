use std::path::Path;
use std::process::{Command, Output};

fn skimzoom(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skimzoom"))
        .args(args)
        .current_dir(dir)
        .env_remove("SKIMZOOM_BACKEND_URL")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "status {:?}\nstderr: {}", out.status, String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn build_corpus(dir: &Path) {
    ok(&skimzoom(
        dir,
        &["--seed", "5", "dataset", "build", "--synthetic", "6", "--manifest-dir", "m", "--graphs-out", "g.ndjson", "--out", "d.ndjson"],
    ));
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(skimzoom(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(skimzoom(dir.path(), &["eval", "grounding"]).status.code(), Some(2));
}

#[test]
fn build_without_seed_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = skimzoom(dir.path(), &["dataset", "build", "--synthetic", "2"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn build_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    build_corpus(dir.path());
    ok(&skimzoom(dir.path(), &["--seed", "5", "--jobs", "3", "dataset", "build", "--synthetic", "6", "--out", "again.ndjson"]));
    let a = std::fs::read(dir.path().join("d.ndjson")).unwrap();
    let b = std::fs::read(dir.path().join("again.ndjson")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);

    // rebuilding from the saved graphs gives the same records
    ok(&skimzoom(dir.path(), &["--seed", "5", "dataset", "build", "--graphs", "g.ndjson", "--out", "from_graphs.ndjson"]));
    assert_eq!(a, std::fs::read(dir.path().join("from_graphs.ndjson")).unwrap());
}

#[test]
fn gold_echo_run_evaluates_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    build_corpus(dir.path());
    ok(&skimzoom(
        dir.path(),
        &["pipeline", "run", "--preset", "D", "--records", "d.ndjson", "--manifests", "m", "--spans-out", "s.ndjson", "--answers-out", "a.ndjson", "--out", "r.ndjson"],
    ));
    let table = ok(&skimzoom(dir.path(), &["eval", "grounding", "--pred", "s.ndjson", "--gold", "d.ndjson"]));
    for metric in ["R@0.3", "R@0.5", "R@0.7", "mIoU"] {
        let line = table.lines().find(|l| l.starts_with(metric)).unwrap_or_else(|| panic!("{metric} missing:\n{table}"));
        assert!(line.trim_end().ends_with("100.00"), "{line}");
    }
    let qa = ok(&skimzoom(dir.path(), &["eval", "qa", "--pred", "a.ndjson", "--gold", "d.ndjson", "--format", "ndjson"]));
    assert!(qa.contains(r#"{"metric":"Accuracy","value":100.0}"#), "{qa}");
}

#[test]
fn dataset_review_split_stats() {
    let dir = tempfile::tempdir().unwrap();
    build_corpus(dir.path());
    let mut lines = std::fs::read_to_string(dir.path().join("d.ndjson")).unwrap();
    lines.push_str(r#"{"video_id":"x","event_id":"e1","question":"what happens in this clip"}"#);
    lines.push('\n');
    std::fs::write(dir.path().join("mixed.ndjson"), lines).unwrap();
    let reports = ok(&skimzoom(dir.path(), &["dataset", "review", "--input", "mixed.ndjson", "--accepted", "kept.ndjson"]));
    let last: serde_json::Value = serde_json::from_str(reports.lines().last().unwrap()).unwrap();
    assert_eq!(last["schema"]["verdict"], "fail");
    assert_eq!(last["video_id"], "x");

    let split = ok(&skimzoom(dir.path(), &["--seed", "1", "dataset", "split", "--input", "kept.ndjson"]));
    let manifest: serde_json::Value = serde_json::from_str(&split).unwrap();
    let count = |k: &str| manifest[k].as_array().unwrap().len();
    assert_eq!(count("train") + count("val") + count("test"), 6);
    assert_eq!(skimzoom(dir.path(), &["dataset", "split", "--input", "kept.ndjson"]).status.code(), Some(1));

    let stats: serde_json::Value =
        serde_json::from_str(&ok(&skimzoom(dir.path(), &["dataset", "stats", "--input", "kept.ndjson"]))).unwrap();
    let hist: u64 = stats["label_histogram"].as_object().unwrap().values().map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(hist, stats["record_count"].as_u64().unwrap());
}

#[test]
fn reward_and_grpo_commands() {
    let dir = tempfile::tempdir().unwrap();
    build_corpus(dir.path());
    let record: serde_json::Value =
        serde_json::from_str(std::fs::read_to_string(dir.path().join("d.ndjson")).unwrap().lines().next().unwrap()).unwrap();
    let item = format!("{}/{}", record["video_id"].as_str().unwrap(), record["event_id"].as_str().unwrap());
    let gold_spans: Vec<String> = record["time_spans"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| format!("<span>[{:.2},{:.2}]</span>", p[0].as_f64().unwrap(), p[1].as_f64().unwrap()))
        .collect();
    let perfect = format!("{} <answer>{}</answer>", gold_spans.join(" "), record["correct_answer"].as_str().unwrap());
    let lines = [
        serde_json::json!({"item_id": item, "response_text": perfect, "duration_s": 1000.0, "policy_logprob_sum": -10.0}),
        serde_json::json!({"item_id": item, "response_text": "no idea", "duration_s": 1000.0, "policy_logprob_sum": -20.0}),
    ];
    let body: String = lines.iter().map(|l| format!("{l}\n")).collect();
    std::fs::write(dir.path().join("resp.ndjson"), body).unwrap();
    ok(&skimzoom(dir.path(), &["reward", "score", "--responses", "resp.ndjson", "--gold", "d.ndjson", "--out", "roll.ndjson"]));
    let rollouts: Vec<serde_json::Value> = std::fs::read_to_string(dir.path().join("roll.ndjson"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rollouts[0]["r_total"], 1.0);
    assert_eq!(rollouts[1]["r_total"], 0.0);

    let adv = ok(&skimzoom(dir.path(), &["grpo", "advantages", "--rollouts", "roll.ndjson"]));
    let advs: Vec<f64> = adv.lines().map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["advantage"].as_f64().unwrap()).collect();
    assert_eq!(advs, vec![0.5, -0.5]);

    let obj = ok(&skimzoom(dir.path(), &["grpo", "objective", "--rollouts", "roll.ndjson"]));
    let value: serde_json::Value = serde_json::from_str(&obj).unwrap();
    assert_eq!(value["objective"], -5.0);
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.ini"), "seed = 11\n[budget]\nn_g = 32\n").unwrap();
    let shown = ok(&skimzoom(dir.path(), &["--config", "run.ini", "--set", "budget.n_l=16", "config", "show"]));
    assert!(shown.contains("budget.n_g = 32"));
    assert!(shown.contains("budget.n_l = 16"));
    assert!(shown.contains("seed = 11"));
    let bad = skimzoom(dir.path(), &["--set", "budget.bogus=1", "config", "show"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("budget.bogus"));
}

#[test]
fn help_lists_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let help = ok(&skimzoom(dir.path(), &["pipeline", "run", "--help"]));
    assert!(help.contains("[default: D]"));
    assert!(help.contains("[default: 1]"));
    let help = ok(&skimzoom(dir.path(), &["eval", "grounding", "--help"]));
    assert!(help.contains("[default: table]"));
}

#[test]
fn ablation_table_layout() {
    let dir = tempfile::tempdir().unwrap();
    build_corpus(dir.path());
    let text = std::fs::read_to_string(dir.path().join("d.ndjson")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let (a, b) = lines.split_at(lines.len() / 2);
    std::fs::write(dir.path().join("s1.ndjson"), a.join("\n")).unwrap();
    std::fs::write(dir.path().join("s2.ndjson"), b.join("\n")).unwrap();
    let table = ok(&skimzoom(
        dir.path(),
        &["pipeline", "ablation", "--suite", "first=s1.ndjson", "--suite", "second=s2.ndjson", "--manifests", "m"],
    ));
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 5, "{table}");
    assert!(rows[0].contains("first") && rows[0].contains("second"));
    for (row, label) in rows[1..].iter().zip(["A)", "B)", "C)", "D)"]) {
        assert!(row.starts_with(label));
        assert_eq!(row.split_whitespace().rev().take(2).collect::<Vec<_>>(), vec!["100.0", "100.0"]);
    }
}
