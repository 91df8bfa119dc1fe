use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SYNTH: &str = r#"{
    "seed": 17, "duration_days": 700,
    "background": {"communities": 30, "created_day_max": 150},
    "pairs": [
      {"base": "food", "affix": "meta", "position": "prefix", "base_created_day": 5, "modified_created_day": 90,
       "link_overlap": 0.5, "topic_shared": 0.5, "early": {"fraction": 0.5},
       "exploration": {"explorers": 150, "pre": 6, "p_e": 0.6, "p_ne": 0.5}},
      {"base": "cars", "affix": "meta", "base_created_day": 5, "modified_created_day": 60,
       "link_overlap": 0.5, "topic_shared": 0.5, "early": {"fraction": 0.11}}
    ]
}"#;

fn relcom(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relcom"))
        .current_dir(dir)
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = relcom(dir, args);
    assert!(
        out.status.success(),
        "relcom {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn corpus(dir: &Path) {
    fs::write(dir.join("synth.json"), SYNTH).unwrap();
    ok(dir, &["synth", "--config", "synth.json", "--out", "corpus.jsonl", "--manifest", "truth.json"]);
}

#[test]
fn synth_writes_corpus_and_truth() {
    let tmp = tempfile::tempdir().unwrap();
    corpus(tmp.path());
    let truth: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("truth.json")).unwrap()).unwrap();
    assert_eq!(truth["pairs"][0]["pair"], "food:metafood");
    assert_eq!(truth["pairs"][1]["spinoff"], true);
    let lines = fs::read_to_string(tmp.path().join("corpus.jsonl")).unwrap();
    assert_eq!(lines.lines().count() as u64, truth["events"].as_u64().unwrap());
}

#[test]
fn stages_chain_through_a_directory_and_match_run() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    corpus(d);
    let common = ["-i", "corpus.jsonl", "--min-posters", "10", "--min-affix-count", "2", "-q"];
    let with = |cmd: &str, out: &str| -> Vec<String> {
        let mut v = vec![cmd.to_string()];
        v.extend(common.iter().map(|s| s.to_string()));
        v.extend(["--out".to_string(), out.to_string()]);
        v
    };
    let run = with("run", "full");
    ok(d, &run.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(d.join("full/manifest.json").exists());
    assert!(!d.join("full/.partial").exists());

    for stage in ["ingest", "pairs", "similarity", "characterize", "spinoffs", "explore"] {
        let args = with(stage, "step");
        ok(d, &args.iter().map(String::as_str).collect::<Vec<_>>());
    }
    ok(d, &["report", "--dir", "step", "-q"]);

    let mut compared = 0;
    for entry in fs::read_dir(d.join("step")).unwrap() {
        let name = entry.unwrap().file_name();
        let a = fs::read(d.join("step").join(&name)).unwrap();
        let b = fs::read(d.join("full").join(&name)).unwrap();
        assert_eq!(a, b, "{name:?}");
        compared += 1;
    }
    assert!(compared >= 25, "{compared}");

    let spin = fs::read_to_string(d.join("step/spinoffs.csv")).unwrap();
    assert!(spin.contains("food,metafood,") && spin.contains("cars,carsmeta,"));
}

#[test]
fn sequential_and_threaded_runs_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    corpus(d);
    ok(d, &["--sequential", "run", "-i", "corpus.jsonl", "--min-posters", "10", "--out", "a", "-q"]);
    ok(d, &["--threads", "2", "run", "-i", "corpus.jsonl", "--min-posters", "10", "--out", "b", "-q"]);
    for name in ["exploration.csv", "similarity.csv", "dynamics.csv", "matches.csv", "manifest.json"] {
        assert_eq!(fs::read(d.join("a").join(name)).unwrap(), fs::read(d.join("b").join(name)).unwrap(), "{name}");
    }
}

#[test]
fn config_file_and_flag_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    corpus(d);
    fs::write(d.join("run.toml"), "inputs = [\"corpus.jsonl\"]\nmin_posters = 10\nseed = 3\n").unwrap();
    ok(d, &["run", "--config", "run.toml", "--min-k", "50", "--out", "o", "-q"]);
    let m: serde_json::Value = serde_json::from_slice(&fs::read(d.join("o/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["min_k"], 50);
    assert_eq!(m["config"]["seed"], 3);
    assert_eq!(m["overrides"]["min_posters"], 10);
    assert_eq!(m["overrides"]["min_k"], 50);
}

#[test]
fn failures_exit_nonzero_and_leave_partial_marker() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = relcom(d, &["run", "-i", "missing.jsonl", "--out", "o"]);
    assert!(!out.status.success());
    let marker = fs::read_to_string(d.join("o/.partial")).unwrap();
    assert!(marker.starts_with("stage: ingest"), "{marker}");
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.jsonl"));

    let out = relcom(d, &["run", "-i", "x.jsonl", "--threshold", "120"]);
    assert!(!out.status.success());

    let out = relcom(d, &["similarity", "-i", "x.jsonl", "--out", "nothing-here"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("candidate_pairs.csv"));
}

#[test]
fn missing_topic_file_warns_and_continues() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    corpus(d);
    let out = ok(d, &["run", "-i", "corpus.jsonl", "--min-posters", "10", "--topics", "nope.jsonl", "--out", "o"]);
    let log = String::from_utf8_lossy(&out.stderr);
    assert!(log.contains("WARN") && log.contains("nope.jsonl"), "{log}");
    let m: serde_json::Value = serde_json::from_slice(&fs::read(d.join("o/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["topic_source"], "unigram");
}

#[test]
fn stream_mode_feeds_ingest() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--stream", "5000", "--communities", "20", "--users", "300", "--out", "s.jsonl", "-q"]);
    ok(d, &["ingest", "-i", "s.jsonl", "--index-stats", "stats.csv", "-q"]);
    let stats = fs::read_to_string(d.join("stats.csv")).unwrap();
    assert_eq!(stats.lines().count(), 21);
    let events: usize = stats.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
    assert!(events <= 5000 && events > 4900);
}

#[test]
fn report_on_empty_directory_is_not_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    fs::create_dir(tmp.path().join("empty")).unwrap();
    ok(tmp.path(), &["report", "--dir", "empty", "-q"]);
    assert!(!relcom(tmp.path(), &["report", "--dir", "absent", "-q"]).status.success());
}
