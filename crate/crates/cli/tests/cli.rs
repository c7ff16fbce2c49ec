use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn aidplan(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aidplan"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| {
        panic!(
            "{e}: {}\n{}",
            String::from_utf8_lossy(&o.stdout),
            String::from_utf8_lossy(&o.stderr)
        )
    })
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn faulty_plan_is_gated_unsafe_with_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = aidplan(
        dir.path(),
        &["plan", "--mode", "faulty", "--out", "plan.json"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout_json(&o)["boluses"][0]["units"], 11.0);

    let o = aidplan(dir.path(), &["gate", "--plan", "plan.json"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v = stdout_json(&o);
    assert_eq!(v["verdict"], "Unsafe");
    assert!(v["rho"].as_f64().unwrap() < 0.0);

    let o = aidplan(dir.path(), &["gate"]);
    let v = stdout_json(&o);
    assert_eq!(
        (v["verdict"].as_str(), v["units"].as_f64()),
        (Some("Safe"), Some(7.0))
    );
}

#[test]
fn error_categories() {
    let dir = tempfile::tempdir().unwrap();
    let o = aidplan(dir.path(), &["plan", "--config", "missing.json"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("missing.json"));

    std::fs::write(
        dir.path().join("c.json"),
        r#"{"suite": {"count": 2, "sede": 3}}"#,
    )
    .unwrap();
    let o = aidplan(dir.path(), &["suite", "--config", "c.json"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("suite.sede"), "{}", stderr(&o));

    std::fs::write(dir.path().join("c.json"), r#"{"scenario": {"cr": "five"}}"#).unwrap();
    let o = aidplan(dir.path(), &["plan", "--config", "c.json"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("scenario.cr"), "{}", stderr(&o));

    assert_eq!(
        aidplan(dir.path(), &["plan", "--mode", "greedy"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(aidplan(dir.path(), &["frobnicate"]).status.code(), Some(2));
    let o = aidplan(dir.path(), &["gate", "--formula", "(G 0 10 (> cgm"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("c.json"),
        r#"{"scenario": {"carbs": 30, "cr": 10, "iob": 0, "mode": "faulty"}}"#,
    )
    .unwrap();
    let o = aidplan(dir.path(), &["plan", "--config", "c.json"]);
    assert_eq!(stdout_json(&o)["provenance"]["formula"], "faulty_additive");
    let o = aidplan(
        dir.path(),
        &["plan", "--config", "c.json", "--mode", "exact"],
    );
    let v = stdout_json(&o);
    assert_eq!(v["boluses"][0]["units"], 3.0);
    assert_ne!(v["provenance"]["formula"], "faulty_additive");
}

#[test]
fn sim_writes_trace_and_sidecar_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a.csv", "b.csv"] {
        let o = aidplan(
            dir.path(),
            &["sim", "--dose", "11", "--horizon-min", "240", "--out", out],
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = std::fs::read(dir.path().join("a.csv")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.csv")).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 1 + 241);
    let meta: Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("a.csv.meta.json")).unwrap())
            .unwrap();
    assert_eq!(meta["command"], "sim");
    assert_eq!(meta["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn prompt_dataset_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let run = |seed: &str, out: &str| {
        let o = aidplan(
            dir.path(),
            &[
                "dataset", "prompt", "--count", "5", "--seed", seed, "--out", out,
            ],
        );
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read_to_string(dir.path().join(out)).unwrap()
    };
    let a = run("3", "a.jsonl");
    assert_eq!(a, run("3", "b.jsonl"));
    assert_ne!(a, run("4", "c.jsonl"));
    assert_eq!(a.lines().count(), 5);
    let meta = std::fs::read_to_string(dir.path().join("a.jsonl.meta.json")).unwrap();
    assert!(meta.contains("\"seed\": 3"));
}

#[test]
fn traces_train_estimate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("t.json"),
        r#"{"training": {"epochs": 2, "trace_count": 8, "hidden": 4, "batch_size": 4}}"#,
    )
    .unwrap();
    let o = aidplan(
        dir.path(),
        &[
            "dataset",
            "traces",
            "--config",
            "t.json",
            "--truth",
            "0.098,0.1406,0.028",
            "--count",
            "3",
            "--out",
            "truth",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("truth/traces/trace_00002.csv").exists());

    let train = |out: &str, workers: &str| {
        let o = aidplan(
            dir.path(),
            &[
                "train",
                "--config",
                "t.json",
                "--workers",
                workers,
                "--out",
                out,
            ],
        );
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read(dir.path().join(out)).unwrap()
    };
    assert_eq!(train("ck1.json", "1"), train("ck2.json", "3"));
    let loss = std::fs::read_to_string(dir.path().join("ck1.json.loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 3);
    assert!(dir.path().join("ck1.json.loss.csv.meta.json").exists());

    let o = aidplan(
        dir.path(),
        &[
            "estimate",
            "--checkpoint",
            "ck1.json",
            "--trace",
            "truth/traces/trace_00000.csv",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let v = stdout_json(&o);
    let ranges = aidplan::dynamics::CoefficientRanges::default();
    for (key, iv) in ["k1", "n", "p1"].iter().zip(ranges.as_array()) {
        assert!(iv.contains(v[key].as_f64().unwrap()), "{key} = {}", v[key]);
    }

    let o = aidplan(
        dir.path(),
        &["estimate", "--checkpoint", "nope.json", "--trace", "x.csv"],
    );
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn suite_output_independent_of_workers() {
    let dir = tempfile::tempdir().unwrap();
    let run = |out: &str, workers: &str| {
        let o = aidplan(
            dir.path(),
            &[
                "suite",
                "--count",
                "6",
                "--seed",
                "11",
                "--horizon-min",
                "240",
                "--workers",
                workers,
                "--out",
                out,
            ],
        );
        assert!(o.status.success(), "{}", stderr(&o));
        (
            std::fs::read(dir.path().join(out).join("suite.csv")).unwrap(),
            std::fs::read(dir.path().join(out).join("summary.json")).unwrap(),
        )
    };
    let a = run("s1", "1");
    assert_eq!(a, run("s4", "4"));
    let csv = String::from_utf8(a.0).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6 * 3);
    assert!(dir.path().join("s1/suite.csv.meta.json").exists());
}

#[test]
fn eval_llm_oracle_and_unreachable_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    let o = aidplan(
        dir.path(),
        &["eval-llm", "--count", "10", "--out", "r.json"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let r: Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(r["scored"], 10);
    assert!(r["mean_rmse"].as_f64().unwrap() < 0.1);

    std::fs::write(
        dir.path().join("e.json"),
        r#"{"endpoint": {"max_retries": 0, "timeout": 2}}"#,
    )
    .unwrap();
    let o = aidplan(
        dir.path(),
        &[
            "eval-llm",
            "--config",
            "e.json",
            "--count",
            "2",
            "--endpoint-url",
            "http://127.0.0.1:1",
        ],
    );
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));

    let o = aidplan(dir.path(), &["eval-llm", "--auth-env", "TOKEN"]);
    assert_eq!(o.status.code(), Some(3));
}
