use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ballpark(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ballpark"))
        .args(args)
        .arg("--output-dir")
        .arg(dir)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

fn pipeline(dir: &Path) {
    let data = path(dir, "data.csv");
    let cs = path(dir, "constraints.json");
    let out = ballpark(
        dir,
        &[
            "gen-data", "--n", "120", "--d", "4", "--seed", "7", "--center",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = ballpark(
        dir,
        &[
            "synth-constraints",
            "--data",
            &data,
            "--features",
            "x0,x1",
            "--epsilon",
            "0.1",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = ballpark(
        dir,
        &[
            "fit-regression",
            "--data",
            &data,
            "--constraints",
            &cs,
            "--lambda",
            "cvcv",
            "--folds",
            "3",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = ballpark(
        dir,
        &[
            "evaluate",
            "--data",
            &data,
            "--constraints",
            &cs,
            "--lambda",
            "1",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

const ARTIFACTS: [&str; 8] = [
    "data.csv",
    "data.truth.json",
    "constraints.json",
    "cvcv.json",
    "fit.json",
    "predictions.csv",
    "eval.json",
    "eval.csv",
];

#[test]
fn gen_data_writes_csv_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let out = ballpark(
        dir.path(),
        &["gen-data", "--n", "500", "--d", "13", "--seed", "7"],
    );
    assert_eq!(code(&out), 0);
    let csv = fs::read_to_string(dir.path().join("data.csv")).unwrap();
    assert_eq!(csv.lines().count(), 501);
    assert_eq!(csv.lines().next().unwrap().split(',').count(), 14);
    let truth: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("data.truth.json")).unwrap())
            .unwrap();
    assert_eq!(truth["weights"].as_array().unwrap().len(), 13);
    assert_eq!(truth["fingerprint"].as_str().unwrap().len(), 64);
}

#[test]
fn rerun_reproduces_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path());
    let first: Vec<Vec<u8>> = ARTIFACTS
        .iter()
        .map(|a| fs::read(dir.path().join(a)).unwrap())
        .collect();
    pipeline(dir.path());
    for (name, bytes) in ARTIFACTS.iter().zip(&first) {
        assert_eq!(
            &fs::read(dir.path().join(name)).unwrap(),
            bytes,
            "{name} changed"
        );
    }
    let fit: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("fit.json")).unwrap()).unwrap();
    let cvcv: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("cvcv.json")).unwrap()).unwrap();
    assert_eq!(fit["fingerprint"], cvcv["fingerprint"]);
    assert_eq!(fit["lambda"], cvcv["chosen_lambda"]);
    let eval = fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    assert!(eval
        .lines()
        .skip(1)
        .all(|l| l.starts_with("ballpark,") || l.starts_with("ridge-10,")));
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path());
    let before = fs::read(dir.path().join("eval.json")).unwrap();
    let data = path(dir.path(), "data.csv");
    let cs = path(dir.path(), "constraints.json");
    let out = Command::new(env!("CARGO_BIN_EXE_ballpark"))
        .args([
            "evaluate",
            "--data",
            &data,
            "--constraints",
            &cs,
            "--lambda",
            "1",
            "--output-dir",
        ])
        .arg(dir.path())
        .env("BALLPARK_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read(dir.path().join("eval.json")).unwrap(), before);
}

#[test]
fn empty_answers_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let answers = path(dir.path(), "answers.jsonl");
    let questions = path(dir.path(), "questions.json");
    let bags = path(dir.path(), "bags.json");
    fs::write(&answers, "").unwrap();
    fs::write(&questions, r#"{"q1": {"bag": "all"}}"#).unwrap();
    fs::write(
        &bags,
        r#"{"bags": [{"name": "all", "members": [0, 1, 2]}]}"#,
    )
    .unwrap();
    let out = ballpark(
        dir.path(),
        &[
            "aggregate-crowd",
            "--mode",
            "interval",
            "--answers",
            &answers,
            "--questions",
            &questions,
            "--bags",
            &bags,
        ],
    );
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no crowd answers"));
    assert!(!dir.path().join("constraints.json").exists());
}

#[test]
fn aggregate_crowd_with_global_bound() {
    let dir = tempfile::tempdir().unwrap();
    let answers = path(dir.path(), "answers.jsonl");
    let questions = path(dir.path(), "questions.json");
    let bags = path(dir.path(), "bags.json");
    fs::write(
        &answers,
        "{\"worker\":\"a\",\"question\":\"q1\",\"kind\":\"point\",\"value\":0.2}\n\
         {\"worker\":\"b\",\"question\":\"q1\",\"kind\":\"point\",\"value\":0.4}\n",
    )
    .unwrap();
    fs::write(&questions, r#"{"q1": {"bag": "young"}}"#).unwrap();
    fs::write(&bags, r#"{"bags": [{"name": "young", "members": [0, 1]}, {"name": "all", "members": [0, 1, 2, 3]}]}"#)
        .unwrap();
    let out = ballpark(
        dir.path(),
        &[
            "aggregate-crowd",
            "--answers",
            &answers,
            "--questions",
            &questions,
            "--bags",
            &bags,
            "--global-upper",
            "0.4",
            "--proportion",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("constraints.json")).unwrap())
            .unwrap();
    let bounds = doc["bounds"].as_array().unwrap();
    assert_eq!(bounds.len(), 2);
    assert_eq!(bounds[0]["lower"], 0.25);
    assert_eq!(bounds[0]["upper"], 0.35000000000000003);
    assert_eq!(bounds[1]["bag"], "all");
    assert_eq!(bounds[1]["lower"], 0.0);
    assert_eq!(bounds[1]["upper"], 0.4);
}

fn contradictory(dir: &Path) -> (String, String) {
    let data = path(dir, "d.csv");
    let cs = path(dir, "c.json");
    fs::write(&data, "x\n0\n1\n2\n3\n").unwrap();
    fs::write(
        &cs,
        r#"{"bags": [{"name": "all", "members": [0, 1, 2, 3]}],
            "bounds": [{"bag": "all", "lower": 1, "upper": 1}, {"bag": "all", "lower": 2, "upper": 2}]}"#,
    )
    .unwrap();
    (data, cs)
}

#[test]
fn infeasible_without_escalation_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cs) = contradictory(dir.path());
    let args = [
        "fit-regression",
        "--data",
        &data,
        "--constraints",
        &cs,
        "--lambda",
        "1",
    ];
    let out = ballpark(dir.path(), &args);
    assert_eq!(code(&out), 0);
    let fit: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("fit.json")).unwrap()).unwrap();
    assert_eq!(fit["status"], "optimal-with-slack");

    let mut strict = args.to_vec();
    strict.push("--no-escalate");
    let out = ballpark(dir.path(), &strict);
    assert_eq!(code(&out), 3);
    let fit: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("fit.json")).unwrap()).unwrap();
    assert_eq!(fit["status"], "infeasible");
}

#[test]
fn validation_failures_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = contradictory(dir.path());
    let cs = path(dir.path(), "dangling.json");
    fs::write(
        &cs,
        r#"{"bags": [], "bounds": [{"bag": "ghost", "lower": 0, "upper": 1}]}"#,
    )
    .unwrap();
    let out = ballpark(
        dir.path(),
        &["fit-regression", "--data", &data, "--constraints", &cs],
    );
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("ghost"));

    let missing = path(dir.path(), "nope.json");
    let out = ballpark(
        dir.path(),
        &["fit-regression", "--data", &data, "--constraints", &missing],
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = ballpark(dir.path(), &["gen-data", "--bogus"]);
    assert_eq!(code(&out), 64);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}
