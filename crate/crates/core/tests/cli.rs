use std::fs;
use std::path::Path;

use pmp::cli::run;

fn pmp(args: &[&str]) -> i32 {
    run(std::iter::once("pmp").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    for out in [&a, &b] {
        let code = pmp(&["gen", "--seed", "7", "--k", "5", "--updates", "5", "--queries", "5", "--count", "20", "--out", s(out)]);
        assert_eq!(code, 0);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let c = dir.path().join("c.jsonl");
    pmp(&["gen", "--seed", "8", "--k", "5", "--updates", "5", "--queries", "5", "--count", "20", "--out", s(&c)]);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn oracle_test_passes() {
    assert_eq!(pmp(&["oracle-test", "--k-max", "8", "--trials", "100"]), 0);
}

#[test]
fn bad_invocations_fail() {
    assert_ne!(pmp(&["gen", "--seed", "1"]), 0);
    assert_ne!(pmp(&["train", "--data", "/nonexistent/data.jsonl", "--out", "/tmp/never"]), 0);
    assert_ne!(pmp(&["frobnicate"]), 0);
    assert_ne!(pmp(&["eval", "--checkpoint", "x", "--data", "y", "--model", "gnn", "--out", "z"]), 0);
}

#[test]
fn train_eval_compare_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let train = d.join("train.jsonl");
    let test = d.join("test.jsonl");
    assert_eq!(pmp(&["gen", "--seed", "1", "--k", "5", "--updates", "5", "--queries", "5", "--count", "6", "--out", s(&train)]), 0);
    assert_eq!(pmp(&["gen", "--seed", "2", "--k", "5", "--updates", "5", "--queries", "5", "--count", "4", "--out", s(&test)]), 0);

    let mut reports = Vec::new();
    for model in ["pmp", "overwrite"] {
        let config = d.join(format!("{model}.cfg"));
        fs::write(
            &config,
            format!(
                "model = {model}\nhidden = 8\nrounds = 2\niterations = 4\nbatch_size = 2\ntrain_rollouts = 6\n\
                 log_every = 2\neval_every = 2\ncheckpoint_every = 2\neval_data = {}\n",
                s(&test)
            ),
        )
        .unwrap();
        let mut outputs = Vec::new();
        for run_id in 0..2 {
            let out = d.join(format!("{model}-{run_id}"));
            assert_eq!(pmp(&["train", "--config", s(&config), "--data", s(&train), "--out", s(&out), "--seed", "3"]), 0);
            assert!(out.join("checkpoint_000002.txt").exists());
            let report = out.join("report.jsonl");
            let ckpt = out.join("checkpoint.txt");
            assert_eq!(pmp(&["eval", "--checkpoint", s(&ckpt), "--data", s(&test), "--model", model, "--out", s(&report)]), 0);
            outputs.push([
                fs::read(out.join("metrics.csv")).unwrap(),
                fs::read(&ckpt).unwrap(),
                fs::read(&report).unwrap(),
            ]);
            if run_id == 0 {
                reports.push(report);
            }
        }
        assert_eq!(outputs[0], outputs[1], "{model} run differs");
        let csv = String::from_utf8(outputs[0][0].clone()).unwrap();
        assert_eq!(csv.lines().count(), 3);
        // the checkpoint records its model kind
        let wrong = if model == "pmp" { "overwrite" } else { "pmp" };
        let ckpt = d.join(format!("{model}-0")).join("checkpoint.txt");
        assert_ne!(pmp(&["eval", "--checkpoint", s(&ckpt), "--data", s(&test), "--model", wrong, "--out", s(&d.join("x.jsonl"))]), 0);
    }

    let table = d.join("table.txt");
    let mut args = vec!["compare", "--out", s(&table), "--reports"];
    args.extend(reports.iter().map(|p| s(p)));
    assert_eq!(pmp(&args), 0);
    let text = fs::read_to_string(&table).unwrap();
    assert!(text.contains("pmp") && text.contains("overwrite"));

    // a report on another dataset cannot be compared
    let other = d.join("other.jsonl");
    pmp(&["gen", "--seed", "9", "--k", "5", "--updates", "5", "--queries", "5", "--count", "4", "--out", s(&other)]);
    let stray = d.join("stray.jsonl");
    let ckpt = d.join("pmp-0").join("checkpoint.txt");
    pmp(&["eval", "--checkpoint", s(&ckpt), "--data", s(&other), "--model", "pmp", "--out", s(&stray)]);
    assert_ne!(pmp(&["compare", "--reports", s(&reports[1]), s(&stray)]), 0);
}
