use std::path::Path;
use std::process::{Command, Output};

use dqrm::format::{export_size, import_model};
use dqrm::log::{parse_record, LogRecord};

fn dqrm(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dqrm"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &[&str] = &[
    "--set",
    "table_rows=60,40,20",
    "--set",
    "embed_dim=4",
    "--set",
    "bottom_mlp=13-8-4",
    "--set",
    "top_mlp=8-1",
    "--set",
    "samples=600",
    "--batch-size",
    "32",
];

fn with<'a>(head: &[&'a str], tail: &[&'a str]) -> Vec<&'a str> {
    head.iter().chain(SMALL).chain(tail).copied().collect()
}

#[test]
fn train_writes_log_model_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = dqrm(
        &with(
            &["train"],
            &["--out", "run", "--epochs", "2", "--set", "histogram_bins=6"],
        ),
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("test: accuracy"));
    let run = dir.path().join("run");
    let log = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let records: Vec<LogRecord> = log.lines().map(|l| parse_record(l).unwrap()).collect();
    assert!(matches!(records.first(), Some(LogRecord::Config { .. })));
    assert!(matches!(records.last(), Some(LogRecord::Summary { .. })));
    let evals = records.iter().filter(|r| matches!(r, LogRecord::Eval { .. })).count();
    assert_eq!(evals, 2);
    let model = import_model(&run.join("model.dqrm")).unwrap();
    let size = std::fs::metadata(run.join("model.dqrm")).unwrap().len();
    assert_eq!(size, export_size(&model.config));
    assert!(run.join("config.txt").exists());
    let hist = std::fs::read_to_string(run.join("hist_t0_e1_quant.txt")).unwrap();
    assert_eq!(hist.lines().count(), 6);
}

#[test]
fn synth_train_eval_export_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert!(dqrm(&with(&["synth", "--output", "train.tsv.gz"], &[]), p)
        .status
        .success());
    let o = dqrm(
        &with(
            &["synth", "--output", "test.tsv"],
            &["--set", "data_seed=5", "--set", "samples=200"],
        ),
        p,
    );
    assert!(o.status.success());
    assert_eq!(
        std::fs::read_to_string(p.join("test.tsv")).unwrap().lines().count(),
        200
    );

    let o = dqrm(
        &with(
            &["train"],
            &[
                "--out",
                "run",
                "--set",
                "train_data=train.tsv.gz",
                "--set",
                "test_data=test.tsv",
            ],
        ),
        p,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let o = dqrm(&["eval", "--model", "run/model.dqrm", "--data", "test.tsv"], p);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("eval: accuracy"), "{}", stdout(&o));

    let o = dqrm(
        &[
            "export",
            "--model",
            "run/model.dqrm",
            "--out",
            "m8.dqrm",
            "--bits",
            "8,16",
            "--granularity",
            "matrix",
        ],
        p,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m8 = import_model(&p.join("m8.dqrm")).unwrap();
    assert_eq!((m8.config.emb_bits, m8.config.mlp_bits), (8, 16));

    let o = dqrm(&["inspect", "--model", "m8.dqrm"], p);
    assert!(stdout(&o).contains("table 2 rows 20 int8"), "{}", stdout(&o));
    let o = dqrm(&["inspect", "--model", "m8.dqrm", "--histogram", "1", "--bins", "4"], p);
    let counts: u64 = stdout(&o)
        .lines()
        .map(|l| l.split(' ').nth(2).unwrap().parse::<u64>().unwrap())
        .sum();
    assert_eq!(counts, 40 * 4);
}

#[test]
fn comm_report_kaggle() {
    let dir = tempfile::tempdir().unwrap();
    let o = dqrm(
        &[
            "comm-report",
            "--set",
            "table_rows=kaggle",
            "--set",
            "bottom_mlp=13-512-256-64-16",
            "--set",
            "top_mlp=512-256-1",
            "--nodes",
            "8",
            "--batch-size",
            "2048",
        ],
        dir.path(),
    );
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("fp32 dense\t2162708868"), "{text}");
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(dqrm(&with(&["train"], &["--nodes", "3"]), p).status.code(), Some(2));
    assert_eq!(dqrm(&["train", "--set", "colour=red"], p).status.code(), Some(2));
    assert_eq!(dqrm(&["train", "--grad-bits", "7"], p).status.code(), Some(2));

    std::fs::write(p.join("bad.tsv"), "1\t2\n").unwrap();
    let o = dqrm(&with(&["train"], &["--set", "train_data=bad.tsv"]), p);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1"));
    std::fs::write(p.join("junk.dqrm"), b"JUNK").unwrap();
    assert_eq!(dqrm(&["inspect", "--model", "junk.dqrm"], p).status.code(), Some(3));

    let o = dqrm(&with(&["train"], &["--set", "learning_rate=1e12"]), p);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}
