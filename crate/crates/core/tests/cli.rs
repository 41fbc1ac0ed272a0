mod common;

use std::path::{Path, PathBuf};
use std::process::Command;

use scrl::cli::{read_summary_row, CONTRAST_DIR, PRETRAIN_DIR, SCRATCH_DIR};

fn scrl(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_scrl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("SCRL_THREADS")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.cfg");
    std::fs::write(&p, text).unwrap();
    p
}

fn code(out: &std::process::Output) -> i32 {
    out.status.code().unwrap()
}

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>, std::time::SystemTime)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let m = std::fs::metadata(&p).unwrap().modified().unwrap();
            (p.clone(), std::fs::read(&p).unwrap(), m)
        })
        .collect();
    v.sort_by(|a, b| a.0.cmp(&b.0));
    v
}

#[test]
fn gen_data_contract() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), common::SMALL_CONFIG);
    let c = cfg.to_str().unwrap();

    let out = scrl(&["gen-data", "--config", c]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.path().join("corpus/manifest.json").exists());
    assert!(d.path().join("corpus/config.txt").exists());

    let before = snapshot(&d.path().join("corpus"));
    let out = scrl(&["gen-data", "--config", c]);
    assert_eq!(code(&out), 2);
    assert_eq!(snapshot(&d.path().join("corpus")), before);

    assert_eq!(code(&scrl(&["gen-data", "--config", c, "--force"])), 0);

    let bad = write_config(d.path(), &common::SMALL_CONFIG.replace("seed=5\n", ""));
    let out = scrl(&["gen-data", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));

    let unknown = write_config(d.path(), &format!("{}contrast.tempreature=0.1\n", common::SMALL_CONFIG));
    let out = scrl(&["gen-data", "--config", unknown.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("contrast.tempreature"));
}

#[test]
fn train_eval_report_flow() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), common::SMALL_CONFIG);
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&scrl(&["gen-data", "--config", c])), 0);

    // nothing pretrained yet
    assert_eq!(code(&scrl(&["train", "--config", c, "--stage", "contrast"])), 1);
    assert_eq!(code(&scrl(&["report", "--config", c])), 2);

    let out = scrl(&["train", "--config", c, "--stage", "both"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let runs = d.path().join("runs");
    for dir in [PRETRAIN_DIR, CONTRAST_DIR] {
        assert!(runs.join(dir).join("best.ckpt").exists(), "{dir}");
        assert!(runs.join(dir).join("log.csv").exists(), "{dir}");
        assert!(runs.join(dir).join("config.txt").exists(), "{dir}");
    }
    assert_eq!(code(&scrl(&["train", "--config", c, "--stage", "both"])), 2, "existing run without --force");
    assert_eq!(code(&scrl(&["train", "--config", c, "--stage", "contrast", "--from-scratch"])), 0);
    assert!(runs.join(SCRATCH_DIR).join("best.ckpt").exists());

    for mode in ["sliding", "annotated"] {
        let out = scrl(&["eval", "--config", c, "--mode", mode]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let line = String::from_utf8(out.stdout).unwrap();
        let line = line.trim_end();
        let dir = runs.join("eval").join(format!("contrast-{mode}"));
        for f in ["report.csv", "rankings.csv", "report.svg", "gallery.cidx", "config.txt"] {
            assert!(dir.join(f).exists(), "{mode}: {f}");
        }
        let row = read_summary_row(mode, &std::fs::read_to_string(dir.join("report.csv")).unwrap()).unwrap();
        assert_eq!(row.mode, mode);
        let from_csv = format!(
            "R@1={:.6} R@5={:.6} R@10={:.6} mAP={:.6}",
            row.recall[0], row.recall[1], row.recall[2], row.map_score
        );
        assert_eq!(line, from_csv);
    }
    // a stage-1 checkpoint has no head
    let pre = runs.join(PRETRAIN_DIR).join("best.ckpt");
    assert_eq!(code(&scrl(&["eval", "--config", c, "--checkpoint", pre.to_str().unwrap()])), 1);

    let out = scrl(&["report", "--config", c]);
    assert_eq!(code(&out), 0);
    let summary = std::fs::read_to_string(runs.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(runs.join("summary.svg").exists());
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&scrl(&["train", "--config", "x.cfg", "--stage", "nope"])), 1);
    assert_eq!(code(&scrl(&["frobnicate"])), 1);
    assert_eq!(code(&scrl(&[])), 1);
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), common::SMALL_CONFIG);
    let out = Command::new(env!("CARGO_BIN_EXE_scrl"))
        .args(["eval", "--config", cfg.to_str().unwrap()])
        .env("SCRL_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
}

#[test]
fn identical_runs_write_identical_logs() {
    let mut logs = Vec::new();
    for _ in 0..2 {
        let d = tempfile::tempdir().unwrap();
        let cfg = write_config(d.path(), common::SMALL_CONFIG);
        let c = cfg.to_str().unwrap();
        assert_eq!(code(&scrl(&["gen-data", "--config", c])), 0);
        assert_eq!(code(&scrl(&["train", "--config", c, "--stage", "both"])), 0);
        let runs = d.path().join("runs");
        logs.push((
            common::read(&runs.join("pretrain/log.csv")),
            common::read(&runs.join("contrast/log.csv")),
            common::read(&runs.join("contrast/best.ckpt")),
        ));
    }
    assert_eq!(logs[0], logs[1]);
}
