mod common;

use scrl::pretrainer::{has_resume_state, resume_pretraining, run_pretraining, PretrainConfig, BEST_CHECKPOINT, LOG_FILE};

fn cfg(epochs: usize) -> PretrainConfig {
    PretrainConfig {
        epochs,
        stride: 16,
        seed: 9,
        ..Default::default()
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let d = tempfile::tempdir().unwrap();
    let corpus = common::small_corpus(&d.path().join("corpus"));
    let model = common::small_model();

    let straight = d.path().join("straight");
    run_pretraining(&cfg(4), &model, &corpus, &straight).unwrap();

    let split = d.path().join("split");
    run_pretraining(&cfg(2), &model, &corpus, &split).unwrap();
    assert!(has_resume_state(&split));
    // a half-written line from an interrupted epoch must not survive
    let log = split.join(LOG_FILE);
    let mut text = std::fs::read_to_string(&log).unwrap();
    text.push_str("2,0.5");
    std::fs::write(&log, text).unwrap();
    resume_pretraining(&cfg(4), &model, &corpus, &split).unwrap();

    assert_eq!(common::read(&straight.join(LOG_FILE)), common::read(&split.join(LOG_FILE)));
    assert_eq!(
        common::read(&straight.join(BEST_CHECKPOINT)),
        common::read(&split.join(BEST_CHECKPOINT))
    );
    let rows = std::fs::read_to_string(straight.join(LOG_FILE)).unwrap().lines().count();
    assert_eq!(rows, 5);
}

#[test]
fn same_seed_runs_are_byte_identical() {
    let d = tempfile::tempdir().unwrap();
    let corpus = common::small_corpus(&d.path().join("corpus"));
    let model = common::small_model();
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    run_pretraining(&cfg(2), &model, &corpus, &a).unwrap();
    run_pretraining(&cfg(2), &model, &corpus, &b).unwrap();
    assert_eq!(common::read(&a.join(LOG_FILE)), common::read(&b.join(LOG_FILE)));
    assert_eq!(common::read(&a.join(BEST_CHECKPOINT)), common::read(&b.join(BEST_CHECKPOINT)));
}
