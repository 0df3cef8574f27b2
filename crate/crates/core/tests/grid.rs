use advmtl::data::LenRange;
use advmtl::experiments::{
    report_config_hash, rows_from_csv, rows_to_csv, run_grid, write_report, AttackSettings, ExperimentConfig, GridSpec,
    InferenceMode,
};

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.n_train = 24;
    cfg.data.n_valid = 6;
    cfg.data.n_test = 7;
    cfg.data.len_range = LenRange::new(2, 3).unwrap();
    cfg.train.epochs = 2;
    cfg.attack = AttackSettings {
        steps: 4,
        report_at: vec![0, 2, 4],
        ..Default::default()
    };
    cfg.grid = GridSpec {
        lambda_t_a: vec![1.0],
        lambda_t_c: vec![0.0],
        seeds: vec![1, 2],
        ..Default::default()
    };
    cfg
}

#[test]
fn single_cell_grid_row_count_and_consistency() {
    let cfg = tiny();
    let out = run_grid(&cfg, None, false, |_| {}).unwrap();
    let rows: Vec<_> = out.iter().flat_map(|o| o.rows.clone()).collect();
    assert_eq!(rows.len(), 2 * 2 * 3);
    for r in &rows {
        assert_eq!(r.lambda_i_c, r.mode.lambda_i_c(r.lambda_t_c));
        assert_eq!(r.n_samples + r.n_skipped, cfg.data.n_test);
        assert!(r.benign_wer.is_finite() && r.accent_acc.is_finite());
        assert!(r.adv_twer.is_some_and(f64::is_finite));
    }
}

#[test]
fn drop_mode_skipped_for_ctc_only_models() {
    let mut cfg = tiny();
    cfg.grid.lambda_t_c = vec![1.0, 0.5];
    cfg.grid.seeds = vec![3];
    let out = run_grid(&cfg, None, false, |_| {}).unwrap();
    let rows: Vec<_> = out.iter().flat_map(|o| o.rows.clone()).collect();
    let drop_at_one = rows
        .iter()
        .filter(|r| r.lambda_t_c == 1.0 && r.mode == InferenceMode::DropCtc)
        .count();
    assert_eq!(drop_at_one, 0);
    assert_eq!(rows.len(), 3 + 2 * 3);
    for r in rows.iter().filter(|r| r.mode == InferenceMode::DropCtc) {
        assert_eq!(r.lambda_i_c, 0.0);
    }
}

#[test]
fn grid_artifacts_are_byte_identical_and_resumable() {
    let mut cfg = tiny();
    cfg.grid.lambda_t_c = vec![0.0, 0.5];
    let hash = cfg.hash();
    let run = |dir: &std::path::Path, resume: bool| {
        let out = run_grid(&cfg, Some(dir), resume, |_| {}).unwrap();
        let rows: Vec<_> = out.iter().flat_map(|o| o.rows.clone()).collect();
        let csv = rows_to_csv(&rows, &hash);
        write_report(&rows, &hash, &dir.join("report")).unwrap();
        csv
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let csv_a = run(a.path(), false);
    let csv_b = run(b.path(), false);
    assert_eq!(csv_a, csv_b);
    for name in [
        "cells/a1_c0_s1.ckpt",
        "cells/a1_c0_s2.train.csv",
        "cells/a1_c0.5_s1.ckpt",
        "cells/a1_c0.5_s2.rows.csv",
        "report/adv_twer_curves.csv",
    ] {
        assert_eq!(
            std::fs::read(a.path().join(name)).unwrap(),
            std::fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
    let resumed = run(a.path(), true);
    assert_eq!(resumed, csv_a);
    assert_eq!(report_config_hash(&csv_a), Some(hash.as_str()));
    assert_eq!(rows_from_csv(&csv_a).unwrap().len(), 24);
}
