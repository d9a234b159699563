use cici_core::harness::{read_report_rows, write_suite_outputs, REPORT_HEADER};
use cici_core::{
    run_suite, run_tta, BvpNetMini, Checkpoint, LabeledInstance, Mode, ModelConfig, RunConfig, SuiteSpec,
};

fn stream(n: usize) -> Vec<LabeledInstance> {
    SuiteSpec {
        scenarios: 2,
        instances_per_scenario: n / 2,
        window: 128,
        ..SuiteSpec::target_default()
    }
    .instances()
    .unwrap()
}

fn model() -> BvpNetMini {
    BvpNetMini::init(ModelConfig::default(), 5).unwrap()
}

fn fast(mode: Mode) -> RunConfig {
    RunConfig {
        lr: 1e-3,
        ..RunConfig::with_mode(mode)
    }
}

#[test]
fn zero_learning_rate_matches_no_adapt() {
    let s = stream(6);
    let frozen = run_tta(&model(), &s, &RunConfig::with_mode(Mode::NoAdapt), 0).unwrap();
    let zero = run_tta(&model(), &s, &RunConfig { lr: 0.0, ..fast(Mode::Cici) }, 0).unwrap();
    for (a, b) in frozen.rows.iter().zip(&zero.rows) {
        assert_eq!(a.pre_hr_bpm, b.post_hr_bpm);
        assert_eq!(b.pre_hr_bpm, b.post_hr_bpm);
    }
}

#[test]
fn stfc_only_equals_cici_without_stti() {
    let s = stream(6);
    let stfc = run_tta(&model(), &s, &fast(Mode::StfcOnly), 3).unwrap();
    let muted = RunConfig {
        stti_weight: 0.0,
        ..fast(Mode::Cici)
    };
    let cici = run_tta(&model(), &s, &muted, 3).unwrap();
    assert!(stfc.rows.iter().any(|r| r.updated));
    for (a, b) in stfc.rows.iter().zip(&cici.rows) {
        assert_eq!(a.post_hr_bpm, b.post_hr_bpm);
        assert_eq!(a.l_stfc, b.l_stfc);
        assert!(!b.conflict);
    }
}

#[test]
fn unused_loss_is_logged_in_single_loss_modes() {
    let s = stream(4);
    for mode in [Mode::StfcOnly, Mode::SttiOnly] {
        let r = run_tta(&model(), &s, &fast(mode), 1).unwrap();
        assert!(r.rows.iter().all(|row| row.l_stfc.is_finite() && row.l_stti.is_finite()));
        assert!(r.rows.iter().any(|row| row.l_stti != 0.0));
    }
}

#[test]
fn rows_are_consistent() {
    let s = stream(6);
    let cfg = RunConfig {
        steps_per_instance: 2,
        cycles: 2,
        ..fast(Mode::Cici)
    };
    let r = run_tta(&model(), &s, &cfg, 11).unwrap();
    assert_eq!(r.rows.len(), s.len() * 2 * 2);
    for row in &r.rows {
        assert_eq!(row.conflict, row.dot < 0.0);
        assert!(row.g1 >= 0.0 && row.g2 >= 0.0);
        if row.conflict {
            assert!((row.lambda1 + row.lambda2 - 1.0).abs() < 1e-12);
        }
    }
    assert_eq!(r.summary.steps, r.rows.len());
}

#[test]
fn stream_order_changes_numbers_not_schema() {
    let s = stream(6);
    let mut reversed = s.clone();
    reversed.reverse();
    let a = run_tta(&model(), &s, &fast(Mode::Cici), 0).unwrap();
    let b = run_tta(&model(), &reversed, &fast(Mode::Cici), 0).unwrap();
    assert_eq!(a.rows.len(), b.rows.len());
    let post_a: Vec<f64> = a.rows.iter().map(|r| r.l_stti).collect();
    let mut post_b: Vec<f64> = b.rows.iter().map(|r| r.l_stti).collect();
    post_b.reverse();
    assert_ne!(post_a, post_b);

    let dir = tempfile::tempdir().unwrap();
    for (name, r) in [("a.csv", &a), ("b.csv", &b)] {
        r.save_csv(&dir.path().join(name)).unwrap();
        let text = std::fs::read_to_string(dir.path().join(name)).unwrap();
        assert_eq!(text.lines().next().unwrap(), REPORT_HEADER.join(","));
    }
}

#[test]
fn report_csv_round_trips() {
    let r = run_tta(&model(), &stream(4), &fast(Mode::Cici), 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    r.save_csv(&path).unwrap();
    assert_eq!(read_report_rows(&path).unwrap(), r.rows);
}

#[test]
fn suite_counts_and_means() {
    let s = stream(4);
    let configs = [RunConfig::with_mode(Mode::NoAdapt), fast(Mode::Cici)];
    let seeds = [0, 1, 2, 3, 4];
    let out = run_suite(&model(), &s, &configs, &seeds).unwrap();
    assert_eq!(out.reports.len(), 10);
    assert!(out.failures.is_empty());
    for summary in &out.summaries {
        let maes: Vec<f64> = out
            .reports
            .iter()
            .filter(|(l, _)| *l == summary.label)
            .map(|(_, r)| r.summary.post.mae)
            .collect();
        let mean = maes.iter().sum::<f64>() / maes.len() as f64;
        assert!((summary.mae_post_mean - mean).abs() < 1e-12);
    }
    let dir = tempfile::tempdir().unwrap();
    write_suite_outputs(&out, dir.path()).unwrap();
    let files = std::fs::read_dir(dir.path()).unwrap().count();
    assert_eq!(files, 12);
}

#[test]
fn suite_records_failures_and_continues() {
    let s = stream(4);
    let bad = RunConfig {
        sim_window: 500,
        ..fast(Mode::Cici)
    };
    let out = run_suite(&model(), &s, &[RunConfig::with_mode(Mode::NoAdapt), bad], &[0, 1]).unwrap();
    assert_eq!(out.reports.len(), 2);
    assert_eq!(out.failures.len(), 2);
    assert!(out.failures[0].message.contains("sim_window"));
}

#[test]
fn checkpoint_file_round_trip_preserves_predictions() {
    let m = model();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    Checkpoint::new(&m, None, None).save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap().model().unwrap();
    let s = stream(2);
    let x = s[0].window.frames_slice(0, 128).unwrap();
    assert_eq!(m.predict(&x).unwrap().samples, loaded.predict(&x).unwrap().samples);
}
