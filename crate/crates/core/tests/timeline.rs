mod common;

use nextact::checkpoint::{load_checkpoint, save_checkpoint};
use nextact::harness::{export_timeline, Outcome};

#[test]
fn truth_matches_raw_events() {
    let fx = common::small_fixture(24, 21);
    let bundle = fx.bundle();
    let n = bundle.catalog().len();
    let everything = vec![1.0; n];
    for case in &fx.corpus.cases {
        let export = export_timeline(&fx.corpus.cases, &case.case_id, bundle, &everything, 0.5).unwrap();
        assert_eq!(export.activity_ids, (0..n).collect::<Vec<_>>());
        let expected_minutes = (case.duration_s as f64 / 60.0).ceil() as usize;
        assert_eq!(export.minutes.len(), expected_minutes);
        for m in &export.minutes {
            let lo = 60 * m.minute as i64;
            let mut truth: Vec<usize> = case
                .events
                .iter()
                .filter(|e| e.start_s < lo + 60 && e.end_s >= lo)
                .map(|e| e.label_id)
                .collect();
            truth.sort_unstable();
            truth.dedup();
            assert_eq!(m.truth, truth, "{} minute {}", case.case_id, m.minute);
            for (cell, &i) in m.cells.iter().zip(&export.activity_ids) {
                assert_eq!(*cell, Outcome::of(m.predicted.contains(&i), m.truth.contains(&i)));
            }
        }
    }
}

#[test]
fn cutoff_filters_activities() {
    let fx = common::small_fixture(24, 22);
    let bundle = fx.bundle();
    let f1 = bundle.test_label_f1.clone().unwrap();
    let case_id = &fx.corpus.cases[0].case_id;
    let export = export_timeline(&fx.corpus.cases, case_id, bundle, &f1, 0.5).unwrap();
    assert!(export.activity_ids.iter().all(|&i| f1[i] > 0.5));
    assert_eq!(export.activity_ids.len(), f1.iter().filter(|&&v| v > 0.5).count());
    let none = export_timeline(&fx.corpus.cases, case_id, bundle, &f1, 1.1).unwrap();
    assert!(none.activities.is_empty());
    assert!(none.minutes.iter().all(|m| m.cells.is_empty()));
    assert!(export_timeline(&fx.corpus.cases, case_id, bundle, &f1[1..], 0.5).is_err());
}

#[test]
fn timeline_survives_checkpoint_round_trip() {
    let fx = common::small_fixture(24, 23);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(fx.bundle(), &path).unwrap();
    let loaded = load_checkpoint(&path, Some(&fx.corpus.manifest.catalog)).unwrap();
    let f1 = vec![1.0; loaded.catalog().len()];
    for case in fx.corpus.cases.iter().take(5) {
        let a = export_timeline(&fx.corpus.cases, &case.case_id, fx.bundle(), &f1, 0.0).unwrap();
        let b = export_timeline(&fx.corpus.cases, &case.case_id, &loaded, &f1, 0.0).unwrap();
        assert_eq!(a, b);
    }
}
