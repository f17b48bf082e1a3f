mod common;

use std::sync::Arc;

use nextact::domain::{ActivityCatalog, StaticContext};
use nextact::features::{scale_numeric, SampleCache};
use nextact::harness::predict_case;
use nextact::service::{CreateSession, DecisionService, Override, SessionSource, VitalsPatch};
use nextact::Error;

fn service() -> (DecisionService, common::Fixture) {
    let fx = common::small_fixture(30, 3);
    let svc = DecisionService::new();
    svc.insert_model(Some("m".into()), fx.bundle().clone());
    svc.add_cases(fx.corpus.cases.clone());
    (svc, fx)
}

fn replay(svc: &DecisionService, case_id: &str) -> String {
    svc.create_session(CreateSession {
        model_id: "m".into(),
        source: SessionSource::Replay {
            case_id: case_id.into(),
        },
    })
    .unwrap()
    .session_id
}

fn test_case_ids(cache: &SampleCache) -> Vec<String> {
    cache.split.test.clone()
}

#[test]
fn replay_matches_offline_predictions() {
    let (svc, fx) = service();
    for case_id in test_case_ids(&fx.cache) {
        let case = fx.corpus.cases.iter().find(|c| c.case_id == case_id).unwrap();
        let (probs, preds, _) = predict_case(fx.bundle(), case).unwrap();
        let offline = fx.bundle().pipeline.sample_case(case).unwrap();
        let id = replay(&svc, &case_id);
        for t in 0..case.minutes() as usize {
            let frame = svc.tick(&id).unwrap();
            assert_eq!(frame.minute as usize, t);
            assert!(frame.is_consistent());
            assert_eq!(frame.context, offline[t].features, "features differ at minute {t}");
            let expected: Vec<usize> = (0..preds.ncols()).filter(|&i| preds[[t, i]]).collect();
            assert_eq!(frame.predicted, expected, "{case_id} minute {t}");
            for (i, p) in frame.probabilities.iter().enumerate() {
                assert!((p - probs[[t, i]]).abs() <= 1e-12);
            }
            assert_eq!(frame.truth.as_ref().unwrap(), &offline[t].label.active());
        }
        assert!(matches!(svc.tick(&id), Err(Error::EndOfCase(m)) if m == case.minutes()));
    }
}

#[test]
fn minute_zero_has_no_process_context() {
    let (svc, fx) = service();
    let id = replay(&svc, &fx.corpus.cases[0].case_id);
    let info = svc.session_info(&id).unwrap();
    assert_eq!(info.minute, 0);
    assert_eq!(info.frames, 0);
    let frame = svc.tick(&id).unwrap();
    assert!(frame.context.last_k_ids.iter().all(|&i| i == 0));
    assert!(frame.context.long_range_vec.iter().all(|&v| v == 0.0));
}

#[test]
fn unknown_model_or_case() {
    let (svc, _) = service();
    let err = svc
        .create_session(CreateSession {
            model_id: "nope".into(),
            source: SessionSource::Live {
                static_ctx: StaticContext::default(),
            },
        })
        .unwrap_err();
    assert!(matches!(err, Error::NotFound(_)));
    let err = svc
        .create_session(CreateSession {
            model_id: "m".into(),
            source: SessionSource::Replay {
                case_id: "case-9999".into(),
            },
        })
        .unwrap_err();
    assert!(matches!(err, Error::NotFound(_)));
}

#[test]
fn live_session_records_events() {
    let (svc, fx) = service();
    let catalog = fx.bundle().catalog().clone();
    let info = svc
        .create_session(CreateSession {
            model_id: "m".into(),
            source: SessionSource::Live {
                static_ctx: StaticContext {
                    age: Some(9.0),
                    injury_type: Some("blunt".into()),
                    ..Default::default()
                },
            },
        })
        .unwrap();
    let id = info.session_id;
    let frame = svc.tick(&id).unwrap();
    assert!(frame.truth.is_none());
    // dynamic context is missing-encoded: numerics 0, fio2 one-hot on `missing`
    let fio2 = &fx.bundle().pipeline.manifest.fio2_vocab;
    assert!(frame.context.dynamic_vec[..5].iter().all(|&v| v == 0.0));
    assert_eq!(frame.context.dynamic_vec[5 + fio2.len() - 1], 1.0);

    svc.record_event(&id, "Intubation", 130, 180).unwrap();
    svc.tick(&id).unwrap();
    svc.tick(&id).unwrap();
    let frame = svc.tick(&id).unwrap();
    assert_eq!(frame.minute, 3);
    let intubation = catalog.label_index("Intubation").unwrap();
    assert_eq!(frame.context.last_k_ids[0], ActivityCatalog::embedding_id(intubation));
    assert!(matches!(svc.record_event(&id, "Juggling", 0, 1), Err(Error::UnknownActivity(_))));
}

#[test]
fn replay_rejects_recorded_events() {
    let (svc, fx) = service();
    let id = replay(&svc, &fx.corpus.cases[0].case_id);
    assert!(matches!(svc.record_event(&id, "Intubation", 0, 10), Err(Error::Mode(_))));
}

#[test]
fn vitals_override_shows_from_its_time() {
    let (svc, fx) = service();
    let case = &fx.corpus.cases[1];
    let id = replay(&svc, &case.case_id);
    svc.apply_override(
        &id,
        Override::Vitals {
            t_s: 180,
            patch: VitalsPatch {
                systolic_bp: Some(70.0),
                ..Default::default()
            },
        },
    )
    .unwrap();
    let frames: Vec<_> = (0..5).map(|_| svc.tick(&id).unwrap()).collect();
    let range = &fx.bundle().pipeline.stats.dynamic_numeric[2];
    let expected = scale_numeric(70.0, range).unwrap();
    assert_eq!(frames[4].context.dynamic_vec[2], expected);
    assert_eq!(frames[3].context.dynamic_vec[2], expected);
    // ground truth is untouched
    assert_eq!(svc.case(&case.case_id).unwrap().as_ref(), case);
}

#[test]
fn inject_and_suppress_events() {
    let (svc, fx) = service();
    let catalog = fx.bundle().catalog().clone();
    let iv = catalog.label_index("IV placement").unwrap();
    // a case whose earliest event has a label that occurs once before minute 1
    let (case, first) = fx
        .corpus
        .cases
        .iter()
        .find_map(|c| {
            let first = c.events.iter().filter(|e| e.start_s < 60).min_by_key(|e| e.start_s)?;
            let once = c.events.iter().filter(|e| e.label_id == first.label_id && e.start_s < 60).count() == 1;
            (once && first.label_id != iv).then_some((c, first))
        })
        .unwrap();

    let id = replay(&svc, &case.case_id);
    let inject = svc
        .apply_override(
            &id,
            Override::InjectEvent {
                activity: "IV placement".into(),
                start_s: 179,
                end_s: 240,
            },
        )
        .unwrap();
    svc.apply_override(
        &id,
        Override::SuppressEvent {
            activity: catalog.labels()[first.label_id].clone(),
            start_s: first.start_s,
        },
    )
    .unwrap();
    let frames: Vec<_> = (0..4).map(|_| svc.tick(&id).unwrap()).collect();
    assert_eq!(frames[3].context.long_range_vec[iv], 1.0);
    assert_eq!(frames[3].context.last_k_ids[0], ActivityCatalog::embedding_id(iv));
    assert_eq!(frames[1].context.long_range_vec[first.label_id], 0.0);
    // suppressed events stay in the ground truth
    assert!(frames[0].truth.as_ref().unwrap().contains(&first.label_id));

    svc.remove_override(&id, inject.override_id).unwrap();
    assert!(svc.remove_override(&id, inject.override_id).is_err());
    assert_eq!(svc.session_info(&id).unwrap().overrides.len(), 1);
    assert!(matches!(
        svc.apply_override(
            &id,
            Override::InjectEvent {
                activity: "Juggling".into(),
                start_s: 0,
                end_s: 1
            }
        ),
        Err(Error::UnknownActivity(_))
    ));
    assert!(svc
        .apply_override(
            &id,
            Override::InjectEvent {
                activity: "IV placement".into(),
                start_s: 10,
                end_s: 5
            }
        )
        .is_err());
}

#[test]
fn removing_overrides_restores_frames() {
    let (svc, fx) = service();
    let case_id = &fx.corpus.cases[4].case_id;
    let plain = replay(&svc, case_id);
    let patched = replay(&svc, case_id);
    let o = svc
        .apply_override(
            &patched,
            Override::Static {
                patch: StaticContext {
                    gcs: Some(3.0),
                    ..Default::default()
                },
            },
        )
        .unwrap();
    let a = svc.tick(&plain).unwrap();
    let b = svc.tick(&patched).unwrap();
    assert_ne!(a.context.static_vec, b.context.static_vec);
    svc.remove_override(&patched, o.override_id).unwrap();
    let a = svc.tick(&plain).unwrap();
    let b = svc.tick(&patched).unwrap();
    assert_eq!(a.context, b.context);
    assert_eq!(a.probabilities, b.probabilities);
}

#[test]
fn subscribers_get_every_frame_in_order() {
    let (svc, fx) = service();
    let svc = Arc::new(svc);
    let id = replay(&svc, &fx.corpus.cases[2].case_id);
    let a = svc.subscribe(&id).unwrap();
    let b = svc.subscribe(&id).unwrap();
    let reader = std::thread::spawn(move || a.iter().map(|f| f.minute).collect::<Vec<_>>());
    for _ in 0..3 {
        svc.tick(&id).unwrap();
    }
    svc.close_session(&id).unwrap();
    assert_eq!(reader.join().unwrap(), vec![0, 1, 2]);
    assert_eq!(b.iter().map(|f| f.minute).collect::<Vec<_>>(), vec![0, 1, 2]);
    assert!(matches!(svc.tick(&id), Err(Error::NotFound(_))));
}

#[test]
fn timeline_report_needs_known_case() {
    let (svc, fx) = service();
    let export = svc.timeline(&fx.corpus.cases[0].case_id, "m", 1.1).unwrap();
    assert!(export.activities.is_empty());
    assert_eq!(export.minutes.len() as u32, fx.corpus.cases[0].minutes());
    assert!(matches!(svc.timeline("case-9999", "m", 0.5), Err(Error::NotFound(_))));
}
