use std::collections::BTreeSet;
use std::sync::Arc;

use g3dhf_annotate::event::parse_log;
use g3dhf_annotate::service::LOG_FILE;
use g3dhf_annotate::{export, AnnotateError, Durability, Export, ExportOptions, Service, ServiceConfig, SessionState, StoreState, SubmitRequest};
use g3dhf_core::model::{DatasetManifest, DistortionCategory, ItemId, ManifestItem, Point};

fn manifest(n: usize) -> DatasetManifest {
    DatasetManifest::new(
        (0..n)
            .map(|i| {
                let mut m = ManifestItem::new(format!("face{i}"), "eg3d");
                m.video = Some(format!("videos/face{i}.mp4").into());
                m.snapshot = Some(format!("snaps/face{i}.png").into());
                m.snapshot_width = Some(512);
                m.snapshot_height = Some(256);
                m
            })
            .collect(),
    )
    .unwrap()
}

fn open(dir: &std::path::Path, n: usize) -> Service {
    let mut cfg = ServiceConfig::new(dir);
    cfg.durability = Durability::Buffered;
    Service::open(manifest(n), cfg).unwrap()
}

fn rate(item: &ItemId, q: f64, a: f64) -> SubmitRequest {
    SubmitRequest {
        item_id: item.clone(),
        quality: Some(q),
        authenticity: Some(a),
        ..Default::default()
    }
}

#[test]
fn queue_is_a_seeded_permutation() {
    let dir = tempfile::tempdir().unwrap();
    let svc = open(dir.path(), 3);
    let s = svc.create_session("alice", 7).unwrap();
    let got: BTreeSet<_> = s.queue.iter().cloned().collect();
    let want: BTreeSet<_> = svc.manifest().items.iter().map(|i| i.id.clone()).collect();
    assert_eq!(got, want);
    assert_eq!(s.queue.len(), 3);

    let again = svc.create_session("alice", 7).unwrap();
    assert_eq!(again, s);
    assert_eq!(svc.state().sessions.len(), 1);

    let other_dir = tempfile::tempdir().unwrap();
    let other = open(other_dir.path(), 3).create_session("bob", 7).unwrap();
    assert_eq!(other.queue, s.queue);
}

#[test]
fn empty_manifest_and_duplicate_active_session() {
    let dir = tempfile::tempdir().unwrap();
    let svc = Service::open(DatasetManifest::default(), ServiceConfig::new(dir.path())).unwrap();
    assert!(matches!(svc.create_session("a", 1), Err(AnnotateError::EmptyManifest)));

    let dir = tempfile::tempdir().unwrap();
    let svc = open(dir.path(), 2);
    svc.create_session("a", 1).unwrap();
    assert!(matches!(svc.create_session("a", 2), Err(AnnotateError::DuplicateActiveSession { .. })));
    assert!(matches!(svc.create_session("  ", 2), Err(AnnotateError::Validation(_))));
}

#[test]
fn navigation() {
    let dir = tempfile::tempdir().unwrap();
    let svc = open(dir.path(), 3);
    let s = svc.create_session("a", 3).unwrap();
    let first = svc.current(&s.session_id).unwrap();
    assert_eq!(first.item_id, s.queue[0]);
    assert_eq!(first.video.as_deref(), Some(format!("/media/videos/{}.mp4", first.item_id).as_str()));
    assert_eq!(first.snapshot_width, Some(512));

    assert_eq!(svc.retreat(&s.session_id).unwrap().item_id, s.queue[0]);
    assert_eq!(svc.advance(&s.session_id).unwrap().item_id, s.queue[1]);
    assert_eq!(svc.retreat(&s.session_id).unwrap().item_id, s.queue[0]);

    svc.advance(&s.session_id).unwrap();
    svc.advance(&s.session_id).unwrap();
    let end = svc.advance(&s.session_id).unwrap();
    assert_eq!(end.state, SessionState::Complete);
    assert_eq!(end.item_id, s.queue[2]);
    assert!(matches!(svc.current(&s.session_id), Err(AnnotateError::SessionComplete(_))));
    assert!(matches!(svc.advance(&s.session_id), Err(AnnotateError::SessionComplete(_))));
    assert!(matches!(svc.current("nope"), Err(AnnotateError::UnknownSession(_))));

    // a finished subject may start over with a new seed
    assert!(svc.create_session("a", 4).is_ok());
}

#[test]
fn submit_validation() {
    let dir = tempfile::tempdir().unwrap();
    let svc = open(dir.path(), 2);
    let s = svc.create_session("a", 1).unwrap();
    let item = s.queue[0].clone();

    let ack = svc.submit(&s.session_id, &rate(&item, 3.5, 2.0)).unwrap();
    assert_eq!(ack.seq, 1);
    let lines_after_ok = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap().lines().count();

    let err = svc.submit(&s.session_id, &rate(&item, 5.1, 2.0)).unwrap_err();
    assert!(matches!(err, AnnotateError::Validation(_)), "{err}");
    assert!(svc.submit(&s.session_id, &rate(&item, f64::NAN, 2.0)).is_err());
    assert!(matches!(svc.submit(&s.session_id, &rate(&s.queue[1], 1.0, 1.0)), Err(AnnotateError::StaleItem { .. })));

    let mut marks = SubmitRequest {
        item_id: item.clone(),
        marks: vec![Point::new(512, 3)],
        categories: vec!["Eye Distortions".into()],
        ..Default::default()
    };
    assert!(matches!(svc.submit(&s.session_id, &marks), Err(AnnotateError::Validation(_))));
    marks.marks = vec![Point::new(511, 255)];
    marks.categories.clear();
    assert!(matches!(svc.submit(&s.session_id, &marks), Err(AnnotateError::Validation(_))));
    marks.categories = vec!["eye distortions".into(), "No Distortion".into()];
    assert!(matches!(svc.submit(&s.session_id, &marks), Err(AnnotateError::Validation(_))));
    marks.categories = vec!["Teeth".into()];
    assert!(matches!(svc.submit(&s.session_id, &marks), Err(AnnotateError::Validation(_))));
    let empty = SubmitRequest {
        item_id: item.clone(),
        ..Default::default()
    };
    assert!(matches!(svc.submit(&s.session_id, &empty), Err(AnnotateError::Validation(_))));

    let lines = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap().lines().count();
    assert_eq!(lines, lines_after_ok, "rejected submissions must not be logged");
}

fn finish(svc: &Service, session: &str) {
    while svc.session(session).unwrap().state == SessionState::Active {
        svc.advance(session).unwrap();
    }
}

#[test]
fn export_counts_and_latest_wins() {
    let dir = tempfile::tempdir().unwrap();
    let svc = open(dir.path(), 2);
    assert_eq!(svc.export(), Export::default());

    let s = svc.create_session("a", 9).unwrap();
    let id = &s.session_id;
    svc.submit(id, &rate(&s.queue[0], 1.0, 2.0)).unwrap();
    svc.submit(id, &rate(&s.queue[0], 4.0, 3.0)).unwrap();
    svc.advance(id).unwrap();
    svc.submit(id, &rate(&s.queue[1], 2.5, 2.5)).unwrap();
    svc.submit(
        id,
        &SubmitRequest {
            item_id: s.queue[1].clone(),
            marks: vec![Point::new(10, 20), Point::new(30, 40)],
            categories: vec!["Eye Distortions".into()],
            description: Some("blurry left eye".into()),
            ..Default::default()
        },
    )
    .unwrap();

    // incomplete sessions do not contribute ratings by default
    let pending = svc.export();
    assert!(pending.ratings.is_empty());
    assert_eq!(pending.fixations.len(), 1);
    assert_eq!(export(&svc.state(), ExportOptions { complete_only: false }).ratings.len(), 4);

    finish(&svc, id);
    let out = svc.export();
    assert_eq!(out.ratings.len(), 4);
    let first: Vec<_> = out.ratings.iter().filter(|r| r.item_id == s.queue[0]).map(|r| r.score).collect();
    assert_eq!(first, vec![4.0, 3.0]);
    assert_eq!(out.fixations.len(), 1);
    assert_eq!(out.fixations[0].points.len(), 2);
    assert_eq!((out.fixations[0].image_width, out.fixations[0].image_height), (512, 256));
    assert_eq!(out.labels.len(), 1);
    assert_eq!(out.labels[0].description, "blurry left eye");
    assert!(out.labels[0].categories.contains(&DistortionCategory::EyeDistortions));

    // the log keeps both submissions for the first item
    let (recs, _) = parse_log(&std::fs::read(dir.path().join(LOG_FILE)).unwrap()).unwrap();
    let subs = recs
        .iter()
        .filter(|r| matches!(&r.event, g3dhf_annotate::Event::Submitted(x) if x.item_id == s.queue[0]))
        .count();
    assert_eq!(subs, 2);

    let out_dir = dir.path().join("export");
    out.write_to_dir(&out_dir).unwrap();
    let ratings = std::fs::read_to_string(out_dir.join("ratings.jsonl")).unwrap();
    assert_eq!(ratings.lines().count(), 4);
    let parsed = g3dhf_core::model::read_ratings_jsonl(ratings.as_bytes(), "ratings.jsonl").unwrap();
    assert_eq!(parsed.len(), 4);
}

#[test]
fn empty_store_exports_three_empty_collections() {
    let dir = tempfile::tempdir().unwrap();
    let svc = open(dir.path(), 1);
    let out = dir.path().join("out");
    svc.export().write_to_dir(&out).unwrap();
    assert_eq!(std::fs::read_to_string(out.join("ratings.jsonl")).unwrap(), "");
    assert_eq!(std::fs::read_to_string(out.join("fixations.json")).unwrap(), "[]\n");
    assert_eq!(std::fs::read_to_string(out.join("labels.json")).unwrap(), "[]\n");
}

#[test]
fn reopen_and_compaction_preserve_state() {
    let dir = tempfile::tempdir().unwrap();
    let before;
    {
        let mut cfg = ServiceConfig::new(dir.path());
        cfg.compact_every = Some(4);
        let svc = Service::open(manifest(3), cfg).unwrap();
        for subject in ["a", "b", "c"] {
            let s = svc.create_session(subject, 5).unwrap();
            for item in &s.queue {
                svc.submit(&s.session_id, &rate(item, 2.0, 3.0)).unwrap();
                svc.advance(&s.session_id).unwrap();
            }
        }
        before = svc.export();
        assert!(dir.path().join("snapshot.json").exists());
    }
    let svc = open(dir.path(), 3);
    assert_eq!(svc.export(), before);
    assert_eq!(before.ratings.len(), 18);
    let s = svc.create_session("d", 1).unwrap();
    assert_eq!(s.session_id, "S000004");

    svc.compact().unwrap();
    let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    assert!(log.is_empty());
    assert_eq!(open(dir.path(), 3).state(), svc.state());
}

#[test]
fn concurrent_sessions_keep_their_sequences() {
    let dir = tempfile::tempdir().unwrap();
    let svc = Arc::new(open(dir.path(), 40));
    let handles: Vec<_> = (0..8)
        .map(|t| {
            let svc = svc.clone();
            std::thread::spawn(move || {
                let s = svc.create_session(&format!("subj{t}"), t).unwrap();
                for item in &s.queue {
                    svc.submit(&s.session_id, &rate(item, 1.0, 4.0)).unwrap();
                    svc.submit(&s.session_id, &rate(item, 2.0, 3.0)).unwrap();
                    svc.advance(&s.session_id).unwrap();
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    let (recs, _) = parse_log(&std::fs::read(dir.path().join(LOG_FILE)).unwrap()).unwrap();
    let lsns: Vec<u64> = recs.iter().map(|r| r.lsn).collect();
    assert_eq!(lsns, (1..=lsns.len() as u64).collect::<Vec<_>>());
    let replayed = StoreState::replay(&recs).unwrap();
    assert_eq!(replayed, svc.state());
    for s in replayed.sessions.values() {
        assert_eq!(s.last_seq, 80);
    }
    assert_eq!(svc.export().ratings.len(), 8 * 40 * 2);
}
