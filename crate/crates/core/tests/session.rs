mod common;

use std::collections::HashSet;

use albf_core::beamform::Method;
use albf_core::neural::Model;
use albf_core::session::{
    replay, FrameSource, RoundPhase, Session, SessionError, SessionLog, SimulatedSource,
};
use albf_core::Error;
use common::{tiny_config, tiny_source};

fn session_error(e: Error) -> SessionError {
    match e {
        Error::Session(s) => s,
        other => panic!("expected a session error, got {other}"),
    }
}

fn method_id(session: &Session, ids: &[String], method: Method) -> String {
    ids.iter().find(|id| session.reveal(id) == Some(method)).cloned().expect("method offered")
}

fn ids(set: &albf_core::session::CandidateSet) -> Vec<String> {
    set.candidates.iter().map(|c| c.id.clone()).collect()
}

#[test]
fn model_candidate_joins_after_warmup() {
    let mut session = Session::new(tiny_config(1)).unwrap();
    let mut source = SimulatedSource::new(tiny_source(1));
    for round in 1..=7u64 {
        let set = session.next_round(&mut source).unwrap().unwrap();
        assert_eq!(set.round_id, round);
        let expected = if round <= 5 { 4 } else { 5 };
        assert_eq!(set.candidates.len(), expected, "round {round}");
        let methods: HashSet<Method> = set.candidates.iter().map(|c| session.reveal(&c.id).unwrap()).collect();
        assert_eq!(methods.contains(&Method::Model), round > 5);
        let pick = method_id(&session, &ids(&set), Method::Das);
        session.submit_selection(round, &pick).unwrap();
    }
}

#[test]
fn same_frame_under_different_seeds_gives_same_images_in_another_order() {
    let grid = tiny_config(0).grid.build(&tiny_config(0).probe).unwrap();
    let (frame, origin) = SimulatedSource::new(tiny_source(3)).next_frame(&grid).unwrap().unwrap();
    let mut a = Session::new(tiny_config(10)).unwrap();
    let mut b = Session::new(tiny_config(11)).unwrap();
    let sa = a.run_round(frame.clone(), origin.clone()).unwrap();
    let sb = b.run_round(frame, origin).unwrap();
    assert_ne!(sa.permutation_seed, sb.permutation_seed);

    let bytes = |s: &albf_core::session::CandidateSet| -> Vec<Vec<u8>> {
        s.candidates.iter().map(|c| c.png.as_ref().clone()).collect()
    };
    let (ba, bb) = (bytes(&sa), bytes(&sb));
    let mut sorted_a = ba.clone();
    let mut sorted_b = bb.clone();
    sorted_a.sort();
    sorted_b.sort();
    assert_eq!(sorted_a, sorted_b);
    assert_ne!(ba, bb);
    assert!(ids(&sa).iter().all(|id| !ids(&sb).contains(id)));
}

#[test]
fn candidate_payload_carries_only_opaque_tokens() {
    let mut session = Session::new(tiny_config(4)).unwrap();
    let set = session.next_round(&mut SimulatedSource::new(tiny_source(4))).unwrap().unwrap();
    for c in &set.candidates {
        assert_eq!(c.id.len(), 32);
        assert!(c.id.chars().all(|ch| ch.is_ascii_hexdigit()));
        for m in Method::ALL {
            assert!(!c.id.to_ascii_lowercase().contains(&m.tag().to_ascii_lowercase()));
        }
    }
    let current = session.current().unwrap();
    assert_eq!(ids(&current), ids(&set));
}

#[test]
fn sequencing_errors_leave_the_round_open() {
    let mut session = Session::new(tiny_config(5)).unwrap();
    let mut source = SimulatedSource::new(tiny_source(5));
    let set = session.next_round(&mut source).unwrap().unwrap();

    let again = session.next_round(&mut source).unwrap_err();
    assert!(matches!(session_error(again), SessionError::Sequencing(_)));

    let stale = session.submit_selection(set.round_id + 1, &set.candidates[0].id).unwrap_err();
    assert_eq!(session_error(stale), SessionError::BadRound { requested: 2, open: Some(1) });

    let bogus = session.submit_selection(set.round_id, "00000000000000000000000000000000").unwrap_err();
    assert!(matches!(session_error(bogus), SessionError::UnknownCandidate(_)));
    assert_eq!(session.phase(), RoundPhase::AwaitingSelection);
    assert!(session.records().is_empty());

    session.submit_selection(set.round_id, &set.candidates[0].id).unwrap();
    assert_eq!(session.phase(), RoundPhase::Idle);
    let twice = session.submit_selection(set.round_id, &set.candidates[0].id).unwrap_err();
    assert!(matches!(session_error(twice), SessionError::Sequencing(_)));
    let never = session.submit_selection(9, &set.candidates[0].id).unwrap_err();
    assert_eq!(session_error(never), SessionError::BadRound { requested: 9, open: None });
}

#[test]
fn selection_trains_toward_the_chosen_method_and_model_picks_skip() {
    let mut cfg = tiny_config(6);
    cfg.warmup_rounds = 0;
    let mut session = Session::new(cfg).unwrap();
    let mut source = SimulatedSource::new(tiny_source(6));

    let set = session.next_round(&mut source).unwrap().unwrap();
    let before = session.model().checkpoint_id();
    let out = session.submit_selection(1, &method_id(&session, &ids(&set), Method::Gcf)).unwrap();
    assert_eq!(out.method, Method::Gcf);
    assert!(!out.step_skipped && out.loss > 0.0);
    assert_ne!(out.checkpoint_id, before);
    assert_eq!(session.model().step(), 1);

    let set = session.next_round(&mut source).unwrap().unwrap();
    let out = session.submit_selection(2, &method_id(&session, &ids(&set), Method::Model)).unwrap();
    assert!(out.step_skipped);
    assert_eq!(out.loss, 0.0);
    assert_eq!(session.model().step(), 1);
    let records = session.records();
    assert_eq!(records[1].checkpoint_id, records[0].checkpoint_id);
    assert_eq!(records[1].timing.train_s, 0.0);
    assert!(records.iter().all(|r| r.shown.contains(&r.selected_id)));
}

#[test]
fn candidate_positions_are_uniform() {
    const ROUNDS: usize = 10_000;
    let mut cfg = tiny_config(7);
    cfg.warmup_rounds = 0;
    let mut session = Session::new(cfg).unwrap();
    let grid = *session.grid();
    let (frame, origin) = SimulatedSource::new(tiny_source(7)).next_frame(&grid).unwrap().unwrap();

    let mut counts = [[0usize; 5]; 5];
    for _ in 0..ROUNDS {
        let set = session.run_round(frame.clone(), origin.clone()).unwrap();
        assert_eq!(set.candidates.len(), 5);
        for (pos, c) in set.candidates.iter().enumerate() {
            let m = session.reveal(&c.id).unwrap();
            counts[Method::ALL.iter().position(|&x| x == m).unwrap()][pos] += 1;
        }
        let pick = method_id(&session, &ids(&set), Method::Model);
        session.submit_selection(set.round_id, &pick).unwrap();
    }
    for (m, row) in counts.iter().enumerate() {
        for (pos, &n) in row.iter().enumerate() {
            let f = n as f64 / ROUNDS as f64;
            assert!((f - 0.2).abs() <= 0.02, "{} at position {pos}: {f}", Method::ALL[m]);
        }
    }
    let stats = session.stats();
    assert_eq!(stats.count(Method::Model), ROUNDS as u64);
    assert_eq!(stats.percent(Method::Model), 100.0);
}

#[test]
fn stats_conserve_counts() {
    let mut session = Session::new(tiny_config(8)).unwrap();
    let mut source = SimulatedSource::new(tiny_source(8));
    let picks = [Method::Das, Method::Mvdr, Method::Mvdr, Method::Fdmas, Method::Gcf, Method::Das, Method::Model];
    for &m in &picks {
        let set = session.next_round(&mut source).unwrap().unwrap();
        session.submit_selection(set.round_id, &method_id(&session, &ids(&set), m)).unwrap();
    }
    let stats = session.stats();
    assert_eq!(stats.rounds, picks.len() as u64);
    assert_eq!(stats.shares.iter().map(|s| s.count).sum::<u64>(), stats.rounds);
    assert!((stats.shares.iter().map(|s| s.percent).sum::<f64>() - 100.0).abs() < 1e-9);
    for s in &stats.shares {
        assert_eq!(s.percent, s.count as f64 * 100.0 / stats.rounds as f64);
    }
    assert_eq!(stats.count(Method::Mvdr), 2);
    assert_eq!(stats.losses.len(), picks.len());
    assert_eq!(stats.train_timing.unwrap().count, picks.len() - 1);
}

#[test]
fn frames_are_dropped_unless_retained() {
    let mut source = SimulatedSource::new(tiny_source(9));
    for retain in [false, true] {
        let mut cfg = tiny_config(9);
        cfg.retain_frames = retain;
        let mut session = Session::new(cfg).unwrap();
        for _ in 0..2 {
            let set = session.next_round(&mut source).unwrap().unwrap();
            session.submit_selection(set.round_id, &set.candidates[0].id).unwrap();
        }
        assert_eq!(session.retained_frames().len(), if retain { 2 } else { 0 });
    }
}

#[test]
fn exhausted_source_ends_the_session() {
    let mut session = Session::new(tiny_config(12)).unwrap();
    let mut source = SimulatedSource::new(albf_core::session::SimulatedSourceConfig { limit: Some(1), ..tiny_source(12) });
    let set = session.next_round(&mut source).unwrap().unwrap();
    session.submit_selection(set.round_id, &set.candidates[0].id).unwrap();
    assert!(session.next_round(&mut source).unwrap().is_none());
    assert_eq!(session.phase(), RoundPhase::Idle);
}

#[test]
fn checkpoint_file_tracks_the_latest_step() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.albf");
    let cfg = tiny_config(13);
    let mut session = Session::new(cfg.clone()).unwrap().with_checkpoint(&path);
    let mut source = SimulatedSource::new(tiny_source(13));
    for _ in 0..2 {
        let set = session.next_round(&mut source).unwrap().unwrap();
        let out = session.submit_selection(set.round_id, &set.candidates[1].id).unwrap();
        let mut loaded = Model::<f64>::load(&path, &cfg.unet).unwrap();
        assert_eq!(loaded.checkpoint_id(), out.checkpoint_id);
    }
}

#[test]
fn replay_reproduces_and_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("session.ndjson");
    let mut cfg = tiny_config(14);
    cfg.warmup_rounds = 2;
    cfg.epochs_per_round = 2;
    let mut session = Session::new(cfg).unwrap().with_log(&path).unwrap();
    let mut source = SimulatedSource::new(tiny_source(14));
    let picks = [Method::Mvdr, Method::Fdmas, Method::Model, Method::Gcf, Method::Das, Method::Model];
    for &m in &picks {
        let set = session.next_round(&mut source).unwrap().unwrap();
        session.submit_selection(set.round_id, &method_id(&session, &ids(&set), m)).unwrap();
    }

    let log = SessionLog::read(&path).unwrap();
    assert_eq!(log.records, session.records());
    let report = replay(&log).unwrap();
    assert!(report.matches(), "{report:?}");
    assert_eq!(report.final_checkpoint_id, session.model().checkpoint_id());

    let mut tampered = log.clone();
    tampered.records[3].selected_method = Method::Das;
    let report = replay(&tampered).unwrap();
    assert!(!report.matches());
    assert_eq!(report.mismatched_rounds.first(), Some(&4));
}

#[test]
fn truncated_log_lines_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("session.ndjson");
    let mut session = Session::new(tiny_config(15)).unwrap().with_log(&path).unwrap();
    let set = session.next_round(&mut SimulatedSource::new(tiny_source(15))).unwrap().unwrap();
    session.submit_selection(set.round_id, &set.candidates[0].id).unwrap();

    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, &text[..text.len() - 20]).unwrap();
    assert!(matches!(SessionLog::read(&path), Err(Error::Format(_))));
    std::fs::write(&path, text.lines().nth(1).unwrap()).unwrap();
    assert!(matches!(SessionLog::read(&path), Err(Error::Format(_))));
}
