//! Engagement metrics over generated logs whose ground truth is known.

use std::collections::BTreeMap;

use parsons_core::telemetry::{
    count_attempts, engagement_records, flag_fast_finishers, parse_log, practice_time, read_log, validate_log,
    Condition, EngagementRecord, EventBody, EventLogWriter, SessionEvent, TelemetryError, TimingOptions,
    SCHEMA_VERSION,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn event(student: &str, condition: Condition, q: Option<&str>, ts: u64, body: EventBody) -> SessionEvent {
    SessionEvent {
        v: SCHEMA_VERSION,
        session_id: format!("session-{student}"),
        student_id: student.into(),
        condition,
        question_id: q.map(String::from),
        timestamp_ms: ts,
        body,
    }
}

fn run(passed: usize) -> EventBody {
    EventBody::Run {
        code: "x = 1".into(),
        passed,
        total: 3,
    }
}

struct Generated {
    events: Vec<SessionEvent>,
    attempts: u64,
}

/// One student working on four questions, hopping between the open ones.
fn generate_student(rng: &mut ChaCha8Rng, student: &str, condition: Condition) -> Generated {
    let questions = ["q1", "q2", "q3", "q4"];
    let mut ts = rng.random_range(0..1_000_000u64);
    let mut events = vec![event(
        student,
        condition,
        None,
        ts,
        EventBody::SessionStart {
            problem_order: questions.map(String::from).to_vec(),
            token_sha256: "00".into(),
        },
    )];
    let mut attempts = 0;
    let mut opened: Vec<&str> = Vec::new();
    let mut completed: Vec<&str> = Vec::new();
    for _ in 0..rng.random_range(4..40) {
        ts += rng.random_range(0..90_000);
        let unopened: Vec<&str> = questions.iter().copied().filter(|q| !opened.contains(q)).collect();
        let open_now = !unopened.is_empty() && (opened.is_empty() || rng.random_bool(0.25));
        if open_now {
            let q = unopened[0];
            opened.push(q);
            events.push(event(student, condition, Some(q), ts, EventBody::QuestionOpen));
            continue;
        }
        let q = opened[rng.random_range(0..opened.len())];
        let body = match rng.random_range(0..7) {
            0 | 1 => {
                attempts += 1;
                run(rng.random_range(0..=3))
            }
            2 => {
                attempts += 1;
                EventBody::PuzzleCheck {
                    correct: false,
                    first_error_position: Some(0),
                }
            }
            3 => {
                attempts += 1;
                EventBody::Submit {
                    code: "x = 2".into(),
                    passed: 3,
                    total: 3,
                }
            }
            4 => EventBody::CopyAnswer { text: "x".into() },
            5 if !completed.contains(&q) => {
                completed.push(q);
                EventBody::QuestionComplete
            }
            // Re-opening an earlier question is allowed.
            _ => EventBody::QuestionOpen,
        };
        events.push(event(student, condition, Some(q), ts, body));
    }
    Generated { events, attempts }
}

/// Merges per-student logs into one, keeping each student's own order.
fn interleave(rng: &mut ChaCha8Rng, mut per_student: Vec<Vec<SessionEvent>>) -> Vec<SessionEvent> {
    for log in &mut per_student {
        log.reverse();
    }
    let mut out = Vec::new();
    loop {
        let live: Vec<usize> = (0..per_student.len()).filter(|&i| !per_student[i].is_empty()).collect();
        if live.is_empty() {
            return out;
        }
        let pick = live[rng.random_range(0..live.len())];
        out.push(per_student[pick].pop().unwrap());
    }
}

/// Pass one finds each question's window; pass two adds the windows up.
fn two_pass_minutes(log: &[SessionEvent]) -> BTreeMap<String, f64> {
    let mut first_open: BTreeMap<(String, String), u64> = BTreeMap::new();
    let mut last_complete: BTreeMap<(String, String), u64> = BTreeMap::new();
    let mut last_seen: BTreeMap<(String, String), u64> = BTreeMap::new();
    let mut totals: BTreeMap<String, f64> = BTreeMap::new();
    for e in log {
        totals.entry(e.student_id.clone()).or_insert(0.0);
        let Some(q) = &e.question_id else { continue };
        let key = (e.student_id.clone(), q.clone());
        match e.body {
            EventBody::QuestionOpen => {
                first_open.entry(key.clone()).or_insert(e.timestamp_ms);
            }
            EventBody::QuestionComplete => {
                last_complete.insert(key.clone(), e.timestamp_ms);
            }
            _ => {}
        }
        last_seen.insert(key, e.timestamp_ms);
    }
    for (key, open) in &first_open {
        let end = last_complete.get(key).or(last_seen.get(key)).unwrap();
        *totals.get_mut(&key.0).unwrap() += (end - open) as f64 / 60_000.0;
    }
    totals
}

fn cohort(seed: u64, n: usize) -> (Vec<SessionEvent>, BTreeMap<String, u64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut logs = Vec::new();
    let mut truth = BTreeMap::new();
    for i in 0..n {
        let student = format!("st{i:03}");
        let condition = if i % 2 == 0 { Condition::PC } else { Condition::CC };
        let g = generate_student(&mut rng, &student, condition);
        truth.insert(student, g.attempts);
        logs.push(g.events);
    }
    (interleave(&mut rng, logs), truth)
}

fn assert_close(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) {
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (k, v) in a {
        assert!((v - b[k]).abs() < 1e-9, "{k}: {v} vs {}", b[k]);
    }
}

#[test]
fn interleaved_four_question_logs_match_two_pass_oracle() {
    for seed in 0..50 {
        let (log, _) = cohort(seed, 12);
        validate_log(&log).unwrap();
        let minutes = practice_time(&log, TimingOptions::default()).unwrap();
        assert_close(&minutes, &two_pass_minutes(&log));
    }
}

#[test]
fn attempt_counts_match_injected_ground_truth() {
    for seed in 100..150 {
        let (log, truth) = cohort(seed, 10);
        assert_eq!(count_attempts(&log).unwrap(), truth);
    }
}

#[test]
fn reordering_students_against_each_other_changes_nothing() {
    let (log, _) = cohort(7, 15);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut per_student: BTreeMap<String, Vec<SessionEvent>> = BTreeMap::new();
    for e in &log {
        per_student.entry(e.student_id.clone()).or_default().push(e.clone());
    }
    let mut groups: Vec<Vec<SessionEvent>> = per_student.into_values().collect();
    groups.shuffle(&mut rng);
    let other = interleave(&mut rng, groups);
    assert_ne!(log, other);

    let opts = TimingOptions::default();
    assert_eq!(practice_time(&log, opts).unwrap(), practice_time(&other, opts).unwrap());
    assert_eq!(count_attempts(&log).unwrap(), count_attempts(&other).unwrap());
    assert_eq!(
        engagement_records(&log, opts, 2.0).unwrap(),
        engagement_records(&other, opts, 2.0).unwrap()
    );
}

#[test]
fn practice_time_is_additive_over_question_partitions() {
    let (log, _) = cohort(21, 10);
    let opts = TimingOptions::default();
    let in_first = |e: &&SessionEvent| matches!(e.question_id.as_deref(), Some("q1") | Some("q3"));
    let left: Vec<SessionEvent> = log.iter().filter(in_first).cloned().collect();
    let right: Vec<SessionEvent> = log.iter().filter(|e| !in_first(e)).cloned().collect();
    let whole = practice_time(&log, opts).unwrap();
    let l = practice_time(&left, opts).unwrap();
    let r = practice_time(&right, opts).unwrap();
    for (student, total) in &whole {
        let sum = l.get(student).unwrap_or(&0.0) + r.get(student).unwrap_or(&0.0);
        assert!((total - sum).abs() < 1e-9, "{student}");
    }
}

#[test]
fn idle_cap_never_increases_time() {
    let (log, _) = cohort(3, 10);
    let plain = practice_time(&log, TimingOptions::default()).unwrap();
    let capped = practice_time(
        &log,
        TimingOptions {
            idle_cap_ms: Some(30_000),
        },
    )
    .unwrap();
    for (s, v) in &capped {
        assert!(*v <= plain[s] + 1e-12);
    }
}

#[test]
fn six_quick_copiers_are_exactly_the_fast_finishers() {
    let mut logs = Vec::new();
    let mut quick = Vec::new();
    for i in 0..20 {
        let student = format!("cc{i:02}");
        let fast = i < 6;
        let mut t = 1_000u64;
        let mut log = vec![event(&student, Condition::CC, None, t, EventBody::SessionStart {
            problem_order: vec!["q1".into()],
            token_sha256: "00".into(),
        })];
        let step = if fast { 20_000 } else { 60_000 };
        for body in [
            EventBody::QuestionOpen,
            EventBody::CopyAnswer { text: "x".into() },
            EventBody::Submit {
                code: "x".into(),
                passed: 3,
                total: 3,
            },
            EventBody::QuestionComplete,
        ] {
            log.push(event(&student, Condition::CC, Some("q1"), t, body));
            t += step;
        }
        if fast {
            quick.push(student);
        }
        logs.push(log);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let log = interleave(&mut rng, logs);
    let records = engagement_records(&log, TimingOptions::default(), 2.0).unwrap();
    let flagged: Vec<String> = records.iter().filter(|r| r.fast_finisher).map(|r| r.student_id.clone()).collect();
    assert_eq!(flagged, quick);
}

#[test]
fn threshold_is_strict() {
    let rec = |m: f64| EngagementRecord {
        student_id: "s".into(),
        condition: Condition::CC,
        practice_minutes: m,
        attempts: 0,
        fast_finisher: false,
    };
    let out = flag_fast_finishers(vec![rec(1.9), rec(2.0), rec(0.0)], 2.0).unwrap();
    assert_eq!(out.iter().map(|r| r.fast_finisher).collect::<Vec<_>>(), [true, false, true]);
    assert!(matches!(flag_fast_finishers(vec![], 0.0), Err(TelemetryError::InvalidThreshold(_))));
}

#[test]
fn malformed_logs_are_rejected() {
    let backwards = vec![
        event("a", Condition::PC, Some("q1"), 10, EventBody::QuestionOpen),
        event("a", Condition::PC, Some("q1"), 5, run(0)),
    ];
    assert!(matches!(practice_time(&backwards, TimingOptions::default()), Err(TelemetryError::MalformedLog { index: 1, .. })));
    let unopened = vec![event("a", Condition::PC, Some("q1"), 10, EventBody::QuestionComplete)];
    assert!(matches!(count_attempts(&unopened), Err(TelemetryError::MalformedLog { .. })));
    assert!(practice_time(&[], TimingOptions::default()).unwrap().is_empty());
}

#[test]
fn log_file_round_trip_replays_identically() {
    let (log, _) = cohort(42, 6);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("events.jsonl");
    let mut writer = EventLogWriter::open(&path).unwrap();
    for e in &log {
        writer.append(e).unwrap();
    }
    drop(writer);
    let replayed = read_log(&path).unwrap();
    assert_eq!(replayed, log);
    let opts = TimingOptions::default();
    assert_eq!(
        engagement_records(&replayed, opts, 2.0).unwrap(),
        engagement_records(&log, opts, 2.0).unwrap()
    );

    let future = log[0].to_line().replacen("\"v\":1", "\"v\":2", 1);
    assert!(matches!(parse_log(&future), Err(TelemetryError::SchemaVersion { line: 1, found: 2 })));
}
