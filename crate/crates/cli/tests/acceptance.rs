//! Acceptance checks. Prints one PASS or FAIL line per criterion and exits
//! non-zero when any fails.

use std::collections::{BTreeSet, HashSet};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parsons_cli::cohort::{generate, CohortSpec};
use parsons_cli::{cmd_report, ReportOptions, SimInputs, SimOutcome};
use parsons_core::analytics::{cles, mann_whitney_u, p_two_sided, rank_with_ties, Metric, PMethod, PMode, POptions};
use parsons_core::code_model::{align_lines, canonical_source, classify_student_lines, normalize_line, LineLabel};
use parsons_core::exec_harness::{ExecHarness, Limits, TestRunner};
use parsons_core::problem::ProblemBank;
use parsons_core::provider::ScriptedProvider;
use parsons_core::puzzle_engine::EngineError;
use parsons_core::puzzle_gen::{make_puzzle, PuzzleConfig};
use parsons_core::solution_forge::{Provenance, VerifiedSolution};
use parsons_core::telemetry::{engagement_records, read_log, Condition, EventBody, HelpKind};
use parsons_service::{NewSession, ScaffoldService, ServiceError, ServiceParts, ServiceSettings, TokenMode, VirtualClock};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;

fn bank_path() -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/problems/nested_dicts.json"))
}

fn bank() -> ProblemBank {
    ProblemBank::load(bank_path()).unwrap()
}

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn cles_reproduction() -> Verdict {
    let cases = [(2368.0, ".69"), (1628.5, ".48"), (1595.5, ".47")];
    let start = Instant::now();
    let values: Vec<f64> = cases.iter().map(|(u, _)| cles(*u, 51, 67).unwrap()).collect();
    let elapsed = start.elapsed();
    for ((u, want), got) in cases.iter().zip(&values) {
        let shown = format!("{got:.2}");
        ensure!(shown.trim_start_matches('0') == *want, "cles({u}) = {got}, want {want}");
    }
    ensure!(elapsed < Duration::from_millis(1), "took {elapsed:?}");
    Ok(format!("{:.4} {:.4} {:.4} in {elapsed:?}", values[0], values[1], values[2]))
}

fn p_consistency() -> Verdict {
    let tie_free = rank_with_ties(&(1..=118).map(f64::from).collect::<Vec<_>>()).unwrap();
    let main = p_two_sided(2368.0, 51, 67, &tie_free, POptions::default()).unwrap();
    let pre = p_two_sided(1628.5, 51, 67, &tie_free, POptions::default()).unwrap();
    ensure!(main.p < 0.001, "p(2368) = {}", main.p);
    ensure!((0.60..=0.70).contains(&pre.p), "p(1628.5) = {}", pre.p);
    Ok(format!("p(2368.0) = {:.2e}, p(1628.5) = {:.3} ({:?})", main.p, pre.p, main.method))
}

/// Pairs counted one by one, ties worth a half.
fn pairwise_u(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .flat_map(|x| b.iter().map(move |y| (x, y)))
        .map(|(x, y)| if x > y { 1.0 } else if x == y { 0.5 } else { 0.0 })
        .sum()
}

/// Share of all C(n1+n2, n1) relabelings with U at least as far from n1·n2/2.
fn enumerated_p(ranks: &[f64], n1: usize, u: f64) -> f64 {
    fn walk(ranks: &[f64], from: usize, left: usize, sum: f64, out: &mut Vec<f64>) {
        if left == 0 {
            out.push(sum);
            return;
        }
        for i in from..=ranks.len() - left {
            walk(ranks, i + 1, left - 1, sum + ranks[i], out);
        }
    }
    let n2 = ranks.len() - n1;
    let centre = (n1 * n2) as f64 / 2.0;
    let offset = (n1 * (n1 + 1)) as f64 / 2.0;
    let mut sums = Vec::new();
    walk(ranks, 0, n1, 0.0, &mut sums);
    let far = sums
        .iter()
        .filter(|s| (*s - offset - centre).abs() >= (u - centre).abs() - 1e-9)
        .count();
    far as f64 / sums.len() as f64
}

fn mann_whitney_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut exact = 0;
    for case in 0..1000 {
        let (n1, n2) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let ties = case % 2 == 0;
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| if ties { f64::from(rng.random_range(0..5u8)) } else { rng.random::<f64>() })
                .collect()
        };
        let (a, b) = (draw(n1), draw(n2));
        let (u, _) = mann_whitney_u(&a, &b).unwrap();
        ensure!(u == pairwise_u(&a, &b), "case {case}: U = {u}, pairwise {}", pairwise_u(&a, &b));
        let pooled: Vec<f64> = a.iter().chain(&b).copied().collect();
        let ranking = rank_with_ties(&pooled).unwrap();
        let opts = POptions {
            mode: PMode::Exact,
            ..POptions::default()
        };
        let p = p_two_sided(u, n1, n2, &ranking, opts).unwrap();
        if p.method == PMethod::Exact {
            let want = enumerated_p(&ranking.ranks, n1, u);
            ensure!((p.p - want).abs() < 1e-12, "case {case}: exact p {} vs enumeration {want}", p.p);
            exact += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!("1000 pairs, {exact} exact p-values enumerated, {:.1} s", elapsed.as_secs_f64()))
}

fn pc_service(settings: ServiceSettings) -> ScaffoldService {
    let bank = bank();
    ScaffoldService::open(ServiceParts {
        provider: Arc::new(ScriptedProvider::echo_references(&bank)),
        bank,
        runner: Arc::new(ExecHarness::default()),
        clock: Arc::new(VirtualClock::new(0)),
        settings,
        data_dir: None,
    })
    .unwrap()
}

fn enrol(service: &ScaffoldService, id: &str) -> String {
    service
        .create_session(NewSession {
            student_id: id.into(),
            seed: None,
            condition: Some(Condition::PC),
        })
        .unwrap()
        .session_id
}

fn passes(problem_id: &str, code: &str) -> bool {
    let tests = &bank().get(problem_id).unwrap().tests.clone();
    ExecHarness::default()
        .run_tests(code, tests, Limits::default())
        .map(|r| r.all_passed)
        .unwrap_or(false)
}

fn solve_and_copy(service: &ScaffoldService, sid: &str, pid: &str) -> Result<String, String> {
    let script = service.puzzle_solution_script(sid, pid).map_err(|e| e.to_string())?;
    for m in &script {
        service.puzzle_move(sid, pid, m).map_err(|e| e.to_string())?;
    }
    let check = service.puzzle_check(sid, pid).map_err(|e| e.to_string())?;
    ensure!(check.feedback.correct, "{pid}: check after scripted solve: {:?}", check.feedback);
    service.copy_answer(sid, pid).map_err(|e| e.to_string())
}

fn puzzle_round_trip() -> Verdict {
    let bank = bank();
    ensure!(bank.problems.len() >= 4, "only {} fixture problems", bank.problems.len());
    let service = pc_service(ServiceSettings {
        tokens: TokenMode::Seeded,
        ..ServiceSettings::default()
    });
    let mut solved = 0;
    for (k, problem) in bank.problems.iter().enumerate() {
        let first_line = problem.reference_solution.lines().next().unwrap_or("");
        for (variant, code) in ["", first_line].into_iter().enumerate() {
            let sid = enrol(&service, &format!("rt-{k}-{variant}"));
            let help = service.request_help(&sid, &problem.id, code).map_err(|e| e.to_string())?;
            ensure!(help.kind == HelpKind::Puzzle, "{}: PC help was {:?}", problem.id, help.kind);
            let text = solve_and_copy(&service, &sid, &problem.id)?;
            ensure!(passes(&problem.id, &text), "{}: assembled program fails its tests", problem.id);
            solved += 1;
        }
    }
    Ok(format!("{solved}/{solved} puzzles over {} problems", bank.problems.len()))
}

const WRONG: [&str; 6] = [
    "print(result)",
    "return None",
    "for key in data:",
    "    total += 1",
    "x = 0",
    "    # check this",
];

fn brute_lcs(student: &[String], solution: &[String]) -> usize {
    let n = student.len();
    (0u32..1 << n)
        .filter(|mask| {
            let mut hay = solution.iter();
            (0..n)
                .filter(|i| mask & (1 << i) != 0)
                .all(|i| hay.any(|s| *s == student[i]))
        })
        .map(|mask| mask.count_ones() as usize)
        .max()
        .unwrap_or(0)
}

fn keys(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| normalize_line(l, 4))
        .filter(|l| !l.is_blank)
        .map(|l| l.key)
        .collect()
}

fn personalization_soundness() -> Verdict {
    let bank = bank();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut small, mut preplaced_total, mut distractor_total) = (0, 0, 0);
    for round in 0..200 {
        let problem = &bank.problems[round % bank.problems.len()];
        let mut student = Vec::new();
        for line in problem.reference_solution.lines() {
            if rng.random_bool(0.3) {
                student.push(WRONG.choose(&mut rng).unwrap().to_string());
            }
            match rng.random_range(0..10) {
                0..=4 => student.push(line.to_string()),
                5 => student.push(format!("  {line}")),
                _ => {}
            }
        }
        let student = student.join("\n");
        let solution = VerifiedSolution {
            source: canonical_source(&problem.reference_solution),
            passed_all_tests: true,
            provenance: Provenance::Generated,
            attempts_used: 1,
            closeness: 0,
        };
        let puzzle = make_puzzle(&solution, &student, &PuzzleConfig::default(), rng.random()).unwrap();
        let alignment = align_lines(&student, &solution.source);
        let labels = classify_student_lines(&alignment);

        // Solution lines in block order line up with the aligned solution lines.
        let mut line = 0;
        for block in puzzle.solution_blocks.iter() {
            let preplaced = puzzle.preplaced.contains(&block.id);
            for _ in &block.lines {
                if preplaced {
                    let pair = alignment.pairs.iter().find(|p| p.1 == line);
                    ensure!(
                        pair.is_some_and(|p| labels.labels[p.0] == LineLabel::Correct),
                        "round {round}: preplaced solution line {line} has no Correct student line"
                    );
                }
                line += 1;
            }
            preplaced_total += usize::from(preplaced);
        }
        let incorrect: HashSet<&str> = labels
            .labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == LineLabel::Incorrect)
            .map(|(i, _)| alignment.student_lines[i].key.as_str())
            .collect();
        for d in &puzzle.distractors {
            ensure!(
                d.lines.iter().all(|l| incorrect.contains(l.key.as_str())),
                "round {round}: distractor {:?} is not from an Incorrect line",
                d.render()
            );
            distractor_total += 1;
        }

        let (sk, ck) = (keys(&student), keys(&solution.source));
        if sk.len() <= 10 && ck.len() <= 10 {
            let brute = brute_lcs(&sk, &ck);
            ensure!(alignment.pairs.len() == brute, "round {round}: LCS {} vs brute force {brute}", alignment.pairs.len());
            small += 1;
        }
    }
    ensure!(small > 0, "no instance small enough for brute force");
    Ok(format!(
        "200 instances, {preplaced_total} preplaced blocks, {distractor_total} distractors, {small} brute-force LCS checks"
    ))
}

fn adaptation_exhaustion() -> Verdict {
    let bank = bank();
    let service = pc_service(ServiceSettings {
        tokens: TokenMode::Seeded,
        ..ServiceSettings::default()
    });
    let mut steps = Vec::new();
    for (k, problem) in bank.problems.iter().enumerate() {
        let sid = enrol(&service, &format!("ad-{k}"));
        let pid = problem.id.as_str();
        let code = format!("{}\nprint(result)\nreturn None\nx = 0", problem.reference_solution.lines().next().unwrap());
        service.request_help(&sid, pid, &code).map_err(|e| e.to_string())?;
        for _ in 0..3 {
            service.puzzle_check(&sid, pid).map_err(|e| e.to_string())?;
        }
        let mut n = 0;
        loop {
            match service.puzzle_help_me(&sid, pid) {
                Ok(_) => n += 1,
                Err(ServiceError::Engine(EngineError::NothingToAdapt)) => break,
                Err(e) => return Err(format!("{pid}: {e}")),
            }
            ensure!(n <= 100, "{pid}: help_me did not terminate");
        }
        let view = service.snapshot(&sid).unwrap().problems[pid].puzzle.clone().unwrap();
        ensure!(view.blocks.len() == 1, "{pid}: {} blocks left", view.blocks.len());
        let text = solve_and_copy(&service, &sid, pid)?;
        ensure!(passes(pid, &text), "{pid}: one-block program fails its tests");
        steps.push(n);
    }
    Ok(format!("help_me steps per problem {steps:?}, all end at one passing block"))
}

fn run_cohort(spec: &CohortSpec, inputs: &SimInputs) -> SimOutcome {
    let cohort = generate(spec, &inputs.bank);
    inputs.simulator().run(&cohort.script).unwrap()
}

fn condition_fidelity(spec: &CohortSpec, inputs: &SimInputs, run: &SimOutcome) -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("events.jsonl");
    run.write_log(&log).unwrap();

    let report = cmd_report(&log, ReportOptions::default()).map_err(|e| e.to_string())?;
    let (n1, n2) = (report.groups[0].n, report.groups[1].n);
    ensure!((n1, n2) == (51, 67), "report has n1 = {n1}, n2 = {n2}");

    ensure!(
        run.summary.help.get(&Condition::PC).map_or(0, |h| h.full_solutions) == 0,
        "a PC student received a full solution"
    );
    for e in &run.events {
        if let EventBody::HelpRequest { help, .. } = &e.body {
            let want = match e.condition {
                Condition::PC => HelpKind::Puzzle,
                Condition::CC => HelpKind::FullSolution,
            };
            ensure!(*help == want, "{} ({}) logged {help:?}", e.student_id, e.condition);
        }
    }
    for s in run.sessions.iter().filter(|s| s.condition == Condition::PC) {
        ensure!(
            s.problems.values().all(|p| p.solution_text.is_none()),
            "{} holds a full solution",
            s.student_id
        );
    }

    // Metrics from the file, and from a service rebuilt from it.
    let from_file = engagement_records(&read_log(&log).unwrap(), Default::default(), 2.0).unwrap();
    ensure!(from_file == run.records, "metrics from the log differ from the live run");
    let data = dir.path().join("data");
    std::fs::create_dir_all(&data).unwrap();
    std::fs::copy(&log, data.join(parsons_service::service::EVENTS_FILE)).unwrap();
    let rebuilt = ScaffoldService::open(ServiceParts {
        bank: inputs.bank.clone(),
        provider: inputs.provider.clone(),
        runner: inputs.runner.clone(),
        clock: Arc::new(VirtualClock::new(0)),
        settings: ServiceSettings {
            seed: spec.seed,
            tokens: TokenMode::Seeded,
            ..ServiceSettings::default()
        },
        data_dir: Some(data),
    })
    .map_err(|e| e.to_string())?;
    ensure!(rebuilt.engagement().unwrap() == run.records, "replayed service metrics differ");
    for s in &run.sessions {
        ensure!(rebuilt.snapshot(&s.session_id).unwrap() == *s, "{} differs after replay", s.student_id);
    }

    let flagged: BTreeSet<String> = run
        .records
        .iter()
        .filter(|r| r.fast_finisher)
        .map(|r| r.student_id.clone())
        .collect();
    let rushed = generate(spec, &inputs.bank).rushed;
    ensure!(flagged == rushed, "flagged {flagged:?}, scripted {rushed:?}");
    let attempts = cmd_report(
        &log,
        ReportOptions {
            metric: Metric::Attempts,
            ..ReportOptions::default()
        },
    )
    .map_err(|e| e.to_string())?;
    Ok(format!(
        "n1 = {n1}, n2 = {n2}, {} fast finishers; practice time {}; attempts {}",
        flagged.len(),
        report.comparison_line(),
        attempts.comparison_line()
    ))
}

fn determinism(first: &SimOutcome, second: &SimOutcome) -> Verdict {
    ensure!(first.log_text() == second.log_text(), "event logs differ");
    ensure!(first.sessions == second.sessions, "final puzzles or sessions differ");
    let puzzles = first
        .sessions
        .iter()
        .flat_map(|s| s.problems.values())
        .filter(|p| p.puzzle.is_some())
        .count();
    Ok(format!(
        "{} log bytes and {puzzles} puzzles identical across two runs",
        first.log_text().len()
    ))
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |name: &str, verdict: Verdict| {
        match verdict {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    };
    report("cles-reproduction", cles_reproduction());
    report("p-value-consistency", p_consistency());
    report("mann-whitney-oracle", mann_whitney_oracle());
    report("puzzle-round-trip", puzzle_round_trip());
    report("personalization-soundness", personalization_soundness());
    report("adaptation-exhaustion", adaptation_exhaustion());

    let spec = CohortSpec::default();
    let inputs = SimInputs::resolve(None, Some(&bank_path())).unwrap();
    let first = run_cohort(&spec, &inputs);
    report("condition-fidelity-and-replay", condition_fidelity(&spec, &inputs, &first));
    // A fresh cache so the second run shares nothing with the first.
    let fresh = SimInputs::resolve(None, Some(&bank_path())).unwrap();
    let second = run_cohort(&spec, &fresh);
    report("determinism", determinism(&first, &second));

    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
