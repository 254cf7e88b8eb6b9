#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use parsons_core::exec_harness::{ExecHarness, TestRunner};
use parsons_core::problem::ProblemBank;
use parsons_core::provider::{ProviderPort, ScriptedProvider};
use parsons_core::telemetry::Condition;
use parsons_service::{NewSession, ScaffoldService, ServiceParts, ServiceSettings, TokenMode, VirtualClock};

pub fn bank_path() -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/problems/nested_dicts.json"))
}

pub fn bank() -> ProblemBank {
    ProblemBank::load(bank_path()).unwrap()
}

pub fn settings() -> ServiceSettings {
    ServiceSettings {
        seed: 11,
        tokens: TokenMode::Seeded,
        ..ServiceSettings::default()
    }
}

pub struct Fixture {
    pub service: ScaffoldService,
    pub clock: Arc<VirtualClock>,
}

pub fn service_with(provider: Arc<dyn ProviderPort>, data_dir: Option<PathBuf>) -> Fixture {
    let clock = Arc::new(VirtualClock::new(1_700_000_000_000));
    let runner: Arc<dyn TestRunner> = Arc::new(ExecHarness::default());
    let service = ScaffoldService::open(ServiceParts {
        bank: bank(),
        provider,
        runner,
        clock: clock.clone(),
        settings: settings(),
        data_dir,
    })
    .unwrap();
    Fixture { service, clock }
}

pub fn service() -> Fixture {
    service_with(Arc::new(echo_provider()), None)
}

pub fn echo_provider() -> ScriptedProvider {
    ScriptedProvider::echo_references(&bank())
}

pub fn student(service: &ScaffoldService, id: &str, condition: Condition) -> String {
    service
        .create_session(NewSession {
            student_id: id.into(),
            seed: None,
            condition: Some(condition),
        })
        .unwrap()
        .session_id
}

pub fn solve(svc: &ScaffoldService, sid: &str, pid: &str) {
    for m in svc.puzzle_solution_script(sid, pid).unwrap() {
        svc.puzzle_move(sid, pid, &m).unwrap();
    }
}
