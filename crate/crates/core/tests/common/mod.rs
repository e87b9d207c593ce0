#![allow(dead_code)]

use std::path::PathBuf;

use efleet_core::event::{Event, EventBody};
use efleet_core::gateway::runlog::{RunLog, RunLogHeader};
use efleet_core::{Runtime, RuntimeConfig, Scenario};

pub const SEED: u64 = 42;

pub const SCENARIOS: &[&str] = &[
    "partial_observability_search",
    "something_sour",
    "delivery_room_207",
    "disconnected_quadruped",
    "visitor_reception",
    "prepare_scene",
];

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.json"))
}

pub fn scenario(name: &str) -> Scenario {
    Scenario::load(&scenario_path(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

pub fn run(name: &str) -> (Scenario, Runtime) {
    let s = scenario(name);
    let mut rt = Runtime::from_scenario(&s, SEED, RuntimeConfig::default()).expect("scenario builds");
    rt.run(s.max_ticks);
    (s, rt)
}

pub fn run_log(s: &Scenario, rt: &Runtime) -> RunLog {
    RunLog { header: RunLogHeader::new(SEED, s.clone(), *rt.config()), events: rt.events().to_vec(), truncated: false }
}

pub fn bodies(rt: &Runtime) -> impl Iterator<Item = (&Event, &EventBody)> {
    rt.events().iter().map(|e| (e, &e.body))
}
