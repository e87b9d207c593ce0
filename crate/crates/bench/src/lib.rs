//! Seeded fixtures shared by the benchmarks.

use efleet_core::event::EventLog;
use efleet_core::fleet::{EmbodimentDescriptor, FleetSnapshot, Morphology};
use efleet_core::memory::{LabelKind, MemoryStore, ObservationFrame, ObservationLabel};
use efleet_core::model::{Capability, FrameId, PlanStep, Pose3, RobotId, SkillInvocation, SkillTarget, StepId, TaskId};
use efleet_core::scheduler::ReadyStep;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: &[&str] = &["red", "mug", "bottle", "lemon", "chair", "door", "plate", "box", "sour", "sweet", "blue", "cable"];

/// A store holding `frames` observations from four robots.
pub fn memory_store(frames: usize, seed: u64) -> MemoryStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = MemoryStore::default();
    let mut log = EventLog::new();
    for i in 0..frames {
        let labels = (0..rng.random_range(1..4))
            .map(|_| ObservationLabel {
                label: WORDS[rng.random_range(0..WORDS.len())].to_owned(),
                pose: Pose3::at(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), 0.0),
                confidence: 1.0,
                kind: LabelKind::Object,
                description: None,
            })
            .collect::<Vec<_>>();
        let description = labels.iter().map(|l| l.label.as_str()).collect::<Vec<_>>().join(" ");
        let frame = ObservationFrame {
            frame_id: FrameId(i as u64),
            robot_id: RobotId::new(format!("r{}", i % 4)),
            sim_time: i as u64,
            camera_pose: Pose3::at(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), 0.0),
            labels,
            description,
        };
        store.insert_observation(frame, &mut log).expect("generated frames are valid");
    }
    store
}

/// A fleet of `n` robots and a queue of `steps` ready steps.
pub fn fleet_and_queue(n: usize, steps: usize, seed: u64) -> (FleetSnapshot, Vec<ReadyStep>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let robots = (0..n)
        .map(|i| {
            let caps: Vec<Capability> = Capability::ALL.iter().copied().filter(|_| rng.random_bool(0.6)).collect();
            let mut d = EmbodimentDescriptor::new(
                format!("r{i:02}"),
                Morphology::Humanoid,
                caps,
                Pose3::at(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), 0.0),
            );
            d.max_concurrent = rng.random_range(1..4);
            d
        })
        .collect();
    let queue = (0..steps)
        .map(|i| {
            let skill = Capability::ALL[rng.random_range(0..Capability::ALL.len())];
            ReadyStep {
                task_id: TaskId(i as u64),
                priority: rng.random_range(0..3),
                submitted_at: i as u64,
                topo_rank: 0,
                step: PlanStep::new(StepId(1), SkillInvocation::new(skill, SkillTarget::AnchorName("x".into()))),
                anchor: Some(Pose3::at(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), 0.0)),
                pin: None,
                exclude: Default::default(),
            }
        })
        .collect();
    (FleetSnapshot { robots }, queue)
}
