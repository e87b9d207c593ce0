//! Append-only runtime event stream.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::critic::Decision;
use crate::fleet::{EmbodimentDescriptor, SkillResult};
use crate::model::{ClarificationId, FrameId, ObjectId, PlanId, PlanProgram, RobotId, SkillInvocation, StepId, TaskId, TaskState, Tick};
use crate::orchestrator::Clarification;
use crate::scheduler::{Assignment, HandoffContext};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub sim_time: Tick,
    #[serde(flatten)]
    pub body: EventBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum EventBody {
    TaskSubmitted {
        task_id: TaskId,
        instruction: String,
        priority: u32,
        explicit_robot: Option<RobotId>,
        tau_override: Option<f64>,
    },
    PlanIssued {
        task_id: TaskId,
        plan: PlanProgram,
    },
    StepDispatched {
        task_id: TaskId,
        plan_id: PlanId,
        step_id: StepId,
        attempt: u32,
        assignment: Assignment,
        invocation: SkillInvocation,
        handoff: Option<HandoffContext>,
    },
    StepResult {
        task_id: TaskId,
        attempt: u32,
        result: SkillResult,
    },
    CriticScored {
        task_id: TaskId,
        step_id: StepId,
        attempt: u32,
        score: f64,
        decision: Decision,
        rationale: String,
    },
    ClarificationAsked {
        clarification: Clarification,
    },
    ClarificationAnswered {
        clarification_id: ClarificationId,
        task_id: TaskId,
        answer: String,
    },
    RobotRegistered {
        descriptor: EmbodimentDescriptor,
    },
    RobotDisconnected {
        robot_id: RobotId,
        last_heartbeat: Tick,
    },
    MemoryInserted {
        frame_id: FrameId,
        robot_id: RobotId,
        is_keyframe: bool,
        objects: Vec<ObjectId>,
    },
    TaskStateChanged {
        task_id: TaskId,
        from: TaskState,
        to: TaskState,
        detail: Option<String>,
    },
}

impl EventBody {
    pub fn kind(&self) -> &'static str {
        match self {
            EventBody::TaskSubmitted { .. } => "task_submitted",
            EventBody::PlanIssued { .. } => "plan_issued",
            EventBody::StepDispatched { .. } => "step_dispatched",
            EventBody::StepResult { .. } => "step_result",
            EventBody::CriticScored { .. } => "critic_scored",
            EventBody::ClarificationAsked { .. } => "clarification_asked",
            EventBody::ClarificationAnswered { .. } => "clarification_answered",
            EventBody::RobotRegistered { .. } => "robot_registered",
            EventBody::RobotDisconnected { .. } => "robot_disconnected",
            EventBody::MemoryInserted { .. } => "memory_inserted",
            EventBody::TaskStateChanged { .. } => "task_state_changed",
        }
    }

    /// Inputs that originate outside the runtime and must be re-injected on replay.
    pub fn is_external_input(&self) -> bool {
        matches!(self, EventBody::TaskSubmitted { .. } | EventBody::ClarificationAnswered { .. })
    }
}

impl Event {
    /// Canonical single-line serialization used on the wire and in run logs.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("events always serialize")
    }
}

/// Ordered event sink owned by the runtime. Sequence numbers start at 0 and
/// have no gaps.
#[derive(Debug, Default, Clone)]
pub struct EventLog {
    events: Vec<Event>,
    now: Tick,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_time(&mut self, now: Tick) {
        self.now = now;
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn emit(&mut self, body: EventBody) -> u64 {
        let seq = self.events.len() as u64;
        self.events.push(Event { seq, sim_time: self.now, body });
        seq
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn since(&self, from_seq: u64) -> &[Event] {
        let start = (from_seq as usize).min(self.events.len());
        &self.events[start..]
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }
}

/// SHA-256 over the canonical lines, newline separated.
pub fn hash_events(events: &[Event]) -> String {
    let mut hasher = Sha256::new();
    for e in events {
        hasher.update(e.to_line().as_bytes());
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}
