//! Operator-facing service: submissions, answers, event streaming, queries
//! and run-log persistence. Transport-agnostic; the CLI mounts it over HTTP.

pub mod runlog;
pub mod wire;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RuntimeConfig;
use crate::event::{hash_events, Event};
use crate::fleet::FleetSnapshot;
use crate::memory::{MemoryError, NavigableResult, PlaceAnchor, StructuredFilter};
use crate::model::{ClarificationId, RobotId, TaskId, TaskState, Tick};
use crate::orchestrator::{Clarification, Runtime, RuntimeError};
use crate::sim::{InstructionSpec, Scenario};
use runlog::{replay_runtime, RunLog, RunLogError, RunLogHeader, RunLogWriter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatewayMode {
    Serving,
    /// Rebuilt from a log; read-only.
    Replaying,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("runtime is not accepting input in replay mode")]
    RuntimeNotReady,
    #[error("unknown clarification {0}")]
    UnknownClarification(ClarificationId),
    #[error("clarification {0} is already answered")]
    AlreadyAnswered(ClarificationId),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("seq {requested} is beyond the head ({head})")]
    SeqOutOfRange { requested: u64, head: u64 },
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Log(#[from] RunLogError),
    #[error("setup failed: {0}")]
    Setup(String),
}

impl From<RuntimeError> for GatewayError {
    fn from(e: RuntimeError) -> Self {
        match e {
            RuntimeError::UnknownClarification(id) => GatewayError::UnknownClarification(id),
            RuntimeError::AlreadyAnswered(id) => GatewayError::AlreadyAnswered(id),
            RuntimeError::Setup(m) => GatewayError::Setup(m),
            other => GatewayError::InvalidRequest(other.to_string()),
        }
    }
}

/// Operator view of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task_id: TaskId,
    pub instruction: String,
    pub state: TaskState,
    pub submitted_at: Tick,
    pub detail: Option<String>,
}

pub struct Gateway {
    runtime: Runtime,
    mode: GatewayMode,
    header: RunLogHeader,
    writer: Option<RunLogWriter>,
    persisted: usize,
}

impl Gateway {
    pub fn serve(scenario: Scenario, seed: u64, config: RuntimeConfig) -> Result<Self, GatewayError> {
        let runtime = Runtime::from_scenario(&scenario, seed, config)?;
        Ok(Self { runtime, mode: GatewayMode::Serving, header: RunLogHeader::new(seed, scenario, config), writer: None, persisted: 0 })
    }

    /// Rebuilds the state recorded in a log. Inputs are refused afterwards.
    pub fn replaying(log: &RunLog) -> Result<Self, GatewayError> {
        let runtime = replay_runtime(log).map_err(|e| GatewayError::Setup(e.to_string()))?;
        Ok(Self { runtime, mode: GatewayMode::Replaying, header: log.header.clone(), writer: None, persisted: 0 })
    }

    /// Streams every event to `path` from now on (including those already emitted).
    pub fn persist_to(&mut self, path: &Path) -> Result<(), GatewayError> {
        let mut writer = RunLogWriter::create(path, &self.header)?;
        writer.append(self.runtime.events())?;
        self.persisted = self.runtime.events().len();
        self.writer = Some(writer);
        Ok(())
    }

    pub fn mode(&self) -> GatewayMode {
        self.mode
    }

    pub fn runtime(&self) -> &Runtime {
        &self.runtime
    }

    pub fn submit_instruction(
        &mut self,
        text: &str,
        priority: u32,
        explicit_robot: Option<RobotId>,
        tau_override: Option<f64>,
    ) -> Result<TaskId, GatewayError> {
        self.require_serving()?;
        if let Some(r) = &explicit_robot {
            if self.runtime.fleet().get(r).is_none() {
                return Err(GatewayError::InvalidRequest(format!("unknown robot `{r}`")));
            }
        }
        let spec = InstructionSpec { text: text.to_owned(), priority, explicit_robot, tau: tau_override };
        Ok(self.runtime.submit(spec)?)
    }

    pub fn answer_clarification(&mut self, id: ClarificationId, answer: &str) -> Result<(), GatewayError> {
        self.require_serving()?;
        Ok(self.runtime.answer(id, answer)?)
    }

    /// Events from `from_seq` (default 0) to the head. Every caller sees the same feed.
    pub fn stream_events(&self, from_seq: Option<u64>) -> Result<&[Event], GatewayError> {
        let head = self.runtime.events().len() as u64;
        let from = from_seq.unwrap_or(0);
        if from > head {
            return Err(GatewayError::SeqOutOfRange { requested: from, head });
        }
        Ok(&self.runtime.events()[from as usize..])
    }

    pub fn head(&self) -> u64 {
        self.runtime.events().len() as u64
    }

    pub fn hash(&self) -> String {
        hash_events(self.runtime.events())
    }

    pub fn fleet(&self) -> FleetSnapshot {
        self.runtime.fleet()
    }

    pub fn memory_semantic(&self, query: &str, k: usize, scope: Option<&StructuredFilter>) -> Result<Vec<NavigableResult>, GatewayError> {
        Ok(self.runtime.memory().retrieve_semantic(query, k, scope)?)
    }

    pub fn memory_structured(&self, filter: &StructuredFilter) -> Result<Vec<NavigableResult>, GatewayError> {
        Ok(self.runtime.memory().retrieve_structured(filter)?)
    }

    pub fn anchors(&self) -> Vec<PlaceAnchor> {
        self.runtime.memory().anchors().cloned().collect()
    }

    pub fn tasks(&self) -> Vec<TaskSummary> {
        self.runtime.tasks().map(summary).collect()
    }

    pub fn task(&self, id: TaskId) -> Result<TaskSummary, GatewayError> {
        self.runtime.task(id).map(summary).ok_or(GatewayError::UnknownTask(id))
    }

    pub fn clarification(&self, id: ClarificationId) -> Result<Clarification, GatewayError> {
        self.runtime.clarification(id).cloned().ok_or(GatewayError::UnknownClarification(id))
    }

    pub fn open_clarifications(&self) -> Vec<Clarification> {
        self.runtime.open_clarifications().into_iter().cloned().collect()
    }

    /// Advances one tick (no-op when replaying) and persists new events.
    pub fn tick(&mut self) -> Result<(), GatewayError> {
        if self.mode == GatewayMode::Serving {
            self.runtime.advance();
        }
        self.flush()
    }

    /// Runs until idle or `max_ticks`.
    pub fn run_to_idle(&mut self, max_ticks: Tick) -> Result<(), GatewayError> {
        self.require_serving()?;
        self.runtime.run(max_ticks);
        self.flush()
    }

    /// The complete log so far.
    pub fn run_log(&self) -> RunLog {
        RunLog { header: self.header.clone(), events: self.runtime.events().to_vec(), truncated: false }
    }

    fn flush(&mut self) -> Result<(), GatewayError> {
        if let Some(w) = &mut self.writer {
            let events = self.runtime.events();
            w.append(&events[self.persisted..])?;
            self.persisted = events.len();
        }
        Ok(())
    }

    fn require_serving(&self) -> Result<(), GatewayError> {
        match self.mode {
            GatewayMode::Serving => Ok(()),
            GatewayMode::Replaying => Err(GatewayError::RuntimeNotReady),
        }
    }
}

fn summary(t: &crate::orchestrator::TaskRun) -> TaskSummary {
    TaskSummary {
        task_id: t.record.task_id,
        instruction: t.record.instruction.clone(),
        state: t.state(),
        submitted_at: t.record.submitted_at,
        detail: t.detail.clone(),
    }
}
