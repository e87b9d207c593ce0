//! Dynamic pool of connected embodiments.
//!
//! All mutations go through [`Fleet`] in call order; [`Fleet::snapshot`]
//! hands out immutable copies for the scheduler and the gateway.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{EventBody, EventLog};
use crate::memory::ObservationFrame;
use crate::model::{capability_satisfies, Capability, PlanId, PlanStep, Pose3, RobotId, SkillInvocation, StepId, TaskId, Tick};
use crate::scheduler::{Assignment, HandoffContext};

/// Default heartbeat cadence in ticks.
pub const HEARTBEAT_INTERVAL: Tick = 5;
/// Default liveness timeout: three missed intervals.
pub const HEARTBEAT_TIMEOUT: Tick = 3 * HEARTBEAT_INTERVAL;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Morphology {
    Arm,
    Quadruped,
    Humanoid,
    Mobile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Liveness {
    Connected,
    Disconnected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbodimentDescriptor {
    pub robot_id: RobotId,
    pub morphology: Morphology,
    pub capabilities: BTreeSet<Capability>,
    pub pose: Pose3,
    #[serde(default)]
    pub active_subtasks: u32,
    #[serde(default = "one")]
    pub max_concurrent: u32,
    #[serde(default)]
    pub last_heartbeat: Tick,
    #[serde(default = "connected")]
    pub liveness: Liveness,
}

fn one() -> u32 {
    1
}

fn connected() -> Liveness {
    Liveness::Connected
}

impl EmbodimentDescriptor {
    pub fn new(robot_id: impl Into<String>, morphology: Morphology, capabilities: impl IntoIterator<Item = Capability>, pose: Pose3) -> Self {
        Self {
            robot_id: RobotId::new(robot_id),
            morphology,
            capabilities: capabilities.into_iter().collect(),
            pose,
            active_subtasks: 0,
            max_concurrent: 1,
            last_heartbeat: 0,
            liveness: Liveness::Connected,
        }
    }

    pub fn is_connected(&self) -> bool {
        self.liveness == Liveness::Connected
    }

    pub fn has_capacity(&self) -> bool {
        self.active_subtasks < self.max_concurrent
    }

    pub fn can_perform(&self, skill: Capability) -> bool {
        capability_satisfies(&self.capabilities, &BTreeSet::from([skill]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure { reason: String },
    InProgress,
}

impl Outcome {
    pub fn is_terminal(&self) -> bool {
        !matches!(self, Outcome::InProgress)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillResult {
    pub step_id: StepId,
    pub robot_id: RobotId,
    pub outcome: Outcome,
    pub observation: Option<ObservationFrame>,
    pub resulting_pose: Option<Pose3>,
    /// Free-text report, e.g. an inspection finding.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

/// A step ready to hand to an embodiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Dispatch {
    pub task_id: TaskId,
    pub plan_id: PlanId,
    pub step: PlanStep,
    pub attempt: u32,
    pub assignment: Assignment,
    pub handoff: Option<HandoffContext>,
}

/// A result delivered by an adapter, routed back to its task attempt.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterReport {
    pub task_id: TaskId,
    pub attempt: u32,
    pub result: SkillResult,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("adapter rejected skill: {0}")]
pub struct AdapterError(pub String);

/// Plug point between the runtime and platform-specific execution.
pub trait EmbodimentAdapter {
    fn execute(&mut self, robot: &RobotId, task: TaskId, attempt: u32, step_id: StepId, invocation: &SkillInvocation) -> Result<(), AdapterError>;

    /// Drops any in-flight work for the attempt; no result is delivered afterwards.
    fn cancel(&mut self, robot: &RobotId, task: TaskId, step_id: StepId);
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FleetError {
    #[error("robot `{0}` is already connected")]
    DuplicateRobotId(RobotId),
    #[error("unknown robot `{0}`")]
    UnknownRobot(RobotId),
    #[error("robot `{0}` is disconnected")]
    RobotDisconnected(RobotId),
    #[error("robot `{robot}` lacks capability `{skill}`")]
    CapabilityMissing { robot: RobotId, skill: Capability },
    #[error("robot `{0}` has no free execution slot")]
    RobotSaturated(RobotId),
    #[error("invalid descriptor: {0}")]
    InvalidDescriptor(String),
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FleetSnapshot {
    pub robots: Vec<EmbodimentDescriptor>,
}

impl FleetSnapshot {
    pub fn get(&self, id: &RobotId) -> Option<&EmbodimentDescriptor> {
        self.robots.iter().find(|r| &r.robot_id == id)
    }

    pub fn get_mut(&mut self, id: &RobotId) -> Option<&mut EmbodimentDescriptor> {
        self.robots.iter_mut().find(|r| &r.robot_id == id)
    }

    pub fn morphologies(&self) -> BTreeSet<Morphology> {
        self.robots.iter().map(|r| r.morphology).collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Fleet {
    robots: BTreeMap<RobotId, EmbodimentDescriptor>,
}

impl Fleet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.robots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.robots.is_empty()
    }

    pub fn get(&self, id: &RobotId) -> Option<&EmbodimentDescriptor> {
        self.robots.get(id)
    }

    pub fn snapshot(&self) -> FleetSnapshot {
        FleetSnapshot { robots: self.robots.values().cloned().collect() }
    }

    /// Adds or revives a robot. A previously disconnected id resumes its identity.
    pub fn register(&mut self, mut descriptor: EmbodimentDescriptor, log: &mut EventLog) -> Result<(), FleetError> {
        if descriptor.max_concurrent == 0 {
            return Err(FleetError::InvalidDescriptor("max_concurrent must be at least 1".into()));
        }
        if !descriptor.pose.is_finite() {
            return Err(FleetError::InvalidDescriptor("pose must be finite".into()));
        }
        if self.robots.get(&descriptor.robot_id).is_some_and(|r| r.is_connected()) {
            return Err(FleetError::DuplicateRobotId(descriptor.robot_id));
        }
        descriptor.liveness = Liveness::Connected;
        descriptor.active_subtasks = 0;
        descriptor.last_heartbeat = log.now();
        log.emit(EventBody::RobotRegistered { descriptor: descriptor.clone() });
        self.robots.insert(descriptor.robot_id.clone(), descriptor);
        Ok(())
    }

    /// Records a heartbeat; out-of-order beats never move the clock backwards.
    pub fn heartbeat(&mut self, robot_id: &RobotId, tick: Tick) -> Result<(), FleetError> {
        let robot = self.robots.get_mut(robot_id).ok_or_else(|| FleetError::UnknownRobot(robot_id.clone()))?;
        robot.last_heartbeat = robot.last_heartbeat.max(tick);
        Ok(())
    }

    pub fn update_pose(&mut self, robot_id: &RobotId, pose: Pose3) -> Result<(), FleetError> {
        let robot = self.robots.get_mut(robot_id).ok_or_else(|| FleetError::UnknownRobot(robot_id.clone()))?;
        robot.pose = pose;
        Ok(())
    }

    /// Marks every connected robot silent for longer than `timeout` as disconnected.
    pub fn liveness_sweep(&mut self, now: Tick, timeout: Tick, log: &mut EventLog) -> Vec<RobotId> {
        assert!(timeout >= 1, "liveness timeout must be at least one tick");
        let mut dropped = Vec::new();
        for robot in self.robots.values_mut() {
            if robot.is_connected() && now.saturating_sub(robot.last_heartbeat) > timeout {
                robot.liveness = Liveness::Disconnected;
                log.emit(EventBody::RobotDisconnected {
                    robot_id: robot.robot_id.clone(),
                    last_heartbeat: robot.last_heartbeat,
                });
                dropped.push(robot.robot_id.clone());
            }
        }
        dropped
    }

    /// Checks eligibility, reserves a slot and emits `StepDispatched`.
    pub fn invoke_skill(&mut self, dispatch: &Dispatch, log: &mut EventLog) -> Result<(), FleetError> {
        let robot_id = &dispatch.assignment.robot_id;
        let robot = self.robots.get_mut(robot_id).ok_or_else(|| FleetError::UnknownRobot(robot_id.clone()))?;
        if !robot.is_connected() {
            return Err(FleetError::RobotDisconnected(robot_id.clone()));
        }
        let skill = dispatch.step.invocation.skill;
        if !robot.can_perform(skill) {
            return Err(FleetError::CapabilityMissing { robot: robot_id.clone(), skill });
        }
        if !robot.has_capacity() {
            return Err(FleetError::RobotSaturated(robot_id.clone()));
        }
        robot.active_subtasks += 1;
        log.emit(EventBody::StepDispatched {
            task_id: dispatch.task_id,
            plan_id: dispatch.plan_id,
            step_id: dispatch.step.step_id,
            attempt: dispatch.attempt,
            assignment: dispatch.assignment.clone(),
            invocation: dispatch.step.invocation.clone(),
            handoff: dispatch.handoff.clone(),
        });
        Ok(())
    }

    /// Frees the slot held by a finished (or abandoned) attempt.
    pub fn release(&mut self, robot_id: &RobotId) {
        if let Some(robot) = self.robots.get_mut(robot_id) {
            robot.active_subtasks = robot.active_subtasks.saturating_sub(1);
        }
    }
}
