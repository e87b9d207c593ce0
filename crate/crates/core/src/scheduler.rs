//! Capability-filtered, location/load-scored step assignment.
//!
//! Capability is a hard filter. Among eligible robots the score is
//!
//! ```text
//! w_loc / (1 + d / distance_scale) + w_load * (1 - active / max_concurrent)
//! ```
//!
//! with `d` the straight-line distance to the step's anchor pose. Priority
//! never enters the score; it orders the dispatch queue.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fleet::{EmbodimentDescriptor, FleetSnapshot};
use crate::model::{pose_distance, ObjectId, PlanStep, Pose3, RobotId, StepId, TaskId, Tick};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulingConfig {
    pub w_loc: f64,
    pub w_load: f64,
    pub distance_scale: f64,
}

impl Default for SchedulingConfig {
    fn default() -> Self {
        Self { w_loc: 0.6, w_load: 0.4, distance_scale: 1.0 }
    }
}

impl SchedulingConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.w_loc >= 0.0 && self.w_load >= 0.0) {
            return Err("scheduling weights must be non-negative".into());
        }
        if !(self.w_loc + self.w_load > 0.0) {
            return Err("at least one scheduling weight must be positive".into());
        }
        if !(self.distance_scale > 0.0 && self.distance_scale.is_finite()) {
            return Err("distance_scale must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentMode {
    Automatic,
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub task_id: TaskId,
    pub step_id: StepId,
    pub robot_id: RobotId,
    pub score: f64,
    pub mode: AssignmentMode,
}

/// Execution context passed along when a step moves to another embodiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandoffContext {
    pub object_id: Option<ObjectId>,
    pub object_pose: Option<Pose3>,
    pub source_robot: RobotId,
    pub notes: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PinSource {
    /// Requested by the user; never silently overridden.
    User,
    /// Derived by the runtime, e.g. the robot already holding the object.
    Runtime,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pin {
    pub robot_id: RobotId,
    pub source: PinSource,
}

/// A plan step whose dependencies are satisfied, with everything the
/// scheduler needs to rank and place it.
#[derive(Debug, Clone, PartialEq)]
pub struct ReadyStep {
    pub task_id: TaskId,
    pub priority: u32,
    pub submitted_at: Tick,
    /// Position of the step in its plan's topological order.
    pub topo_rank: usize,
    pub step: PlanStep,
    /// Where the work happens; `None` makes the location term uniform.
    pub anchor: Option<Pose3>,
    pub pin: Option<Pin>,
    pub exclude: BTreeSet<RobotId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AssignError {
    #[error("no connected robot offers the required capability")]
    NoCapableRobot,
    #[error("requested robot `{0}` is unavailable or incapable")]
    ExplicitRobotUnavailable(RobotId),
    #[error("every capable robot is saturated")]
    AllCapableBusy,
}

/// Score of one eligible robot for one step.
pub fn score_candidate(robot: &EmbodimentDescriptor, step: &PlanStep, task_anchor: &Pose3, cfg: &SchedulingConfig) -> f64 {
    debug_assert!(robot.can_perform(step.invocation.skill), "incapable robots are filtered before scoring");
    let d = pose_distance(&robot.pose, task_anchor);
    let location = 1.0 / (1.0 + d / cfg.distance_scale);
    let load = 1.0 - f64::from(robot.active_subtasks) / f64::from(robot.max_concurrent);
    cfg.w_loc * location + cfg.w_load * load
}

fn anchor_for(ready: &ReadyStep, robot: &EmbodimentDescriptor) -> Pose3 {
    ready.anchor.unwrap_or(robot.pose)
}

fn eligible<'a>(ready: &'a ReadyStep, fleet: &'a FleetSnapshot) -> impl Iterator<Item = &'a EmbodimentDescriptor> + 'a {
    fleet
        .robots
        .iter()
        .filter(move |r| r.is_connected() && r.can_perform(ready.step.invocation.skill) && !ready.exclude.contains(&r.robot_id))
}

/// Picks a robot for one ready step.
pub fn assign(ready: &ReadyStep, fleet: &FleetSnapshot, cfg: &SchedulingConfig) -> Result<Assignment, AssignError> {
    if let Some(pin) = &ready.pin {
        let robot = eligible(ready, fleet)
            .find(|r| r.robot_id == pin.robot_id)
            .ok_or_else(|| AssignError::ExplicitRobotUnavailable(pin.robot_id.clone()))?;
        if !robot.has_capacity() {
            return Err(AssignError::AllCapableBusy);
        }
        return Ok(Assignment {
            task_id: ready.task_id,
            step_id: ready.step.step_id,
            robot_id: robot.robot_id.clone(),
            score: score_candidate(robot, &ready.step, &anchor_for(ready, robot), cfg),
            mode: AssignmentMode::Explicit,
        });
    }

    let mut any_capable = false;
    let mut best: Option<(&EmbodimentDescriptor, f64)> = None;
    for robot in eligible(ready, fleet) {
        any_capable = true;
        if !robot.has_capacity() {
            continue;
        }
        let score = score_candidate(robot, &ready.step, &anchor_for(ready, robot), cfg);
        let better = match best {
            None => true,
            Some((incumbent, best_score)) => match score.partial_cmp(&best_score) {
                Some(Ordering::Greater) => true,
                Some(Ordering::Equal) => robot.robot_id < incumbent.robot_id,
                _ => false,
            },
        };
        if better {
            best = Some((robot, score));
        }
    }
    match best {
        Some((robot, score)) => Ok(Assignment {
            task_id: ready.task_id,
            step_id: ready.step.step_id,
            robot_id: robot.robot_id.clone(),
            score,
            mode: AssignmentMode::Automatic,
        }),
        None if any_capable => Err(AssignError::AllCapableBusy),
        None => Err(AssignError::NoCapableRobot),
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DispatchCycle {
    pub assignments: Vec<Assignment>,
    /// Steps left queued this cycle, with the reason.
    pub deferred: Vec<(TaskId, StepId, AssignError)>,
}

/// Orders the queue by urgency and assigns greedily, accounting for load
/// consumed earlier in the same cycle.
pub fn dispatch_ready(queue: &[ReadyStep], fleet: &FleetSnapshot, cfg: &SchedulingConfig) -> DispatchCycle {
    let mut order: Vec<&ReadyStep> = queue.iter().collect();
    order.sort_by(|a, b| {
        b.priority
            .cmp(&a.priority)
            .then(a.submitted_at.cmp(&b.submitted_at))
            .then(a.task_id.cmp(&b.task_id))
            .then(a.topo_rank.cmp(&b.topo_rank))
    });
    let mut working = fleet.clone();
    let mut cycle = DispatchCycle::default();
    for ready in order {
        match assign(ready, &working, cfg) {
            Ok(assignment) => {
                if let Some(r) = working.get_mut(&assignment.robot_id) {
                    r.active_subtasks += 1;
                }
                cycle.assignments.push(assignment);
            }
            Err(e) => cycle.deferred.push((ready.task_id, ready.step.step_id, e)),
        }
    }
    cycle
}

/// Outcome of moving one in-flight step off a dead robot.
#[derive(Debug, Clone, PartialEq)]
pub enum Reassignment {
    Assigned { assignment: Assignment, handoff: Option<HandoffContext> },
    Blocked { task_id: TaskId, step_id: StepId, reason: AssignError },
}

/// Re-runs assignment for every in-flight step of `robot_id`, which is
/// excluded from the candidate set. Handoff contexts travel with their step.
pub fn reassign_on_disconnect(
    robot_id: &RobotId,
    in_flight: Vec<(ReadyStep, Option<HandoffContext>)>,
    fleet: &FleetSnapshot,
    cfg: &SchedulingConfig,
) -> Vec<Reassignment> {
    let mut working = fleet.clone();
    in_flight
        .into_iter()
        .map(|(mut ready, handoff)| {
            ready.exclude.insert(robot_id.clone());
            if ready.pin.as_ref().is_some_and(|p| &p.robot_id == robot_id) {
                ready.pin = None;
            }
            match assign(&ready, &working, cfg) {
                Ok(assignment) => {
                    if let Some(r) = working.get_mut(&assignment.robot_id) {
                        r.active_subtasks += 1;
                    }
                    Reassignment::Assigned { assignment, handoff }
                }
                Err(reason) => Reassignment::Blocked { task_id: ready.task_id, step_id: ready.step.step_id, reason },
            }
        })
        .collect()
}
