//! Progress scoring and the Complete / Refine / Replan decision rules.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{EventBody, EventLog};
use crate::fleet::Outcome;
use crate::memory::ObservationFrame;
use crate::model::{pose_distance, Capability, ObjectId, Pose3, RobotId, SkillInvocation, StepId, TaskId, Tick};

/// Gripper-to-object distance at which a grasp scores zero.
pub const GRASP_REACH: f64 = 0.5;
/// A guided person this close to the destination counts as delivered.
pub const GUIDE_ARRIVAL_RADIUS: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticConfig {
    pub tau_complete: f64,
    pub eps_improve: f64,
    pub delta_drop: f64,
    pub stagnation_window: usize,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self { tau_complete: 0.85, eps_improve: 0.02, delta_drop: 0.2, stagnation_window: 3 }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<(), CriticError> {
        let ok = self.tau_complete > 0.0
            && self.tau_complete <= 1.0
            && self.eps_improve > 0.0
            && self.delta_drop > 0.0
            && self.stagnation_window >= 2;
        if ok {
            Ok(())
        } else {
            Err(CriticError::InvalidConfig)
        }
    }

    /// Same configuration with a per-task completion threshold.
    pub fn with_tau(self, tau: Option<f64>) -> Self {
        match tau {
            Some(t) => Self { tau_complete: t, ..self },
            None => self,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Complete,
    Refine,
    Replan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticVerdict {
    pub score: f64,
    pub decision: Decision,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CriticError {
    #[error("score history is empty")]
    EmptyHistory,
    #[error("no active step to evaluate")]
    NoActiveStep,
    #[error("critic configuration out of range")]
    InvalidConfig,
    #[error("tick {tick} does not advance the history (last {last})")]
    NonMonotonicTick { tick: Tick, last: Tick },
}

/// Applies the four rules in fixed precedence to the current attempt's scores.
pub fn decide(history: &[f64], cfg: &CriticConfig) -> Result<CriticVerdict, CriticError> {
    let latest = *history.last().ok_or(CriticError::EmptyHistory)?;
    let verdict = |decision, rationale: String| Ok(CriticVerdict { score: latest, decision, rationale });
    if latest >= cfg.tau_complete {
        return verdict(Decision::Complete, format!("score {latest:.3} reached threshold {:.3}", cfg.tau_complete));
    }
    if history.len() >= 2 {
        let prev = history[history.len() - 2];
        if latest <= prev - cfg.delta_drop {
            return verdict(Decision::Replan, format!("score dropped from {prev:.3} to {latest:.3}"));
        }
    }
    let n = cfg.stagnation_window;
    if history.len() >= n {
        let window = &history[history.len() - n..];
        let max = window.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = window.iter().copied().fold(f64::INFINITY, f64::min);
        if max - min <= cfg.eps_improve {
            return verdict(Decision::Replan, format!("score stagnated over the last {n} evaluations"));
        }
    }
    verdict(Decision::Refine, format!("score {latest:.3} below threshold, still improving"))
}

/// Recorded scores keyed by task, step and attempt.
#[derive(Debug, Clone, Default)]
pub struct ScoreHistory {
    entries: BTreeMap<(TaskId, StepId, u32), Vec<(Tick, f64)>>,
}

impl ScoreHistory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a score and emits `CriticScored`.
    pub fn record(
        &mut self,
        task_id: TaskId,
        step_id: StepId,
        attempt: u32,
        tick: Tick,
        verdict: &CriticVerdict,
        log: &mut EventLog,
    ) -> Result<(), CriticError> {
        let entry = self.entries.entry((task_id, step_id, attempt)).or_default();
        if let Some(&(last, _)) = entry.last() {
            if tick <= last {
                return Err(CriticError::NonMonotonicTick { tick, last });
            }
        }
        entry.push((tick, verdict.score));
        log.emit(EventBody::CriticScored {
            task_id,
            step_id,
            attempt,
            score: verdict.score,
            decision: verdict.decision,
            rationale: verdict.rationale.clone(),
        });
        Ok(())
    }

    pub fn get(&self, task_id: TaskId, step_id: StepId, attempt: u32) -> &[(Tick, f64)] {
        self.entries.get(&(task_id, step_id, attempt)).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn scores(&self, task_id: TaskId, step_id: StepId, attempt: u32) -> Vec<f64> {
        self.get(task_id, step_id, attempt).iter().map(|(_, s)| *s).collect()
    }

    /// Tick of the attempt's latest score, if any.
    pub fn last_tick(&self, task_id: TaskId, step_id: StepId, attempt: u32) -> Option<Tick> {
        self.get(task_id, step_id, attempt).last().map(|(t, _)| *t)
    }
}

/// Ground-truth hooks a scorer may read.
pub trait WorldProbe {
    fn robot_pose(&self, robot: &RobotId) -> Option<Pose3>;
    fn gripper_pose(&self, robot: &RobotId) -> Option<Pose3>;
    fn holding(&self, robot: &RobotId) -> Option<ObjectId>;
    fn object_pose(&self, object: &ObjectId) -> Option<Pose3>;
    fn person_pose(&self, person: &str) -> Option<Pose3>;
    fn person_holds(&self, person: &str, object: &ObjectId) -> bool;
}

/// What the scorer knows about the step being evaluated, fixed at dispatch.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveStep {
    pub robot_id: RobotId,
    pub invocation: SkillInvocation,
    /// Navigation goal, or the guide destination.
    pub goal: Option<Pose3>,
    /// Distance to the goal when the attempt started.
    pub start_distance: f64,
    /// Object manipulated by grasp, place or handover.
    pub object: Option<ObjectId>,
    /// Person detected, guided or handed to.
    pub person: Option<String>,
}

/// Maps (instruction, observation, world) to a progress score in [0, 1].
pub trait Scorer {
    fn evaluate(
        &self,
        instruction: &str,
        step: Option<&ActiveStep>,
        outcome: Option<&Outcome>,
        observation: Option<&ObservationFrame>,
        probe: &dyn WorldProbe,
    ) -> Result<f64, CriticError>;
}

fn clamp01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

fn ratio_progress(d: f64, d0: f64) -> f64 {
    if d0 <= 0.0 {
        1.0
    } else {
        clamp01(1.0 - d / d0)
    }
}

/// Scorer reading simulator ground truth.
#[derive(Debug, Clone, Copy, Default)]
pub struct SimScorer;

impl Scorer for SimScorer {
    fn evaluate(
        &self,
        _instruction: &str,
        step: Option<&ActiveStep>,
        outcome: Option<&Outcome>,
        observation: Option<&ObservationFrame>,
        probe: &dyn WorldProbe,
    ) -> Result<f64, CriticError> {
        let step = step.ok_or(CriticError::NoActiveStep)?;
        let succeeded = matches!(outcome, Some(Outcome::Success));
        let score = match step.invocation.skill {
            Capability::Navigate => {
                let (Some(goal), Some(pose)) = (step.goal, probe.robot_pose(&step.robot_id)) else {
                    return Ok(0.0);
                };
                ratio_progress(pose_distance(&pose, &goal), step.start_distance)
            }
            Capability::Grasp => {
                let Some(object) = &step.object else { return Ok(0.0) };
                if probe.holding(&step.robot_id).as_ref() == Some(object) {
                    1.0
                } else {
                    match (probe.gripper_pose(&step.robot_id), probe.object_pose(object)) {
                        (Some(g), Some(o)) => 0.5 * clamp01(1.0 - pose_distance(&g, &o) / GRASP_REACH),
                        _ => 0.0,
                    }
                }
            }
            Capability::Handover => match (&step.person, &step.object) {
                (Some(p), Some(o)) if probe.person_holds(p, o) => 1.0,
                _ => 0.0,
            },
            Capability::GuidePerson => {
                let (Some(goal), Some(person)) = (step.goal, step.person.as_deref()) else {
                    return Ok(0.0);
                };
                match probe.person_pose(person) {
                    Some(p) if pose_distance(&p, &goal) <= GUIDE_ARRIVAL_RADIUS => 1.0,
                    Some(p) => ratio_progress(pose_distance(&p, &goal), step.start_distance),
                    None => 0.0,
                }
            }
            Capability::Observe => match observation {
                Some(frame) if succeeded => {
                    let required = step.invocation.param_bool("require").unwrap_or(false);
                    match step.invocation.param_str("query") {
                        Some(q) if required => {
                            if frame_mentions(frame, q) {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        _ => 1.0,
                    }
                }
                _ => 0.0,
            },
            Capability::Place | Capability::AdjustViewpoint | Capability::Inspect => {
                if succeeded {
                    1.0
                } else {
                    0.0
                }
            }
        };
        Ok(score)
    }
}

/// True when any label (or its description) contains the query, case-insensitively.
pub fn frame_mentions(frame: &ObservationFrame, query: &str) -> bool {
    let q = query.to_lowercase();
    frame
        .labels
        .iter()
        .any(|l| l.label.to_lowercase().contains(&q) || l.text().to_lowercase().contains(&q))
}
