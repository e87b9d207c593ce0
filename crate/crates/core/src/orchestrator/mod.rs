//! Task lifecycle: grounding, planning, dispatch, critic verdicts and
//! clarifications, driven one simulation tick at a time.

pub mod grammar;
pub mod planner;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use grammar::{ground_instruction, GroundError, GroundedIntent, Verb};
pub use planner::{generate_plan, handle_missing_target, ClarificationKind, MissingTargetAnswer, PlanContext, Planned};

use crate::config::RuntimeConfig;
use crate::critic::{decide, frame_mentions, ActiveStep, CriticVerdict, Decision, ScoreHistory, Scorer, SimScorer, WorldProbe};
use crate::event::{Event, EventBody, EventLog};
use crate::fleet::{AdapterReport, Dispatch, EmbodimentAdapter, Fleet, FleetSnapshot, Outcome, SkillResult};
use crate::memory::{AnchorSource, MemoryStore};
use crate::model::{
    pose_distance, Capability, ClarificationId, ParamValue, PlanId, PlanProgram, PlanStep, Pose3, RobotId, SkillInvocation, SkillTarget,
    StepGuard, StepId, TaskId, TaskRecord, TaskState, Tick,
};
use crate::scheduler::{dispatch_ready, reassign_on_disconnect, AssignError, Assignment, HandoffContext, Pin, PinSource, ReadyStep, Reassignment};
use crate::sim::{InstructionSpec, Scenario, ScriptInput};
use crate::sim::World;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clarification {
    pub clarification_id: ClarificationId,
    pub task_id: TaskId,
    pub question: String,
    pub options: Vec<String>,
    pub answer: Option<String>,
    pub asked_at: Tick,
    pub kind: ClarificationKind,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RuntimeError {
    #[error("unknown clarification {0}")]
    UnknownClarification(ClarificationId),
    #[error("clarification {0} is already answered")]
    AlreadyAnswered(ClarificationId),
    #[error("answer must be one of {options:?}")]
    InvalidAnswer { options: Vec<String> },
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error("tau override must lie in (0, 1]")]
    InvalidTau,
    #[error("invalid setup: {0}")]
    Setup(String),
}

/// Something arriving from outside the runtime.
#[derive(Debug, Clone, PartialEq)]
pub enum ExternalInput {
    /// `task_id` is preassigned for live and replayed submissions.
    Instruction { task_id: Option<TaskId>, spec: InstructionSpec },
    /// Without an id the answer goes to the oldest open clarification.
    Answer { clarification_id: Option<ClarificationId>, text: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Waiting,
    Running,
    Done,
    Skipped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRun {
    pub step: PlanStep,
    pub status: StepStatus,
    /// Current attempt, starting at 1.
    pub attempt: u32,
    pub robot: Option<RobotId>,
    /// Robot the next attempt must reuse, set on refinement.
    refine_pin: Option<RobotId>,
    handoff: Option<HandoffContext>,
    active: Option<ActiveStep>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskRun {
    pub record: TaskRecord,
    pub explicit_robot: Option<RobotId>,
    pub tau: Option<f64>,
    pub intent: Option<GroundedIntent>,
    /// Object (or person, robot) the current plan acts on.
    pub target: Option<String>,
    /// The user confirmed an unseen target is present.
    pub search: bool,
    /// Queries detected in this task's own observations.
    pub found: BTreeSet<String>,
    pub holding: Option<(RobotId, String)>,
    pub replans: u32,
    pub steps: BTreeMap<StepId, StepRun>,
    pub topo: Vec<StepId>,
    /// Final report, e.g. the inspection finding.
    pub detail: Option<String>,
    next_step: u32,
    blocked_at_epoch: u64,
}

impl TaskRun {
    pub fn state(&self) -> TaskState {
        self.record.state
    }

    fn running(&self) -> Vec<(StepId, RobotId)> {
        self.steps
            .iter()
            .filter(|(_, s)| s.status == StepStatus::Running)
            .filter_map(|(id, s)| s.robot.clone().map(|r| (*id, r)))
            .collect()
    }

    fn settled(&self, id: &StepId) -> bool {
        self.steps.get(id).is_some_and(|s| matches!(s.status, StepStatus::Done | StepStatus::Skipped))
    }

    fn all_settled(&self) -> bool {
        self.steps.keys().all(|id| self.settled(id))
    }
}

/// The orchestration runtime over a simulated fleet.
pub struct Runtime {
    cfg: RuntimeConfig,
    now: Tick,
    log: EventLog,
    fleet: Fleet,
    memory: MemoryStore,
    world: World,
    scorer: Box<dyn Scorer + Send>,
    scores: ScoreHistory,
    tasks: BTreeMap<TaskId, TaskRun>,
    clarifications: BTreeMap<ClarificationId, Clarification>,
    open: BTreeSet<ClarificationId>,
    answer_pending: BTreeSet<ClarificationId>,
    inbox: VecDeque<ExternalInput>,
    scheduled: VecDeque<(Tick, ExternalInput)>,
    deferred: Vec<AdapterReport>,
    next_task: u64,
    next_plan: u64,
    next_clarification: u64,
    fleet_epoch: u64,
}

impl Runtime {
    /// Builds the world, registers the fleet and anchors, and takes one
    /// registration frame per robot, all at tick 0.
    pub fn from_scenario(scenario: &Scenario, seed: u64, cfg: RuntimeConfig) -> Result<Self, RuntimeError> {
        cfg.validate().map_err(|e| RuntimeError::Setup(e.to_string()))?;
        let mut rt = Runtime {
            cfg,
            now: 0,
            log: EventLog::new(),
            fleet: Fleet::new(),
            memory: MemoryStore::default(),
            world: scenario.build_world(seed),
            scorer: Box::new(SimScorer),
            scores: ScoreHistory::new(),
            tasks: BTreeMap::new(),
            clarifications: BTreeMap::new(),
            open: BTreeSet::new(),
            answer_pending: BTreeSet::new(),
            inbox: VecDeque::new(),
            scheduled: VecDeque::new(),
            deferred: Vec::new(),
            next_task: 1,
            next_plan: 1,
            next_clarification: 1,
            fleet_epoch: 0,
        };
        for (name, pose) in &scenario.anchors {
            rt.memory.register_anchor(name, *pose, AnchorSource::User).map_err(|e| RuntimeError::Setup(e.to_string()))?;
        }
        for d in scenario.descriptors() {
            let (id, pose) = (d.robot_id.clone(), d.pose);
            rt.fleet.register(d, &mut rt.log).map_err(|e| RuntimeError::Setup(e.to_string()))?;
            rt.memory.report_robot_pose(&id, 0, pose);
        }
        let ids: Vec<RobotId> = scenario.fleet.iter().map(|r| r.robot_id.clone()).collect();
        for id in ids {
            let frame = rt.world.capture(&id).map_err(|e| RuntimeError::Setup(e.to_string()))?;
            rt.memory.insert_observation(frame, &mut rt.log).map_err(|e| RuntimeError::Setup(e.to_string()))?;
        }
        for entry in &scenario.script {
            let input = match &entry.input {
                ScriptInput::Instruction(spec) => ExternalInput::Instruction { task_id: None, spec: spec.clone() },
                ScriptInput::Answer(a) => ExternalInput::Answer { clarification_id: a.clarification, text: a.text.clone() },
            };
            rt.scheduled.push_back((entry.at_tick, input));
        }
        Ok(rt)
    }

    pub fn with_scorer(mut self, scorer: Box<dyn Scorer + Send>) -> Self {
        self.scorer = scorer;
        self
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.cfg
    }

    pub fn events(&self) -> &[Event] {
        self.log.events()
    }

    pub fn fleet(&self) -> FleetSnapshot {
        self.fleet.snapshot()
    }

    pub fn memory(&self) -> &MemoryStore {
        &self.memory
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn scores(&self) -> &ScoreHistory {
        &self.scores
    }

    pub fn tasks(&self) -> impl Iterator<Item = &TaskRun> {
        self.tasks.values()
    }

    pub fn task(&self, id: TaskId) -> Option<&TaskRun> {
        self.tasks.get(&id)
    }

    pub fn clarification(&self, id: ClarificationId) -> Option<&Clarification> {
        self.clarifications.get(&id)
    }

    pub fn open_clarifications(&self) -> Vec<&Clarification> {
        self.open.iter().filter_map(|id| self.clarifications.get(id)).collect()
    }

    /// Queues a live instruction for the next tick and returns its id.
    pub fn submit(&mut self, spec: InstructionSpec) -> Result<TaskId, RuntimeError> {
        validate_instruction(&spec)?;
        let id = TaskId(self.next_task);
        self.next_task += 1;
        self.inbox.push_back(ExternalInput::Instruction { task_id: Some(id), spec });
        Ok(id)
    }

    /// Queues a live answer for the next tick.
    pub fn answer(&mut self, id: ClarificationId, text: &str) -> Result<(), RuntimeError> {
        let c = self.clarifications.get(&id).ok_or(RuntimeError::UnknownClarification(id))?;
        if c.answer.is_some() || self.answer_pending.contains(&id) {
            return Err(RuntimeError::AlreadyAnswered(id));
        }
        if !self.open.contains(&id) {
            return Err(RuntimeError::UnknownClarification(id));
        }
        if !answer_allowed(c, text) {
            return Err(RuntimeError::InvalidAnswer { options: c.options.clone() });
        }
        self.answer_pending.insert(id);
        self.inbox.push_back(ExternalInput::Answer { clarification_id: Some(id), text: text.trim().to_owned() });
        Ok(())
    }

    /// Queues an input for processing at `at_tick` (used by replay).
    pub fn schedule(&mut self, at_tick: Tick, input: ExternalInput) {
        let at = self.scheduled.partition_point(|(t, _)| *t <= at_tick);
        self.scheduled.insert(at, (at_tick, input));
    }

    /// Nothing queued, every task terminal and no question outstanding.
    pub fn is_idle(&self) -> bool {
        self.inbox.is_empty()
            && self.scheduled.is_empty()
            && self.deferred.is_empty()
            && self.open.is_empty()
            && self.tasks.values().all(|t| t.state().is_terminal())
    }

    /// Advances until idle or `max_ticks`.
    pub fn run(&mut self, max_ticks: Tick) {
        while self.now < max_ticks && !self.is_idle() {
            self.advance();
        }
    }

    pub fn run_until(&mut self, tick: Tick) {
        while self.now < tick {
            self.advance();
        }
    }

    /// One tick: world, inputs, liveness, results and verdicts, timeouts,
    /// planning, dispatch.
    pub fn advance(&mut self) {
        self.now += 1;
        self.log.set_time(self.now);
        let mut reports = std::mem::take(&mut self.deferred);
        reports.extend(self.world.step(1));
        self.take_inputs();
        self.heartbeats();
        self.sweep_liveness();
        for report in reports {
            self.on_report(report);
        }
        self.expire_clarifications();
        self.plan_pending();
        self.dispatch();
    }

    fn take_inputs(&mut self) {
        let mut due: Vec<ExternalInput> = self.inbox.drain(..).collect();
        while self.scheduled.front().is_some_and(|(t, _)| *t <= self.now) {
            due.push(self.scheduled.pop_front().expect("checked").1);
        }
        for input in due {
            match input {
                ExternalInput::Instruction { task_id, spec } => self.accept_instruction(task_id, spec),
                ExternalInput::Answer { clarification_id, text } => self.accept_answer(clarification_id, &text),
            }
        }
    }

    fn accept_instruction(&mut self, task_id: Option<TaskId>, spec: InstructionSpec) {
        if let Err(e) = validate_instruction(&spec) {
            log::warn!("dropping scripted instruction: {e}");
            return;
        }
        let task_id = task_id.unwrap_or(TaskId(self.next_task));
        self.next_task = self.next_task.max(task_id.0 + 1);
        self.log.emit(EventBody::TaskSubmitted {
            task_id,
            instruction: spec.text.clone(),
            priority: spec.priority,
            explicit_robot: spec.explicit_robot.clone(),
            tau_override: spec.tau,
        });
        let record = TaskRecord {
            task_id,
            instruction: spec.text,
            priority: spec.priority,
            submitted_at: self.now,
            state: TaskState::Pending,
            plan: None,
        };
        self.tasks.insert(
            task_id,
            TaskRun {
                record,
                explicit_robot: spec.explicit_robot,
                tau: spec.tau,
                intent: None,
                target: None,
                search: false,
                found: BTreeSet::new(),
                holding: None,
                replans: 0,
                steps: BTreeMap::new(),
                topo: Vec::new(),
                detail: None,
                next_step: 1,
                blocked_at_epoch: 0,
            },
        );
    }

    fn accept_answer(&mut self, id: Option<ClarificationId>, text: &str) {
        let Some(id) = id.or_else(|| self.open.iter().next().copied()) else {
            log::warn!("answer `{text}` arrived with no open clarification");
            return;
        };
        let valid = self.open.contains(&id) && self.clarifications.get(&id).is_some_and(|c| answer_allowed(c, text));
        self.answer_pending.remove(&id);
        if !valid {
            log::warn!("ignoring answer `{text}` to clarification {id}");
            return;
        }
        self.open.remove(&id);
        let clar = self.clarifications.get_mut(&id).expect("open clarifications exist");
        clar.answer = Some(text.to_owned());
        let (task_id, kind) = (clar.task_id, clar.kind.clone());
        self.log.emit(EventBody::ClarificationAnswered { clarification_id: id, task_id, answer: text.to_owned() });

        let Some(task) = self.tasks.get_mut(&task_id) else { return };
        if task.state() != TaskState::AwaitingClarification {
            return;
        }
        let reply = text.trim();
        let decline = |detail: &str| Some(detail.to_owned());
        let failure = match &kind {
            ClarificationKind::MissingTarget { .. } => match handle_missing_target(reply) {
                Some(MissingTargetAnswer::Search) => {
                    task.search = true;
                    None
                }
                _ => decline("object not in scene per user"),
            },
            ClarificationKind::Unparseable => {
                task.record.instruction = reply.to_owned();
                task.intent = None;
                None
            }
            ClarificationKind::ExplicitRobotUnavailable { .. } => {
                if reply.eq_ignore_ascii_case("yes") {
                    task.explicit_robot = None;
                    if let Some(i) = task.intent.as_mut() {
                        i.explicit_robot = None;
                    }
                    None
                } else {
                    decline("requested robot unavailable")
                }
            }
            ClarificationKind::UnknownDestination { place } => {
                if let Some(i) = task.intent.as_mut() {
                    let fixed = grammar::normalize_place(reply);
                    if i.origin.as_deref() == Some(place.as_str()) {
                        i.origin = Some(fixed);
                    } else {
                        i.destination = Some(fixed);
                    }
                }
                None
            }
            ClarificationKind::UnknownRobot { .. } => {
                if let Some(i) = task.intent.as_mut() {
                    i.subject_robot = Some(RobotId::new(reply));
                }
                None
            }
        };
        match failure {
            Some(reason) => self.transition(task_id, TaskState::Failed, Some(reason)),
            None => self.transition(task_id, TaskState::Planning, None),
        }
    }

    fn heartbeats(&mut self) {
        if self.now % self.cfg.liveness.heartbeat_interval != 0 {
            return;
        }
        let ids: Vec<RobotId> = self.fleet.snapshot().robots.into_iter().map(|r| r.robot_id).collect();
        for id in ids {
            if !self.world.is_connected(&id) {
                continue;
            }
            if let Some(pose) = self.world.robot_pose(&id) {
                let _ = self.fleet.heartbeat(&id, self.now);
                let _ = self.fleet.update_pose(&id, pose);
                self.memory.report_robot_pose(&id, self.now, pose);
            }
        }
    }

    fn sweep_liveness(&mut self) {
        let dropped = self.fleet.liveness_sweep(self.now, self.cfg.liveness.heartbeat_timeout, &mut self.log);
        for robot in dropped {
            let affected: Vec<(TaskId, StepId)> = self
                .tasks
                .iter()
                .flat_map(|(tid, t)| t.running().into_iter().filter(|(_, r)| *r == robot).map(move |(sid, _)| (*tid, sid)))
                .collect();
            for (task_id, step_id) in affected {
                self.world.cancel(&robot, task_id, step_id);
                self.fleet.release(&robot);
                let task = &self.tasks[&task_id];
                let step = &task.steps[&step_id];
                if step.step.same_robot_as.is_some() || step.step.assigned_robot.is_some() {
                    self.replan(task_id, format!("{robot} disconnected"));
                    continue;
                }
                let handoff = HandoffContext {
                    object_id: None,
                    object_pose: None,
                    source_robot: robot.clone(),
                    notes: format!("{robot} disconnected during {}", step.step.invocation.skill),
                };
                let ready = self.ready_step(task, step_id, task.topo.iter().position(|s| *s == step_id).unwrap_or(0), None);
                let outcome = reassign_on_disconnect(&robot, vec![(ready, Some(handoff.clone()))], &self.fleet.snapshot(), &self.cfg.scheduling);
                let step = self.tasks.get_mut(&task_id).and_then(|t| t.steps.get_mut(&step_id)).expect("step exists");
                step.status = StepStatus::Waiting;
                step.attempt += 1;
                step.handoff = Some(handoff);
                if let Some(Reassignment::Assigned { assignment, .. }) = outcome.into_iter().next() {
                    self.start_step(assignment);
                }
            }
        }
    }

    fn on_report(&mut self, report: AdapterReport) {
        let AdapterReport { task_id, attempt, result } = report;
        let step_id = result.step_id;
        let current = self.tasks.get(&task_id).and_then(|t| t.steps.get(&step_id)).is_some_and(|s| {
            s.status == StepStatus::Running && s.attempt == attempt && s.robot.as_ref() == Some(&result.robot_id)
        });
        if !current {
            return;
        }
        let robot = result.robot_id.clone();
        self.log.emit(EventBody::StepResult { task_id, attempt, result: result.clone() });
        if let Some(p) = result.resulting_pose {
            let _ = self.fleet.update_pose(&robot, p);
            self.memory.report_robot_pose(&robot, self.now, p);
        }
        let terminal = result.outcome.is_terminal();
        if terminal {
            self.fleet.release(&robot);
        }
        if let Some(frame) = &result.observation {
            if let Err(e) = self.memory.insert_observation(frame.clone(), &mut self.log) {
                log::warn!("observation rejected: {e}");
            }
            let task = self.tasks.get_mut(&task_id).expect("checked");
            if let Some(t) = &task.target {
                if frame_mentions(frame, t) {
                    task.found.insert(t.clone());
                }
            }
        }

        let verdict = self.score(task_id, step_id, attempt, Some(&result.outcome), result.observation.as_ref());
        if !terminal {
            if verdict.decision == Decision::Replan {
                self.world.cancel(&robot, task_id, step_id);
                self.fleet.release(&robot);
                self.mark_step(task_id, step_id, StepStatus::Waiting);
                self.replan(task_id, verdict.rationale);
            }
            return;
        }
        match (&result.outcome, verdict.decision) {
            (Outcome::Success, Decision::Complete) => self.complete_step(task_id, step_id, result),
            (_, Decision::Replan) => {
                self.mark_step(task_id, step_id, StepStatus::Waiting);
                self.replan(task_id, verdict.rationale);
            }
            (outcome, _) => {
                let reason = match outcome {
                    Outcome::Failure { reason } => reason.clone(),
                    _ => verdict.rationale,
                };
                self.refine(task_id, step_id, reason);
            }
        }
    }

    /// Scores the step's current attempt and records the verdict.
    fn score(
        &mut self,
        task_id: TaskId,
        step_id: StepId,
        attempt: u32,
        outcome: Option<&Outcome>,
        observation: Option<&crate::memory::ObservationFrame>,
    ) -> CriticVerdict {
        let task = &self.tasks[&task_id];
        let active = task.steps.get(&step_id).and_then(|s| s.active.as_ref());
        let score = self.scorer.evaluate(&task.record.instruction, active, outcome, observation, &self.world).unwrap_or_else(|e| {
            log::warn!("critic could not score {task_id}/{step_id}: {e}");
            0.0
        });
        let mut history = self.scores.scores(task_id, step_id, attempt);
        history.push(score);
        let cfg = self.cfg.critic.with_tau(task.tau);
        let verdict = decide(&history, &cfg).expect("history is non-empty");
        if let Err(e) = self.scores.record(task_id, step_id, attempt, self.now, &verdict, &mut self.log) {
            log::error!("critic history rejected a score: {e}");
        }
        verdict
    }

    fn mark_step(&mut self, task_id: TaskId, step_id: StepId, status: StepStatus) {
        if let Some(s) = self.tasks.get_mut(&task_id).and_then(|t| t.steps.get_mut(&step_id)) {
            s.status = status;
        }
    }

    fn complete_step(&mut self, task_id: TaskId, step_id: StepId, result: SkillResult) {
        let task = self.tasks.get_mut(&task_id).expect("routed results have tasks");
        let step = task.steps.get_mut(&step_id).expect("routed results have steps");
        step.status = StepStatus::Done;
        match step.step.invocation.skill {
            Capability::Grasp => {
                let label = match &step.step.invocation.target {
                    SkillTarget::ObjectQuery(q) => q.clone(),
                    _ => task.target.clone().unwrap_or_default(),
                };
                task.holding = Some((result.robot_id.clone(), label));
            }
            Capability::Place | Capability::Handover => task.holding = None,
            _ => {}
        }
        if result.detail.is_some() {
            task.detail = result.detail;
        }
        if task.all_settled() {
            let detail = task.detail.clone().or_else(|| Some("completed".to_owned()));
            self.transition(task_id, TaskState::Done, detail);
        }
    }

    fn refine(&mut self, task_id: TaskId, step_id: StepId, reason: String) {
        let max = self.cfg.orchestrator.max_step_attempts;
        let task = self.tasks.get_mut(&task_id).expect("routed results have tasks");
        let step = task.steps.get_mut(&step_id).expect("routed results have steps");
        step.status = StepStatus::Waiting;
        if step.attempt >= max {
            self.replan(task_id, format!("{step_id} failed {max} attempts: {reason}"));
            return;
        }
        step.attempt += 1;
        step.refine_pin = step.robot.clone();
        self.transition(task_id, TaskState::Refining, Some(format!("{step_id}: {reason}")));
        self.transition(task_id, TaskState::Executing, None);
    }

    fn cancel_running(&mut self, task_id: TaskId) {
        let running = self.tasks.get(&task_id).map(TaskRun::running).unwrap_or_default();
        for (step_id, robot) in running {
            self.world.cancel(&robot, task_id, step_id);
            self.fleet.release(&robot);
            self.mark_step(task_id, step_id, StepStatus::Waiting);
        }
    }

    /// Cancels siblings and sends the task back to planning.
    fn replan(&mut self, task_id: TaskId, reason: String) {
        self.cancel_running(task_id);
        let task = self.tasks.get_mut(&task_id).expect("replanned tasks exist");
        if task.replans >= self.cfg.orchestrator.max_replans {
            self.transition(task_id, TaskState::Failed, Some(format!("replan limit reached: {reason}")));
            return;
        }
        task.replans += 1;
        self.transition(task_id, TaskState::Replanning, Some(reason));
        self.transition(task_id, TaskState::Planning, None);
    }

    fn fail(&mut self, task_id: TaskId, reason: String) {
        self.cancel_running(task_id);
        self.transition(task_id, TaskState::Failed, Some(reason));
    }

    fn expire_clarifications(&mut self) {
        let timeout = self.cfg.orchestrator.clarification_timeout;
        let expired: Vec<ClarificationId> = self
            .open
            .iter()
            .filter(|id| !self.answer_pending.contains(id))
            .filter(|id| self.clarifications.get(id).is_some_and(|c| self.now >= c.asked_at + timeout))
            .copied()
            .collect();
        for id in expired {
            self.open.remove(&id);
            let task_id = self.clarifications[&id].task_id;
            if self.tasks.get(&task_id).is_some_and(|t| t.state() == TaskState::AwaitingClarification) {
                self.transition(task_id, TaskState::Failed, Some("clarification timed out".into()));
            }
        }
    }

    fn plan_pending(&mut self) {
        let ids: Vec<TaskId> = self.tasks.keys().copied().collect();
        for id in ids {
            let task = &self.tasks[&id];
            match task.state() {
                TaskState::Pending => self.transition(id, TaskState::Planning, None),
                TaskState::Blocked if task.blocked_at_epoch != self.fleet_epoch => self.transition(id, TaskState::Planning, None),
                _ => {}
            }
            if self.tasks[&id].state() == TaskState::Planning {
                self.plan_task(id);
            }
        }
    }

    fn plan_task(&mut self, task_id: TaskId) {
        let robots: BTreeSet<RobotId> = self.fleet.snapshot().robots.into_iter().map(|r| r.robot_id).collect();
        let task = self.tasks.get_mut(&task_id).expect("planned tasks exist");
        if task.intent.is_none() {
            match ground_instruction(&task.record.instruction, &self.memory, &robots) {
                Ok(mut intent) => {
                    if task.explicit_robot.is_some() {
                        intent.explicit_robot = task.explicit_robot.clone();
                    }
                    task.intent = Some(intent);
                }
                Err(e) => {
                    log::info!("{task_id}: {e}");
                    self.ask(task_id, ClarificationKind::Unparseable);
                    return;
                }
            }
        }
        let snapshot = self.fleet.snapshot();
        let task = &self.tasks[&task_id];
        let plan_id = PlanId(self.next_plan);
        let intent = task.intent.clone().expect("grounded above");
        let holding = task.holding.as_ref().map(|(r, l)| (r, l.as_str()));
        let ctx = PlanContext {
            memory: &self.memory,
            fleet: &snapshot,
            plan_id,
            first_step: task.next_step,
            search: task.search,
            sweep_delta_yaw: self.cfg.orchestrator.sweep_delta_yaw,
            resolved_target: if task.replans > 0 { task.target.as_deref() } else { None },
            holding,
        };
        match generate_plan(&intent, &ctx) {
            Planned::Plan { plan, target } => {
                self.next_plan += 1;
                self.install_plan(task_id, plan, target);
                self.transition(task_id, TaskState::Executing, None);
            }
            Planned::Immediate { detail } => {
                self.next_plan += 1;
                self.install_plan(task_id, PlanProgram { plan_id, steps: Vec::new() }, None);
                self.transition(task_id, TaskState::Executing, None);
                self.tasks.get_mut(&task_id).expect("exists").detail = Some(detail.clone());
                self.transition(task_id, TaskState::Done, Some(detail));
            }
            Planned::Clarify(kind) => self.ask(task_id, kind),
            Planned::Blocked { reason } => {
                self.tasks.get_mut(&task_id).expect("exists").blocked_at_epoch = self.fleet_epoch;
                self.transition(task_id, TaskState::Blocked, Some(reason));
            }
        }
    }

    fn install_plan(&mut self, task_id: TaskId, plan: PlanProgram, target: Option<String>) {
        self.log.emit(EventBody::PlanIssued { task_id, plan: plan.clone() });
        let task = self.tasks.get_mut(&task_id).expect("exists");
        task.topo = plan.topological_order().expect("templates are acyclic");
        task.steps = plan
            .steps
            .iter()
            .map(|s| {
                let run = StepRun {
                    step: s.clone(),
                    status: StepStatus::Waiting,
                    attempt: 1,
                    robot: None,
                    refine_pin: None,
                    handoff: None,
                    active: None,
                };
                (s.step_id, run)
            })
            .collect();
        task.next_step = plan.steps.iter().map(|s| s.step_id.0 + 1).max().unwrap_or(task.next_step).max(task.next_step);
        if target.is_some() {
            task.target = target;
        }
        task.record.plan = Some(plan);
    }

    fn ask(&mut self, task_id: TaskId, kind: ClarificationKind) {
        let id = ClarificationId(self.next_clarification);
        self.next_clarification += 1;
        let clarification = Clarification {
            clarification_id: id,
            task_id,
            question: kind.question(),
            options: kind.options(&self.fleet.snapshot()),
            answer: None,
            asked_at: self.now,
            kind,
        };
        self.clarifications.insert(id, clarification.clone());
        self.open.insert(id);
        self.log.emit(EventBody::ClarificationAsked { clarification });
        self.transition(task_id, TaskState::AwaitingClarification, None);
    }

    fn transition(&mut self, task_id: TaskId, to: TaskState, detail: Option<String>) {
        let task = self.tasks.get_mut(&task_id).expect("transitions target known tasks");
        let from = task.record.state;
        assert!(from.can_transition_to(to), "illegal transition {from} -> {to} for {task_id}");
        task.record.state = to;
        self.log.emit(EventBody::TaskStateChanged { task_id, from, to, detail });
    }

    /// Scheduling anchor: where the step's work happens, if known.
    fn step_anchor(&self, inv: &SkillInvocation) -> Option<Pose3> {
        match (inv.skill, &inv.target) {
            (Capability::Navigate, SkillTarget::Pose(p)) => Some(*p),
            (Capability::Navigate, SkillTarget::AnchorName(n)) => self.memory.anchor(n).map(|a| a.pose),
            (Capability::Navigate, SkillTarget::RobotId(r)) => self.memory.last_known_location(r.as_str()).ok().map(|r| r.pose),
            (Capability::Navigate | Capability::Grasp, SkillTarget::ObjectQuery(q)) => planner::object_hint(&self.memory, q),
            _ => None,
        }
    }

    fn ready_step(&self, task: &TaskRun, step_id: StepId, topo_rank: usize, pin: Option<Pin>) -> ReadyStep {
        let step = &task.steps[&step_id].step;
        ReadyStep {
            task_id: task.record.task_id,
            priority: task.record.priority,
            submitted_at: task.record.submitted_at,
            topo_rank,
            step: step.clone(),
            anchor: self.step_anchor(&step.invocation),
            pin,
            exclude: BTreeSet::new(),
        }
    }

    fn pin_for(&self, task: &TaskRun, run: &StepRun) -> Option<Pin> {
        if let Some(r) = &run.step.assigned_robot {
            let source = if task.explicit_robot.as_ref() == Some(r) || task.intent.as_ref().and_then(|i| i.explicit_robot.as_ref()) == Some(r) {
                PinSource::User
            } else {
                PinSource::Runtime
            };
            return Some(Pin { robot_id: r.clone(), source });
        }
        if let Some(r) = &run.refine_pin {
            return Some(Pin { robot_id: r.clone(), source: PinSource::Runtime });
        }
        let root = run.step.same_robot_as?;
        let root_run = task.steps.get(&root)?;
        let robot = root_run.robot.clone().or_else(|| root_run.step.assigned_robot.clone())?;
        Some(Pin { robot_id: robot, source: PinSource::Runtime })
    }

    /// Skips satisfied guards; returns steps whose dependencies are settled.
    fn ready_steps(&mut self, task_id: TaskId) -> Vec<StepId> {
        let task = self.tasks.get_mut(&task_id).expect("exists");
        loop {
            let mut changed = false;
            for id in task.topo.clone() {
                let run = &task.steps[&id];
                let deps_ok = run.step.depends_on.iter().all(|d| task.settled(d));
                if run.status == StepStatus::Waiting && deps_ok {
                    if let Some(StepGuard::UntilFound(q)) = &run.step.guard {
                        if task.found.contains(q) {
                            task.steps.get_mut(&id).expect("exists").status = StepStatus::Skipped;
                            changed = true;
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        task.topo
            .iter()
            .filter(|id| {
                let run = &task.steps[*id];
                run.status == StepStatus::Waiting && run.step.depends_on.iter().all(|d| task.settled(d))
            })
            .copied()
            .collect()
    }

    fn dispatch(&mut self) {
        let mut queue = Vec::new();
        let ids: Vec<TaskId> = self.tasks.iter().filter(|(_, t)| t.state() == TaskState::Executing).map(|(id, _)| *id).collect();
        for task_id in ids {
            let ready = self.ready_steps(task_id);
            let task = &self.tasks[&task_id];
            if task.all_settled() && !task.steps.is_empty() {
                let detail = task.detail.clone().or_else(|| Some("completed".to_owned()));
                self.transition(task_id, TaskState::Done, detail);
                continue;
            }
            let unfound = task.search && task.target.as_ref().is_some_and(|t| !task.found.contains(t));
            if unfound && ready.iter().any(|id| task.steps[id].step.guard.is_none()) {
                let q = task.target.clone().unwrap_or_default();
                self.fail(task_id, format!("{q} not found after a full sweep"));
                continue;
            }
            for id in ready {
                let rank = task.topo.iter().position(|s| *s == id).unwrap_or(0);
                let pin = self.pin_for(task, &task.steps[&id]);
                queue.push(self.ready_step(task, id, rank, pin));
            }
        }
        let cycle = dispatch_ready(&queue, &self.fleet.snapshot(), &self.cfg.scheduling);
        for assignment in cycle.assignments {
            self.start_step(assignment);
        }
        for (task_id, step_id, err) in cycle.deferred {
            if self.tasks[&task_id].state() != TaskState::Executing {
                continue;
            }
            match err {
                AssignError::AllCapableBusy => {}
                AssignError::NoCapableRobot => {
                    self.cancel_running(task_id);
                    self.tasks.get_mut(&task_id).expect("exists").blocked_at_epoch = self.fleet_epoch;
                    self.transition(task_id, TaskState::Blocked, Some(format!("{step_id}: {err}")));
                }
                AssignError::ExplicitRobotUnavailable(ref robot) => {
                    let task = &self.tasks[&task_id];
                    let user_pinned = self.pin_for(task, &task.steps[&step_id]).is_some_and(|p| p.source == PinSource::User);
                    if user_pinned {
                        self.cancel_running(task_id);
                        self.tasks.get_mut(&task_id).expect("exists").blocked_at_epoch = self.fleet_epoch;
                        self.transition(task_id, TaskState::Blocked, Some(format!("{robot} unavailable")));
                    } else {
                        self.replan(task_id, format!("{robot} unavailable for {step_id}"));
                    }
                }
            }
        }
    }

    /// Critic context fixed at dispatch.
    fn active_step(&self, robot: &RobotId, inv: &SkillInvocation) -> ActiveStep {
        let mut active =
            ActiveStep { robot_id: robot.clone(), invocation: inv.clone(), goal: None, start_distance: 0.0, object: None, person: None };
        let here = self.world.robot_pose(robot);
        match inv.skill {
            Capability::Navigate => {
                active.goal = self.world.navigation_goal(robot, inv).ok();
                if let (Some(g), Some(h)) = (active.goal, here) {
                    active.start_distance = pose_distance(&h, &g);
                }
            }
            Capability::GuidePerson => {
                active.goal = self.world.guide_goal(robot, inv).ok();
                active.person = inv.param_str("person").map(str::to_owned);
                let person_pose = active.person.as_deref().and_then(|p| self.world.person_pose(p));
                if let (Some(g), Some(p)) = (active.goal, person_pose) {
                    active.start_distance = pose_distance(&p, &g);
                }
            }
            Capability::Grasp => {
                if let SkillTarget::ObjectQuery(q) = &inv.target {
                    let hint = match (inv.param_f64("hint_x"), inv.param_f64("hint_y")) {
                        (Some(x), Some(y)) => Some(Pose3::at(x, y, inv.param_f64("hint_z").unwrap_or(0.0))),
                        _ => None,
                    };
                    active.object = self.world.resolve_object(robot, q, hint);
                }
            }
            Capability::Place => active.object = self.world.holding(robot),
            Capability::Handover => {
                active.object = self.world.holding(robot);
                if let SkillTarget::ObjectQuery(q) = &inv.target {
                    active.person = Some(q.clone());
                }
            }
            _ => {}
        }
        active
    }

    fn start_step(&mut self, assignment: Assignment) {
        let (task_id, step_id, robot) = (assignment.task_id, assignment.step_id, assignment.robot_id.clone());
        let task = &self.tasks[&task_id];
        let run = &task.steps[&step_id];
        let mut step = run.step.clone();
        if step.invocation.skill == Capability::Grasp {
            if let SkillTarget::ObjectQuery(q) = &step.invocation.target {
                if let Some(h) = planner::object_hint(&self.memory, q) {
                    step.invocation = step
                        .invocation
                        .with_param("hint_x", ParamValue::Number(h.x))
                        .with_param("hint_y", ParamValue::Number(h.y))
                        .with_param("hint_z", ParamValue::Number(h.z));
                }
            }
        }
        let attempt = run.attempt;
        let dispatch = Dispatch {
            task_id,
            plan_id: task.record.plan.as_ref().map(|p| p.plan_id).unwrap_or(PlanId(0)),
            step: step.clone(),
            attempt,
            assignment,
            handoff: run.handoff.clone(),
        };
        if let Err(e) = self.fleet.invoke_skill(&dispatch, &mut self.log) {
            log::warn!("dispatch of {task_id}/{step_id} refused: {e}");
            return;
        }
        let active = self.active_step(&robot, &step.invocation);
        if let Err(e) = self.world.execute(&robot, task_id, attempt, step_id, &step.invocation) {
            self.deferred.push(AdapterReport {
                task_id,
                attempt,
                result: SkillResult {
                    step_id,
                    robot_id: robot.clone(),
                    outcome: Outcome::Failure { reason: e.0 },
                    observation: None,
                    resulting_pose: None,
                    detail: None,
                },
            });
        }
        let run = self.tasks.get_mut(&task_id).and_then(|t| t.steps.get_mut(&step_id)).expect("exists");
        run.status = StepStatus::Running;
        run.robot = Some(robot);
        run.refine_pin = None;
        run.active = Some(active);
        self.score(task_id, step_id, attempt, None, None);
    }
}

fn validate_instruction(spec: &InstructionSpec) -> Result<(), RuntimeError> {
    if spec.text.trim().is_empty() {
        return Err(RuntimeError::EmptyInstruction);
    }
    if spec.tau.is_some_and(|t| !(t > 0.0 && t <= 1.0)) {
        return Err(RuntimeError::InvalidTau);
    }
    Ok(())
}

fn answer_allowed(c: &Clarification, text: &str) -> bool {
    let t = text.trim();
    !t.is_empty() && (c.options.is_empty() || c.options.iter().any(|o| o.eq_ignore_ascii_case(t)))
}
