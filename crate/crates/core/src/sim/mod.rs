//! Deterministic discrete-event world standing in for real robots.
//!
//! One logical clock; all mutation happens in [`World::step`] and
//! [`World::apply_skill`]. Navigation moves 1 m per tick, arm skills
//! reconfigure after a 2-tick latency, perception is noiseless unless a
//! label dropout probability is set.

mod scenario;

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use scenario::{
    AnswerSpec, FaultSpec, FleetSpec, InstructionSpec, ObjectSpec, PersonSpec, Scenario, ScenarioError, ScenarioExpect, ScriptEntry,
    ScriptInput, WorldSpec, SCENARIO_SCHEMA, SCENARIO_VERSION,
};

use crate::critic::WorldProbe;
use crate::fleet::{AdapterError, AdapterReport, EmbodimentAdapter, Outcome, SkillResult};
use crate::memory::{LabelKind, ObservationFrame, ObservationLabel};
use crate::model::{normalize_angle, pose_distance, Capability, FrameId, ObjectId, Pose3, RobotId, SkillInvocation, SkillTarget, StepId, TaskId, Tick};

pub const NAV_SPEED: f64 = 1.0;
pub const ARM_LATENCY: Tick = 2;
pub const GRASP_REACH: f64 = 0.5;
pub const PLACE_REACH: f64 = 1.0;
pub const HANDOVER_RANGE: f64 = 2.0;
pub const FOLLOW_RANGE: f64 = 2.0;
pub const DEFAULT_FOV_HALF_ANGLE: f64 = 0.6;
pub const DEFAULT_VIEW_RANGE: f64 = 4.0;
/// Radial distance a slipped object is knocked away.
pub const SLIP_DISPLACEMENT: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("unknown robot `{0}`")]
    UnknownRobot(RobotId),
    #[error("robot `{0}` is disconnected")]
    Disconnected(RobotId),
    #[error("robot `{0}` is already executing a skill")]
    Busy(RobotId),
    #[error("target unresolvable: {0}")]
    TargetUnresolvable(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    DisconnectRobot(RobotId),
    FailNextGrasp(RobotId),
    MoveObject(ObjectId, Pose3),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultEntry {
    pub at_tick: Tick,
    pub fault: Fault,
}

/// Where an object currently is. Exactly one holder at a time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectLocation {
    Free,
    Robot(RobotId),
    Person(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimObject {
    pub label: String,
    pub description: Option<String>,
    pub pose: Pose3,
    pub location: ObjectLocation,
}

impl SimObject {
    fn matches(&self, query: &str) -> bool {
        let q = query.trim().to_lowercase();
        self.label.to_lowercase() == q || self.description.as_ref().is_some_and(|d| d.to_lowercase().contains(&q))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimPerson {
    pub pose: Pose3,
    pub present: bool,
    pub description: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
enum ActivityKind {
    Navigate { goal: Pose3, face: Option<Pose3> },
    Grasp { object: ObjectId },
    Place { object: ObjectId, at: Pose3 },
    Handover { object: ObjectId, person: String },
    Observe { query: Option<String>, require: bool },
    Adjust { delta_yaw: f64 },
    Guide { person: String, goal: Pose3 },
    Inspect { target: RobotId },
}

#[derive(Debug, Clone, PartialEq)]
struct Activity {
    task: TaskId,
    attempt: u32,
    step_id: StepId,
    started: Tick,
    kind: ActivityKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimRobot {
    pub pose: Pose3,
    pub holding: Option<ObjectId>,
    /// Extended gripper position; `None` means home at the base.
    pub gripper_reach: Option<Pose3>,
    pub fov_half_angle: f64,
    pub view_range: f64,
    pub connected: bool,
    activity: Option<Activity>,
}

impl SimRobot {
    pub fn new(pose: Pose3) -> Self {
        Self {
            pose,
            holding: None,
            gripper_reach: None,
            fov_half_angle: DEFAULT_FOV_HALF_ANGLE,
            view_range: DEFAULT_VIEW_RANGE,
            connected: true,
            activity: None,
        }
    }

    pub fn gripper_pose(&self) -> Pose3 {
        self.gripper_reach.unwrap_or(self.pose)
    }

    pub fn is_busy(&self) -> bool {
        self.activity.is_some()
    }
}

#[derive(Debug, Clone)]
pub struct World {
    tick: Tick,
    seed: u64,
    label_dropout: f64,
    next_frame: u64,
    objects: BTreeMap<ObjectId, SimObject>,
    robots: BTreeMap<RobotId, SimRobot>,
    persons: BTreeMap<String, SimPerson>,
    anchors: BTreeMap<String, Pose3>,
    faults: Vec<FaultEntry>,
    armed_grasp_faults: BTreeSet<RobotId>,
    outbox: Vec<AdapterReport>,
}

fn planar_heading(from: &Pose3, to: &Pose3) -> Option<f64> {
    let (dx, dy) = (to.x - from.x, to.y - from.y);
    if dx == 0.0 && dy == 0.0 {
        None
    } else {
        Some(dy.atan2(dx))
    }
}

/// Moves `from` toward `to` by at most `step` meters.
fn advance_toward(from: &Pose3, to: &Pose3, step: f64) -> Pose3 {
    let d = pose_distance(from, to);
    if d <= step {
        return Pose3::new(to.x, to.y, to.z, from.yaw);
    }
    let along = |a: f64, b: f64| a + (b - a) / d * step;
    Pose3::new(along(from.x, to.x), along(from.y, to.y), along(from.z, to.z), from.yaw)
}

impl World {
    pub fn new(seed: u64) -> Self {
        Self {
            tick: 0,
            seed,
            label_dropout: 0.0,
            next_frame: 1,
            objects: BTreeMap::new(),
            robots: BTreeMap::new(),
            persons: BTreeMap::new(),
            anchors: BTreeMap::new(),
            faults: Vec::new(),
            armed_grasp_faults: BTreeSet::new(),
            outbox: Vec::new(),
        }
    }

    pub fn tick(&self) -> Tick {
        self.tick
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Per-label probability of being missed by perception (seeded).
    pub fn set_label_dropout(&mut self, p: f64) {
        self.label_dropout = p.clamp(0.0, 1.0);
    }

    pub fn add_robot(&mut self, id: RobotId, robot: SimRobot) {
        self.robots.insert(id, robot);
    }

    pub fn add_object(&mut self, id: ObjectId, label: &str, description: Option<&str>, pose: Pose3) {
        self.objects.insert(
            id,
            SimObject { label: label.to_owned(), description: description.map(str::to_owned), pose, location: ObjectLocation::Free },
        );
    }

    pub fn add_person(&mut self, id: &str, pose: Pose3, description: Option<&str>) {
        self.persons.insert(id.to_owned(), SimPerson { pose, present: true, description: description.map(str::to_owned) });
    }

    pub fn add_anchor(&mut self, name: &str, pose: Pose3) {
        self.anchors.insert(name.to_lowercase(), pose);
    }

    /// Faults are kept sorted by tick; equal ticks keep insertion order.
    pub fn schedule_fault(&mut self, entry: FaultEntry) {
        let at = self.faults.partition_point(|f| f.at_tick <= entry.at_tick);
        self.faults.insert(at, entry);
    }

    pub fn robot(&self, id: &RobotId) -> Option<&SimRobot> {
        self.robots.get(id)
    }

    pub fn robots(&self) -> impl Iterator<Item = (&RobotId, &SimRobot)> {
        self.robots.iter()
    }

    pub fn object(&self, id: &ObjectId) -> Option<&SimObject> {
        self.objects.get(id)
    }

    pub fn objects(&self) -> impl Iterator<Item = (&ObjectId, &SimObject)> {
        self.objects.iter()
    }

    pub fn person(&self, id: &str) -> Option<&SimPerson> {
        self.persons.get(id)
    }

    pub fn anchor(&self, name: &str) -> Option<Pose3> {
        self.anchors.get(&name.trim().to_lowercase()).copied()
    }

    pub fn is_connected(&self, id: &RobotId) -> bool {
        self.robots.get(id).is_some_and(|r| r.connected)
    }

    pub fn grasp_fault_armed(&self, id: &RobotId) -> bool {
        self.armed_grasp_faults.contains(id)
    }

    fn robot_ref(&self, id: &RobotId) -> Result<&SimRobot, SimError> {
        self.robots.get(id).ok_or_else(|| SimError::UnknownRobot(id.clone()))
    }

    /// Advances the clock by `dt` ticks and returns every result produced.
    pub fn step(&mut self, dt: Tick) -> Vec<AdapterReport> {
        assert!(dt >= 1, "step needs at least one tick");
        for _ in 0..dt {
            self.tick += 1;
            self.apply_due_faults();
            let ids: Vec<RobotId> = self.robots.keys().cloned().collect();
            for id in ids {
                self.advance_robot(&id);
            }
        }
        std::mem::take(&mut self.outbox)
    }

    fn apply_due_faults(&mut self) {
        let due = self.faults.partition_point(|f| f.at_tick <= self.tick);
        for entry in self.faults.drain(..due).collect::<Vec<_>>() {
            match entry.fault {
                Fault::DisconnectRobot(id) => {
                    if let Some(r) = self.robots.get_mut(&id) {
                        r.connected = false;
                        r.activity = None;
                        r.gripper_reach = None;
                    }
                }
                Fault::FailNextGrasp(id) => {
                    self.armed_grasp_faults.insert(id);
                }
                Fault::MoveObject(id, pose) => {
                    if let Some(o) = self.objects.get_mut(&id) {
                        if let ObjectLocation::Robot(holder) = &o.location {
                            if let Some(r) = self.robots.get_mut(holder) {
                                r.holding = None;
                            }
                        }
                        o.location = ObjectLocation::Free;
                        o.pose = pose;
                    }
                }
            }
        }
    }

    /// Labels everything within range and field of view. Never mutates the world.
    pub fn observe(&self, robot_id: &RobotId) -> Result<ObservationFrame, SimError> {
        self.frame_for(robot_id, FrameId(self.next_frame))
    }

    fn frame_for(&self, robot_id: &RobotId, frame_id: FrameId) -> Result<ObservationFrame, SimError> {
        let robot = self.robot_ref(robot_id)?;
        let visible = |pose: &Pose3| {
            pose_distance(&robot.pose, pose) <= robot.view_range && robot.pose.relative_bearing(pose).abs() <= robot.fov_half_angle
        };
        let mut labels = Vec::new();
        for o in self.objects.values() {
            if o.location != ObjectLocation::Robot(robot_id.clone()) && visible(&o.pose) {
                labels.push(ObservationLabel {
                    label: o.label.clone(),
                    pose: o.pose,
                    confidence: 1.0,
                    kind: LabelKind::Object,
                    description: o.description.clone(),
                });
            }
        }
        for (id, p) in &self.persons {
            if p.present && visible(&p.pose) {
                labels.push(ObservationLabel {
                    label: id.clone(),
                    pose: p.pose,
                    confidence: 1.0,
                    kind: LabelKind::Person,
                    description: p.description.clone(),
                });
            }
        }
        for (id, r) in &self.robots {
            if id != robot_id && visible(&r.pose) {
                labels.push(ObservationLabel { label: id.to_string(), pose: r.pose, confidence: 1.0, kind: LabelKind::Robot, description: None });
            }
        }
        if self.label_dropout > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ frame_id.0.wrapping_mul(0x9e37_79b9_7f4a_7c15));
            labels.retain(|_| rng.random::<f64>() >= self.label_dropout);
        }
        let description = if labels.is_empty() {
            "nothing visible".to_owned()
        } else {
            labels.iter().map(|l| l.text().to_owned()).collect::<Vec<_>>().join(", ")
        };
        Ok(ObservationFrame { frame_id, robot_id: robot_id.clone(), sim_time: self.tick, camera_pose: robot.pose, labels, description })
    }

    /// Takes a frame and consumes its id.
    pub fn capture(&mut self, robot_id: &RobotId) -> Result<ObservationFrame, SimError> {
        let frame = self.frame_for(robot_id, FrameId(self.next_frame))?;
        self.next_frame += 1;
        Ok(frame)
    }

    /// Free object matching the query, nearest to the hint (if any) or to the robot.
    pub fn resolve_object(&self, robot_id: &RobotId, query: &str, hint: Option<Pose3>) -> Option<ObjectId> {
        let robot = self.robots.get(robot_id)?;
        let origin = hint.unwrap_or(robot.pose);
        self.objects
            .iter()
            .filter(|(_, o)| o.location == ObjectLocation::Free && o.matches(query))
            .min_by(|a, b| pose_distance(&origin, &a.1.pose).total_cmp(&pose_distance(&origin, &b.1.pose)).then(a.0.cmp(b.0)))
            .map(|(id, _)| id.clone())
    }

    fn target_pose(&self, robot_id: &RobotId, target: &SkillTarget) -> Result<Pose3, SimError> {
        match target {
            SkillTarget::Pose(p) => Ok(*p),
            SkillTarget::AnchorName(n) => self.anchor(n).ok_or_else(|| SimError::TargetUnresolvable(format!("anchor `{n}`"))),
            SkillTarget::RobotId(r) => Ok(self.robot_ref(r)?.pose),
            SkillTarget::ObjectQuery(q) => {
                if let Some(p) = self.persons.get(q.trim()) {
                    return Ok(p.pose);
                }
                self.objects
                    .values()
                    .filter(|o| o.matches(q))
                    .map(|o| o.pose)
                    .min_by(|a, b| {
                        let here = self.robots.get(robot_id).map(|r| r.pose).unwrap_or(*a);
                        pose_distance(&here, a).total_cmp(&pose_distance(&here, b))
                    })
                    .ok_or_else(|| SimError::TargetUnresolvable(format!("object `{q}`")))
            }
        }
    }

    /// Where a navigate invocation will stop, honoring a `standoff` distance.
    /// Motion is planar: the robot keeps its own height.
    pub fn navigation_goal(&self, robot_id: &RobotId, invocation: &SkillInvocation) -> Result<Pose3, SimError> {
        let robot = self.robot_ref(robot_id)?;
        let target = self.target_pose(robot_id, &invocation.target)?;
        let flat = Pose3::new(target.x, target.y, robot.pose.z, robot.pose.yaw);
        let standoff = invocation.param_f64("standoff").unwrap_or(0.0).max(0.0);
        let d = pose_distance(&robot.pose, &flat);
        if standoff <= 0.0 {
            return Ok(flat);
        }
        if d <= standoff {
            return Ok(robot.pose);
        }
        Ok(advance_toward(&robot.pose, &flat, d - standoff))
    }

    /// Destination of a guide invocation.
    pub fn guide_goal(&self, robot_id: &RobotId, invocation: &SkillInvocation) -> Result<Pose3, SimError> {
        let robot = self.robot_ref(robot_id)?;
        let target = self.target_pose(robot_id, &invocation.target)?;
        Ok(Pose3::new(target.x, target.y, robot.pose.z, robot.pose.yaw))
    }

    /// Starts a skill. Results surface through later [`World::step`] calls.
    pub fn apply_skill(&mut self, robot_id: &RobotId, task: TaskId, attempt: u32, step_id: StepId, invocation: &SkillInvocation) -> Result<(), SimError> {
        let robot = self.robot_ref(robot_id)?;
        if !robot.connected {
            return Err(SimError::Disconnected(robot_id.clone()));
        }
        if robot.is_busy() {
            return Err(SimError::Busy(robot_id.clone()));
        }
        let query = || match &invocation.target {
            SkillTarget::ObjectQuery(q) => Ok(q.clone()),
            SkillTarget::RobotId(r) => Ok(r.to_string()),
            other => Err(SimError::TargetUnresolvable(format!("{other:?} is not an object query"))),
        };
        let held = || robot.holding.clone().ok_or_else(|| SimError::TargetUnresolvable("gripper is empty".into()));
        let kind = match invocation.skill {
            Capability::Navigate => {
                let goal = self.navigation_goal(robot_id, invocation)?;
                let face = if invocation.param_f64("standoff").is_some() {
                    Some(self.target_pose(robot_id, &invocation.target)?)
                } else {
                    None
                };
                ActivityKind::Navigate { goal, face }
            }
            Capability::Grasp => {
                let q = query()?;
                let hint = match (invocation.param_f64("hint_x"), invocation.param_f64("hint_y")) {
                    (Some(x), Some(y)) => Some(Pose3::at(x, y, invocation.param_f64("hint_z").unwrap_or(0.0))),
                    _ => None,
                };
                let object =
                    self.resolve_object(robot_id, &q, hint).ok_or_else(|| SimError::TargetUnresolvable(format!("no free `{q}`")))?;
                ActivityKind::Grasp { object }
            }
            Capability::Place => {
                let object = held()?;
                let at = match &invocation.target {
                    SkillTarget::ObjectQuery(q) => self
                        .objects
                        .iter()
                        .filter(|(id, o)| **id != object && o.location == ObjectLocation::Free && o.matches(q))
                        .map(|(_, o)| o.pose)
                        .min_by(|a, b| pose_distance(&robot.pose, a).total_cmp(&pose_distance(&robot.pose, b)))
                        .ok_or_else(|| SimError::TargetUnresolvable(format!("place target `{q}`")))?,
                    other => self.target_pose(robot_id, other)?,
                };
                ActivityKind::Place { object, at }
            }
            Capability::Handover => {
                let person = query()?;
                if !self.persons.contains_key(&person) {
                    return Err(SimError::TargetUnresolvable(format!("person `{person}`")));
                }
                ActivityKind::Handover { object: held()?, person }
            }
            Capability::Observe => {
                let q = match &invocation.target {
                    SkillTarget::ObjectQuery(q) => Some(q.clone()),
                    SkillTarget::RobotId(r) => Some(r.to_string()),
                    _ => None,
                };
                let query = invocation.param_str("query").map(str::to_owned).or(q);
                ActivityKind::Observe { query, require: invocation.param_bool("require").unwrap_or(false) }
            }
            Capability::AdjustViewpoint => ActivityKind::Adjust { delta_yaw: invocation.param_f64("delta_yaw").unwrap_or(0.5) },
            Capability::GuidePerson => {
                let person = invocation
                    .param_str("person")
                    .map(str::to_owned)
                    .ok_or_else(|| SimError::TargetUnresolvable("guide needs a `person` param".into()))?;
                if !self.persons.contains_key(&person) {
                    return Err(SimError::TargetUnresolvable(format!("person `{person}`")));
                }
                ActivityKind::Guide { person, goal: self.guide_goal(robot_id, invocation)? }
            }
            Capability::Inspect => match &invocation.target {
                SkillTarget::RobotId(r) => ActivityKind::Inspect { target: r.clone() },
                other => return Err(SimError::TargetUnresolvable(format!("inspect needs a robot target, got {other:?}"))),
            },
        };
        let started = self.tick;
        let robot = self.robots.get_mut(robot_id).expect("checked above");
        robot.activity = Some(Activity { task, attempt, step_id, started, kind });
        Ok(())
    }

    /// Drops the robot's activity if it belongs to the given attempt.
    pub fn cancel(&mut self, robot_id: &RobotId, task: TaskId, step_id: StepId) {
        if let Some(r) = self.robots.get_mut(robot_id) {
            if r.activity.as_ref().is_some_and(|a| a.task == task && a.step_id == step_id) {
                r.activity = None;
                r.gripper_reach = None;
            }
        }
    }

    fn report(&mut self, robot_id: &RobotId, act: &Activity, outcome: Outcome, with_frame: bool, detail: Option<String>) {
        let observation = if with_frame { self.capture(robot_id).ok() } else { None };
        let pose = self.robots.get(robot_id).map(|r| r.pose);
        self.outbox.push(AdapterReport {
            task_id: act.task,
            attempt: act.attempt,
            result: SkillResult { step_id: act.step_id, robot_id: robot_id.clone(), outcome, observation, resulting_pose: pose, detail },
        });
    }

    fn finish(&mut self, robot_id: &RobotId, act: &Activity, outcome: Outcome, detail: Option<String>) {
        if let Some(r) = self.robots.get_mut(robot_id) {
            r.activity = None;
        }
        self.report(robot_id, act, outcome, true, detail);
    }

    fn move_robot(&mut self, robot_id: &RobotId, goal: &Pose3) -> bool {
        let r = self.robots.get_mut(robot_id).expect("robot exists");
        let heading = planar_heading(&r.pose, goal);
        let mut next = advance_toward(&r.pose, goal, NAV_SPEED);
        if let Some(h) = heading {
            next = next.with_yaw(h);
        }
        r.pose = next;
        if let Some(held) = r.holding.clone() {
            if let Some(o) = self.objects.get_mut(&held) {
                o.pose = next;
            }
        }
        pose_distance(&next, goal) == 0.0
    }

    fn advance_robot(&mut self, robot_id: &RobotId) {
        let Some(robot) = self.robots.get(robot_id) else { return };
        if !robot.connected {
            return;
        }
        let Some(act) = robot.activity.clone() else { return };
        let elapsed = self.tick - act.started;
        match &act.kind {
            ActivityKind::Navigate { goal, face } => {
                let arrived = self.move_robot(robot_id, goal);
                if arrived {
                    if let Some(f) = face {
                        let r = self.robots.get_mut(robot_id).expect("robot exists");
                        if let Some(h) = planar_heading(&r.pose, f) {
                            r.pose = r.pose.with_yaw(h);
                        }
                    }
                    self.finish(robot_id, &act, Outcome::Success, None);
                } else {
                    self.report(robot_id, &act, Outcome::InProgress, false, None);
                }
            }
            ActivityKind::Grasp { object } => self.advance_grasp(robot_id, &act, object, elapsed),
            ActivityKind::Place { object, at } => {
                if elapsed < ARM_LATENCY {
                    return;
                }
                let base = self.robots[robot_id].pose;
                if pose_distance(&base, at) > PLACE_REACH {
                    self.finish(robot_id, &act, Outcome::Failure { reason: "place target out of reach".into() }, None);
                    return;
                }
                if let Some(o) = self.objects.get_mut(object) {
                    o.location = ObjectLocation::Free;
                    o.pose = *at;
                }
                self.robots.get_mut(robot_id).expect("robot exists").holding = None;
                self.finish(robot_id, &act, Outcome::Success, None);
            }
            ActivityKind::Handover { object, person } => {
                if elapsed < ARM_LATENCY {
                    return;
                }
                let base = self.robots[robot_id].pose;
                let Some(p) = self.persons.get(person).filter(|p| p.present).map(|p| p.pose) else {
                    self.finish(robot_id, &act, Outcome::Failure { reason: format!("{person} is not here") }, None);
                    return;
                };
                if pose_distance(&base, &p) > HANDOVER_RANGE {
                    self.finish(robot_id, &act, Outcome::Failure { reason: format!("{person} out of handover range") }, None);
                    return;
                }
                if let Some(o) = self.objects.get_mut(object) {
                    o.location = ObjectLocation::Person(person.clone());
                    o.pose = p;
                }
                self.robots.get_mut(robot_id).expect("robot exists").holding = None;
                self.finish(robot_id, &act, Outcome::Success, None);
            }
            ActivityKind::Observe { query, require } => {
                let frame = self.frame_for(robot_id, FrameId(self.next_frame)).expect("robot exists");
                let found = query.as_ref().is_none_or(|q| crate::critic::frame_mentions(&frame, q));
                let outcome = if *require && !found {
                    Outcome::Failure { reason: format!("{} not in view", query.as_deref().unwrap_or("target")) }
                } else {
                    Outcome::Success
                };
                self.finish(robot_id, &act, outcome, None);
            }
            ActivityKind::Adjust { delta_yaw } => {
                if elapsed < ARM_LATENCY {
                    return;
                }
                let r = self.robots.get_mut(robot_id).expect("robot exists");
                r.pose = r.pose.with_yaw(normalize_angle(r.pose.yaw + delta_yaw));
                self.finish(robot_id, &act, Outcome::Success, None);
            }
            ActivityKind::Guide { person, goal } => {
                let before = self.robots[robot_id].pose;
                let arrived = self.move_robot(robot_id, goal);
                if let Some(p) = self.persons.get_mut(person) {
                    if p.present && pose_distance(&p.pose, &before) <= FOLLOW_RANGE {
                        p.pose = Pose3::new(before.x, before.y, p.pose.z, before.yaw);
                        for o in self.objects.values_mut() {
                            if o.location == ObjectLocation::Person(person.clone()) {
                                o.pose = p.pose;
                            }
                        }
                    }
                }
                if arrived {
                    let p = self.persons[person].pose;
                    let outcome = if pose_distance(&p, goal) <= FOLLOW_RANGE {
                        Outcome::Success
                    } else {
                        Outcome::Failure { reason: format!("{person} did not follow") }
                    };
                    self.finish(robot_id, &act, outcome, None);
                } else {
                    self.report(robot_id, &act, Outcome::InProgress, false, None);
                }
            }
            ActivityKind::Inspect { target } => {
                let frame = self.frame_for(robot_id, FrameId(self.next_frame)).expect("robot exists");
                let seen = frame.labels.iter().find(|l| l.kind == LabelKind::Robot && l.label == target.as_str()).map(|l| l.pose);
                match seen {
                    Some(p) => {
                        let status = if self.is_connected(target) { "responding" } else { "not responding" };
                        let detail = format!("{target} found at ({:.2}, {:.2}), {status}", p.x, p.y);
                        self.finish(robot_id, &act, Outcome::Success, Some(detail));
                    }
                    None => self.finish(robot_id, &act, Outcome::Failure { reason: format!("{target} not in view") }, None),
                }
            }
        }
    }

    fn advance_grasp(&mut self, robot_id: &RobotId, act: &Activity, object: &ObjectId, elapsed: Tick) {
        let base = self.robots[robot_id].pose;
        let Some(obj) = self.objects.get(object).cloned() else {
            self.finish(robot_id, act, Outcome::Failure { reason: "object vanished".into() }, None);
            return;
        };
        if elapsed == ARM_LATENCY {
            let reach = advance_toward(&base, &obj.pose, GRASP_REACH);
            self.robots.get_mut(robot_id).expect("robot exists").gripper_reach = Some(reach);
            self.report(robot_id, act, Outcome::InProgress, false, None);
            return;
        }
        if elapsed <= ARM_LATENCY {
            return;
        }
        let r = self.robots.get_mut(robot_id).expect("robot exists");
        r.gripper_reach = None;
        let outcome = if r.holding.is_some() {
            Outcome::Failure { reason: "gripper occupied".into() }
        } else if obj.location != ObjectLocation::Free {
            Outcome::Failure { reason: "object is held elsewhere".into() }
        } else if pose_distance(&base, &obj.pose) > GRASP_REACH {
            Outcome::Failure { reason: "object out of reach".into() }
        } else if self.armed_grasp_faults.remove(robot_id) {
            // Knocked radially away from the base.
            let d = pose_distance(&base, &obj.pose);
            let moved = if d > 0.0 {
                advance_toward(&obj.pose, &base, -SLIP_DISPLACEMENT)
            } else {
                Pose3::new(obj.pose.x + SLIP_DISPLACEMENT, obj.pose.y, obj.pose.z, obj.pose.yaw)
            };
            self.objects.get_mut(object).expect("exists").pose = moved;
            Outcome::Failure { reason: "grasp slipped".into() }
        } else {
            r.holding = Some(object.clone());
            let o = self.objects.get_mut(object).expect("exists");
            o.location = ObjectLocation::Robot(robot_id.clone());
            o.pose = base;
            Outcome::Success
        };
        self.finish(robot_id, act, outcome, None);
    }

    /// Checks that every held object is held by exactly the robot that claims it.
    pub fn possession_consistent(&self) -> bool {
        let objects_ok = self.objects.iter().all(|(id, o)| match &o.location {
            ObjectLocation::Robot(r) => self.robots.get(r).is_some_and(|r| r.holding.as_ref() == Some(id)),
            ObjectLocation::Person(p) => self.persons.contains_key(p),
            ObjectLocation::Free => !self.robots.values().any(|r| r.holding.as_ref() == Some(id)),
        });
        let robots_ok = self.robots.iter().all(|(rid, r)| {
            r.holding
                .as_ref()
                .is_none_or(|h| self.objects.get(h).is_some_and(|o| o.location == ObjectLocation::Robot(rid.clone())))
        });
        objects_ok && robots_ok
    }
}

impl EmbodimentAdapter for World {
    fn execute(&mut self, robot: &RobotId, task: TaskId, attempt: u32, step_id: StepId, invocation: &SkillInvocation) -> Result<(), AdapterError> {
        self.apply_skill(robot, task, attempt, step_id, invocation).map_err(|e| AdapterError(e.to_string()))
    }

    fn cancel(&mut self, robot: &RobotId, task: TaskId, step_id: StepId) {
        World::cancel(self, robot, task, step_id);
    }
}

impl WorldProbe for World {
    fn robot_pose(&self, robot: &RobotId) -> Option<Pose3> {
        self.robots.get(robot).map(|r| r.pose)
    }

    fn gripper_pose(&self, robot: &RobotId) -> Option<Pose3> {
        self.robots.get(robot).map(SimRobot::gripper_pose)
    }

    fn holding(&self, robot: &RobotId) -> Option<ObjectId> {
        self.robots.get(robot).and_then(|r| r.holding.clone())
    }

    fn object_pose(&self, object: &ObjectId) -> Option<Pose3> {
        self.objects.get(object).map(|o| o.pose)
    }

    fn person_pose(&self, person: &str) -> Option<Pose3> {
        self.persons.get(person).map(|p| p.pose)
    }

    fn person_holds(&self, person: &str, object: &ObjectId) -> bool {
        self.objects.get(object).is_some_and(|o| o.location == ObjectLocation::Person(person.to_owned()))
    }
}

#[cfg(test)]
mod tests;
