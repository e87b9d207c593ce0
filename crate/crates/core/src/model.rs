//! Shared domain vocabulary: poses, capabilities, skills, plans and tasks.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulator time in ticks.
pub type Tick = u64;

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }
    };
}

macro_rules! numeric_id {
    ($(#[$meta:meta])* $name:ident, $inner:ty, $prefix:literal) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub $inner);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

string_id!(
    /// Identity of a registered embodiment.
    RobotId
);
string_id!(
    /// Identity of an object instance in shared memory.
    ObjectId
);
numeric_id!(TaskId, u64, "t");
numeric_id!(
    /// Step identifier, unique within one task across all of its plans.
    StepId,
    u32,
    "s"
);
numeric_id!(PlanId, u64, "p");
numeric_id!(FrameId, u64, "f");
numeric_id!(ClarificationId, u64, "c");

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("pose component is not finite")]
    NonFinitePose,
    #[error("duplicate step id {0}")]
    DuplicateStep(StepId),
    #[error("step {step} depends on unknown step {missing}")]
    UnknownDependency { step: StepId, missing: StepId },
    #[error("plan dependency graph contains a cycle")]
    CyclicPlan,
    #[error("unknown capability `{0}`")]
    UnknownCapability(String),
}

/// Position in the global world frame plus heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPose")]
pub struct Pose3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
}

#[derive(Deserialize)]
struct RawPose {
    x: f64,
    y: f64,
    #[serde(default)]
    z: f64,
    #[serde(default)]
    yaw: f64,
}

impl TryFrom<RawPose> for Pose3 {
    type Error = ModelError;

    fn try_from(raw: RawPose) -> Result<Self, Self::Error> {
        Pose3::try_new(raw.x, raw.y, raw.z, raw.yaw)
    }
}

/// Wraps an angle into (-π, π].
pub fn normalize_angle(angle: f64) -> f64 {
    let mut a = angle % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

impl Pose3 {
    /// Builds a pose, normalizing yaw. Panics on non-finite input; use
    /// [`Pose3::try_new`] for untrusted data.
    pub fn new(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Self::try_new(x, y, z, yaw).expect("pose components must be finite")
    }

    pub fn try_new(x: f64, y: f64, z: f64, yaw: f64) -> Result<Self, ModelError> {
        if !(x.is_finite() && y.is_finite() && z.is_finite() && yaw.is_finite()) {
            return Err(ModelError::NonFinitePose);
        }
        Ok(Self { x, y, z, yaw: normalize_angle(yaw) })
    }

    pub fn at(x: f64, y: f64, z: f64) -> Self {
        Self::new(x, y, z, 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.yaw.is_finite()
    }

    pub fn with_yaw(self, yaw: f64) -> Self {
        Self { yaw: normalize_angle(yaw), ..self }
    }

    /// Planar bearing from this pose to `other`, relative to this pose's yaw.
    pub fn relative_bearing(&self, other: &Pose3) -> f64 {
        let heading = (other.y - self.y).atan2(other.x - self.x);
        normalize_angle(heading - self.yaw)
    }
}

/// Euclidean distance over position; yaw is ignored.
pub fn pose_distance(a: &Pose3, b: &Pose3) -> f64 {
    let (dx, dy, dz) = (a.x - b.x, a.y - b.y, a.z - b.z);
    (dx * dx + dy * dy + dz * dz).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    Navigate,
    Grasp,
    Place,
    Handover,
    Observe,
    GuidePerson,
    Inspect,
    AdjustViewpoint,
}

impl Capability {
    pub const ALL: [Capability; 8] = [
        Capability::Navigate,
        Capability::Grasp,
        Capability::Place,
        Capability::Handover,
        Capability::Observe,
        Capability::GuidePerson,
        Capability::Inspect,
        Capability::AdjustViewpoint,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Capability::Navigate => "navigate",
            Capability::Grasp => "grasp",
            Capability::Place => "place",
            Capability::Handover => "handover",
            Capability::Observe => "observe",
            Capability::GuidePerson => "guide_person",
            Capability::Inspect => "inspect",
            Capability::AdjustViewpoint => "adjust_viewpoint",
        }
    }
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Capability {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Capability::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| ModelError::UnknownCapability(s.to_owned()))
    }
}

/// True iff every required capability is offered.
pub fn capability_satisfies(robot_caps: &BTreeSet<Capability>, required: &BTreeSet<Capability>) -> bool {
    required.is_subset(robot_caps)
}

/// What a skill acts on. Exactly one variant is populated by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkillTarget {
    Pose(Pose3),
    AnchorName(String),
    ObjectQuery(String),
    RobotId(RobotId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Bool(bool),
    Number(f64),
    Text(String),
}

impl ParamValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            ParamValue::Number(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            ParamValue::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            ParamValue::Bool(b) => Some(*b),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillInvocation {
    pub skill: Capability,
    pub target: SkillTarget,
    #[serde(default)]
    pub params: BTreeMap<String, ParamValue>,
}

impl SkillInvocation {
    pub fn new(skill: Capability, target: SkillTarget) -> Self {
        Self { skill, target, params: BTreeMap::new() }
    }

    pub fn with_param(mut self, key: &str, value: ParamValue) -> Self {
        self.params.insert(key.to_owned(), value);
        self
    }

    pub fn param_f64(&self, key: &str) -> Option<f64> {
        self.params.get(key).and_then(ParamValue::as_f64)
    }

    pub fn param_str(&self, key: &str) -> Option<&str> {
        self.params.get(key).and_then(ParamValue::as_str)
    }

    pub fn param_bool(&self, key: &str) -> Option<bool> {
        self.params.get(key).and_then(ParamValue::as_bool)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    Replan,
    Abort,
    Clarify,
}

/// Conditional-branch marker for search loops.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepGuard {
    /// Run only while `query` has not been detected by this task; skipped afterwards.
    UntilFound(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStep {
    pub step_id: StepId,
    pub invocation: SkillInvocation,
    /// User or runtime pin to a specific embodiment.
    #[serde(default)]
    pub assigned_robot: Option<RobotId>,
    #[serde(default)]
    pub depends_on: BTreeSet<StepId>,
    pub on_failure: FailurePolicy,
    /// Must run on whichever robot executed the referenced step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub same_robot_as: Option<StepId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guard: Option<StepGuard>,
}

impl PlanStep {
    pub fn new(step_id: StepId, invocation: SkillInvocation) -> Self {
        Self {
            step_id,
            invocation,
            assigned_robot: None,
            depends_on: BTreeSet::new(),
            on_failure: FailurePolicy::Replan,
            same_robot_as: None,
            guard: None,
        }
    }

    pub fn after(mut self, dep: StepId) -> Self {
        self.depends_on.insert(dep);
        self
    }

    pub fn required_capabilities(&self) -> BTreeSet<Capability> {
        BTreeSet::from([self.invocation.skill])
    }
}

/// The runtime's executable plan representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanProgram {
    pub plan_id: PlanId,
    pub steps: Vec<PlanStep>,
}

impl PlanProgram {
    /// Checks uniqueness, dependency references and acyclicity.
    pub fn validate(&self) -> Result<(), ModelError> {
        self.topological_order().map(|_| ())
    }

    /// Kahn's algorithm; ties resolved by position in `steps`.
    pub fn topological_order(&self) -> Result<Vec<StepId>, ModelError> {
        let mut index = BTreeMap::new();
        for (i, step) in self.steps.iter().enumerate() {
            if index.insert(step.step_id, i).is_some() {
                return Err(ModelError::DuplicateStep(step.step_id));
            }
        }
        let mut indegree = vec![0usize; self.steps.len()];
        for (i, step) in self.steps.iter().enumerate() {
            for dep in &step.depends_on {
                if !index.contains_key(dep) {
                    return Err(ModelError::UnknownDependency { step: step.step_id, missing: *dep });
                }
                indegree[i] += 1;
            }
        }
        let mut order = Vec::with_capacity(self.steps.len());
        let mut done = vec![false; self.steps.len()];
        while order.len() < self.steps.len() {
            let next = (0..self.steps.len()).find(|&i| !done[i] && indegree[i] == 0);
            let Some(i) = next else {
                return Err(ModelError::CyclicPlan);
            };
            done[i] = true;
            let id = self.steps[i].step_id;
            order.push(id);
            for (j, step) in self.steps.iter().enumerate() {
                if step.depends_on.contains(&id) {
                    indegree[j] -= 1;
                }
            }
        }
        Ok(order)
    }

    pub fn step(&self, id: StepId) -> Option<&PlanStep> {
        self.steps.iter().find(|s| s.step_id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Pending,
    Planning,
    AwaitingClarification,
    Executing,
    Refining,
    Replanning,
    Done,
    Failed,
    Blocked,
}

impl TaskState {
    pub fn is_terminal(self) -> bool {
        matches!(self, TaskState::Done | TaskState::Failed)
    }

    /// The orchestrator's allowed-transition table.
    pub fn can_transition_to(self, to: TaskState) -> bool {
        use TaskState::*;
        matches!(
            (self, to),
            (Pending, Planning)
                | (Planning, AwaitingClarification | Executing | Blocked)
                | (AwaitingClarification, Planning | Failed)
                | (Executing, Refining | Replanning | Done | Failed | Blocked)
                | (Refining, Executing)
                | (Replanning, Planning)
                | (Blocked, Planning)
        )
    }
}

impl fmt::Display for TaskState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok().and_then(|v| v.as_str().map(str::to_owned));
        f.write_str(s.as_deref().unwrap_or("?"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: TaskId,
    pub instruction: String,
    /// Higher is more urgent; 0 is normal.
    pub priority: u32,
    pub submitted_at: Tick,
    pub state: TaskState,
    pub plan: Option<PlanProgram>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn distance_examples() {
        assert_eq!(pose_distance(&Pose3::new(0.0, 0.0, 0.0, 0.0), &Pose3::new(0.0, 0.0, 0.0, 1.0)), 0.0);
        assert_eq!(pose_distance(&Pose3::at(0.0, 0.0, 0.0), &Pose3::at(3.0, 4.0, 0.0)), 5.0);
        assert_eq!(pose_distance(&Pose3::at(1.0, 2.0, 2.0), &Pose3::at(0.0, 0.0, 0.0)), 3.0);
    }

    #[test]
    fn capability_examples() {
        use Capability::*;
        assert!(capability_satisfies(&BTreeSet::from([Navigate, Observe]), &BTreeSet::new()));
        assert!(capability_satisfies(&BTreeSet::from([Grasp, Place]), &BTreeSet::from([Grasp])));
        assert!(!capability_satisfies(&BTreeSet::from([Navigate]), &BTreeSet::from([Grasp])));
    }

    #[test]
    fn yaw_is_normalized() {
        let p = Pose3::new(0.0, 0.0, 0.0, 3.0 * PI);
        assert!((p.yaw - PI).abs() < 1e-12);
        let q = Pose3::new(0.0, 0.0, 0.0, -PI);
        assert!((q.yaw - PI).abs() < 1e-12);
        assert!(Pose3::try_new(f64::NAN, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn pose_rejects_non_finite_json() {
        assert!(serde_json::from_str::<Pose3>(r#"{"x":1,"y":2}"#).is_ok());
        assert!(serde_json::from_str::<Pose3>(r#"{"x":1,"y":2,"yaw":1e999}"#).is_err());
    }

    #[test]
    fn plan_validation() {
        let inv = SkillInvocation::new(Capability::Observe, SkillTarget::AnchorName("a".into()));
        let a = PlanStep::new(StepId(1), inv.clone());
        let b = PlanStep::new(StepId(2), inv.clone()).after(StepId(1));
        let plan = PlanProgram { plan_id: PlanId(1), steps: vec![b.clone(), a.clone()] };
        assert_eq!(plan.topological_order().unwrap(), vec![StepId(1), StepId(2)]);

        let cyclic = PlanProgram {
            plan_id: PlanId(2),
            steps: vec![a.clone().after(StepId(2)), b.clone()],
        };
        assert_eq!(cyclic.validate(), Err(ModelError::CyclicPlan));

        let dangling = PlanProgram { plan_id: PlanId(3), steps: vec![a.clone().after(StepId(9))] };
        assert!(matches!(dangling.validate(), Err(ModelError::UnknownDependency { .. })));

        let dup = PlanProgram { plan_id: PlanId(4), steps: vec![a.clone(), a] };
        assert_eq!(dup.validate(), Err(ModelError::DuplicateStep(StepId(1))));
    }

    #[test]
    fn terminal_states_have_no_exits() {
        for to in [TaskState::Pending, TaskState::Planning, TaskState::Executing, TaskState::Done] {
            assert!(!TaskState::Done.can_transition_to(to));
            assert!(!TaskState::Failed.can_transition_to(to));
        }
    }

    #[test]
    fn canonical_json_is_snake_case() {
        let inv = SkillInvocation::new(Capability::AdjustViewpoint, SkillTarget::AnchorName("desk".into()))
            .with_param("delta_yaw", ParamValue::Number(0.5));
        let json = serde_json::to_string(&inv).unwrap();
        assert_eq!(json, r#"{"skill":"adjust_viewpoint","target":{"anchor_name":"desk"},"params":{"delta_yaw":0.5}}"#);
        assert_eq!(TaskState::AwaitingClarification.to_string(), "awaiting_clarification");
    }

    fn arb_pose() -> impl Strategy<Value = Pose3> {
        (-100.0..100.0f64, -100.0..100.0f64, -10.0..10.0f64, -4.0..4.0f64)
            .prop_map(|(x, y, z, yaw)| Pose3::new(x, y, z, yaw))
    }

    proptest! {
        #[test]
        fn triangle_inequality(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            let ab = pose_distance(&a, &b);
            let bc = pose_distance(&b, &c);
            let ac = pose_distance(&a, &c);
            prop_assert!(ac <= ab + bc + 1e-9);
            prop_assert!((ab - pose_distance(&b, &a)).abs() == 0.0);
            prop_assert!(ab >= 0.0);
        }

        #[test]
        fn normalized_yaw_in_range(yaw in -50.0..50.0f64) {
            let n = normalize_angle(yaw);
            prop_assert!(n > -PI && n <= PI);
            prop_assert!(((n - yaw) / (2.0 * PI) - ((n - yaw) / (2.0 * PI)).round()).abs() < 1e-9);
        }
    }
}
