//! Scenario documents: world, fleet, anchors, faults and an input script.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{FaultEntry, SimRobot, World, DEFAULT_FOV_HALF_ANGLE, DEFAULT_VIEW_RANGE};
use crate::fleet::{EmbodimentDescriptor, Morphology};
use crate::model::{Capability, ClarificationId, ObjectId, Pose3, RobotId, TaskState, Tick};

pub const SCENARIO_SCHEMA: &str = "efleet.scenario";
pub const SCENARIO_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(String),
    #[error("malformed scenario: {0}")]
    Parse(String),
    #[error("unsupported scenario schema `{schema}` version {version}")]
    Schema { schema: String, version: u32 },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub id: ObjectId,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub pose: Pose3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonSpec {
    pub id: String,
    pub pose: Pose3,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    #[serde(default)]
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub persons: Vec<PersonSpec>,
    #[serde(default)]
    pub label_dropout: f64,
}

fn default_fov() -> f64 {
    DEFAULT_FOV_HALF_ANGLE
}

fn default_range() -> f64 {
    DEFAULT_VIEW_RANGE
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetSpec {
    pub robot_id: RobotId,
    pub morphology: Morphology,
    pub capabilities: BTreeSet<Capability>,
    pub pose: Pose3,
    #[serde(default = "one")]
    pub max_concurrent: u32,
    #[serde(default = "default_fov")]
    pub fov_half_angle: f64,
    #[serde(default = "default_range")]
    pub view_range: f64,
}

pub type FaultSpec = FaultEntry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstructionSpec {
    pub text: String,
    #[serde(default)]
    pub priority: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explicit_robot: Option<RobotId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
}

/// An answer to a clarification; without an id it goes to the oldest open one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clarification: Option<ClarificationId>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptInput {
    Instruction(InstructionSpec),
    Answer(AnswerSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    /// Processed on the first tick at or after this one (never before tick 1).
    pub at_tick: Tick,
    #[serde(flatten)]
    pub input: ScriptInput,
}

/// Pass condition for `sim`. Without `final_states`, every task must end Done.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioExpect {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_states: Option<Vec<TaskState>>,
}

fn default_max_ticks() -> Tick {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema: String,
    pub version: u32,
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub world: WorldSpec,
    pub fleet: Vec<FleetSpec>,
    #[serde(default)]
    pub anchors: BTreeMap<String, Pose3>,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    #[serde(default)]
    pub script: Vec<ScriptEntry>,
    #[serde(default)]
    pub expect: ScenarioExpect,
    #[serde(default = "default_max_ticks")]
    pub max_ticks: Tick,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        let schema = value.get("schema").and_then(|v| v.as_str()).unwrap_or("").to_owned();
        let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if schema != SCENARIO_SCHEMA || version != SCENARIO_VERSION {
            return Err(ScenarioError::Schema { schema, version });
        }
        let scenario: Scenario = serde_json::from_value(value).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let invalid = |m: String| Err(ScenarioError::Invalid(m));
        let mut ids = BTreeSet::new();
        for r in &self.fleet {
            if !ids.insert(&r.robot_id) {
                return invalid(format!("duplicate robot `{}`", r.robot_id));
            }
            if r.max_concurrent != 1 {
                return invalid(format!("simulated robot `{}` runs one skill at a time", r.robot_id));
            }
            if !(r.fov_half_angle > 0.0 && r.view_range > 0.0) {
                return invalid(format!("robot `{}` needs a positive field of view and range", r.robot_id));
            }
        }
        let mut objects = BTreeSet::new();
        for o in &self.world.objects {
            if !objects.insert(&o.id) {
                return invalid(format!("duplicate object `{}`", o.id));
            }
        }
        if !(0.0..=1.0).contains(&self.world.label_dropout) {
            return invalid("label_dropout must lie in [0, 1]".into());
        }
        if self.faults.windows(2).any(|w| w[0].at_tick > w[1].at_tick) {
            return invalid("fault ticks must be non-decreasing".into());
        }
        if self.script.windows(2).any(|w| w[0].at_tick > w[1].at_tick) {
            return invalid("script ticks must be non-decreasing".into());
        }
        for e in &self.script {
            if let ScriptInput::Instruction(i) = &e.input {
                if i.text.trim().is_empty() {
                    return invalid("empty instruction".into());
                }
                if i.tau.is_some_and(|t| !(t > 0.0 && t <= 1.0)) {
                    return invalid("tau must lie in (0, 1]".into());
                }
            }
        }
        Ok(())
    }

    /// The same scenario with its input script removed, as used by replay.
    pub fn without_script(&self) -> Self {
        Self { script: Vec::new(), ..self.clone() }
    }

    pub fn descriptors(&self) -> Vec<EmbodimentDescriptor> {
        self.fleet
            .iter()
            .map(|r| {
                let mut d = EmbodimentDescriptor::new(r.robot_id.as_str(), r.morphology, r.capabilities.iter().copied(), r.pose);
                d.max_concurrent = r.max_concurrent;
                d
            })
            .collect()
    }

    pub fn build_world(&self, seed: u64) -> World {
        let mut world = World::new(seed);
        world.set_label_dropout(self.world.label_dropout);
        for o in &self.world.objects {
            world.add_object(o.id.clone(), &o.label, o.description.as_deref(), o.pose);
        }
        for p in &self.world.persons {
            world.add_person(&p.id, p.pose, p.description.as_deref());
        }
        for r in &self.fleet {
            let mut robot = SimRobot::new(r.pose);
            robot.fov_half_angle = r.fov_half_angle;
            robot.view_range = r.view_range;
            world.add_robot(r.robot_id.clone(), robot);
        }
        for (name, pose) in &self.anchors {
            world.add_anchor(name, *pose);
        }
        for f in &self.faults {
            world.schedule_fault(f.clone());
        }
        world
    }
}
