//! Plan templates per verb, target resolution and the out-of-view search.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::grammar::{GroundedIntent, Verb};
use crate::fleet::FleetSnapshot;
use crate::memory::{rank_texts, LabelKind, MemoryStore, StructuredFilter};
use crate::model::{Capability, ParamValue, PlanId, PlanProgram, PlanStep, Pose3, RobotId, SkillInvocation, SkillTarget, StepGuard, StepId};

/// Distance kept from a robot being inspected.
pub const INSPECT_STANDOFF: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClarificationKind {
    /// Target not in memory: is it absent, or just out of view?
    MissingTarget { object: String },
    /// The answer is treated as a rephrased instruction.
    Unparseable,
    ExplicitRobotUnavailable { robot: RobotId },
    UnknownDestination { place: String },
    UnknownRobot { name: String },
}

impl ClarificationKind {
    /// Fixed answer set, if the kind has one.
    pub fn options(&self, fleet: &FleetSnapshot) -> Vec<String> {
        match self {
            ClarificationKind::MissingTarget { .. } => vec!["present".into(), "absent".into()],
            ClarificationKind::ExplicitRobotUnavailable { .. } => vec!["yes".into(), "no".into()],
            ClarificationKind::UnknownRobot { .. } => fleet.robots.iter().map(|r| r.robot_id.to_string()).collect(),
            ClarificationKind::Unparseable | ClarificationKind::UnknownDestination { .. } => Vec::new(),
        }
    }

    pub fn question(&self) -> String {
        match self {
            ClarificationKind::MissingTarget { object } => {
                format!("I cannot see the {object}. Is it absent from the scene, or present but out of view?")
            }
            ClarificationKind::Unparseable => format!(
                "I did not understand that. Supported forms: {}",
                super::grammar::PATTERNS.iter().map(|(_, form, _)| *form).collect::<Vec<_>>().join("; ")
            ),
            ClarificationKind::ExplicitRobotUnavailable { robot } => {
                format!("{robot} cannot take this task right now. Use another robot instead?")
            }
            ClarificationKind::UnknownDestination { place } => format!("I do not know where \"{place}\" is. Which place did you mean?"),
            ClarificationKind::UnknownRobot { name } => format!("There is no robot called \"{name}\". Which robot did you mean?"),
        }
    }
}

/// Planner inputs beyond the intent.
#[derive(Clone, Copy)]
pub struct PlanContext<'a> {
    pub memory: &'a MemoryStore,
    pub fleet: &'a FleetSnapshot,
    pub plan_id: PlanId,
    /// First step id to allocate; ids stay unique across a task's replans.
    pub first_step: u32,
    /// The user confirmed the target is present but unseen.
    pub search: bool,
    pub sweep_delta_yaw: f64,
    /// Target label fixed by an earlier plan of the same task.
    pub resolved_target: Option<&'a str>,
    /// A robot already holding this task's object, and the object label.
    pub holding: Option<(&'a RobotId, &'a str)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Planned {
    Plan { plan: PlanProgram, target: Option<String> },
    /// Answerable without moving anything.
    Immediate { detail: String },
    Clarify(ClarificationKind),
    Blocked { reason: String },
}

/// Outcome of answering a missing-target clarification.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MissingTargetAnswer {
    /// Out of view: plan a viewpoint sweep.
    Search,
    /// Not in the scene: the task fails.
    Abandon,
}

pub fn handle_missing_target(answer: &str) -> Option<MissingTargetAnswer> {
    match answer.trim().to_lowercase().as_str() {
        "present" | "out of view" | "yes" => Some(MissingTargetAnswer::Search),
        "absent" | "no" => Some(MissingTargetAnswer::Abandon),
        _ => None,
    }
}

/// Number of viewpoint adjustments that covers a full turn.
pub fn sweep_length(delta_yaw: f64) -> usize {
    (std::f64::consts::TAU / delta_yaw).ceil() as usize
}

struct Builder {
    next: u32,
    steps: Vec<PlanStep>,
}

impl Builder {
    fn push(&mut self, invocation: SkillInvocation, after: Option<StepId>, same_robot_as: Option<StepId>) -> StepId {
        let id = StepId(self.next);
        self.next += 1;
        let mut step = PlanStep::new(id, invocation);
        if let Some(dep) = after {
            step = step.after(dep);
        }
        step.same_robot_as = same_robot_as;
        self.steps.push(step);
        id
    }

    /// Chains `invocation` after `prev`, bound to the robot of `root` (or
    /// starting a new chain when `root` is `None`).
    fn chain(&mut self, invocation: SkillInvocation, prev: Option<StepId>, root: &mut Option<StepId>) -> StepId {
        let id = self.push(invocation, prev, *root);
        root.get_or_insert(id);
        id
    }

    fn guard_last(&mut self, query: &str) {
        if let Some(s) = self.steps.last_mut() {
            s.guard = Some(StepGuard::UntilFound(query.to_owned()));
        }
    }
}

fn text(s: &str) -> ParamValue {
    ParamValue::Text(s.to_owned())
}

fn grasp(label: &str, hint: Option<Pose3>) -> SkillInvocation {
    let mut inv = SkillInvocation::new(Capability::Grasp, SkillTarget::ObjectQuery(label.to_owned()));
    if let Some(h) = hint {
        inv = inv
            .with_param("hint_x", ParamValue::Number(h.x))
            .with_param("hint_y", ParamValue::Number(h.y))
            .with_param("hint_z", ParamValue::Number(h.z));
    }
    inv
}

fn observe(target: SkillTarget, query: Option<&str>, require: bool) -> SkillInvocation {
    let mut inv = SkillInvocation::new(Capability::Observe, target).with_param("require", ParamValue::Bool(require));
    if let Some(q) = query {
        inv = inv.with_param("query", text(q));
    }
    inv
}

/// Freshest remembered pose of an object category.
pub fn object_hint(memory: &MemoryStore, label: &str) -> Option<Pose3> {
    memory.retrieve_structured(&StructuredFilter::category(label)).ok()?.first().map(|r| r.pose)
}

/// Picks the object whose description best matches an attribute, among the
/// objects in each robot's latest frame. Persons, robots and `exclude` are skipped.
pub fn ground_attribute(memory: &MemoryStore, fleet: &FleetSnapshot, attribute: &str, exclude: Option<&str>) -> Option<String> {
    let mut candidates: BTreeMap<String, String> = BTreeMap::new();
    for r in &fleet.robots {
        let Some(frame) = memory.latest_frame_of(&r.robot_id) else { continue };
        for l in frame.labels.iter().filter(|l| l.kind == LabelKind::Object) {
            if exclude.is_some_and(|x| l.label.eq_ignore_ascii_case(x)) {
                continue;
            }
            candidates.entry(l.label.clone()).or_insert_with(|| l.text().to_owned());
        }
    }
    let labels: Vec<&String> = candidates.keys().collect();
    let texts: Vec<&str> = candidates.values().map(String::as_str).collect();
    let ranked = rank_texts(memory.embedder(), attribute, &texts).ok()?;
    ranked.first().map(|&(i, _)| labels[i].clone())
}

enum Target {
    Known(String),
    Search(String),
}

fn resolve_target(intent: &GroundedIntent, ctx: &PlanContext<'_>) -> Result<Target, Planned> {
    if let Some(t) = ctx.resolved_target {
        return Ok(Target::Known(t.to_owned()));
    }
    if let Some(attr) = &intent.attribute_query {
        return match ground_attribute(ctx.memory, ctx.fleet, attr, intent.destination.as_deref()) {
            Some(label) => Ok(Target::Known(label)),
            None if ctx.search => Ok(Target::Search(attr.clone())),
            None => Err(Planned::Clarify(ClarificationKind::MissingTarget { object: format!("something {attr}") })),
        };
    }
    let query = intent.object_query.clone().unwrap_or_default();
    if ctx.memory.retrieve_structured(&StructuredFilter::category(query.as_str())).is_ok_and(|r| !r.is_empty()) {
        Ok(Target::Known(query))
    } else if ctx.search {
        Ok(Target::Search(query))
    } else {
        Err(Planned::Clarify(ClarificationKind::MissingTarget { object: query }))
    }
}

/// Adds a guarded adjust/observe sweep; returns the last step and the chain root.
fn add_sweep(b: &mut Builder, query: &str, delta_yaw: f64) -> (StepId, Option<StepId>) {
    let mut root = None;
    let mut prev = None;
    for _ in 0..sweep_length(delta_yaw) {
        let adjust = SkillInvocation::new(Capability::AdjustViewpoint, SkillTarget::ObjectQuery(query.to_owned()))
            .with_param("delta_yaw", ParamValue::Number(delta_yaw));
        prev = Some(b.chain(adjust, prev, &mut root));
        b.guard_last(query);
        prev = Some(b.chain(observe(SkillTarget::ObjectQuery(query.to_owned()), Some(query), false), prev, &mut root));
        b.guard_last(query);
    }
    (prev.expect("sweep has at least one step"), root)
}

/// Grasp of the task's object, preceded by a sweep when searching. Skipped
/// when a robot already holds it; the returned root then pins to the holder.
fn acquire(b: &mut Builder, target: &Target, ctx: &PlanContext<'_>) -> (Option<StepId>, Option<StepId>, Option<RobotId>) {
    match target {
        Target::Known(label) => {
            if let Some((holder, held)) = ctx.holding {
                if held.eq_ignore_ascii_case(label) {
                    return (None, None, Some(holder.clone()));
                }
            }
            let mut root = None;
            let g = b.chain(grasp(label, object_hint(ctx.memory, label)), None, &mut root);
            (Some(g), root, None)
        }
        Target::Search(q) => {
            let (last, mut root) = add_sweep(b, q, ctx.sweep_delta_yaw);
            let g = b.chain(grasp(q, None), Some(last), &mut root);
            (Some(g), root, None)
        }
    }
}

fn target_label(t: &Target) -> &str {
    match t {
        Target::Known(l) | Target::Search(l) => l,
    }
}

fn require_anchor(memory: &MemoryStore, place: &str) -> Result<(), Planned> {
    match memory.anchor(place) {
        Some(_) => Ok(()),
        None => Err(Planned::Clarify(ClarificationKind::UnknownDestination { place: place.to_owned() })),
    }
}

/// Builds the plan for an intent.
pub fn generate_plan(intent: &GroundedIntent, ctx: &PlanContext<'_>) -> Planned {
    match build(intent, ctx) {
        Ok(Planned::Plan { plan, target }) => finalize(intent, ctx, plan, target),
        Ok(other) | Err(other) => other,
    }
}

fn build(intent: &GroundedIntent, ctx: &PlanContext<'_>) -> Result<Planned, Planned> {
    let mut b = Builder { next: ctx.first_step, steps: Vec::new() };
    let mut pinned: Vec<(StepId, RobotId)> = Vec::new();
    let mut target = None;
    match intent.verb() {
        Verb::Pick | Verb::Place => {
            let t = resolve_target(intent, ctx)?;
            let (grasped, mut root, holder) = acquire(&mut b, &t, ctx);
            if let Some(dest) = &intent.destination {
                let place_target = if ctx.memory.anchor(dest).is_some() {
                    SkillTarget::AnchorName(dest.clone())
                } else {
                    SkillTarget::ObjectQuery(dest.clone())
                };
                let p = b.chain(SkillInvocation::new(Capability::Place, place_target), grasped, &mut root);
                if let Some(h) = holder {
                    pinned.push((p, h));
                }
            } else if grasped.is_none() {
                return Ok(Planned::Immediate { detail: format!("already holding {}", target_label(&t)) });
            }
            target = Some(target_label(&t).to_owned());
        }
        Verb::Deliver => {
            let dest = intent.destination.as_deref().unwrap_or_default();
            require_anchor(ctx.memory, dest)?;
            let person = intent.person.as_deref().unwrap_or("recipient");
            let t = resolve_target(intent, ctx)?;
            let (grasped, mut root, holder) = acquire(&mut b, &t, ctx);
            let nav = b.chain(SkillInvocation::new(Capability::Navigate, SkillTarget::AnchorName(dest.to_owned())), grasped, &mut root);
            if let Some(h) = holder {
                pinned.push((nav, h));
            }
            let obs = b.chain(observe(SkillTarget::ObjectQuery(person.to_owned()), Some(person), true), Some(nav), &mut root);
            b.chain(SkillInvocation::new(Capability::Handover, SkillTarget::ObjectQuery(person.to_owned())), Some(obs), &mut root);
            target = Some(target_label(&t).to_owned());
        }
        Verb::Find => match resolve_target(intent, ctx)? {
            Target::Known(label) => {
                let filter = StructuredFilter::category(label.as_str());
                let hit = ctx.memory.retrieve_structured(&filter).ok().and_then(|r| r.into_iter().next());
                let detail = match hit {
                    Some(r) => format!("{label} last seen at ({:.2}, {:.2}) at tick {}", r.pose.x, r.pose.y, r.observed_at.unwrap_or(0)),
                    None => format!("{label} is known but has no position"),
                };
                return Ok(Planned::Immediate { detail });
            }
            Target::Search(q) => {
                let (last, mut root) = add_sweep(&mut b, &q, ctx.sweep_delta_yaw);
                b.chain(observe(SkillTarget::ObjectQuery(q.clone()), Some(&q), true), Some(last), &mut root);
                target = Some(q);
            }
        },
        Verb::Status | Verb::Inspect if intent.subject_robot.is_some() => {
            let robot = intent.subject_robot.clone().expect("guarded");
            let Some(desc) = ctx.fleet.get(&robot) else {
                return Ok(Planned::Clarify(ClarificationKind::UnknownRobot { name: robot.to_string() }));
            };
            if intent.verb() == Verb::Status && desc.is_connected() {
                let p = desc.pose;
                return Ok(Planned::Immediate {
                    detail: format!("{robot} is connected at ({:.2}, {:.2}) with {} active subtask(s)", p.x, p.y, desc.active_subtasks),
                });
            }
            let Ok(last) = ctx.memory.last_known_location(robot.as_str()) else {
                return Ok(Planned::Blocked { reason: format!("{robot} has never been observed") });
            };
            let mut root = None;
            let nav = b.chain(
                SkillInvocation::new(Capability::Navigate, SkillTarget::Pose(last.pose)).with_param("standoff", ParamValue::Number(INSPECT_STANDOFF)),
                None,
                &mut root,
            );
            let obs = b.chain(observe(SkillTarget::RobotId(robot.clone()), Some(robot.as_str()), true), Some(nav), &mut root);
            b.chain(SkillInvocation::new(Capability::Inspect, SkillTarget::RobotId(robot.clone())), Some(obs), &mut root);
            target = Some(robot.to_string());
        }
        Verb::Inspect => {
            let place = intent.destination.as_deref().unwrap_or_default();
            require_anchor(ctx.memory, place)?;
            let mut root = None;
            let nav = b.chain(SkillInvocation::new(Capability::Navigate, SkillTarget::AnchorName(place.to_owned())), None, &mut root);
            b.chain(observe(SkillTarget::AnchorName(place.to_owned()), None, false), Some(nav), &mut root);
        }
        Verb::Status => unreachable!("status intents always name a robot"),
        Verb::Guide => {
            let origin = intent.origin.as_deref().unwrap_or_default();
            let dest = intent.destination.as_deref().unwrap_or_default();
            require_anchor(ctx.memory, origin)?;
            require_anchor(ctx.memory, dest)?;
            let person = intent.person.as_deref().unwrap_or_default();
            let mut root = None;
            let nav = b.chain(SkillInvocation::new(Capability::Navigate, SkillTarget::AnchorName(origin.to_owned())), None, &mut root);
            let obs = b.chain(observe(SkillTarget::ObjectQuery(person.to_owned()), Some(person), true), Some(nav), &mut root);
            b.chain(
                SkillInvocation::new(Capability::GuidePerson, SkillTarget::AnchorName(dest.to_owned())).with_param("person", text(person)),
                Some(obs),
                &mut root,
            );
            target = Some(person.to_owned());
        }
        Verb::PrepareScene => {
            let scene = intent.destination.as_deref().unwrap_or_default();
            require_anchor(ctx.memory, scene)?;
            let mut scout = None;
            let nav = b.chain(SkillInvocation::new(Capability::Navigate, SkillTarget::AnchorName(scene.to_owned())), None, &mut scout);
            b.chain(observe(SkillTarget::AnchorName(scene.to_owned()), None, false), Some(nav), &mut scout);
            if intent.object_query.is_some() {
                let t = resolve_target(intent, ctx)?;
                let (grasped, mut root, holder) = acquire(&mut b, &t, ctx);
                let carry =
                    b.chain(SkillInvocation::new(Capability::Navigate, SkillTarget::AnchorName(scene.to_owned())), grasped, &mut root);
                if let Some(h) = holder {
                    pinned.push((carry, h));
                }
                b.chain(SkillInvocation::new(Capability::Place, SkillTarget::AnchorName(scene.to_owned())), Some(carry), &mut root);
                target = Some(target_label(&t).to_owned());
            }
        }
    }
    for (id, robot) in pinned {
        if let Some(s) = b.steps.iter_mut().find(|s| s.step_id == id) {
            s.assigned_robot = Some(robot);
        }
    }
    Ok(Planned::Plan { plan: PlanProgram { plan_id: ctx.plan_id, steps: b.steps }, target })
}

/// Robot-binding groups: each chain root with the capabilities its chain needs.
pub fn chain_requirements(plan: &PlanProgram) -> BTreeMap<StepId, BTreeSet<Capability>> {
    let mut groups: BTreeMap<StepId, BTreeSet<Capability>> = BTreeMap::new();
    for s in &plan.steps {
        groups.entry(s.same_robot_as.unwrap_or(s.step_id)).or_default().insert(s.invocation.skill);
    }
    groups
}

/// Applies the explicit robot pin and checks that every chain has a capable robot.
fn finalize(intent: &GroundedIntent, ctx: &PlanContext<'_>, mut plan: PlanProgram, target: Option<String>) -> Planned {
    let groups = chain_requirements(&plan);
    if let Some(robot) = &intent.explicit_robot {
        let ok = ctx
            .fleet
            .get(robot)
            .is_some_and(|d| d.is_connected() && groups.values().all(|caps| caps.iter().all(|c| d.can_perform(*c))));
        if !ok {
            return Planned::Clarify(ClarificationKind::ExplicitRobotUnavailable { robot: robot.clone() });
        }
        for s in plan.steps.iter_mut().filter(|s| s.same_robot_as.is_none()) {
            s.assigned_robot.get_or_insert_with(|| robot.clone());
        }
    }
    for (root, caps) in &groups {
        let pin = plan.step(*root).and_then(|s| s.assigned_robot.clone());
        let capable = ctx.fleet.robots.iter().any(|d| {
            d.is_connected() && pin.as_ref().is_none_or(|p| p == &d.robot_id) && caps.iter().all(|c| d.can_perform(*c))
        });
        if !capable {
            let names: Vec<&str> = caps.iter().map(|c| c.as_str()).collect();
            return Planned::Blocked { reason: format!("no connected robot offers {}", names.join(" + ")) };
        }
    }
    Planned::Plan { plan, target }
}
