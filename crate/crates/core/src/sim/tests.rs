use super::*;
use crate::model::ParamValue;
use proptest::prelude::*;

fn rid(s: &str) -> RobotId {
    RobotId::new(s)
}

fn one_robot(pose: Pose3) -> World {
    let mut w = World::new(42);
    w.add_robot(rid("r"), SimRobot::new(pose));
    w
}

fn nav(target: SkillTarget) -> SkillInvocation {
    SkillInvocation::new(Capability::Navigate, target)
}

fn grasp(q: &str) -> SkillInvocation {
    SkillInvocation::new(Capability::Grasp, SkillTarget::ObjectQuery(q.into()))
}

fn run_until_terminal(w: &mut World, limit: Tick) -> Vec<AdapterReport> {
    let mut all = Vec::new();
    for _ in 0..limit {
        let reports = w.step(1);
        let done = reports.iter().any(|r| r.result.outcome.is_terminal());
        all.extend(reports);
        if done {
            break;
        }
    }
    all
}

#[test]
fn navigation_moves_one_meter_per_tick() {
    let mut w = one_robot(Pose3::at(0.0, 0.0, 0.0));
    w.apply_skill(&rid("r"), TaskId(1), 1, StepId(1), &nav(SkillTarget::Pose(Pose3::at(3.0, 0.0, 0.0)))).unwrap();
    let reports = w.step(2);
    assert_eq!(w.robot(&rid("r")).unwrap().pose, Pose3::at(2.0, 0.0, 0.0));
    assert_eq!(reports.len(), 2);
    assert!(reports.iter().all(|r| r.result.outcome == Outcome::InProgress));
    let last = w.step(1);
    assert_eq!(last[0].result.outcome, Outcome::Success);
    assert_eq!(last[0].result.resulting_pose, Some(Pose3::at(3.0, 0.0, 0.0)));
    assert!(last[0].result.observation.is_some());
}

#[test]
fn quiescent_world_only_advances_time() {
    let mut w = one_robot(Pose3::at(1.0, 2.0, 0.0));
    w.add_object(ObjectId::new("cup"), "cup", None, Pose3::at(3.0, 2.0, 0.0));
    let before: Vec<_> = w.objects().map(|(k, v)| (k.clone(), v.clone())).collect();
    let pose = w.robot(&rid("r")).unwrap().pose;
    assert!(w.step(5).is_empty());
    assert_eq!(w.tick(), 5);
    assert_eq!(w.robot(&rid("r")).unwrap().pose, pose);
    let after: Vec<_> = w.objects().map(|(k, v)| (k.clone(), v.clone())).collect();
    assert_eq!(before, after);
}

#[test]
fn scripted_disconnect_takes_effect_when_crossed() {
    let mut w = one_robot(Pose3::at(0.0, 0.0, 0.0));
    w.schedule_fault(FaultEntry { at_tick: 7, fault: Fault::DisconnectRobot(rid("r")) });
    w.step(6);
    assert!(w.is_connected(&rid("r")));
    w.step(3);
    assert!(!w.is_connected(&rid("r")));
    let err = w.apply_skill(&rid("r"), TaskId(1), 1, StepId(1), &nav(SkillTarget::Pose(Pose3::at(1.0, 0.0, 0.0))));
    assert_eq!(err, Err(SimError::Disconnected(rid("r"))));
}

#[test]
fn field_of_view_examples() {
    let mut w = one_robot(Pose3::at(0.0, 0.0, 0.0));
    assert!(w.observe(&rid("r")).unwrap().labels.is_empty());
    assert_eq!(w.observe(&rid("r")).unwrap().camera_pose, Pose3::at(0.0, 0.0, 0.0));
    w.add_object(ObjectId::new("b1"), "bottle", None, Pose3::at(2.0, 0.0, 0.0));
    w.add_object(ObjectId::new("b2"), "box", None, Pose3::at(2.0 * 1.2f64.cos(), 2.0 * 1.2f64.sin(), 0.0));
    let f = w.observe(&rid("r")).unwrap();
    assert_eq!(f.labels.len(), 1);
    assert_eq!(f.labels[0].label, "bottle");
    assert_eq!(f.labels[0].confidence, 1.0);
    assert_eq!(f.description, "bottle");
    assert_eq!(w.observe(&rid("ghost")), Err(SimError::UnknownRobot(rid("ghost"))));
}

#[test]
fn grasp_within_reach_succeeds() {
    let mut w = one_robot(Pose3::at(0.0, 0.0, 0.0));
    w.add_object(ObjectId::new("lemon"), "lemon", Some("sour lemon"), Pose3::at(0.2, 0.0, 0.0));
    w.apply_skill(&rid("r"), TaskId(1), 1, StepId(1), &grasp("lemon")).unwrap();
    assert!(w.step(1).is_empty());
    let mid = w.step(1);
    assert_eq!(mid[0].result.outcome, Outcome::InProgress);
    assert_eq!(w.robot(&rid("r")).unwrap().gripper_pose(), Pose3::at(0.2, 0.0, 0.0));
    let done = w.step(1);
    assert_eq!(done[0].result.outcome, Outcome::Success);
    assert_eq!(w.holding(&rid("r")), Some(ObjectId::new("lemon")));
    assert!(w.possession_consistent());
}

#[test]
fn armed_grasp_fault_fails_exactly_once() {
    let mut w = one_robot(Pose3::at(0.0, 0.0, 0.0));
    w.add_object(ObjectId::new("lemon"), "lemon", None, Pose3::at(0.2, 0.0, 0.0));
    w.schedule_fault(FaultEntry { at_tick: 0, fault: Fault::FailNextGrasp(rid("r")) });
    w.step(1);
    assert!(w.grasp_fault_armed(&rid("r")));
    w.apply_skill(&rid("r"), TaskId(1), 1, StepId(1), &grasp("lemon")).unwrap();
    let first = run_until_terminal(&mut w, 5);
    assert_eq!(first.last().unwrap().result.outcome, Outcome::Failure { reason: "grasp slipped".into() });
    assert!(!w.grasp_fault_armed(&rid("r")));
    let moved = w.object(&ObjectId::new("lemon")).unwrap().pose;
    assert!((pose_distance(&Pose3::at(0.0, 0.0, 0.0), &moved) - 0.3).abs() < 1e-12);
    assert_eq!(w.holding(&rid("r")), None);

    w.apply_skill(&rid("r"), TaskId(1), 2, StepId(1), &grasp("lemon")).unwrap();
    let second = run_until_terminal(&mut w, 5);
    assert_eq!(second.last().unwrap().result.outcome, Outcome::Success);
}

#[test]
fn navigate_to_anchor_targets_anchor_pose() {
    let mut w = one_robot(Pose3::at(0.0, 0.0, 0.0));
    w.add_anchor("room_207", Pose3::at(12.0, 3.0, 0.0));
    let goal = w.navigation_goal(&rid("r"), &nav(SkillTarget::AnchorName("room_207".into()))).unwrap();
    assert_eq!(goal, Pose3::at(12.0, 3.0, 0.0));
    assert!(matches!(
        w.navigation_goal(&rid("r"), &nav(SkillTarget::AnchorName("attic".into()))),
        Err(SimError::TargetUnresolvable(_))
    ));
}

#[test]
fn standoff_stops_short_and_faces_target() {
    let mut w = one_robot(Pose3::at(0.0, 0.0, 0.0));
    let inv = nav(SkillTarget::Pose(Pose3::at(0.0, 6.0, 0.0))).with_param("standoff", ParamValue::Number(1.0));
    w.apply_skill(&rid("r"), TaskId(1), 1, StepId(1), &inv).unwrap();
    run_until_terminal(&mut w, 10);
    let pose = w.robot(&rid("r")).unwrap().pose;
    assert!((pose.y - 5.0).abs() < 1e-12 && pose.x.abs() < 1e-12);
    assert!((pose.yaw - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
}

#[test]
fn adjust_viewpoint_rotates_after_latency() {
    let mut w = one_robot(Pose3::at(0.0, 0.0, 0.0));
    let inv = SkillInvocation::new(Capability::AdjustViewpoint, SkillTarget::ObjectQuery("bottle".into()))
        .with_param("delta_yaw", ParamValue::Number(0.5));
    w.apply_skill(&rid("r"), TaskId(1), 1, StepId(1), &inv).unwrap();
    assert!(w.step(1).is_empty());
    assert_eq!(w.step(1)[0].result.outcome, Outcome::Success);
    assert_eq!(w.robot(&rid("r")).unwrap().pose.yaw, 0.5);
}

#[test]
fn handover_and_place_transfer_possession() {
    let mut w = one_robot(Pose3::at(0.0, 0.0, 0.0));
    w.add_object(ObjectId::new("bottle"), "bottle", None, Pose3::at(0.3, 0.0, 0.0));
    w.add_object(ObjectId::new("plate"), "plate", None, Pose3::at(0.3, 0.2, 0.0));
    w.add_person("alice", Pose3::at(1.5, 0.0, 0.0), None);
    w.apply_skill(&rid("r"), TaskId(1), 1, StepId(1), &grasp("bottle")).unwrap();
    run_until_terminal(&mut w, 5);
    let place = SkillInvocation::new(Capability::Place, SkillTarget::ObjectQuery("plate".into()));
    w.apply_skill(&rid("r"), TaskId(1), 1, StepId(2), &place).unwrap();
    assert_eq!(run_until_terminal(&mut w, 5).last().unwrap().result.outcome, Outcome::Success);
    assert_eq!(w.object(&ObjectId::new("bottle")).unwrap().pose, Pose3::at(0.3, 0.2, 0.0));
    w.apply_skill(&rid("r"), TaskId(1), 1, StepId(3), &grasp("bottle")).unwrap();
    run_until_terminal(&mut w, 5);
    let hand = SkillInvocation::new(Capability::Handover, SkillTarget::ObjectQuery("alice".into()));
    w.apply_skill(&rid("r"), TaskId(1), 1, StepId(4), &hand).unwrap();
    assert_eq!(run_until_terminal(&mut w, 5).last().unwrap().result.outcome, Outcome::Success);
    assert!(w.person_holds("alice", &ObjectId::new("bottle")));
    assert!(w.possession_consistent());
}

#[test]
fn guided_person_trails_the_robot() {
    let mut w = one_robot(Pose3::at(20.0, 0.0, 0.0));
    w.add_person("visitor", Pose3::at(20.8, 0.3, 0.0), None);
    w.add_anchor("meeting_room", Pose3::at(20.0, 15.0, 0.0));
    let inv = SkillInvocation::new(Capability::GuidePerson, SkillTarget::AnchorName("meeting_room".into()))
        .with_param("person", ParamValue::Text("visitor".into()));
    w.apply_skill(&rid("r"), TaskId(1), 1, StepId(1), &inv).unwrap();
    let reports = run_until_terminal(&mut w, 30);
    assert_eq!(reports.last().unwrap().result.outcome, Outcome::Success);
    assert_eq!(reports.len(), 15);
    let p = w.person("visitor").unwrap().pose;
    assert!((p.x - 20.0).abs() < 1e-9 && (p.y - 14.0).abs() < 1e-9);
}

#[test]
fn inspect_reports_a_visible_robot() {
    let mut w = one_robot(Pose3::at(0.0, 0.0, 0.0));
    w.add_robot(rid("go2"), SimRobot::new(Pose3::at(2.0, 0.0, 0.0)));
    w.schedule_fault(FaultEntry { at_tick: 1, fault: Fault::DisconnectRobot(rid("go2")) });
    let inv = SkillInvocation::new(Capability::Inspect, SkillTarget::RobotId(rid("go2")));
    w.apply_skill(&rid("r"), TaskId(1), 1, StepId(1), &inv).unwrap();
    let r = w.step(1);
    assert_eq!(r[0].result.outcome, Outcome::Success);
    assert_eq!(r[0].result.detail.as_deref(), Some("go2 found at (2.00, 0.00), not responding"));
}

#[test]
fn cancel_drops_pending_results() {
    let mut w = one_robot(Pose3::at(0.0, 0.0, 0.0));
    w.apply_skill(&rid("r"), TaskId(1), 1, StepId(1), &nav(SkillTarget::Pose(Pose3::at(5.0, 0.0, 0.0)))).unwrap();
    w.step(1);
    w.cancel(&rid("r"), TaskId(1), StepId(1));
    assert!(w.step(3).is_empty());
    assert!(!w.robot(&rid("r")).unwrap().is_busy());
}

#[derive(Debug, Clone)]
enum Cmd {
    Nav(f64, f64),
    Grasp(usize),
    Place(usize),
    Adjust(f64),
    Observe,
    Step(u64),
}

fn arb_cmd() -> impl Strategy<Value = Cmd> {
    prop_oneof![
        (-3.0..3.0f64, -3.0..3.0f64).prop_map(|(x, y)| Cmd::Nav(x, y)),
        (0usize..3).prop_map(Cmd::Grasp),
        (0usize..3).prop_map(Cmd::Place),
        (-1.0..1.0f64).prop_map(Cmd::Adjust),
        Just(Cmd::Observe),
        (1u64..4).prop_map(Cmd::Step),
    ]
}

const NAMES: [&str; 3] = ["cup", "lemon", "plate"];

fn seeded_world(seed: u64) -> World {
    let mut w = World::new(seed);
    w.add_robot(rid("a"), SimRobot::new(Pose3::at(0.0, 0.0, 0.0)));
    w.add_robot(rid("b"), SimRobot::new(Pose3::at(1.0, 0.0, 0.0)));
    for (i, n) in NAMES.iter().enumerate() {
        w.add_object(ObjectId::new(*n), n, None, Pose3::at(0.3 * i as f64, 0.2, 0.0));
    }
    w.schedule_fault(FaultEntry { at_tick: 3, fault: Fault::FailNextGrasp(rid("a")) });
    w.set_label_dropout(0.3);
    w
}

fn run(cmds: &[Cmd], seed: u64, check: &mut dyn FnMut(&World)) -> Vec<AdapterReport> {
    let mut w = seeded_world(seed);
    let mut reports = Vec::new();
    for (i, c) in cmds.iter().enumerate() {
        let robot = if i % 2 == 0 { rid("a") } else { rid("b") };
        let inv = match c {
            Cmd::Nav(x, y) => nav(SkillTarget::Pose(Pose3::at(*x, *y, 0.0))),
            Cmd::Grasp(k) => grasp(NAMES[*k]),
            Cmd::Place(k) => SkillInvocation::new(Capability::Place, SkillTarget::ObjectQuery(NAMES[*k].into())),
            Cmd::Adjust(d) => SkillInvocation::new(Capability::AdjustViewpoint, SkillTarget::ObjectQuery("x".into()))
                .with_param("delta_yaw", ParamValue::Number(*d)),
            Cmd::Observe => SkillInvocation::new(Capability::Observe, SkillTarget::ObjectQuery("cup".into())),
            Cmd::Step(n) => {
                for _ in 0..*n {
                    reports.extend(w.step(1));
                    check(&w);
                }
                continue;
            }
        };
        let _ = w.apply_skill(&robot, TaskId(i as u64), 1, StepId(1), &inv);
        check(&w);
    }
    reports.extend(w.step(5));
    check(&w);
    reports
}

proptest! {
    #[test]
    fn identical_inputs_give_identical_results(cmds in proptest::collection::vec(arb_cmd(), 0..40), seed in 0u64..1000) {
        let a = run(&cmds, seed, &mut |_| {});
        let b = run(&cmds, seed, &mut |_| {});
        prop_assert_eq!(a, b);
    }

    #[test]
    fn possession_is_conserved(cmds in proptest::collection::vec(arb_cmd(), 0..40)) {
        let mut ok = true;
        run(&cmds, 7, &mut |w| ok &= w.possession_consistent());
        prop_assert!(ok);
    }

    #[test]
    fn observe_never_mutates(cmds in proptest::collection::vec(arb_cmd(), 0..20)) {
        let mut ok = true;
        run(&cmds, 3, &mut |w| {
            let snapshot = format!("{w:?}");
            let f1 = w.observe(&rid("a")).unwrap();
            let f2 = w.observe(&rid("a")).unwrap();
            ok &= f1 == f2 && snapshot == format!("{w:?}");
        });
        prop_assert!(ok);
    }
}
