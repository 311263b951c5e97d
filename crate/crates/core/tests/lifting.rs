use spalift::lifting::{rate_lift, trysync, verify_repair, LiftError, LiftOptions, Outcome, Part, RepairedSystem};
use spalift::model::{ActionLabel, SpaSystem};
use spalift::parser::{parse_factors, parse_system, ModificationMap};
use spalift::semantics::{flatten, FlatTS, FlattenOptions};

fn setup(model: &str, factors: &str) -> (SpaSystem, FlatTS, ModificationMap) {
    let sys = parse_system(model).unwrap();
    let flat = flatten(&sys, FlattenOptions::default()).unwrap();
    let map = parse_factors(factors, &sys, &flat).unwrap();
    (sys, flat, map)
}

fn lift(model: &str, factors: &str) -> Result<RepairedSystem, LiftError> {
    let (sys, flat, map) = setup(model, factors);
    rate_lift(&sys, &flat, &map, &LiftOptions::default())
}

fn local_rate(sys: &SpaSystem, process: &str, from: &str, action: &str, to: &str) -> f64 {
    let p = sys.leaf(sys.leaf_index(process).unwrap());
    let slot = p.slot(
        p.state_index(from).unwrap(),
        &ActionLabel::new(action),
        p.state_index(to).unwrap(),
    );
    slot.iter().map(|&k| p.transitions()[k].rate).sum()
}

const SINGLE: &str = "process P { initial s0; s0 -(a, 1.5)-> s1; s1 -(b, 2)-> s0; } system: P;";

/// P's `a` move is interleaved with Q toggling on `d`.
const TOGGLE: &str = "
    process P { initial s0; s0 -(a, 1)-> s1; s1 -(b, 2)-> s0; }
    process Q { initial q0; q0 -(d, 1)-> q1; q1 -(d, 1)-> q0; }
    system: P || Q;";

#[test]
fn part_a_scales_one_local_rate() {
    let rep = lift(SINGLE, "(s0) -a-> (s1) : 2").unwrap();
    assert_eq!(rep.report.batches.len(), 1);
    assert_eq!(rep.report.batches[0].part, Some(Part::A));
    assert_eq!(local_rate(&rep.system, "P", "s0", "a", "s1"), 3.0);
    assert_eq!(local_rate(&rep.system, "P", "s1", "b", "s0"), 2.0);
    assert!(rep.report.sync_edits.is_empty() && rep.report.inserted_selfloops.is_empty());
}

#[test]
fn part_a_common_factor_over_parallel_transitions() {
    let rep = lift(TOGGLE, "(s0,q0) -a-> (s1,q0) : 1.5\n(s0,q1) -a-> (s1,q1) : 1.5").unwrap();
    assert_eq!(rep.report.batches[0].part, Some(Part::A));
    assert_eq!(rep.report.batches[0].resolved, 2);
    assert_eq!(local_rate(&rep.system, "P", "s0", "a", "s1"), 1.5);
}

#[test]
fn factor_one_is_a_no_op() {
    let (sys, _, _) = setup(SINGLE, "");
    let rep = lift(SINGLE, "(s0) -a-> (s1) : 1").unwrap();
    assert_eq!(rep.system, sys);
}

#[test]
fn mixed_factors_escalate_to_part_d() {
    let rep = lift(TOGGLE, "(s0,q0) -a-> (s1,q0) : 2\n(s0,q1) -a-> (s1,q1) : 3").unwrap();
    let batch = &rep.report.batches[0];
    assert_eq!(batch.attempt(Part::A).unwrap().outcome, Outcome::Failed);
    assert_eq!(batch.part, Some(Part::D));
    assert_eq!(rep.report.sync_edits.len(), 1);
    assert_eq!(rep.report.sync_edits[0].action, "a");
    let q_loops: Vec<_> = rep.report.inserted_selfloops.iter().filter(|l| l.process == "Q").collect();
    assert_eq!(q_loops.len(), 2);
    // x_P · x_Q(q0) = 2 and x_P · x_Q(q1) = 3.
    let p = local_rate(&rep.system, "P", "s0", "a", "s1");
    let q0 = local_rate(&rep.system, "Q", "q0", "a", "q0");
    let q1 = local_rate(&rep.system, "Q", "q1", "a", "q1");
    assert!((p * q0 - 2.0).abs() < 1e-9 && (p * q1 - 3.0).abs() < 1e-9);
    assert!(rep.report.verification.as_ref().unwrap().pass);
}

#[test]
fn part_d_fails_when_every_ancestor_conflicts() {
    // Q can do `a` concurrently with P at (s0,q0): type A at the root.
    let model = "
        process P { initial s0; s0 -(a, 1)-> s1; s1 -(b, 2)-> s0; }
        process Q { initial q0; q0 -(d, 1)-> q1; q1 -(d, 1)-> q0; q0 -(a, 1)-> q0; }
        system: P || Q;";
    let err = lift(model, "(s0,q0) -a-> (s1,q0) : 2\n(s0,q1) -a-> (s1,q1) : 3").unwrap_err();
    let LiftError::Failed(f) = err else { panic!("expected failure") };
    let d = f.report.batches[0].attempts.iter().find(|a| a.part == Part::D).unwrap();
    assert!(d.trysync[0].reason.starts_with("type A"), "{}", d.trysync[0].reason);
    assert!(!f.report.success);
}

#[test]
fn failure_at_root_scope_is_immediate() {
    // Q must join every `a` move of P: x_P(i)·x_Q(j) = f_ij has rank 3 in log
    // space, so one deviating factor is exactly infeasible. PS = IS at the
    // root, so Part C is skipped and Part D has nowhere to go.
    let model = "
        process P { initial p0; p0 -(a, 1)-> p1; p1 -(e, 1)-> p2; p2 -(a, 1)-> p3; p3 -(e, 1)-> p0; }
        process Q { initial q0; q0 -(a, 1)-> q0; q1 -(a, 1)-> q1; q0 -(d, 1)-> q1; q1 -(d, 1)-> q0; }
        system: P ||{a} Q;";
    let LiftError::Failed(f) = lift(model, "(p2,q1) -a-> (p3,q1) : 2").unwrap_err() else {
        panic!("expected failure")
    };
    let batch = &f.report.batches[0];
    assert_eq!(batch.attempt(Part::B).unwrap().outcome, Outcome::Infeasible);
    assert!(!batch.attempt(Part::B).unwrap().heuristic_verdict);
    assert_eq!(batch.attempt(Part::C).unwrap().outcome, Outcome::Skipped);
    assert!(batch.attempts.iter().all(|a| a.part != Part::D));
    assert!(f.last_equations.is_some());
}

#[test]
fn sequential_batches_on_one_process() {
    let rep = lift(SINGLE, "(s1) -b-> (s0) : 0.5\n(s0) -a-> (s1) : 4").unwrap();
    assert_eq!(rep.report.batches.len(), 2);
    assert_eq!(local_rate(&rep.system, "P", "s0", "a", "s1"), 6.0);
    assert_eq!(local_rate(&rep.system, "P", "s1", "b", "s0"), 1.0);
}

/// P moves on `a` together with one of Q, R (selfloops).
const AMALGAM: &str = "
    process P { initial p0; p0 -(a, 2)-> p1; p1 -(z, 1)-> p0; }
    process Q { initial q; q -(a, 3)-> q; }
    process R { initial r; r -(a, 5)-> r; }
    system: P ||{a} (Q || R);";

#[test]
fn part_b_solves_two_term_equation() {
    // x_P (x_Q + x_R) = 16 · 1.25 = 20.
    let rep = lift(AMALGAM, "(p0,q,r) -a-> (p1,q,r) : 1.25").unwrap();
    let batch = &rep.report.batches[0];
    assert_eq!(batch.part, Some(Part::B));
    let att = batch.attempt(Part::B).unwrap();
    assert_eq!(att.equations, 1);
    assert_eq!(att.variables.len(), 3);
    let p = local_rate(&rep.system, "P", "p0", "a", "p1");
    let q = local_rate(&rep.system, "Q", "q", "a", "q");
    let r = local_rate(&rep.system, "R", "r", "a", "r");
    assert!((p * (q + r) - 20.0).abs() < 1e-9);
}

#[test]
fn part_c_synchronises_subtree_for_state_dependent_factors() {
    // T toggles on `d`; P's `a` move needs different factors per T state,
    // which only becomes expressible once S || T is made a-synchronising.
    let model = "
        process P { initial p0; p0 -(a, 1)-> p1; p1 -(z, 1)-> p0; }
        process S { initial s; s -(a, 1)-> s; }
        process T { initial t0; t0 -(d, 1)-> t1; t1 -(d, 1)-> t0; }
        system: P ||{a} (S || T);";
    let rep = lift(model, "(p0,s,t0) -a-> (p1,s,t0) : 2\n(p0,s,t1) -a-> (p1,s,t1) : 3").unwrap();
    let batch = &rep.report.batches[0];
    assert_eq!(batch.attempt(Part::B).unwrap().outcome, Outcome::Infeasible);
    assert_eq!(batch.part, Some(Part::C));
    assert!(rep.report.inserted_selfloops.iter().all(|l| l.process == "T"));
    assert_eq!(rep.report.inserted_selfloops.len(), 2);
}

#[test]
fn identity_lift_is_structural_identity() {
    let (sys, flat, _) = setup(AMALGAM, "");
    let mut map = ModificationMap::new();
    for id in flat.ids() {
        if !flat.transition(id).is_global_selfloop() {
            map.insert(id, 1.0).unwrap();
        }
    }
    let rep = rate_lift(&sys, &flat, &map, &LiftOptions::default()).unwrap();
    assert_eq!(rep.system, sys);
    let v = verify_repair(&flat, &map, &rep.system, &sys, FlattenOptions::default()).unwrap();
    assert!(v.pass);
}

#[test]
fn verify_lists_perturbed_rate() {
    let (sys, flat, map) = setup(AMALGAM, "(p0,q,r) -a-> (p1,q,r) : 1.25");
    let rep = rate_lift(&sys, &flat, &map, &LiftOptions::default()).unwrap();
    let mut bad = rep.system.clone();
    let q = bad.leaf_index("Q").unwrap();
    let r0 = bad.leaf(q).transitions()[0].rate;
    bad.set_rate(q, 0, r0 * 1.01).unwrap();
    let v = verify_repair(&flat, &map, &bad, &sys, FlattenOptions::default()).unwrap();
    assert!(!v.pass && v.relation_equal);
    assert_eq!(v.rate_mismatches.len(), 1);
    assert_eq!(v.rate_mismatches[0].transition, "(p0,q,r) -a-> (p1,q,r)");
}

#[test]
fn trysync_rejects_type_a() {
    let sys = parse_system(
        "process P { initial s; s -(c, 1)-> t; }
         process Q { initial u; u -(c, 1)-> v; }
         system: P || Q;",
    )
    .unwrap();
    let (out, rec) = trysync(&sys, sys.root(), &ActionLabel::new("c"), &LiftOptions::default()).unwrap();
    assert!(!rec.success && rec.reason.starts_with("type A"));
    assert_eq!(out, sys);
}

#[test]
fn trysync_rejects_type_b() {
    // Making X = (Q ||c R) || S c-synchronising needs a c-selfloop in Q at q0,
    // which would release R's blocked r0 -c-> r1 below Q ||c R.
    let sys = parse_system(
        "process P { initial p0; p0 -(c, 1)-> p1; }
         process Q { states q0, q1; initial q0; q1 -(c, 1)-> q1; }
         process R { initial r0; r0 -(c, 1)-> r1; }
         process S { initial s0; s0 -(c, 1)-> s0; }
         system: P ||{c} ((Q ||{c} R) || S);",
    )
    .unwrap();
    let (_, x) = sys.children(sys.root()).unwrap();
    for recheck in [true, false] {
        let opts = LiftOptions {
            recheck_trysync: recheck,
            ..LiftOptions::default()
        };
        let (out, rec) = trysync(&sys, x, &ActionLabel::new("c"), &opts).unwrap();
        assert!(!rec.success, "{}", rec.reason);
        assert_eq!(rec.reason, "type B for every combination");
        assert_eq!(out, sys);
    }
}

#[test]
fn trysync_adds_selfloops_without_changing_relation() {
    let sys = parse_system(
        "process P { initial p0; p0 -(c, 1)-> p1; p1 -(e, 1)-> p0; }
         process Q { initial q0; q0 -(c, 1)-> q0; }
         process R { initial r0; r0 -(d, 1)-> r1; r1 -(d, 1)-> r0; }
         system: P ||{c} (Q || R);",
    )
    .unwrap();
    let (_, x) = sys.children(sys.root()).unwrap();
    let opts = LiftOptions {
        recheck_trysync: false,
        ..LiftOptions::default()
    };
    let (out, rec) = trysync(&sys, x, &ActionLabel::new("c"), &opts).unwrap();
    assert!(rec.success, "{}", rec.reason);
    assert_eq!(rec.inserted.len(), 2);
    let before = flatten(&sys, FlattenOptions::default()).unwrap();
    let after = flatten(&out, FlattenOptions::default()).unwrap();
    assert_eq!(before.relation(false), after.relation(false));
}
