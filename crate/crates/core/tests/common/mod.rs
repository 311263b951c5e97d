//! Random systems and first-principles oracles shared by the property and
//! acceptance suites.
#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spalift::equations::{Equation, EquationSystem, RateVariable};
use spalift::model::{ActionLabel, Composition, NodeId, SequentialProcess, SpaSystem};
use spalift::semantics::{FlatTS, GlobalState, TransitionId};

pub const ACTIONS: [&str; 3] = ["a", "b", "c"];

#[derive(Debug, Clone, Copy)]
pub struct GenConfig {
    pub max_leaves: usize,
    pub max_states: usize,
    pub max_actions: usize,
    pub selfloop_probability: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            max_leaves: 5,
            max_states: 4,
            max_actions: 3,
            selfloop_probability: 0.3,
        }
    }
}

fn random_process(rng: &mut ChaCha8Rng, name: String, actions: &[&str], cfg: &GenConfig) -> SequentialProcess {
    let m = rng.gen_range(1..=cfg.max_states);
    let states: Vec<String> = (0..m).map(|i| format!("s{i}")).collect();
    let mut tr: Vec<(String, String, f64, String)> = Vec::new();
    for s in 0..m {
        for _ in 0..rng.gen_range(0..=2) {
            if m > 1 {
                let mut t = rng.gen_range(0..m - 1);
                if t >= s {
                    t += 1;
                }
                let a = actions[rng.gen_range(0..actions.len())];
                tr.push((states[s].clone(), a.into(), rng.gen_range(0.5..3.0), states[t].clone()));
            }
        }
        for a in actions {
            if rng.gen_bool(cfg.selfloop_probability) {
                tr.push((states[s].clone(), (*a).into(), rng.gen_range(0.5..3.0), states[s].clone()));
            }
        }
    }
    // Occasionally duplicate a local transition: same slot, separate rate.
    if !tr.is_empty() && rng.gen_bool(0.1) {
        let mut d = tr[rng.gen_range(0..tr.len())].clone();
        d.2 = rng.gen_range(0.5..3.0);
        tr.push(d);
    }
    let tr = tr
        .iter()
        .map(|(s, a, r, t)| (s.as_str(), a.as_str(), *r, t.as_str()))
        .collect();
    SequentialProcess::new(name, states.clone(), &states[0], tr).unwrap()
}

fn random_tree(rng: &mut ChaCha8Rng, leaves: &mut Vec<Composition>, actions: &[&str]) -> Composition {
    if leaves.len() == 1 {
        return leaves.pop().unwrap();
    }
    let split = rng.gen_range(1..leaves.len());
    let mut right = leaves.split_off(split);
    let l = random_tree(rng, leaves, actions);
    let r = random_tree(rng, &mut right, actions);
    let sync: Vec<&str> = actions.iter().copied().filter(|_| rng.gen_bool(0.5)).collect();
    Composition::par(l, sync, r)
}

pub fn random_system(seed: u64, cfg: &GenConfig) -> SpaSystem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=cfg.max_leaves);
    let k = rng.gen_range(1..=cfg.max_actions);
    let actions = &ACTIONS[..k];
    let mut leaves: Vec<Composition> = (0..n)
        .map(|i| Composition::leaf(random_process(&mut rng, format!("P{}", i + 1), actions, cfg)))
        .collect();
    SpaSystem::new(random_tree(&mut rng, &mut leaves, actions)).unwrap()
}

/// Leaves taking part in at least one derivation of `t`.
pub fn ps_oracle(flat: &FlatTS, t: TransitionId) -> BTreeSet<usize> {
    flat.transition(t)
        .derivations
        .iter()
        .flat_map(|d| d.contributions.iter().map(|c| c.leaf))
        .collect()
}

/// Participant sets of all derivations of `t`.
pub fn participant_sets(flat: &FlatTS, t: TransitionId) -> BTreeSet<BTreeSet<usize>> {
    flat.transition(t)
        .derivations
        .iter()
        .map(|d| d.contributions.iter().map(|c| c.leaf).collect())
        .collect()
}

pub fn ancestors(sys: &SpaSystem, id: NodeId) -> Vec<NodeId> {
    let mut out = vec![id];
    let mut cur = id;
    while let Some(p) = sys.parent(cur) {
        out.push(p);
        cur = p;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Class {
    Cannot,
    May,
    Must,
}

/// Neighbourhood class of node `x` with respect to leaf `p`, straight from
/// the definition: inspect the lowest common ancestor and the nodes between
/// it and `x`.
pub fn class_oracle(sys: &SpaSystem, p: usize, a: &ActionLabel, x: NodeId) -> Class {
    let up_p = ancestors(sys, sys.leaf_node(p));
    let up_x = ancestors(sys, x);
    let r = *up_x.iter().find(|n| up_p.contains(n)).unwrap();
    if !sys.syncs(r, a) {
        return Class::Cannot;
    }
    let between: Vec<NodeId> = up_x.iter().copied().skip(1).take_while(|&n| n != r).collect();
    if between.iter().all(|&n| sys.syncs(n, a)) {
        Class::Must
    } else {
        Class::May
    }
}

/// `a`-scope roots from the definition.
pub fn scope_oracle(sys: &SpaSystem, a: &ActionLabel) -> BTreeSet<NodeId> {
    sys.node_ids()
        .filter(|&n| sys.is_leaf(n) || sys.syncs(n, a))
        .filter(|&n| ancestors(sys, n).iter().skip(1).all(|&m| !sys.syncs(m, a)))
        .collect()
}

pub fn leaves_under(sys: &SpaSystem, n: NodeId) -> BTreeSet<usize> {
    sys.leaf_range(n).collect()
}

pub fn visible(flat: &FlatTS) -> Vec<TransitionId> {
    flat.ids().filter(|&t| !flat.transition(t).is_global_selfloop()).collect()
}

pub fn state(v: &[u32]) -> GlobalState {
    GlobalState(v.to_vec())
}

/// A random multilinear system with a planted positive solution.
pub fn planted_system(seed: u64, single_term: bool) -> (EquationSystem, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=12);
    let m = rng.gen_range(1..=32);
    let mut es = EquationSystem::new();
    for i in 0..n {
        es.variable(
            RateVariable {
                process: i,
                source: 0,
                target: 0,
                action: ActionLabel::new("x"),
            },
            rng.gen_range(0.5..2.0),
        );
    }
    let planted: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..5.0)).collect();
    for _ in 0..m {
        let terms = if single_term { 1 } else { rng.gen_range(1..=3) };
        let terms: Vec<Vec<usize>> = (0..terms)
            .map(|_| (0..rng.gen_range(1..=3.min(n))).map(|_| rng.gen_range(0..n)).collect())
            .collect();
        let rhs = eval(&terms, &planted);
        es.push(Equation { terms, rhs });
    }
    (es, planted)
}

/// A single-term system made inconsistent: one equation is the product of
/// two others, with its right-hand side scaled away from the product.
pub fn inconsistent_system(seed: u64) -> EquationSystem {
    let (base, _) = planted_system(seed, true);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let eqs = base.equations();
    let i = rng.gen_range(0..eqs.len());
    let j = rng.gen_range(0..eqs.len());
    let mut term = eqs[i].terms[0].clone();
    term.extend_from_slice(&eqs[j].terms[0]);
    let rhs = eqs[i].rhs * eqs[j].rhs * (1.0 + rng.gen_range(0.05..1.0));
    let mut es = base.clone();
    es.push(Equation { terms: vec![term], rhs });
    es
}

pub fn eval(terms: &[Vec<usize>], values: &[f64]) -> f64 {
    terms.iter().map(|t| t.iter().map(|&v| values[v]).product::<f64>()).sum()
}

/// Maximum relative residual, computed independently of the library.
pub fn max_residual(es: &EquationSystem, values: &[f64]) -> f64 {
    es.equations()
        .iter()
        .map(|e| (eval(&e.terms, values) - e.rhs).abs() / e.rhs)
        .fold(0.0, f64::max)
}

/// Structural properties of one system, checked against the oracles above.
/// Returns one message per violation.
pub mod checks {
    use super::*;
    use spalift::combinatorics::rslc;
    use spalift::lifting::{rate_lift, trysync, verify_repair, LiftOptions};
    use spalift::parser::ModificationMap;
    use spalift::semantics::{flatten, FlattenOptions};
    use spalift::structure::{a_scopes, classify, must_neighbours, transition_sets, NeighborhoodClass};

    fn class_of(c: NeighborhoodClass) -> Class {
        match c {
            NeighborhoodClass::Cannot => Class::Cannot,
            NeighborhoodClass::May => Class::May,
            NeighborhoodClass::Must => Class::Must,
        }
    }

    fn is_selfloop_free(sys: &SpaSystem) -> bool {
        sys.inorder_leaves().iter().all(|p| p.transitions().iter().all(|t| !t.is_selfloop()))
    }

    /// Neighbourhood classes and scope maximality.
    pub fn neighbourhoods(sys: &SpaSystem, out: &mut Vec<String>) {
        for a in sys.alphabet() {
            let scopes: BTreeSet<NodeId> = a_scopes(sys, &a).into_iter().collect();
            if scopes != scope_oracle(sys, &a) {
                out.push(format!("{a}-scopes differ from definition"));
            }
            let mut covered = vec![0usize; sys.leaf_count()];
            for &s in &scopes {
                for i in sys.leaf_range(s) {
                    covered[i] += 1;
                }
            }
            if covered.iter().any(|&c| c != 1) {
                out.push(format!("{a}-scopes do not partition the leaves"));
            }
            for p in 0..sys.leaf_count() {
                let pn = sys.leaf_node(p);
                let disjoint: Vec<NodeId> = sys.node_ids().filter(|&x| sys.disjoint(pn, x)).collect();
                let mut classes = Vec::new();
                for &x in &disjoint {
                    let got = class_of(classify(sys, p, &a, x).unwrap());
                    if got != class_oracle(sys, p, &a, x) {
                        out.push(format!("class of node {} w.r.t. leaf {p} on {a}", x.0));
                    }
                    classes.push((x, got));
                }
                // Cannot is disjoint from may and must.
                let cannot: BTreeSet<_> = classes.iter().filter(|c| c.1 == Class::Cannot).map(|c| c.0).collect();
                let other: BTreeSet<_> = classes.iter().filter(|c| c.1 != Class::Cannot).map(|c| c.0).collect();
                if !cannot.is_disjoint(&other) {
                    out.push("cannot-neighbourhood overlaps may/must".into());
                }
                // Every may-neighbour lies in some must-neighbour.
                for &(x, c) in &classes {
                    if c == Class::May && !classes.iter().any(|&(y, d)| d == Class::Must && sys.contains(y, x)) {
                        out.push(format!("may-neighbour {} of leaf {p} on {a} not inside a must-neighbour", x.0));
                    }
                }
            }
        }
    }

    /// Set inclusions, PS and RSLC against derivations, and where the
    /// involved set is rooted.
    pub fn transition_sets_agree(sys: &SpaSystem, flat: &FlatTS, out: &mut Vec<String>) {
        let selfloop_free = is_selfloop_free(sys);
        let ids = visible(flat);
        let mut by_action: Vec<(ActionLabel, BTreeSet<usize>)> = Vec::new();
        for &t in &ids {
            let label = flat.format_key(sys, t);
            let a = flat.transition(t).action.clone();
            let sets = transition_sets(sys, flat, t).unwrap();
            if !sets.moving.is_subset(&sets.participating) || !sets.participating.is_subset(&sets.involved) {
                out.push(format!("{label}: MS ⊆ PS ⊆ IS violated"));
            }
            if !sets.involved_restricted.is_subset(&sets.involved) {
                out.push(format!("{label}: IS_r ⊄ IS"));
            }
            if sets.participating != ps_oracle(flat, t) {
                out.push(format!(
                    "{label}: PS {:?} vs derivations {:?}",
                    sets.participating,
                    ps_oracle(flat, t)
                ));
            }
            if selfloop_free && sets.participating != sets.moving {
                out.push(format!("{label}: PS ≠ MS without selfloops"));
            }
            let r = sets.involved_root;
            if sets.involved.len() > 1 && !sys.syncs(r, &a) {
                out.push(format!("{label}: IS root not {a}-synchronising"));
            }
            if ancestors(sys, r).iter().skip(1).any(|&n| sys.syncs(n, &a)) {
                out.push(format!("{label}: {a}-synchronisation above IS root"));
            }
            if sets.involved != leaves_under(sys, r) {
                out.push(format!("{label}: IS is not the subtree of its root"));
            }
            if !scope_oracle(sys, &a).contains(&r) {
                out.push(format!("{label}: IS root is not an {a}-scope"));
            }
            let mut fixed = sets.moving.clone();
            fixed.extend(
                must_neighbours(sys, &sets.moving, &a)
                    .into_iter()
                    .filter(|q| sets.participating.contains(q)),
            );
            let eq_sets: BTreeSet<BTreeSet<usize>> = rslc(sys, &sets, &a, r)
                .iter()
                .map(|c| fixed.union(c).copied().collect())
                .collect();
            if eq_sets != participant_sets(flat, t) {
                out.push(format!(
                    "{label}: rslc terms {:?} vs derivations {:?}",
                    eq_sets,
                    participant_sets(flat, t)
                ));
            }
            by_action.push((a, sets.involved));
        }
        // Overlapping involved sets of one action coincide.
        for (i, (a1, is1)) in by_action.iter().enumerate() {
            for (a2, is2) in &by_action[i + 1..] {
                if a1 == a2 && !is1.is_disjoint(is2) && is1 != is2 {
                    out.push(format!("{a1}: overlapping but different involved sets"));
                }
            }
        }
    }

    /// TRYSYNC (without the re-flattening safety net) at every non-`a` node:
    /// successes must leave the transition relation and state set intact.
    /// Returns the number of successful calls.
    pub fn trysync_preserves(sys: &SpaSystem, flat: &FlatTS, out: &mut Vec<String>) -> usize {
        let opts = LiftOptions {
            recheck_trysync: false,
            ..LiftOptions::default()
        };
        let before = flat.relation(false);
        let states = flat.state_set();
        let mut successes = 0;
        for a in sys.alphabet() {
            for x in sys.node_ids() {
                if sys.is_leaf(x) || sys.syncs(x, &a) {
                    continue;
                }
                let (edited, rec) = trysync(sys, x, &a, &opts).unwrap();
                if !rec.success {
                    if &edited != sys {
                        out.push(format!("failed trysync at node {} on {a} edited the system", x.0));
                    }
                    continue;
                }
                successes += 1;
                let after = flatten(&edited, FlattenOptions::default()).unwrap();
                if after.relation(false) != before || after.state_set() != states {
                    out.push(format!("trysync at node {} on {a} changed the relation", x.0));
                }
            }
        }
        successes
    }

    /// All-ones factors must give back the same system and pass verification.
    pub fn identity_lift(sys: &SpaSystem, flat: &FlatTS, out: &mut Vec<String>) {
        let mut map = ModificationMap::new();
        for t in visible(flat) {
            map.insert(t, 1.0).unwrap();
        }
        match rate_lift(sys, flat, &map, &LiftOptions::default()) {
            Ok(rep) => {
                if &rep.system != sys {
                    out.push("identity lift edited the system".into());
                }
                let v = verify_repair(flat, &map, &rep.system, sys, FlattenOptions::default()).unwrap();
                if !v.pass {
                    out.push("identity lift fails verification".into());
                }
            }
            Err(e) => out.push(format!("identity lift failed: {e}")),
        }
    }
}
