//! Synchronisation structure: action scopes, neighbourhoods and the
//! moving / stable / participating / involved sets of a flat transition.

use std::collections::BTreeSet;

use serde::Serialize;
use thiserror::Error;

use crate::model::{ActionLabel, ModelError, NodeId, SpaSystem};
use crate::semantics::{node_moves, FlatTS, GlobalState, TransitionId};

/// How a node relates to a leaf's `a`-transitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum NeighborhoodClass {
    Cannot,
    May,
    Must,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StructureError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("transition has an empty moving set (global selfloop)")]
    GlobalSelfloop,
}

/// Maximal `||_a`-rooted subtrees, plus lone leaves with no `a`-synchronisation
/// on their root path. Returned in pre-order.
pub fn a_scopes(sys: &SpaSystem, a: &ActionLabel) -> Vec<NodeId> {
    let mut out = Vec::new();
    let mut stack = vec![sys.root()];
    while let Some(n) = stack.pop() {
        if sys.syncs(n, a) || sys.is_leaf(n) {
            out.push(n);
        } else if let Some((l, r)) = sys.children(n) {
            stack.push(r);
            stack.push(l);
        }
    }
    out
}

/// The `a`-scope containing leaf `leaf`.
pub fn scope_of(sys: &SpaSystem, leaf: usize, a: &ActionLabel) -> NodeId {
    let mut scope = sys.leaf_node(leaf);
    let mut cur = scope;
    while let Some(p) = sys.parent(cur) {
        if sys.syncs(p, a) {
            scope = p;
        }
        cur = p;
    }
    scope
}

/// Neighbourhood class of node `x` with respect to the `a`-transitions of
/// leaf `leaf`.
pub fn classify(
    sys: &SpaSystem,
    leaf: usize,
    a: &ActionLabel,
    x: NodeId,
) -> Result<NeighborhoodClass, ModelError> {
    let r = sys.lowest_common_root(sys.leaf_node(leaf), x)?;
    if !sys.syncs(r, a) {
        return Ok(NeighborhoodClass::Cannot);
    }
    let all_sync = sys.path_between(r, x).iter().all(|n| sys.syncs(*n, a));
    Ok(if all_sync {
        NeighborhoodClass::Must
    } else {
        NeighborhoodClass::May
    })
}

fn classify_leaves(sys: &SpaSystem, from: usize, a: &ActionLabel, to: usize) -> NeighborhoodClass {
    classify(sys, from, a, sys.leaf_node(to)).expect("distinct leaves are disjoint")
}

pub fn moving_set(source: &GlobalState, target: &GlobalState) -> BTreeSet<usize> {
    (0..source.len())
        .filter(|&i| source.get(i) != target.get(i))
        .collect()
}

pub fn stable_set(source: &GlobalState, target: &GlobalState) -> BTreeSet<usize> {
    (0..source.len())
        .filter(|&i| source.get(i) == target.get(i))
        .collect()
}

/// Whether subsystem `node` can perform an `a`-selfloop at `state`, i.e. a
/// combined move on `a` in which every contribution is a local selfloop.
pub fn subsystem_has_selfloop(sys: &SpaSystem, node: NodeId, state: &GlobalState, a: &ActionLabel) -> bool {
    node_moves(sys, node, state, Some(a))
        .iter()
        .any(|m| m.derivation.is_selfloop(sys))
}

/// Leaves that are must-neighbours of some mover.
pub fn must_neighbours(sys: &SpaSystem, moving: &BTreeSet<usize>, a: &ActionLabel) -> BTreeSet<usize> {
    (0..sys.leaf_count())
        .filter(|i| !moving.contains(i))
        .filter(|&i| {
            moving
                .iter()
                .any(|&j| classify_leaves(sys, j, a, i) == NeighborhoodClass::Must)
        })
        .collect()
}

/// PS(t) for the transition `source -a-> target`.
///
/// Candidates are stable leaves with a local `a`-selfloop that lie in some
/// mover's may-neighbourhood and in no mover's cannot-neighbourhood. A
/// candidate is kept if, at every `||_a` node strictly between it and its
/// lowest common root with a mover, the sibling subsystem can perform an
/// `a`-selfloop at the projected source state.
pub fn participating_set(
    sys: &SpaSystem,
    source: &GlobalState,
    action: &ActionLabel,
    target: &GlobalState,
) -> BTreeSet<usize> {
    let moving = moving_set(source, target);
    let mut ps = moving.clone();
    if moving.is_empty() {
        return ps;
    }
    ps.extend(must_neighbours(sys, &moving, action));
    for i in 0..sys.leaf_count() {
        if ps.contains(&i) || !sys.leaf(i).has_selfloop(source.get(i), action) {
            continue;
        }
        let classes: Vec<_> = moving
            .iter()
            .map(|&j| classify_leaves(sys, j, action, i))
            .collect();
        if classes.contains(&NeighborhoodClass::Cannot) || !classes.contains(&NeighborhoodClass::May) {
            continue;
        }
        let leaf_node = sys.leaf_node(i);
        let r = moving
            .iter()
            .map(|&j| sys.lowest_common_root(leaf_node, sys.leaf_node(j)).unwrap())
            .min_by_key(|n| std::cmp::Reverse(sys.depth(*n)))
            .expect("non-empty moving set");
        let mut below = leaf_node;
        let mut enabled = true;
        for n in sys.path_between(r, leaf_node) {
            if sys.syncs(n, action) {
                let (l, rc) = sys.children(n).unwrap();
                let sibling = if sys.contains(l, below) { rc } else { l };
                if !subsystem_has_selfloop(sys, sibling, source, action) {
                    enabled = false;
                    break;
                }
            }
            below = n;
        }
        if enabled {
            ps.insert(i);
        }
    }
    ps
}

/// IS(t): closure of `ps` under may-neighbourhood; IS_r keeps the leaves whose
/// syntactic alphabet contains the action; the node is the root of the
/// smallest subtree containing IS.
pub fn involved_set(
    sys: &SpaSystem,
    ps: &BTreeSet<usize>,
    action: &ActionLabel,
) -> (BTreeSet<usize>, BTreeSet<usize>, Option<NodeId>) {
    let mut is = ps.clone();
    let mut work: Vec<usize> = is.iter().copied().collect();
    while let Some(j) = work.pop() {
        for k in 0..sys.leaf_count() {
            if !is.contains(&k) && classify_leaves(sys, j, action, k) == NeighborhoodClass::May {
                is.insert(k);
                work.push(k);
            }
        }
    }
    let restricted = is
        .iter()
        .copied()
        .filter(|&k| sys.leaf(k).actions().contains(action))
        .collect();
    let root = sys.smallest_subtree_for_leaves(&is);
    (is, restricted, root)
}

/// All sets of one flat transition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransitionSets {
    pub moving: BTreeSet<usize>,
    pub stable: BTreeSet<usize>,
    pub participating: BTreeSet<usize>,
    pub involved: BTreeSet<usize>,
    pub involved_restricted: BTreeSet<usize>,
    pub involved_root: NodeId,
}

/// Computes every set for `t`, evaluating selfloop enabledness in `sys`
/// (which may be an edited system sharing `flat`'s transition relation).
pub fn transition_sets(sys: &SpaSystem, flat: &FlatTS, t: TransitionId) -> Result<TransitionSets, StructureError> {
    let tr = flat.transition(t);
    transition_sets_for(sys, flat.source(t), &tr.action, flat.target(t))
}

pub fn transition_sets_for(
    sys: &SpaSystem,
    source: &GlobalState,
    action: &ActionLabel,
    target: &GlobalState,
) -> Result<TransitionSets, StructureError> {
    let moving = moving_set(source, target);
    if moving.is_empty() {
        return Err(StructureError::GlobalSelfloop);
    }
    let stable = stable_set(source, target);
    let participating = participating_set(sys, source, action, target);
    let (involved, involved_restricted, root) = involved_set(sys, &participating, action);
    Ok(TransitionSets {
        moving,
        stable,
        participating,
        involved,
        involved_restricted,
        involved_root: root.expect("non-empty involved set"),
    })
}
