//! Relevant selfloop combinations and participant combinations.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::model::{ActionLabel, NodeId, NodeKind, SpaSystem};
use crate::structure::{must_neighbours, TransitionSets};

/// A set of leaf-index sets, canonically ordered.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
#[serde(transparent)]
pub struct CombinationSet(pub BTreeSet<BTreeSet<usize>>);

impl CombinationSet {
    pub fn empty() -> Self {
        CombinationSet(BTreeSet::new())
    }

    /// `{∅}`: exactly one combination, with no optional contributor.
    pub fn unit() -> Self {
        CombinationSet(BTreeSet::from([BTreeSet::new()]))
    }

    pub fn singleton(leaf: usize) -> Self {
        CombinationSet(BTreeSet::from([BTreeSet::from([leaf])]))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &BTreeSet<usize>> {
        self.0.iter()
    }

    /// Pairwise unions (synchronising node).
    fn product(&self, other: &Self) -> Self {
        let mut out = BTreeSet::new();
        for a in &self.0 {
            for b in &other.0 {
                out.insert(a.union(b).copied().collect());
            }
        }
        CombinationSet(out)
    }

    /// Alternatives of either side (interleaving node).
    fn union(mut self, other: Self) -> Self {
        self.0.extend(other.0);
        self
    }

    /// Combinations rendered with process names, for reports.
    pub fn named(&self, sys: &SpaSystem) -> Vec<Vec<String>> {
        self.0
            .iter()
            .map(|c| c.iter().map(|&i| sys.leaf(i).name().to_string()).collect())
            .collect()
    }
}

/// Relevant selfloop combinations of a transition below `node`.
///
/// A leaf whose participation is optional (stable, in PS, not a
/// must-neighbour of a mover) yields `{{P}}`. A leaf that takes part
/// unconditionally (mover or must-neighbour) yields `{∅}`. Any other leaf
/// cannot take part and yields no combination at all, so an interleaving
/// branch made only of such leaves contributes nothing.
pub fn rslc(sys: &SpaSystem, sets: &TransitionSets, action: &ActionLabel, node: NodeId) -> CombinationSet {
    let must = must_neighbours(sys, &sets.moving, action);
    rslc_rec(sys, sets, &must, action, node)
}

fn rslc_rec(
    sys: &SpaSystem,
    sets: &TransitionSets,
    must: &BTreeSet<usize>,
    action: &ActionLabel,
    node: NodeId,
) -> CombinationSet {
    match &sys.node(node).kind {
        NodeKind::Leaf(i) => {
            if sets.moving.contains(i) || must.contains(i) {
                CombinationSet::unit()
            } else if sets.participating.contains(i) {
                CombinationSet::singleton(*i)
            } else {
                CombinationSet::empty()
            }
        }
        NodeKind::Inner { left, right, sync } => {
            let l = rslc_rec(sys, sets, must, action, *left);
            let r = rslc_rec(sys, sets, must, action, *right);
            if sync.contains(action) {
                l.product(&r)
            } else {
                l.union(r)
            }
        }
    }
}

/// Participant combinations below `x` for action `c`. Callers that want the
/// combinations "as if `x` were `c`-synchronising" pass a system in which
/// `x` already carries `c`.
pub fn comb(sys: &SpaSystem, x: NodeId, c: &ActionLabel) -> CombinationSet {
    comb_rec(sys, x, c)
}

fn comb_rec(sys: &SpaSystem, x: NodeId, c: &ActionLabel) -> CombinationSet {
    match sys.children(x) {
        None => CombinationSet::singleton(sys.leaf_range(x).start),
        Some((l, r)) => {
            let lc = comb_rec(sys, l, c);
            let rc = comb_rec(sys, r, c);
            if sys.syncs(x, c) {
                lc.product(&rc)
            } else {
                lc.union(rc)
            }
        }
    }
}
