//! Process trees of sequential Markovian processes.
//!
//! A system is a binary tree whose inner nodes are parallel compositions
//! `||_A` carrying a synchronisation set `A` and whose leaves are sequential
//! processes. Leaves are numbered by the in-order (LNR) traversal of the tree;
//! that index is the position of the leaf's local state in every global state
//! vector. Every node covers a contiguous range of leaf indices.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Name of an action. Cheap to clone.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionLabel(Arc<str>);

impl ActionLabel {
    pub fn new(name: impl AsRef<str>) -> Self {
        ActionLabel(Arc::from(name.as_ref()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for ActionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for ActionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ActionLabel {
    fn from(s: &str) -> Self {
        ActionLabel::new(s)
    }
}

/// Index of a local state inside its owning process.
pub type LocalState = u32;

#[derive(Debug, Clone, PartialEq)]
pub struct LocalTransition {
    pub source: LocalState,
    pub action: ActionLabel,
    pub rate: f64,
    pub target: LocalState,
}

impl LocalTransition {
    pub fn is_selfloop(&self) -> bool {
        self.source == self.target
    }
}

/// A sequential process: a finite labelled Markovian automaton.
///
/// Duplicate `(source, action, target)` entries are allowed and model
/// local multi-transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct SequentialProcess {
    name: String,
    states: Vec<String>,
    initial: LocalState,
    transitions: Vec<LocalTransition>,
}

impl SequentialProcess {
    /// Builds a process from state names and `(source, action, rate, target)`
    /// tuples given by name.
    pub fn new(
        name: impl Into<String>,
        states: Vec<String>,
        initial: &str,
        transitions: Vec<(&str, &str, f64, &str)>,
    ) -> Result<Self, ModelError> {
        let name = name.into();
        let lookup = |s: &str| -> Result<LocalState, ModelError> {
            states
                .iter()
                .position(|x| x == s)
                .map(|i| i as LocalState)
                .ok_or_else(|| ModelError::UndeclaredState {
                    process: name.clone(),
                    state: s.to_string(),
                })
        };
        let initial = lookup(initial)?;
        let mut local = Vec::with_capacity(transitions.len());
        for (src, act, rate, tgt) in transitions {
            local.push(LocalTransition {
                source: lookup(src)?,
                action: ActionLabel::new(act),
                rate,
                target: lookup(tgt)?,
            });
        }
        Self::from_parts(name, states, initial, local)
    }

    /// Builds a process from already-resolved parts, validating them.
    pub fn from_parts(
        name: String,
        states: Vec<String>,
        initial: LocalState,
        transitions: Vec<LocalTransition>,
    ) -> Result<Self, ModelError> {
        if states.is_empty() || initial as usize >= states.len() {
            return Err(ModelError::UndeclaredState {
                process: name,
                state: format!("#{initial}"),
            });
        }
        let mut seen = BTreeSet::new();
        for s in &states {
            if !seen.insert(s.as_str()) {
                return Err(ModelError::DuplicateState {
                    process: name.clone(),
                    state: s.clone(),
                });
            }
        }
        for t in &transitions {
            for end in [t.source, t.target] {
                if end as usize >= states.len() {
                    return Err(ModelError::UndeclaredState {
                        process: name,
                        state: format!("#{end}"),
                    });
                }
            }
            check_rate(&name, t.rate)?;
        }
        Ok(SequentialProcess {
            name,
            states,
            initial,
            transitions,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn states(&self) -> &[String] {
        &self.states
    }

    pub fn state_name(&self, s: LocalState) -> &str {
        &self.states[s as usize]
    }

    pub fn state_index(&self, name: &str) -> Option<LocalState> {
        self.states
            .iter()
            .position(|x| x == name)
            .map(|i| i as LocalState)
    }

    pub fn initial(&self) -> LocalState {
        self.initial
    }

    pub fn transitions(&self) -> &[LocalTransition] {
        &self.transitions
    }

    /// Indices of the transitions leaving `s`.
    pub fn outgoing(&self, s: LocalState) -> impl Iterator<Item = usize> + '_ {
        self.transitions
            .iter()
            .enumerate()
            .filter(move |(_, t)| t.source == s)
            .map(|(i, _)| i)
    }

    /// Act(P): every action label occurring in the process text.
    pub fn actions(&self) -> BTreeSet<ActionLabel> {
        self.transitions.iter().map(|t| t.action.clone()).collect()
    }

    pub fn has_selfloop(&self, s: LocalState, action: &ActionLabel) -> bool {
        self.transitions
            .iter()
            .any(|t| t.source == s && t.target == s && &t.action == action)
    }

    /// Indices of the local transitions matching a `(source, action, target)`
    /// slot. More than one index means parallel local entries.
    pub fn slot(&self, source: LocalState, action: &ActionLabel, target: LocalState) -> Vec<usize> {
        self.transitions
            .iter()
            .enumerate()
            .filter(|(_, t)| t.source == source && t.target == target && &t.action == action)
            .map(|(i, _)| i)
            .collect()
    }
}

fn check_rate(process: &str, rate: f64) -> Result<(), ModelError> {
    if rate.is_finite() && rate > 0.0 {
        Ok(())
    } else {
        Err(ModelError::NonPositiveRate {
            process: process.to_string(),
            rate,
        })
    }
}

/// Nested composition used to build a [`SpaSystem`].
#[derive(Debug, Clone)]
pub enum Composition {
    Leaf(SequentialProcess),
    Parallel {
        left: Box<Composition>,
        right: Box<Composition>,
        sync: BTreeSet<ActionLabel>,
    },
}

impl Composition {
    pub fn leaf(p: SequentialProcess) -> Self {
        Composition::Leaf(p)
    }

    pub fn par<I, S>(left: Composition, sync: I, right: Composition) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Composition::Parallel {
            left: Box::new(left),
            right: Box::new(right),
            sync: sync.into_iter().map(ActionLabel::new).collect(),
        }
    }

    /// Right-nested chain `c1 ||_A (c2 ||_A (... ||_A cn))`.
    pub fn chain(mut parts: Vec<Composition>, sync: &BTreeSet<ActionLabel>) -> Option<Self> {
        let mut acc = parts.pop()?;
        while let Some(p) = parts.pop() {
            acc = Composition::Parallel {
                left: Box::new(p),
                right: Box::new(acc),
                sync: sync.clone(),
            };
        }
        Some(acc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Leaf(usize),
    Inner {
        left: NodeId,
        right: NodeId,
        sync: BTreeSet<ActionLabel>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub kind: NodeKind,
    pub parent: Option<NodeId>,
    /// Leaf indices covered by this subtree (contiguous in LNR order).
    pub leaves: Range<usize>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("process `{process}` references undeclared state `{state}`")]
    UndeclaredState { process: String, state: String },
    #[error("process `{process}` declares state `{state}` twice")]
    DuplicateState { process: String, state: String },
    #[error("process `{process}` has non-positive rate {rate}")]
    NonPositiveRate { process: String, rate: f64 },
    #[error("process name `{0}` occurs more than once in the system")]
    DuplicateProcess(String),
    #[error("nodes {0:?} and {1:?} are not disjoint")]
    NotDisjoint(NodeId, NodeId),
    #[error("node {0:?} is not an inner node")]
    NotInner(NodeId),
}

/// A complete SPA system: the process tree plus its leaves in LNR order.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaSystem {
    nodes: Vec<Node>,
    root: NodeId,
    leaves: Vec<SequentialProcess>,
    leaf_nodes: Vec<NodeId>,
}

impl SpaSystem {
    pub fn new(comp: Composition) -> Result<Self, ModelError> {
        let mut sys = SpaSystem {
            nodes: Vec::new(),
            root: NodeId(0),
            leaves: Vec::new(),
            leaf_nodes: Vec::new(),
        };
        sys.root = sys.insert(comp, None);
        let mut names = BTreeSet::new();
        for p in &sys.leaves {
            if !names.insert(p.name.clone()) {
                return Err(ModelError::DuplicateProcess(p.name.clone()));
            }
        }
        Ok(sys)
    }

    fn insert(&mut self, comp: Composition, parent: Option<NodeId>) -> NodeId {
        let id = NodeId(self.nodes.len());
        let start = self.leaves.len();
        self.nodes.push(Node {
            kind: NodeKind::Leaf(usize::MAX),
            parent,
            leaves: start..start,
        });
        match comp {
            Composition::Leaf(p) => {
                self.leaves.push(p);
                self.leaf_nodes.push(id);
                self.nodes[id.0].kind = NodeKind::Leaf(start);
            }
            Composition::Parallel { left, right, sync } => {
                let l = self.insert(*left, Some(id));
                let r = self.insert(*right, Some(id));
                self.nodes[id.0].kind = NodeKind::Inner {
                    left: l,
                    right: r,
                    sync,
                };
            }
        }
        self.nodes[id.0].leaves = start..self.leaves.len();
        id
    }

    /// Rebuilds the nested composition (used by serialisation).
    pub fn to_composition(&self) -> Composition {
        self.composition_at(self.root)
    }

    fn composition_at(&self, id: NodeId) -> Composition {
        match &self.nodes[id.0].kind {
            NodeKind::Leaf(i) => Composition::Leaf(self.leaves[*i].clone()),
            NodeKind::Inner { left, right, sync } => Composition::Parallel {
                left: Box::new(self.composition_at(*left)),
                right: Box::new(self.composition_at(*right)),
                sync: sync.clone(),
            },
        }
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    /// P_1 … P_n in LNR order.
    pub fn inorder_leaves(&self) -> &[SequentialProcess] {
        &self.leaves
    }

    pub fn leaf(&self, i: usize) -> &SequentialProcess {
        &self.leaves[i]
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves.len()
    }

    pub fn leaf_node(&self, i: usize) -> NodeId {
        self.leaf_nodes[i]
    }

    pub fn leaf_index(&self, name: &str) -> Option<usize> {
        self.leaves.iter().position(|p| p.name == name)
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.nodes[id.0].parent
    }

    pub fn children(&self, id: NodeId) -> Option<(NodeId, NodeId)> {
        match &self.nodes[id.0].kind {
            NodeKind::Inner { left, right, .. } => Some((*left, *right)),
            NodeKind::Leaf(_) => None,
        }
    }

    pub fn leaf_range(&self, id: NodeId) -> Range<usize> {
        self.nodes[id.0].leaves.clone()
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].kind, NodeKind::Leaf(_))
    }

    /// Whether `id` is an inner node synchronising on `a`. Leaves never are.
    pub fn syncs(&self, id: NodeId, a: &ActionLabel) -> bool {
        match &self.nodes[id.0].kind {
            NodeKind::Inner { sync, .. } => sync.contains(a),
            NodeKind::Leaf(_) => false,
        }
    }

    pub fn sync_set(&self, id: NodeId) -> Option<&BTreeSet<ActionLabel>> {
        match &self.nodes[id.0].kind {
            NodeKind::Inner { sync, .. } => Some(sync),
            NodeKind::Leaf(_) => None,
        }
    }

    /// `a` contains `b` (or equals it).
    pub fn contains(&self, a: NodeId, b: NodeId) -> bool {
        let ra = self.leaf_range(a);
        let rb = self.leaf_range(b);
        ra.start <= rb.start && rb.end <= ra.end && (a == b || self.is_ancestor(a, b))
    }

    fn is_ancestor(&self, a: NodeId, mut b: NodeId) -> bool {
        while let Some(p) = self.parent(b) {
            if p == a {
                return true;
            }
            b = p;
        }
        false
    }

    pub fn disjoint(&self, a: NodeId, b: NodeId) -> bool {
        !self.contains(a, b) && !self.contains(b, a)
    }

    /// Lowest common root of two disjoint nodes.
    pub fn lowest_common_root(&self, x: NodeId, y: NodeId) -> Result<NodeId, ModelError> {
        if !self.disjoint(x, y) {
            return Err(ModelError::NotDisjoint(x, y));
        }
        Ok(self.smallest_subtree_containing(x, y))
    }

    /// Root of the smallest subtree containing both nodes (either may contain
    /// the other).
    pub fn smallest_subtree_containing(&self, x: NodeId, y: NodeId) -> NodeId {
        let mut cur = x;
        loop {
            if self.contains(cur, y) {
                return cur;
            }
            cur = self.parent(cur).expect("root contains every node");
        }
    }

    /// Root of the smallest subtree containing every leaf in the set.
    pub fn smallest_subtree_for_leaves<'a, I>(&self, leaves: I) -> Option<NodeId>
    where
        I: IntoIterator<Item = &'a usize>,
    {
        let mut acc: Option<NodeId> = None;
        for &l in leaves {
            let n = self.leaf_nodes[l];
            acc = Some(match acc {
                None => n,
                Some(a) => self.smallest_subtree_containing(a, n),
            });
        }
        acc
    }

    /// Nodes strictly between `upper` and `lower` (exclusive on both ends),
    /// ordered from `lower` upwards. `upper` must contain `lower`.
    pub fn path_between(&self, upper: NodeId, lower: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut cur = lower;
        while let Some(p) = self.parent(cur) {
            if p == upper {
                break;
            }
            out.push(p);
            cur = p;
        }
        out
    }

    /// The child of `ancestor` whose subtree contains `id`.
    pub fn child_towards(&self, ancestor: NodeId, id: NodeId) -> Option<NodeId> {
        let (l, r) = self.children(ancestor)?;
        if self.contains(l, id) {
            Some(l)
        } else if self.contains(r, id) {
            Some(r)
        } else {
            None
        }
    }

    /// Act(X): union of the syntactic action sets of the leaves below `id`.
    pub fn syntactic_actions(&self, id: NodeId) -> BTreeSet<ActionLabel> {
        self.leaf_range(id)
            .flat_map(|i| self.leaves[i].actions())
            .collect()
    }

    /// All actions occurring in leaves or synchronisation sets.
    pub fn alphabet(&self) -> BTreeSet<ActionLabel> {
        let mut acts = self.syntactic_actions(self.root);
        for n in &self.nodes {
            if let NodeKind::Inner { sync, .. } = &n.kind {
                acts.extend(sync.iter().cloned());
            }
        }
        acts
    }

    /// Post-order (children before parents) listing of the subtree at `id`.
    pub fn post_order(&self, id: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        self.post_order_into(id, &mut out);
        out
    }

    fn post_order_into(&self, id: NodeId, out: &mut Vec<NodeId>) {
        if let Some((l, r)) = self.children(id) {
            self.post_order_into(l, out);
            self.post_order_into(r, out);
        }
        out.push(id);
    }

    /// Depth of a node (root has depth 0).
    pub fn depth(&self, mut id: NodeId) -> usize {
        let mut d = 0;
        while let Some(p) = self.parent(id) {
            d += 1;
            id = p;
        }
        d
    }

    /// Short human-readable label: the leaf itself, or the span of leaves.
    pub fn node_label(&self, id: NodeId) -> String {
        let r = self.leaf_range(id);
        if self.is_leaf(id) {
            self.leaves[r.start].name.clone()
        } else {
            let names: Vec<&str> = r.map(|i| self.leaves[i].name.as_str()).collect();
            format!("({})", names.join(","))
        }
    }

    /// Adds `a` to the synchronisation set of inner node `id`.
    pub fn add_sync(&mut self, id: NodeId, a: ActionLabel) -> Result<bool, ModelError> {
        match &mut self.nodes[id.0].kind {
            NodeKind::Inner { sync, .. } => Ok(sync.insert(a)),
            NodeKind::Leaf(_) => Err(ModelError::NotInner(id)),
        }
    }

    /// Appends a local transition to leaf `leaf`; returns its index.
    pub fn add_local_transition(
        &mut self,
        leaf: usize,
        t: LocalTransition,
    ) -> Result<usize, ModelError> {
        let p = &mut self.leaves[leaf];
        check_rate(&p.name, t.rate)?;
        if t.source as usize >= p.states.len() || t.target as usize >= p.states.len() {
            return Err(ModelError::UndeclaredState {
                process: p.name.clone(),
                state: format!("#{}", t.source.max(t.target)),
            });
        }
        p.transitions.push(t);
        Ok(p.transitions.len() - 1)
    }

    pub fn set_rate(&mut self, leaf: usize, index: usize, rate: f64) -> Result<(), ModelError> {
        let p = &mut self.leaves[leaf];
        check_rate(&p.name, rate)?;
        p.transitions[index].rate = rate;
        Ok(())
    }
}
