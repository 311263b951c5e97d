//! Flat multi-transition semantics.
//!
//! Moves are generated recursively over the process tree: a leaf offers its
//! local transitions, an inner node `||_A` interleaves moves on actions outside
//! `A` and pairs up left/right moves on actions in `A`, multiplying their
//! rates. Every move remembers which local transitions produced it, so that
//! after amalgamation each flat transition still lists its derivations.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;

use thiserror::Error;

use crate::model::{ActionLabel, LocalState, NodeId, NodeKind, SpaSystem};

pub const DEFAULT_STATE_BUDGET: usize = 10_000_000;

/// Local states of all leaves in LNR order.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GlobalState(pub Vec<LocalState>);

impl GlobalState {
    pub fn initial(sys: &SpaSystem) -> Self {
        GlobalState(sys.inorder_leaves().iter().map(|p| p.initial()).collect())
    }

    pub fn get(&self, leaf: usize) -> LocalState {
        self.0[leaf]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `(s1,…,sn)` using local state names.
    pub fn display(&self, sys: &SpaSystem) -> String {
        let parts: Vec<&str> = self
            .0
            .iter()
            .enumerate()
            .map(|(i, s)| sys.leaf(i).state_name(*s))
            .collect();
        format!("({})", parts.join(","))
    }
}

impl fmt::Debug for GlobalState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// One local transition taking part in a derivation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Contribution {
    pub leaf: usize,
    pub transition: usize,
}

/// A single way of producing a flat transition: one local transition per
/// contributing leaf, rate = product of their rates.
#[derive(Debug, Clone, PartialEq)]
pub struct Derivation {
    /// Sorted by leaf index.
    pub contributions: Vec<Contribution>,
    pub rate: f64,
}

impl Derivation {
    pub fn leaves(&self) -> impl Iterator<Item = usize> + '_ {
        self.contributions.iter().map(|c| c.leaf)
    }

    /// Leaves contributing a selfloop.
    pub fn selfloop_leaves<'a>(&'a self, sys: &'a SpaSystem) -> impl Iterator<Item = usize> + 'a {
        self.contributions
            .iter()
            .filter(|c| sys.leaf(c.leaf).transitions()[c.transition].is_selfloop())
            .map(|c| c.leaf)
    }

    pub fn is_selfloop(&self, sys: &SpaSystem) -> bool {
        self.contributions
            .iter()
            .all(|c| sys.leaf(c.leaf).transitions()[c.transition].is_selfloop())
    }

    /// Applies the contributions to `source`.
    pub fn target(&self, sys: &SpaSystem, source: &GlobalState) -> GlobalState {
        let mut out = source.clone();
        for c in &self.contributions {
            out.0[c.leaf] = sys.leaf(c.leaf).transitions()[c.transition].target;
        }
        out
    }
}

/// A move of a subsystem from a (projected) state.
#[derive(Debug, Clone, PartialEq)]
pub struct SubMove {
    pub action: ActionLabel,
    pub derivation: Derivation,
}

/// Moves of the subtree at `node` from `state` (a full-length vector; only the
/// components covered by `node` are read). With `only`, moves are restricted
/// to that action.
pub fn node_moves(
    sys: &SpaSystem,
    node: NodeId,
    state: &GlobalState,
    only: Option<&ActionLabel>,
) -> Vec<SubMove> {
    match &sys.node(node).kind {
        NodeKind::Leaf(i) => {
            let p = sys.leaf(*i);
            p.outgoing(state.get(*i))
                .filter(|&k| only.is_none_or(|a| &p.transitions()[k].action == a))
                .map(|k| SubMove {
                    action: p.transitions()[k].action.clone(),
                    derivation: Derivation {
                        contributions: vec![Contribution {
                            leaf: *i,
                            transition: k,
                        }],
                        rate: p.transitions()[k].rate,
                    },
                })
                .collect()
        }
        NodeKind::Inner { left, right, sync } => {
            let lm = node_moves(sys, *left, state, only);
            let rm = node_moves(sys, *right, state, only);
            let mut out = Vec::new();
            for m in lm.iter().chain(rm.iter()) {
                if !sync.contains(&m.action) {
                    out.push(m.clone());
                }
            }
            for l in lm.iter().filter(|m| sync.contains(&m.action)) {
                for r in rm.iter().filter(|m| m.action == l.action) {
                    // Left leaves precede right leaves, so concatenation stays sorted.
                    let mut contributions = l.derivation.contributions.clone();
                    contributions.extend_from_slice(&r.derivation.contributions);
                    out.push(SubMove {
                        action: l.action.clone(),
                        derivation: Derivation {
                            contributions,
                            rate: l.derivation.rate * r.derivation.rate,
                        },
                    });
                }
            }
            out
        }
    }
}

/// Un-amalgamated moves of the whole system from `s`.
pub fn enabled_multitransitions(
    sys: &SpaSystem,
    s: &GlobalState,
) -> Vec<(ActionLabel, Derivation, GlobalState)> {
    node_moves(sys, sys.root(), s, None)
        .into_iter()
        .map(|m| {
            let target = m.derivation.target(sys, s);
            (m.action, m.derivation, target)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TransitionId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct FlatTransition {
    pub source: usize,
    pub action: ActionLabel,
    pub target: usize,
    pub rate: f64,
    pub derivations: Vec<Derivation>,
}

impl FlatTransition {
    /// All components unchanged. Such transitions are kept but flagged.
    pub fn is_global_selfloop(&self) -> bool {
        self.source == self.target
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SemanticsError {
    #[error("state budget of {0} states exceeded")]
    StateBudgetExceeded(usize),
    #[error("unknown flat transition")]
    UnknownTransition,
}

#[derive(Debug, Clone, Copy)]
pub struct FlattenOptions {
    pub max_states: usize,
}

impl Default for FlattenOptions {
    fn default() -> Self {
        FlattenOptions {
            max_states: DEFAULT_STATE_BUDGET,
        }
    }
}

/// Key identifying a flat transition independently of state numbering.
pub type TransitionKey = (GlobalState, ActionLabel, GlobalState);

/// The reachable flat transition system.
#[derive(Debug, Clone)]
pub struct FlatTS {
    states: Vec<GlobalState>,
    index: HashMap<GlobalState, usize>,
    transitions: Vec<FlatTransition>,
    lookup: HashMap<(usize, ActionLabel, usize), TransitionId>,
}

impl FlatTS {
    /// Assembles a flat TS from explicit parts (used by importers).
    pub fn from_parts(states: Vec<GlobalState>, transitions: Vec<FlatTransition>) -> Self {
        let index = states
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        let lookup = transitions
            .iter()
            .enumerate()
            .map(|(i, t)| ((t.source, t.action.clone(), t.target), TransitionId(i)))
            .collect();
        FlatTS {
            states,
            index,
            transitions,
            lookup,
        }
    }

    pub fn initial(&self) -> &GlobalState {
        &self.states[0]
    }

    pub fn states(&self) -> &[GlobalState] {
        &self.states
    }

    pub fn state(&self, i: usize) -> &GlobalState {
        &self.states[i]
    }

    pub fn state_index(&self, s: &GlobalState) -> Option<usize> {
        self.index.get(s).copied()
    }

    pub fn transitions(&self) -> &[FlatTransition] {
        &self.transitions
    }

    pub fn transition(&self, id: TransitionId) -> &FlatTransition {
        &self.transitions[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = TransitionId> {
        (0..self.transitions.len()).map(TransitionId)
    }

    pub fn source(&self, id: TransitionId) -> &GlobalState {
        &self.states[self.transitions[id.0].source]
    }

    pub fn target(&self, id: TransitionId) -> &GlobalState {
        &self.states[self.transitions[id.0].target]
    }

    pub fn find(&self, source: &GlobalState, action: &ActionLabel, target: &GlobalState) -> Option<TransitionId> {
        let s = self.state_index(source)?;
        let t = self.state_index(target)?;
        self.lookup.get(&(s, action.clone(), t)).copied()
    }

    pub fn key(&self, id: TransitionId) -> TransitionKey {
        let t = &self.transitions[id.0];
        (
            self.states[t.source].clone(),
            t.action.clone(),
            self.states[t.target].clone(),
        )
    }

    /// `(source, action, target)` relation. Global selfloops are left out
    /// unless requested; they are invisible in the underlying CTMC.
    pub fn relation(&self, with_global_selfloops: bool) -> BTreeSet<TransitionKey> {
        self.ids()
            .filter(|&id| with_global_selfloops || !self.transition(id).is_global_selfloop())
            .map(|id| self.key(id))
            .collect()
    }

    pub fn state_set(&self) -> BTreeSet<GlobalState> {
        self.states.iter().cloned().collect()
    }

    /// `(s) -a-> (s')` with local state names.
    pub fn format_key(&self, sys: &SpaSystem, id: TransitionId) -> String {
        let t = self.transition(id);
        format!(
            "{} -{}-> {}",
            self.states[t.source].display(sys),
            t.action,
            self.states[t.target].display(sys)
        )
    }
}

/// Breadth-first reachability of the whole system.
pub fn flatten(sys: &SpaSystem, opts: FlattenOptions) -> Result<FlatTS, SemanticsError> {
    flatten_node(sys, sys.root(), opts)
}

/// Reachable flat TS of the subtree at `node` considered in isolation. State
/// vectors keep full length; leaves outside `node` stay at their initial state.
pub fn flatten_node(sys: &SpaSystem, node: NodeId, opts: FlattenOptions) -> Result<FlatTS, SemanticsError> {
    let initial = GlobalState::initial(sys);
    let mut states = vec![initial.clone()];
    let mut index = HashMap::new();
    index.insert(initial, 0usize);
    let mut transitions = Vec::new();
    let mut queue = VecDeque::from([0usize]);
    while let Some(si) = queue.pop_front() {
        let source = states[si].clone();
        let mut grouped: BTreeMap<(ActionLabel, GlobalState), Vec<Derivation>> = BTreeMap::new();
        for m in node_moves(sys, node, &source, None) {
            let target = m.derivation.target(sys, &source);
            grouped.entry((m.action, target)).or_default().push(m.derivation);
        }
        for ((action, target), derivations) in grouped {
            let ti = match index.get(&target) {
                Some(&i) => i,
                None => {
                    if states.len() >= opts.max_states {
                        return Err(SemanticsError::StateBudgetExceeded(opts.max_states));
                    }
                    let i = states.len();
                    states.push(target.clone());
                    index.insert(target, i);
                    queue.push_back(i);
                    i
                }
            };
            let rate = derivations.iter().map(|d| d.rate).sum();
            transitions.push(FlatTransition {
                source: si,
                action,
                target: ti,
                rate,
                derivations,
            });
        }
    }
    Ok(FlatTS::from_parts(states, transitions))
}

/// Act_perf(X): actions on reachable transitions of `node` in isolation.
pub fn performable_actions(
    sys: &SpaSystem,
    node: NodeId,
    opts: FlattenOptions,
) -> Result<BTreeSet<ActionLabel>, SemanticsError> {
    let flat = flatten_node(sys, node, opts)?;
    Ok(flat.transitions().iter().map(|t| t.action.clone()).collect())
}

pub fn derivations_of(flat: &FlatTS, t: TransitionId) -> Result<&[Derivation], SemanticsError> {
    flat.transitions
        .get(t.0)
        .map(|t| t.derivations.as_slice())
        .ok_or(SemanticsError::UnknownTransition)
}
