//! Lifting flat rate modification factors into the sequential components.
//!
//! The driver keeps a working copy of the system and the set of pending
//! modified transitions. For each chosen transition it tries, in order, a
//! local repair (Part A), a solve within the current action scope (Part B),
//! a solve after synchronising the scope further (Part C) and finally scope
//! expansion towards the root (Part D).
//!
//! Transitions are addressed by their `(source, action, target)` key: edits
//! preserve that relation, but may add invisible global selfloops, so flat
//! transition indices are not stable across edits.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::combinatorics::{comb, rslc};
use crate::equations::{build_equation, solve, EquationSystem, SolveMethod, SolverConfig};
use crate::model::{ActionLabel, LocalState, LocalTransition, NodeId, SpaSystem};
use crate::parser::ModificationMap;
use crate::semantics::{flatten, node_moves, FlatTS, FlattenOptions, GlobalState, SemanticsError, TransitionKey};
use crate::structure::{participating_set, transition_sets_for, TransitionSets};

/// Relative tolerance of [`verify_repair`].
pub const VERIFY_TOLERANCE: f64 = 1e-6;

/// Relative tolerance under which two factors count as equal in Part A.
const COMMON_FACTOR_TOLERANCE: f64 = 1e-12;

/// Rate given to an inserted selfloop before (or without) solving.
const PLACEHOLDER_RATE: f64 = 1.0;

#[derive(Debug, Clone, Copy)]
pub struct LiftOptions {
    pub solver: SolverConfig,
    pub flatten: FlattenOptions,
    /// Re-flatten after every successful TRYSYNC and undo the edit if the
    /// transition relation changed.
    pub recheck_trysync: bool,
}

impl Default for LiftOptions {
    fn default() -> Self {
        LiftOptions {
            solver: SolverConfig::default(),
            flatten: FlattenOptions::default(),
            recheck_trysync: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Part {
    A,
    B,
    C,
    D,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failed,
    Infeasible,
    NotApplicable,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct SyncEdit {
    pub node: String,
    pub action: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InsertedSelfloop {
    pub process: String,
    pub state: String,
    pub action: String,
    /// Final rate (absent in per-attempt records, which precede solving).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrysyncRecord {
    pub node: String,
    pub success: bool,
    pub reason: String,
    pub combinations: usize,
    pub feasible_combinations: usize,
    pub inserted: Vec<InsertedSelfloop>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Attempt {
    pub part: Part,
    /// Inside Part D: which body (B or C) was re-run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub body: Option<Part>,
    pub outcome: Outcome,
    pub detail: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scope: Option<String>,
    pub batch_size: usize,
    pub equations: usize,
    /// Unknowns of the equation system, in index order.
    pub variables: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_residual: Option<f64>,
    /// True when an infeasibility verdict came from exhausting the restart
    /// budget rather than an exact inconsistency proof.
    pub heuristic_verdict: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<SolveMethod>,
    /// Largest relative deviation from the desired rates over the batch,
    /// measured on the re-flattened system after applying a solution.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub post_check_error: Option<f64>,
    pub trysync: Vec<TrysyncRecord>,
}

impl Attempt {
    fn new(part: Part, outcome: Outcome, detail: impl Into<String>) -> Self {
        Attempt {
            part,
            body: None,
            outcome,
            detail: detail.into(),
            scope: None,
            batch_size: 0,
            equations: 0,
            variables: Vec::new(),
            max_residual: None,
            heuristic_verdict: false,
            method: None,
            post_check_error: None,
            trysync: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BatchReport {
    pub transition: String,
    pub action: String,
    pub involved: Vec<String>,
    pub participating: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub part: Option<Part>,
    pub attempts: Vec<Attempt>,
    /// Pending modified transitions resolved by this batch.
    pub resolved: usize,
}

impl BatchReport {
    pub fn attempt(&self, part: Part) -> Option<&Attempt> {
        self.attempts.iter().find(|a| a.part == part && a.body.is_none())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LiftReport {
    pub schema: u32,
    pub success: bool,
    pub batches: Vec<BatchReport>,
    /// Net synchronisation-set additions of the output system.
    pub sync_edits: Vec<SyncEdit>,
    /// Net selfloop insertions of the output system, with final rates.
    pub inserted_selfloops: Vec<InsertedSelfloop>,
    /// TRYSYNC edits undone because re-flattening showed a changed relation.
    pub rollbacks: usize,
    pub notes: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verification: Option<VerifyReport>,
}

impl LiftReport {
    fn new() -> Self {
        LiftReport {
            schema: 1,
            success: false,
            batches: Vec::new(),
            sync_edits: Vec::new(),
            inserted_selfloops: Vec::new(),
            rollbacks: 0,
            notes: vec![
                "Part B batches use IS(t) = IS(t^); Part D batches use PS(t) ∩ IS(t^) ≠ ∅".into(),
                "Part C runs only if PS(t^) ≠ IS(t^); otherwise a failed Part B falls through to Part D".into(),
            ],
            failure: None,
            verification: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RateMismatch {
    pub transition: String,
    pub expected: f64,
    pub actual: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub pass: bool,
    pub states_equal: bool,
    pub relation_equal: bool,
    pub missing: Vec<String>,
    pub spurious: Vec<String>,
    pub rate_mismatches: Vec<RateMismatch>,
    pub max_relative_error: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone)]
pub struct RepairedSystem {
    pub system: SpaSystem,
    pub report: LiftReport,
}

#[derive(Debug, Clone)]
pub struct LiftFailure {
    /// Working system at the point of failure.
    pub system: SpaSystem,
    pub report: LiftReport,
    pub last_equations: Option<EquationSystem>,
}

#[derive(Debug, Error)]
pub enum LiftError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Semantics(#[from] SemanticsError),
    #[error("lifting failed: {}", .0.report.failure.as_deref().unwrap_or("unknown reason"))]
    Failed(Box<LiftFailure>),
}

fn key_string(sys: &SpaSystem, key: &TransitionKey) -> String {
    format!("{} -{}-> {}", key.0.display(sys), key.1, key.2.display(sys))
}

fn names(sys: &SpaSystem, leaves: &BTreeSet<usize>) -> Vec<String> {
    leaves.iter().map(|&i| sys.leaf(i).name().to_string()).collect()
}

fn lowest_sync_above(sys: &SpaSystem, node: NodeId, c: &ActionLabel) -> Option<NodeId> {
    let mut n = sys.parent(node);
    while let Some(id) = n {
        if sys.syncs(id, c) {
            return Some(id);
        }
        n = sys.parent(id);
    }
    None
}

fn move_targets(sys: &SpaSystem, node: NodeId, s: &GlobalState, c: &ActionLabel) -> BTreeSet<GlobalState> {
    node_moves(sys, node, s, Some(c))
        .iter()
        .map(|m| m.derivation.target(sys, s))
        .collect()
}

struct Lifter<'a> {
    original: &'a SpaSystem,
    opts: LiftOptions,
    desired: BTreeMap<TransitionKey, f64>,
    pending: BTreeSet<TransitionKey>,
    reference: BTreeSet<TransitionKey>,
    states: BTreeSet<GlobalState>,
    work: SpaSystem,
    current: FlatTS,
    report: LiftReport,
    last_equations: Option<EquationSystem>,
}

/// Lifts `tmod` (factors on transitions of `flat`, the flat system of `sys`)
/// into an edited copy of `sys`.
pub fn rate_lift(
    sys: &SpaSystem,
    flat: &FlatTS,
    tmod: &ModificationMap,
    opts: &LiftOptions,
) -> Result<RepairedSystem, LiftError> {
    let mut desired = BTreeMap::new();
    for id in flat.ids() {
        let t = flat.transition(id);
        if !t.is_global_selfloop() {
            desired.insert(flat.key(id), t.rate * tmod.factor(id));
        }
    }
    let mut pending = BTreeSet::new();
    for (id, f) in tmod.iter() {
        if id.0 >= flat.transitions().len() {
            return Err(LiftError::InvalidInput(format!("unknown transition #{}", id.0)));
        }
        if flat.transition(id).is_global_selfloop() {
            return Err(LiftError::InvalidInput(format!(
                "factor on global selfloop {}",
                flat.format_key(sys, id)
            )));
        }
        if !(f > 0.0 && f.is_finite()) {
            return Err(LiftError::InvalidInput(format!("non-positive factor {f}")));
        }
        pending.insert(flat.key(id));
    }
    let current = flatten(sys, opts.flatten)?;
    let mut lifter = Lifter {
        original: sys,
        opts: *opts,
        desired,
        pending,
        reference: flat.relation(false),
        states: flat.state_set(),
        work: sys.clone(),
        current,
        report: LiftReport::new(),
        last_equations: None,
    };
    while let Some(t_hat) = lifter.pending.iter().next().cloned() {
        let batch = lifter.process(&t_hat)?;
        let ok = batch.part.is_some();
        lifter.report.batches.push(batch);
        if !ok {
            lifter.finish_report();
            lifter.report.failure = Some(format!(
                "no solution for {} up to the root",
                key_string(&lifter.work, &t_hat)
            ));
            return Err(lifter.fail());
        }
    }
    lifter.finish_report();
    let verification = verify_repair(flat, tmod, &lifter.work, sys, opts.flatten)?;
    let pass = verification.pass;
    lifter.report.verification = Some(verification);
    if !pass {
        lifter.report.failure = Some("repaired system does not reproduce the desired flat system".into());
        return Err(lifter.fail());
    }
    lifter.report.success = true;
    Ok(RepairedSystem {
        system: lifter.work,
        report: lifter.report,
    })
}

impl Lifter<'_> {
    fn fail(self) -> LiftError {
        LiftError::Failed(Box::new(LiftFailure {
            system: self.work,
            report: self.report,
            last_equations: self.last_equations,
        }))
    }

    fn refresh(&mut self) -> Result<(), LiftError> {
        self.current = flatten(&self.work, self.opts.flatten)?;
        Ok(())
    }

    fn current_rate(&self, key: &TransitionKey) -> f64 {
        self.current
            .find(&key.0, &key.1, &key.2)
            .map(|id| self.current.transition(id).rate)
            .unwrap_or(0.0)
    }

    fn desired_rate(&self, key: &TransitionKey) -> f64 {
        self.desired.get(key).copied().unwrap_or_else(|| self.current_rate(key))
    }

    /// Visible `c`-transitions of the working system, in key order.
    fn c_transitions(&self, c: &ActionLabel) -> Vec<TransitionKey> {
        self.current
            .ids()
            .filter(|&id| {
                let t = self.current.transition(id);
                &t.action == c && !t.is_global_selfloop()
            })
            .map(|id| self.current.key(id))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    fn sets(&self, key: &TransitionKey) -> TransitionSets {
        transition_sets_for(&self.work, &key.0, &key.1, &key.2).expect("visible transitions have movers")
    }

    fn process(&mut self, t_hat: &TransitionKey) -> Result<BatchReport, LiftError> {
        let c = t_hat.1.clone();
        let sets = self.sets(t_hat);
        let mut batch = BatchReport {
            transition: key_string(&self.work, t_hat),
            action: c.to_string(),
            involved: names(&self.work, &sets.involved),
            participating: names(&self.work, &sets.participating),
            part: None,
            attempts: Vec::new(),
            resolved: 0,
        };
        let before = self.pending.len();
        let mut found;
        let mut curr_root;
        if sets.involved.len() == 1 {
            let p = *sets.involved.iter().next().unwrap();
            let attempt = self.part_a(t_hat, p);
            found = attempt.outcome == Outcome::Success;
            batch.attempts.push(attempt);
            if found {
                batch.part = Some(Part::A);
            }
            curr_root = self.work.leaf_node(p);
        } else {
            batch
                .attempts
                .push(Attempt::new(Part::A, Outcome::NotApplicable, "involved set has more than one process"));
            let r = sets.involved_root;
            let tc: Vec<_> = self
                .c_transitions(&c)
                .into_iter()
                .filter(|k| self.sets(k).involved == sets.involved)
                .collect();
            let attempt = self.solve_batch(Part::B, None, &c, &tc, r)?;
            found = attempt.outcome == Outcome::Success;
            batch.attempts.push(attempt);
            if found {
                batch.part = Some(Part::B);
            } else if sets.participating != sets.involved {
                let attempt = self.part_c(Part::C, None, &c, &tc, r)?;
                found = attempt.outcome == Outcome::Success;
                batch.attempts.push(attempt);
                if found {
                    batch.part = Some(Part::C);
                }
            } else {
                batch
                    .attempts
                    .push(Attempt::new(Part::C, Outcome::Skipped, "PS(t^) = IS(t^)"));
            }
            curr_root = r;
        }

        while !found && curr_root != self.work.root() {
            curr_root = self.work.parent(curr_root).expect("not the root");
            let mut attempt = Attempt::new(Part::D, Outcome::Failed, "");
            attempt.scope = Some(self.work.node_label(curr_root));
            let success = if self.work.syncs(curr_root, &c) {
                attempt.detail = "node already synchronises on the action".into();
                true
            } else {
                let rec = self.trysync(curr_root, &c)?;
                let ok = rec.success;
                attempt.detail = rec.reason.clone();
                attempt.trysync.push(rec);
                ok
            };
            if !success {
                attempt.detail = format!("trysync failed ({}); moving further up", attempt.detail);
                batch.attempts.push(attempt);
                continue;
            }
            attempt.outcome = Outcome::Success;
            batch.attempts.push(attempt);
            let is: BTreeSet<usize> = self.work.leaf_range(curr_root).collect();
            let tc: Vec<_> = self
                .c_transitions(&c)
                .into_iter()
                .filter(|k| !self.sets(k).participating.is_disjoint(&is))
                .collect();
            let attempt = self.solve_batch(Part::D, Some(Part::B), &c, &tc, curr_root)?;
            found = attempt.outcome == Outcome::Success;
            batch.attempts.push(attempt);
            if found {
                break;
            }
            if self.sets(t_hat).participating != is {
                let attempt = self.part_c(Part::D, Some(Part::C), &c, &tc, curr_root)?;
                found = attempt.outcome == Outcome::Success;
                batch.attempts.push(attempt);
            } else {
                let mut a = Attempt::new(Part::D, Outcome::Skipped, "PS(t^) = IS(t^)");
                a.body = Some(Part::C);
                batch.attempts.push(a);
            }
        }
        if found && batch.part.is_none() {
            batch.part = Some(Part::D);
        }
        batch.resolved = before - self.pending.len();
        Ok(batch)
    }

    /// Part A: scale one local transition of an isolated process.
    fn part_a(&mut self, t_hat: &TransitionKey, p: usize) -> Attempt {
        let c = &t_hat.1;
        let (from, to) = (t_hat.0.get(p), t_hat.2.get(p));
        let group: Vec<_> = self
            .c_transitions(c)
            .into_iter()
            .filter(|k| k.0.get(p) == from && k.2.get(p) == to)
            .collect();
        let factors: Vec<f64> = group
            .iter()
            .map(|k| self.desired_rate(k) / self.current_rate(k))
            .collect();
        let f0 = factors[0];
        let mut attempt = Attempt::new(Part::A, Outcome::Failed, "");
        attempt.scope = Some(self.work.leaf(p).name().to_string());
        attempt.batch_size = group.len();
        if factors.iter().any(|f| (f - f0).abs() > COMMON_FACTOR_TOLERANCE * f0) {
            let lo = factors.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = factors.iter().copied().fold(0.0, f64::max);
            attempt.detail = format!("no common factor (factors range over [{lo}, {hi}])");
            return attempt;
        }
        if f0 != 1.0 {
            let proc_ = self.work.leaf(p);
            let slot = proc_.slot(from, c, to);
            let rates: Vec<f64> = slot.iter().map(|&k| proc_.transitions()[k].rate).collect();
            for (k, r) in slot.into_iter().zip(rates) {
                self.work.set_rate(p, k, r * f0).expect("positive rate");
            }
            // Only the scaled transitions change, and they are exactly `group`.
            self.refresh().expect("relation unchanged by rate scaling");
        }
        for k in &group {
            self.pending.remove(k);
        }
        attempt.outcome = Outcome::Success;
        attempt.detail = format!("common factor {f0}");
        attempt
    }

    /// Builds and solves one equation per transition of `tc` in scope `r`;
    /// applies the solution on success.
    fn solve_batch(
        &mut self,
        part: Part,
        body: Option<Part>,
        c: &ActionLabel,
        tc: &[TransitionKey],
        r: NodeId,
    ) -> Result<Attempt, LiftError> {
        let mut attempt = Attempt::new(part, Outcome::Infeasible, "");
        attempt.body = body;
        attempt.scope = Some(self.work.node_label(r));
        attempt.batch_size = tc.len();
        let mut es = EquationSystem::new();
        for key in tc {
            let sets = self.sets(key);
            let combos = rslc(&self.work, &sets, c, r);
            let rhs = self.desired_rate(key);
            if let Err(e) = build_equation(&self.work, &mut es, &key.0, c, &key.2, &sets, &combos, rhs) {
                attempt.detail = format!("{}: {e}", key_string(&self.work, key));
                return Ok(attempt);
            }
        }
        attempt.equations = es.equations().len();
        attempt.variables = es.variables().iter().map(|v| v.describe(&self.work)).collect();
        match solve(&es, &self.opts.solver) {
            Ok(sol) => {
                self.apply(&es, &sol.values);
                self.refresh()?;
                let err = tc
                    .iter()
                    .map(|k| {
                        let d = self.desired_rate(k);
                        (self.current_rate(k) - d).abs() / d
                    })
                    .fold(0.0, f64::max);
                for k in tc {
                    self.pending.remove(k);
                }
                attempt.outcome = Outcome::Success;
                attempt.max_residual = Some(sol.max_residual);
                attempt.method = Some(sol.method);
                attempt.post_check_error = Some(err);
                attempt.detail = "solved".into();
            }
            Err(inf) => {
                attempt.max_residual = Some(inf.best_residual);
                attempt.heuristic_verdict = !inf.exact;
                attempt.detail = inf.to_string();
                self.last_equations = Some(es);
            }
        }
        Ok(attempt)
    }

    /// Writes solved values into the working system. A variable spanning
    /// several duplicate local transitions scales them proportionally.
    fn apply(&mut self, es: &EquationSystem, values: &[f64]) {
        for (i, v) in es.variables().iter().enumerate() {
            let value = values[i];
            if value == es.prior()[i] {
                continue;
            }
            let p = self.work.leaf(v.process);
            let slot = p.slot(v.source, &v.action, v.target);
            if slot.is_empty() {
                self.work
                    .add_local_transition(
                        v.process,
                        LocalTransition {
                            source: v.source,
                            action: v.action.clone(),
                            rate: value,
                            target: v.target,
                        },
                    )
                    .expect("valid slot");
                continue;
            }
            let rates: Vec<f64> = slot.iter().map(|&k| p.transitions()[k].rate).collect();
            let total: f64 = rates.iter().sum();
            for (k, r) in slot.into_iter().zip(rates) {
                self.work.set_rate(v.process, k, r * value / total).expect("positive rate");
            }
        }
    }

    /// Part C body: synchronise every non-`c` node in scope `r` where
    /// possible (bottom-up), then rebuild and solve the batch.
    fn part_c(
        &mut self,
        part: Part,
        body: Option<Part>,
        c: &ActionLabel,
        tc: &[TransitionKey],
        r: NodeId,
    ) -> Result<Attempt, LiftError> {
        let nodes: Vec<NodeId> = self
            .work
            .post_order(r)
            .into_iter()
            .filter(|&n| !self.work.is_leaf(n) && !self.work.syncs(n, c))
            .collect();
        let mut records = Vec::new();
        for x in nodes {
            records.push(self.trysync(x, c)?);
        }
        let mut attempt = self.solve_batch(part, body, c, tc, r)?;
        attempt.trysync = records;
        Ok(attempt)
    }

    /// Tries to add `c` to the synchronisation set of `x` together with the
    /// selfloops this requires. Edits the working system only on success.
    fn trysync(&mut self, x: NodeId, c: &ActionLabel) -> Result<TrysyncRecord, LiftError> {
        let mut rec = TrysyncRecord {
            node: self.work.node_label(x),
            success: false,
            reason: String::new(),
            combinations: 0,
            feasible_combinations: 0,
            inserted: Vec::new(),
        };
        let Some((x1, x2)) = self.work.children(x) else {
            rec.reason = "leaf".into();
            return Ok(rec);
        };
        if self.work.syncs(x, c) {
            rec.success = true;
            rec.reason = "already synchronising".into();
            return Ok(rec);
        }
        for s in self.current.states() {
            if !node_moves(&self.work, x1, s, Some(c)).is_empty() && !node_moves(&self.work, x2, s, Some(c)).is_empty() {
                rec.reason = format!("type A at {}", s.display(&self.work));
                return Ok(rec);
            }
        }
        let mut flipped = self.work.clone();
        flipped.add_sync(x, c.clone()).expect("inner node");
        let combos = comb(&flipped, x, c);
        rec.combinations = combos.len();
        let under = self.work.leaf_range(x);
        let tx: Vec<(TransitionKey, BTreeSet<usize>)> = self
            .c_transitions(c)
            .into_iter()
            .filter_map(|k| {
                let ps = participating_set(&self.work, &k.0, c, &k.2);
                ps.iter().any(|i| under.contains(i)).then_some((k, ps))
            })
            .collect();
        let mut needed_all: BTreeSet<(usize, LocalState)> = BTreeSet::new();
        let mut feasible = Vec::new();
        for ci in combos.iter() {
            let mut needed = BTreeSet::new();
            for (key, ps) in &tx {
                for &k in ci.difference(ps) {
                    let z = key.0.get(k);
                    if !self.work.leaf(k).has_selfloop(z, c) {
                        needed.insert((k, z));
                    }
                }
            }
            if self.type_b_free(&flipped, &needed, c) {
                feasible.push(ci);
                needed_all.extend(needed);
            }
        }
        rec.feasible_combinations = feasible.len();
        if feasible.is_empty() {
            rec.reason = "type B for every combination".into();
            return Ok(rec);
        }
        // Once `x` synchronises, a move below it needs a whole combination
        // around its movers; without one the transition would disappear.
        for (key, _) in &tx {
            let movers: BTreeSet<usize> = under.clone().filter(|&i| key.0.get(i) != key.2.get(i)).collect();
            if !feasible.iter().any(|ci| movers.is_subset(ci)) {
                rec.reason = format!("no feasible combination keeps {}", key_string(&self.work, key));
                return Ok(rec);
            }
        }
        let mut cand = flipped;
        for &(k, z) in &needed_all {
            add_selfloop(&mut cand, k, z, c);
        }
        let f = flatten(&cand, self.opts.flatten)?;
        if self.opts.recheck_trysync && (f.relation(false) != self.reference || f.state_set() != self.states) {
            self.report.rollbacks += 1;
            rec.reason = "rolled back: re-flattening showed a changed transition relation".into();
            return Ok(rec);
        }
        rec.inserted = needed_all
            .iter()
            .map(|&(k, z)| InsertedSelfloop {
                process: cand.leaf(k).name().to_string(),
                state: cand.leaf(k).state_name(z).to_string(),
                action: c.to_string(),
                rate: None,
            })
            .collect();
        rec.success = true;
        rec.reason = format!("synchronised; {} selfloop(s) added", needed_all.len());
        self.work = cand;
        self.current = f;
        Ok(rec)
    }

    /// Spurious-transition check of type B for the selfloops `needed` on top
    /// of the flipped system. At the lowest `c`-synchronising node `Y` above a
    /// new selfloop, the candidate's `c`-moves are compared with the working
    /// system's: a new non-selfloop move is spurious; a new combined selfloop
    /// is followed further up.
    fn type_b_free(&self, flipped: &SpaSystem, needed: &BTreeSet<(usize, LocalState)>, c: &ActionLabel) -> bool {
        if needed.is_empty() {
            return true;
        }
        let mut cand = flipped.clone();
        for &(k, z) in needed {
            add_selfloop(&mut cand, k, z, c);
        }
        for &(k, z) in needed {
            for s in self.current.states().iter().filter(|s| s.get(k) == z) {
                let mut y = lowest_sync_above(&cand, cand.leaf_node(k), c);
                while let Some(yn) = y {
                    let before = move_targets(&self.work, yn, s, c);
                    let after = move_targets(&cand, yn, s, c);
                    let mut fresh = after.difference(&before);
                    if fresh.clone().any(|t| t != s) {
                        return false;
                    }
                    if fresh.next().is_some() {
                        y = lowest_sync_above(&cand, yn, c);
                    } else {
                        break;
                    }
                }
            }
        }
        true
    }

    fn finish_report(&mut self) {
        let mut edits = Vec::new();
        for id in self.work.node_ids() {
            if let (Some(now), Some(was)) = (self.work.sync_set(id), self.original.sync_set(id)) {
                for a in now.difference(was) {
                    edits.push(SyncEdit {
                        node: self.work.node_label(id),
                        action: a.to_string(),
                    });
                }
            }
        }
        edits.sort();
        self.report.sync_edits = edits;
        let mut loops = Vec::new();
        for (i, p) in self.work.inorder_leaves().iter().enumerate() {
            let before = self.original.leaf(i).transitions().len();
            for t in &p.transitions()[before..] {
                loops.push(InsertedSelfloop {
                    process: p.name().to_string(),
                    state: p.state_name(t.source).to_string(),
                    action: t.action.to_string(),
                    rate: Some(t.rate),
                });
            }
        }
        self.report.inserted_selfloops = loops;
    }
}

/// Runs TRYSYNC once on node `x` of `sys` for action `c`, outside of a lift.
/// Returns the (possibly edited) system and the record.
pub fn trysync(
    sys: &SpaSystem,
    x: NodeId,
    c: &ActionLabel,
    opts: &LiftOptions,
) -> Result<(SpaSystem, TrysyncRecord), SemanticsError> {
    let current = flatten(sys, opts.flatten)?;
    let mut lifter = Lifter {
        original: sys,
        opts: *opts,
        desired: BTreeMap::new(),
        pending: BTreeSet::new(),
        reference: current.relation(false),
        states: current.state_set(),
        work: sys.clone(),
        current,
        report: LiftReport::new(),
        last_equations: None,
    };
    let rec = match lifter.trysync(x, c) {
        Ok(rec) => rec,
        Err(LiftError::Semantics(e)) => return Err(e),
        Err(_) => unreachable!("trysync only fails on semantics errors"),
    };
    Ok((lifter.work, rec))
}

fn add_selfloop(sys: &mut SpaSystem, leaf: usize, state: LocalState, c: &ActionLabel) {
    if sys.leaf(leaf).has_selfloop(state, c) {
        return;
    }
    sys.add_local_transition(
        leaf,
        LocalTransition {
            source: state,
            action: c.clone(),
            rate: PLACEHOLDER_RATE,
            target: state,
        },
    )
    .expect("valid state");
}

/// Flattens `repaired` and compares it with `original` under `tmod`: same
/// state set, same visible `(source, action, target)` relation, and every
/// rate equal to the original rate times its factor within
/// [`VERIFY_TOLERANCE`]. `names` supplies state names for messages.
pub fn verify_repair(
    original: &FlatTS,
    tmod: &ModificationMap,
    repaired: &SpaSystem,
    names: &SpaSystem,
    opts: FlattenOptions,
) -> Result<VerifyReport, SemanticsError> {
    let flat = flatten(repaired, opts)?;
    let states_equal = flat.state_set() == original.state_set();
    let want = original.relation(false);
    let have = flat.relation(false);
    let missing: Vec<String> = want.difference(&have).map(|k| key_string(names, k)).collect();
    let spurious: Vec<String> = have.difference(&want).map(|k| key_string(names, k)).collect();
    let mut mismatches = Vec::new();
    let mut max_err = 0.0f64;
    for id in original.ids() {
        let t = original.transition(id);
        if t.is_global_selfloop() {
            continue;
        }
        let key = original.key(id);
        let Some(rid) = flat.find(&key.0, &key.1, &key.2) else {
            continue;
        };
        let expected = t.rate * tmod.factor(id);
        let actual = flat.transition(rid).rate;
        let err = (actual - expected).abs() / expected;
        max_err = max_err.max(err);
        if !(err <= VERIFY_TOLERANCE) {
            mismatches.push(RateMismatch {
                transition: key_string(names, &key),
                expected,
                actual,
                relative_error: err,
            });
        }
    }
    Ok(VerifyReport {
        pass: states_equal && missing.is_empty() && spurious.is_empty() && mismatches.is_empty(),
        states_equal,
        relation_equal: missing.is_empty() && spurious.is_empty(),
        missing,
        spurious,
        rate_mismatches: mismatches,
        max_relative_error: max_err,
        tolerance: VERIFY_TOLERANCE,
    })
}
