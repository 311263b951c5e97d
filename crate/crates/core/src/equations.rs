//! Multilinear rate equations and their numeric solution.
//!
//! Each flat transition `t` handled in a batch yields one equation
//! `Σ_C Π x = rate(t)·factor(t)`: one product term per relevant selfloop
//! combination `C`, multiplying the mover variables, the selfloop variables
//! of must-participants and the selfloop variables of `C`. Unknowns are
//! positive, so the solver works on their logarithms.

use std::collections::{BTreeSet, HashMap};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::combinatorics::CombinationSet;
use crate::model::{ActionLabel, LocalState, SpaSystem};
use crate::semantics::GlobalState;
use crate::structure::{must_neighbours, TransitionSets};

/// One local transition slot `x^(P)_{s s'}` on an action.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct RateVariable {
    pub process: usize,
    pub source: LocalState,
    pub target: LocalState,
    pub action: ActionLabel,
}

impl RateVariable {
    pub fn describe(&self, sys: &SpaSystem) -> String {
        let p = sys.leaf(self.process);
        format!(
            "x[{}]({} -{}-> {})",
            p.name(),
            p.state_name(self.source),
            self.action,
            p.state_name(self.target)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Equation {
    /// Each term is a product of the listed variable indices.
    pub terms: Vec<Vec<usize>>,
    pub rhs: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct EquationSystem {
    variables: Vec<RateVariable>,
    #[serde(skip)]
    index: HashMap<RateVariable, usize>,
    /// Starting point and tie-break target for each variable.
    prior: Vec<f64>,
    equations: Vec<Equation>,
}

impl EquationSystem {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a variable (idempotent) and returns its index.
    pub fn variable(&mut self, v: RateVariable, prior: f64) -> usize {
        if let Some(&i) = self.index.get(&v) {
            return i;
        }
        let i = self.variables.len();
        self.index.insert(v.clone(), i);
        self.variables.push(v);
        self.prior.push(prior);
        i
    }

    /// Registers a variable whose prior is the current total rate of its slot
    /// in `sys` (1 if the slot is empty).
    pub fn variable_in(&mut self, sys: &SpaSystem, v: RateVariable) -> usize {
        let p = sys.leaf(v.process);
        let total: f64 = p
            .slot(v.source, &v.action, v.target)
            .into_iter()
            .map(|k| p.transitions()[k].rate)
            .sum();
        let prior = if total > 0.0 { total } else { 1.0 };
        self.variable(v, prior)
    }

    pub fn push(&mut self, eq: Equation) -> usize {
        self.equations.push(eq);
        self.equations.len() - 1
    }

    pub fn variables(&self) -> &[RateVariable] {
        &self.variables
    }

    pub fn equations(&self) -> &[Equation] {
        &self.equations
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn is_single_term(&self) -> bool {
        self.equations.iter().all(|e| e.terms.len() == 1)
    }

    /// Variables that occur in at least one term.
    pub fn used_variables(&self) -> BTreeSet<usize> {
        self.equations
            .iter()
            .flat_map(|e| e.terms.iter().flatten().copied())
            .collect()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EquationError {
    #[error("transition has no moving component")]
    EmptyMovingSet,
    #[error("transition has no relevant selfloop combination")]
    NoCombination,
}

/// Appends the equation of one flat transition to `system`.
pub fn build_equation(
    sys: &SpaSystem,
    system: &mut EquationSystem,
    source: &GlobalState,
    action: &ActionLabel,
    target: &GlobalState,
    sets: &TransitionSets,
    combos: &CombinationSet,
    rhs: f64,
) -> Result<usize, EquationError> {
    if sets.moving.is_empty() {
        return Err(EquationError::EmptyMovingSet);
    }
    if combos.is_empty() {
        return Err(EquationError::NoCombination);
    }
    let slot = |system: &mut EquationSystem, leaf: usize, to: LocalState| {
        system.variable_in(
            sys,
            RateVariable {
                process: leaf,
                source: source.get(leaf),
                target: to,
                action: action.clone(),
            },
        )
    };
    let mut fixed = Vec::new();
    for &p in &sets.moving {
        fixed.push(slot(system, p, target.get(p)));
    }
    let must = must_neighbours(sys, &sets.moving, action);
    for &q in sets.participating.difference(&sets.moving) {
        if must.contains(&q) {
            fixed.push(slot(system, q, source.get(q)));
        }
    }
    let mut terms = Vec::with_capacity(combos.len());
    for c in combos.iter() {
        let mut term = fixed.clone();
        for &r in c {
            term.push(slot(system, r, source.get(r)));
        }
        term.sort_unstable();
        terms.push(term);
    }
    Ok(system.push(Equation { terms, rhs }))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SolverConfig {
    /// Success threshold on the maximum relative residual.
    pub tolerance: f64,
    pub restarts: usize,
    pub seed: u64,
    pub max_iterations: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tolerance: 1e-9,
            restarts: 64,
            seed: 0,
            max_iterations: 300,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    /// Prior values already satisfy every equation.
    Prior,
    /// All equations single-term: linear least squares in log space.
    LogLinear,
    /// Damped Newton in log space; `start` is the successful restart index.
    Newton { start: usize },
}

#[derive(Debug, Clone, Serialize)]
pub struct Solution {
    pub values: Vec<f64>,
    pub max_residual: f64,
    pub method: SolveMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Error)]
#[error("no solution: best max relative residual {best_residual:e} after {starts} start(s){}", if *.exact { " (exact inconsistency)" } else { " (heuristic verdict)" })]
pub struct Infeasible {
    pub best_residual: f64,
    pub starts: usize,
    /// True when the verdict is exact (inconsistent log-linear system); false
    /// when it is the heuristic outcome of exhausting the restart budget.
    pub exact: bool,
}

fn relative_residuals_log(system: &EquationSystem, theta: &[f64]) -> Vec<f64> {
    system
        .equations
        .iter()
        .map(|e| {
            let lhs: f64 = e
                .terms
                .iter()
                .map(|t| t.iter().map(|&v| theta[v]).sum::<f64>().exp())
                .sum();
            lhs / e.rhs - 1.0
        })
        .collect()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| if x.is_finite() { m.max(x.abs()) } else { f64::INFINITY })
}

pub fn solve(system: &EquationSystem, config: &SolverConfig) -> Result<Solution, Infeasible> {
    let n = system.variables.len();
    if let Some(e) = system.equations.iter().find(|e| !(e.rhs > 0.0 && e.rhs.is_finite())) {
        return Err(Infeasible {
            best_residual: e.rhs,
            starts: 0,
            exact: true,
        });
    }
    let prior_log: Vec<f64> = system.prior.iter().map(|p| p.ln()).collect();
    let at_prior = max_abs(&relative_residuals_log(system, &prior_log));
    if at_prior <= config.tolerance {
        return Ok(Solution {
            values: system.prior.clone(),
            max_residual: at_prior,
            method: SolveMethod::Prior,
        });
    }
    if n == 0 {
        return Err(Infeasible {
            best_residual: at_prior,
            starts: 0,
            exact: true,
        });
    }
    if system.is_single_term() {
        solve_log_linear(system, &prior_log, config)
    } else {
        solve_newton(system, &prior_log, config)
    }
}

/// Minimum-distance (in log space) solution of `A y = ln rhs` around the prior.
fn solve_log_linear(system: &EquationSystem, prior_log: &[f64], config: &SolverConfig) -> Result<Solution, Infeasible> {
    let m = system.equations.len();
    let n = system.variables.len();
    let mut a = DMatrix::<f64>::zeros(m, n);
    let mut b = DVector::<f64>::zeros(m);
    for (i, e) in system.equations.iter().enumerate() {
        for &v in &e.terms[0] {
            a[(i, v)] += 1.0;
        }
        b[i] = e.rhs.ln();
    }
    let y0 = DVector::from_column_slice(prior_log);
    let rhs = &b - &a * &y0;
    let svd = a.svd(true, true);
    let dy = svd.solve(&rhs, 1e-10).expect("u and v were computed");
    let y = y0 + dy;
    let theta: Vec<f64> = y.iter().copied().collect();
    let res = max_abs(&relative_residuals_log(system, &theta));
    if res <= config.tolerance {
        Ok(Solution {
            values: theta.iter().map(|t| t.exp()).collect(),
            max_residual: res,
            method: SolveMethod::LogLinear,
        })
    } else {
        Err(Infeasible {
            best_residual: res,
            starts: 1,
            exact: true,
        })
    }
}

/// Levenberg–Marquardt on relative residuals, restarted from seeded random
/// perturbations of the prior. The first start is the prior itself.
fn solve_newton(system: &EquationSystem, prior_log: &[f64], config: &SolverConfig) -> Result<Solution, Infeasible> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best = f64::INFINITY;
    let starts = config.restarts.max(1);
    for start in 0..starts {
        let mut theta = prior_log.to_vec();
        if start > 0 {
            let spread = 0.5 + 2.0 * (start as f64 / starts as f64);
            for t in theta.iter_mut() {
                *t += rng.gen_range(-spread..spread);
            }
        }
        let res = levenberg_marquardt(system, &mut theta, config);
        if res <= config.tolerance {
            return Ok(Solution {
                values: theta.iter().map(|t| t.exp()).collect(),
                max_residual: res,
                method: SolveMethod::Newton { start },
            });
        }
        best = best.min(res);
    }
    Err(Infeasible {
        best_residual: best,
        starts,
        exact: false,
    })
}

fn levenberg_marquardt(system: &EquationSystem, theta: &mut [f64], config: &SolverConfig) -> f64 {
    let m = system.equations.len();
    let n = theta.len();
    let mut r = relative_residuals_log(system, theta);
    let mut cost: f64 = r.iter().map(|x| x * x).sum();
    let mut mu = 1e-3;
    for _ in 0..config.max_iterations {
        if max_abs(&r) <= config.tolerance * 1e-2 || !cost.is_finite() {
            break;
        }
        let mut jac = DMatrix::<f64>::zeros(m, n);
        for (i, e) in system.equations.iter().enumerate() {
            for term in &e.terms {
                let val = term.iter().map(|&v| theta[v]).sum::<f64>().exp() / e.rhs;
                for &v in term {
                    jac[(i, v)] += val;
                }
            }
        }
        let jt = jac.transpose();
        let jtj = &jt * &jac;
        let g = &jt * DVector::from_column_slice(&r);
        let mut improved = false;
        while mu < 1e16 {
            let mut lhs = jtj.clone();
            for k in 0..n {
                lhs[(k, k)] += mu;
            }
            let Some(chol) = lhs.cholesky() else {
                mu *= 10.0;
                continue;
            };
            let step = chol.solve(&(-&g));
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + s.clamp(-5.0, 5.0)).collect();
            let cr = relative_residuals_log(system, &cand);
            let ccost: f64 = cr.iter().map(|x| x * x).sum();
            if ccost.is_finite() && ccost < cost {
                theta.copy_from_slice(&cand);
                r = cr;
                cost = ccost;
                mu = (mu * 0.2).max(1e-14);
                improved = true;
                break;
            }
            mu *= 8.0;
        }
        if !improved {
            break;
        }
    }
    max_abs(&r)
}

#[derive(Debug, Clone, Serialize)]
pub struct ResidualReport {
    pub residuals: Vec<f64>,
    pub max_residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Evaluates every equation directly on `values` (no log transform) and
/// reports `|lhs − rhs| / rhs` per equation.
pub fn verify_solution(system: &EquationSystem, values: &[f64], tolerance: f64) -> ResidualReport {
    let residuals: Vec<f64> = system
        .equations
        .iter()
        .map(|e| {
            let mut lhs = 0.0;
            for t in &e.terms {
                let mut prod = 1.0;
                for &v in t {
                    prod *= values[v];
                }
                lhs += prod;
            }
            (lhs - e.rhs).abs() / e.rhs
        })
        .collect();
    let max_residual = residuals.iter().fold(0.0f64, |m, &x| if x.is_nan() { f64::INFINITY } else { m.max(x) });
    ResidualReport {
        pass: max_residual <= tolerance && values.iter().all(|v| *v > 0.0),
        residuals,
        max_residual,
        tolerance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn var(i: usize) -> RateVariable {
        RateVariable {
            process: i,
            source: 0,
            target: 1,
            action: ActionLabel::new("a"),
        }
    }

    fn system(n: usize, eqs: Vec<(Vec<Vec<usize>>, f64)>) -> EquationSystem {
        let mut s = EquationSystem::new();
        for i in 0..n {
            s.variable(var(i), 1.0);
        }
        for (terms, rhs) in eqs {
            s.push(Equation { terms, rhs });
        }
        s
    }

    #[test]
    fn product_and_pin() {
        // x·y = 6, x = 2
        let s = system(2, vec![(vec![vec![0, 1]], 6.0), (vec![vec![0]], 2.0)]);
        let sol = solve(&s, &SolverConfig::default()).unwrap();
        assert_eq!(sol.method, SolveMethod::LogLinear);
        assert!((sol.values[0] - 2.0).abs() < 1e-9);
        assert!((sol.values[1] - 3.0).abs() < 1e-9);
        let rep = verify_solution(&s, &[2.0, 3.0], 1e-9);
        assert!(rep.pass);
        assert_eq!(rep.max_residual, 0.0);
        let bad = verify_solution(&s, &[2.0, 3.1], 1e-9);
        assert!(!bad.pass);
        assert!(bad.max_residual > 1e-9);
    }

    #[test]
    fn two_term_substitution() {
        // x·y + x·z = 10, x = 2, y = 1  ⇒ z = 10/2 − 1 = 4
        let s = system(
            3,
            vec![(vec![vec![0, 1], vec![0, 2]], 10.0), (vec![vec![0]], 2.0), (vec![vec![1]], 1.0)],
        );
        let sol = solve(&s, &SolverConfig::default()).unwrap();
        assert!(matches!(sol.method, SolveMethod::Newton { .. }));
        assert!((sol.values[2] - 4.0).abs() < 1e-8, "{:?}", sol.values);
        assert!(verify_solution(&s, &sol.values, 1e-9).pass);
    }

    #[test]
    fn inconsistent_single_term_is_exact() {
        let s = system(2, vec![(vec![vec![0, 1]], 6.0), (vec![vec![0, 1]], 7.0)]);
        let err = solve(&s, &SolverConfig::default()).unwrap_err();
        assert!(err.exact);
        assert!(err.best_residual > 1e-3);
    }

    #[test]
    fn underdetermined_stays_near_prior() {
        // x·y = 4 from prior (1, 1): nearest log-space point is x = y = 2.
        let s = system(2, vec![(vec![vec![0, 1]], 4.0)]);
        let sol = solve(&s, &SolverConfig::default()).unwrap();
        assert!((sol.values[0] - 2.0).abs() < 1e-9);
        assert!((sol.values[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn prior_solution_is_returned_unchanged() {
        let mut s = EquationSystem::new();
        let x = s.variable(var(0), 0.3);
        let y = s.variable(var(1), 0.7);
        s.push(Equation {
            terms: vec![vec![x, y], vec![x]],
            rhs: 0.3 * 0.7 + 0.3,
        });
        let sol = solve(&s, &SolverConfig::default()).unwrap();
        assert_eq!(sol.method, SolveMethod::Prior);
        assert_eq!(sol.values, vec![0.3, 0.7]);
    }

    #[test]
    fn deterministic() {
        let s = system(3, vec![(vec![vec![0, 1], vec![2]], 5.0), (vec![vec![0], vec![1, 2]], 3.0)]);
        let a = solve(&s, &SolverConfig::default()).unwrap();
        let b = solve(&s, &SolverConfig::default()).unwrap();
        assert_eq!(a.values, b.values);
    }
}
