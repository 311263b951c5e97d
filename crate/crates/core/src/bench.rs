//! Cyclic polling benchmark: one server polls `N` stations in turn.
//!
//! Components follow the PRISM CTMC polling model. The server is in
//! `s{i}a0` while polling station `i` and in `s{i}a1` while serving it;
//! a station is `idle` or `busy`. `loop{i}a` skips an idle station,
//! `loop{i}b` starts service at a busy one, `serve{i}` completes it.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::lifting::{rate_lift, LiftError, LiftOptions, LiftReport, Part};
use crate::model::{ActionLabel, Composition, LocalTransition, SequentialProcess, SpaSystem};
use crate::parser::ModificationMap;
use crate::semantics::{flatten, FlatTS, SemanticsError};

pub const GAMMA: f64 = 200.0;
pub const MU: f64 = 1.0;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("polling needs at least 2 stations, got {0}")]
    TooFewStations(usize),
    #[error(transparent)]
    Semantics(#[from] SemanticsError),
    #[error(transparent)]
    Lift(#[from] LiftError),
}

/// The action whose flat transitions carry the benchmark's factors.
pub fn loop1a() -> ActionLabel {
    ActionLabel::new("loop1a")
}

fn server(n: usize) -> SequentialProcess {
    let poll = |i: usize| format!("s{i}a0");
    let serve = |i: usize| format!("s{i}a1");
    let mut states = Vec::new();
    for i in 1..=n {
        states.push(poll(i));
        states.push(serve(i));
    }
    let mut tr = Vec::new();
    for i in 1..=n {
        let next = i % n + 1;
        tr.push((poll(i), format!("loop{i}a"), GAMMA, poll(next)));
        tr.push((poll(i), format!("loop{i}b"), GAMMA, serve(i)));
        tr.push((serve(i), format!("serve{i}"), MU, poll(next)));
    }
    let tr = tr
        .iter()
        .map(|(s, a, r, t)| (s.as_str(), a.as_str(), *r, t.as_str()))
        .collect();
    SequentialProcess::new("Server", states, "s1a0", tr).expect("well-formed server")
}

fn station(i: usize, n: usize) -> SequentialProcess {
    let (arrive, la, lb, serve) = (
        format!("arrive{i}"),
        format!("loop{i}a"),
        format!("loop{i}b"),
        format!("serve{i}"),
    );
    SequentialProcess::new(
        format!("Station{i}"),
        vec!["idle".into(), "busy".into()],
        "idle",
        vec![
            ("idle", arrive.as_str(), MU / n as f64, "busy"),
            ("idle", la.as_str(), 1.0, "idle"),
            ("busy", lb.as_str(), 1.0, "busy"),
            ("busy", serve.as_str(), 1.0, "idle"),
        ],
    )
    .expect("well-formed station")
}

/// `Server ||{loop_ia, loop_ib, serve_i} (Station1 || … || StationN)`.
pub fn generate_polling(n: usize) -> Result<SpaSystem, BenchError> {
    if n < 2 {
        return Err(BenchError::TooFewStations(n));
    }
    let sync: BTreeSet<ActionLabel> = (1..=n)
        .flat_map(|i| [format!("loop{i}a"), format!("loop{i}b"), format!("serve{i}")])
        .map(ActionLabel::new)
        .collect();
    let stations = (1..=n).map(|i| Composition::leaf(station(i, n))).collect();
    let stations = Composition::chain(stations, &BTreeSet::new()).expect("n ≥ 2");
    let comp = Composition::Parallel {
        left: Box::new(Composition::leaf(server(n))),
        right: Box::new(stations),
        sync,
    };
    Ok(SpaSystem::new(comp).expect("well-formed polling system"))
}

/// Planted-solution factors for every `loop1a` transition.
///
/// A variant of `sys` synchronises the whole station subtree on `loop1a`,
/// gives Stations 2…N `loop1a` selfloops in both states and draws fresh
/// rates for all `loop1a` slots. Factors are the ratios of its flat rates to
/// the original ones, so a Part C style repair exists by construction.
pub fn auto_factors(sys: &SpaSystem, flat: &FlatTS, seed: u64) -> Result<(ModificationMap, SpaSystem), BenchError> {
    let a = loop1a();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut planted = sys.clone();
    let (_, stations) = planted.children(planted.root()).expect("polling root is inner");
    for id in planted.post_order(stations) {
        if !planted.is_leaf(id) {
            planted.add_sync(id, a.clone()).expect("inner node");
        }
    }
    for leaf in 0..planted.leaf_count() {
        let p = planted.leaf(leaf).clone();
        for (k, t) in p.transitions().iter().enumerate() {
            if t.action == a {
                planted.set_rate(leaf, k, t.rate * rng.gen_range(0.5..2.0)).expect("positive");
            }
        }
        if leaf >= 2 {
            for s in 0..p.states().len() as u32 {
                let t = LocalTransition {
                    source: s,
                    action: a.clone(),
                    rate: rng.gen_range(0.5..2.0),
                    target: s,
                };
                planted.add_local_transition(leaf, t).expect("valid state");
            }
        }
    }
    let pflat = flatten(&planted, Default::default())?;
    let mut map = ModificationMap::new();
    for id in flat.ids() {
        let t = flat.transition(id);
        if t.action != a {
            continue;
        }
        let k = flat.key(id);
        let pid = pflat.find(&k.0, &k.1, &k.2).expect("planted variant keeps the relation");
        map.insert(id, pflat.transition(pid).rate / t.rate).expect("positive factor");
    }
    Ok((map, planted))
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct PhaseTimes {
    pub generate: f64,
    pub flatten: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lift: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchStats {
    pub n_stations: usize,
    pub states: usize,
    pub transitions: usize,
    pub loop1a_transitions: usize,
    /// Size of the equation system of the successful batch (lift runs only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub equations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variables: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub part: Option<Part>,
    /// Seconds per phase.
    pub wall_times: PhaseTimes,
}

#[derive(Debug)]
pub struct BenchRun {
    pub system: SpaSystem,
    pub flat: FlatTS,
    pub stats: BenchStats,
    pub factors: Option<ModificationMap>,
    pub lift: Option<Result<(SpaSystem, LiftReport), LiftError>>,
}

/// Generates and flattens the `n`-station model; with `factor_seed`, also
/// lifts planted factors drawn with that seed.
pub fn run_polling(n: usize, factor_seed: Option<u64>, opts: &LiftOptions) -> Result<BenchRun, BenchError> {
    let t0 = Instant::now();
    let system = generate_polling(n)?;
    let generate = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let flat = flatten(&system, opts.flatten)?;
    let flatten_s = t1.elapsed().as_secs_f64();
    let a = loop1a();
    let mut stats = BenchStats {
        n_stations: n,
        states: flat.states().len(),
        transitions: flat.transitions().len(),
        loop1a_transitions: flat.transitions().iter().filter(|t| t.action == a).count(),
        equations: None,
        variables: None,
        part: None,
        wall_times: PhaseTimes {
            generate,
            flatten: flatten_s,
            lift: None,
        },
    };
    let mut factors = None;
    let mut lift = None;
    if let Some(seed) = factor_seed {
        let (map, _) = auto_factors(&system, &flat, seed)?;
        let t2 = Instant::now();
        let result = rate_lift(&system, &flat, &map, opts);
        stats.wall_times.lift = Some(t2.elapsed().as_secs_f64());
        if let Ok(rep) = &result {
            if let Some(batch) = rep.report.batches.iter().find(|b| b.part.is_some()) {
                let part = batch.part.unwrap();
                stats.part = Some(part);
                if let Some(att) = batch.attempt(part) {
                    stats.equations = Some(att.equations);
                    stats.variables = Some(att.variables.len());
                }
            }
        }
        lift = Some(result.map(|r| (r.system, r.report)));
        factors = Some(map);
    }
    Ok(BenchRun {
        system,
        flat,
        stats,
        factors,
        lift,
    })
}

/// One CSV row per run, for plotting growth against `n`.
pub fn trend_csv(stats: &[BenchStats]) -> String {
    let mut out = String::from("n,states,transitions,loop1a_transitions,equations,variables,flatten_s,lift_s\n");
    let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
    for s in stats {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.6},{}\n",
            s.n_stations,
            s.states,
            s.transitions,
            s.loop1a_transitions,
            opt(s.equations),
            opt(s.variables),
            s.wall_times.flatten,
            s.wall_times.lift.map(|x| format!("{x:.6}")).unwrap_or_default()
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_instances_have_closed_form_counts() {
        for n in 2..=5 {
            let run = run_polling(n, None, &LiftOptions::default()).unwrap();
            let half = 1usize << (n - 1);
            assert_eq!(run.stats.states, 3 * n * half);
            assert_eq!(run.stats.loop1a_transitions, half);
        }
        assert!(matches!(generate_polling(1), Err(BenchError::TooFewStations(1))));
    }
}
