use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use spalift::bench::{auto_factors, generate_polling, run_polling, trend_csv};
use spalift::combinatorics::rslc;
use spalift::equations::SolverConfig;
use spalift::export::{export_flat, export_report};
use spalift::lifting::{rate_lift, verify_repair, LiftError, LiftOptions};
use spalift::model::{ActionLabel, SpaSystem};
use spalift::parser::{parse_factors, parse_system, serialize_factors, serialize_system, ModificationMap};
use spalift::semantics::{flatten, FlatTS, FlattenOptions, DEFAULT_STATE_BUDGET};
use spalift::structure::{a_scopes, transition_sets_for};

#[derive(Parser)]
#[command(name = "spalift", version, about = "Flat CTMC semantics and rate lifting for SPA models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Export the flat transition system of a model.
    Flatten {
        model: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Print the structural sets of one flat transition.
    Analyze {
        model: PathBuf,
        /// `(s1,…,sn) -a-> (s1',…,sn')`
        #[arg(long)]
        transition: String,
        /// Action whose scopes are listed (defaults to the transition's).
        #[arg(long)]
        action: Option<String>,
    },
    /// Lift a factor file into the components of a model.
    Lift {
        model: PathBuf,
        factors: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Benchmarks.
    Bench {
        #[command(subcommand)]
        which: BenchCommand,
    },
    /// Check a repaired model against a model and its factor file.
    Verify {
        model: PathBuf,
        factors: PathBuf,
        repaired: PathBuf,
    },
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Cyclic server polling N stations.
    Polling {
        /// Station counts (repeatable).
        #[arg(long = "n", required = true, num_args = 1..)]
        n: Vec<usize>,
        #[arg(long, value_enum)]
        factors: Option<FactorMode>,
        /// Seed of the planted factor instance.
        #[arg(long, default_value_t = 1)]
        factor_seed: u64,
        /// Write the growth trend as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Write the generated model and factors (first N only) here.
        #[arg(long)]
        emit: Option<PathBuf>,
        #[command(flatten)]
        solver: SolverArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FactorMode {
    Auto,
}

#[derive(Args)]
struct SolverArgs {
    #[arg(long, default_value_t = SolverConfig::default().tolerance)]
    tol: f64,
    #[arg(long, default_value_t = SolverConfig::default().restarts)]
    restarts: usize,
    #[arg(long, default_value_t = SolverConfig::default().seed)]
    seed: u64,
}

enum CliError {
    /// Bad input: exit code 2.
    Input(String),
    /// Lift failure or verification mismatch: exit code 1.
    Failure(String),
}

type CliResult = Result<(), CliError>;

fn input<E: std::fmt::Display>(ctx: &Path) -> impl FnOnce(E) -> CliError + '_ {
    move |e| CliError::Input(format!("{}: {e}", ctx.display()))
}

fn flatten_options() -> Result<FlattenOptions, CliError> {
    let max_states = match std::env::var("SPALIFT_STATE_BUDGET") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Input(format!("SPALIFT_STATE_BUDGET: not a number: {v}")))?,
        Err(_) => DEFAULT_STATE_BUDGET,
    };
    Ok(FlattenOptions { max_states })
}

fn lift_options(s: &SolverArgs) -> Result<LiftOptions, CliError> {
    if !(s.tol > 0.0) {
        return Err(CliError::Input("--tol must be positive".into()));
    }
    Ok(LiftOptions {
        solver: SolverConfig {
            tolerance: s.tol,
            restarts: s.restarts,
            seed: s.seed,
            ..SolverConfig::default()
        },
        flatten: flatten_options()?,
        ..LiftOptions::default()
    })
}

fn load_model(path: &Path) -> Result<SpaSystem, CliError> {
    let text = fs::read_to_string(path).map_err(input(path))?;
    parse_system(&text).map_err(input(path))
}

fn load_flat(sys: &SpaSystem, opts: FlattenOptions) -> Result<FlatTS, CliError> {
    flatten(sys, opts).map_err(|e| CliError::Input(e.to_string()))
}

fn load_factors(path: &Path, sys: &SpaSystem, flat: &FlatTS) -> Result<ModificationMap, CliError> {
    let text = fs::read_to_string(path).map_err(input(path))?;
    parse_factors(&text, sys, flat).map_err(input(path))
}

fn write(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(input(path))
}

fn emit(output: Option<&Path>, text: &str) -> CliResult {
    match output {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn list(sys: &SpaSystem, leaves: &std::collections::BTreeSet<usize>) -> String {
    let names: Vec<&str> = leaves.iter().map(|&i| sys.leaf(i).name()).collect();
    format!("{{{}}}", names.join(", "))
}

fn cmd_analyze(model: &Path, transition: &str, action: Option<&str>) -> CliResult {
    let sys = load_model(model)?;
    let flat = load_flat(&sys, flatten_options()?)?;
    let probe = format!("{transition} : 1");
    let map = parse_factors(&probe, &sys, &flat).map_err(|e| CliError::Input(format!("--transition: {e}")))?;
    let id = map.keys().next().expect("one entry");
    let (src, a, tgt) = flat.key(id);
    let sets = transition_sets_for(&sys, &src, &a, &tgt).map_err(|e| CliError::Input(e.to_string()))?;
    println!("transition: {}", flat.format_key(&sys, id));
    println!("rate: {}", flat.transition(id).rate);
    println!("derivations: {}", flat.transition(id).derivations.len());
    println!("MS: {}", list(&sys, &sets.moving));
    println!("SS: {}", list(&sys, &sets.stable));
    println!("PS: {}", list(&sys, &sets.participating));
    println!("IS: {}", list(&sys, &sets.involved));
    println!("IS_r: {}", list(&sys, &sets.involved_restricted));
    println!("IS root: {}", sys.node_label(sets.involved_root));
    let scope_action = action.map(ActionLabel::new).unwrap_or_else(|| a.clone());
    let scopes: Vec<String> = a_scopes(&sys, &scope_action).into_iter().map(|n| sys.node_label(n)).collect();
    println!("{scope_action}-scopes: {}", scopes.join(" "));
    let combos = rslc(&sys, &sets, &a, sets.involved_root);
    let rendered: Vec<String> = combos.named(&sys).iter().map(|c| format!("{{{}}}", c.join(", "))).collect();
    println!("rslc: {{{}}}", rendered.join(", "));
    Ok(())
}

fn cmd_lift(model: &Path, factors: &Path, output: Option<&Path>, report: Option<&Path>, solver: &SolverArgs) -> CliResult {
    let opts = lift_options(solver)?;
    let sys = load_model(model)?;
    let flat = load_flat(&sys, opts.flatten)?;
    let map = load_factors(factors, &sys, &flat)?;
    match rate_lift(&sys, &flat, &map, &opts) {
        Ok(rep) => {
            if let Some(p) = report {
                write(p, &export_report(&rep.report))?;
            }
            let parts: Vec<String> = rep
                .report
                .batches
                .iter()
                .map(|b| format!("{:?}", b.part.expect("successful batch")))
                .collect();
            eprintln!(
                "lifted {} batch(es) via part(s) {}; {} sync edit(s), {} selfloop(s) inserted",
                rep.report.batches.len(),
                parts.join(","),
                rep.report.sync_edits.len(),
                rep.report.inserted_selfloops.len()
            );
            emit(output, &serialize_system(&rep.system))
        }
        Err(LiftError::Failed(f)) => {
            if let Some(p) = report {
                write(p, &export_report(&f.report))?;
            }
            Err(CliError::Failure(f.report.failure.unwrap_or_default()))
        }
        Err(LiftError::InvalidInput(m)) => Err(CliError::Input(m)),
        Err(LiftError::Semantics(e)) => Err(CliError::Input(e.to_string())),
    }
}

fn cmd_verify(model: &Path, factors: &Path, repaired: &Path) -> CliResult {
    let opts = flatten_options()?;
    let sys = load_model(model)?;
    let flat = load_flat(&sys, opts)?;
    let map = load_factors(factors, &sys, &flat)?;
    let fixed = load_model(repaired)?;
    let same_shape = fixed.leaf_count() == sys.leaf_count()
        && (0..sys.leaf_count()).all(|i| fixed.leaf(i).states() == sys.leaf(i).states());
    if !same_shape {
        return Err(CliError::Failure("repaired model has different processes or states".into()));
    }
    let v = verify_repair(&flat, &map, &fixed, &sys, opts).map_err(|e| CliError::Input(e.to_string()))?;
    for m in &v.missing {
        println!("missing: {m}");
    }
    for s in &v.spurious {
        println!("spurious: {s}");
    }
    for r in &v.rate_mismatches {
        println!("rate: {} expected {} got {} (rel. error {:e})", r.transition, r.expected, r.actual, r.relative_error);
    }
    if v.pass {
        println!("pass (max relative error {:e})", v.max_relative_error);
        Ok(())
    } else {
        Err(CliError::Failure("verification failed".into()))
    }
}

fn cmd_bench(
    ns: &[usize],
    factors: Option<FactorMode>,
    factor_seed: u64,
    csv: Option<&Path>,
    emit_dir: Option<&Path>,
    solver: &SolverArgs,
) -> CliResult {
    let opts = lift_options(solver)?;
    if let Some(dir) = emit_dir {
        let n = ns[0];
        let sys = generate_polling(n).map_err(|e| CliError::Input(e.to_string()))?;
        fs::create_dir_all(dir).map_err(input(dir))?;
        write(&dir.join(format!("polling{n}.spa")), &serialize_system(&sys))?;
        if factors.is_some() {
            let flat = load_flat(&sys, opts.flatten)?;
            let (map, _) = auto_factors(&sys, &flat, factor_seed).map_err(|e| CliError::Input(e.to_string()))?;
            write(&dir.join(format!("polling{n}.factors")), &serialize_factors(&sys, &flat, &map))?;
        }
    }
    let mut all = Vec::new();
    let mut failed = Vec::new();
    for &n in ns {
        eprintln!("polling N={n}: generating and flattening");
        let run = run_polling(n, factors.map(|_| factor_seed), &opts).map_err(|e| CliError::Input(e.to_string()))?;
        if let Some(Err(e)) = &run.lift {
            failed.push(format!("N={n}: {e}"));
        }
        println!("{}", serde_json::to_string(&run.stats).expect("serialisable"));
        all.push(run.stats);
    }
    if let Some(p) = csv {
        write(p, &trend_csv(&all))?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failure(failed.join("; ")))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Flatten { model, output } => (|| {
            let sys = load_model(model)?;
            let flat = load_flat(&sys, flatten_options()?)?;
            emit(output.as_deref(), &export_flat(&sys, &flat))
        })(),
        Command::Analyze {
            model,
            transition,
            action,
        } => cmd_analyze(model, transition, action.as_deref()),
        Command::Lift {
            model,
            factors,
            output,
            report,
            solver,
        } => cmd_lift(model, factors, output.as_deref(), report.as_deref(), solver),
        Command::Bench {
            which:
                BenchCommand::Polling {
                    n,
                    factors,
                    factor_seed,
                    csv,
                    emit,
                    solver,
                },
        } => cmd_bench(n, *factors, *factor_seed, csv.as_deref(), emit.as_deref(), solver),
        Command::Verify {
            model,
            factors,
            repaired,
        } => cmd_verify(model, factors, repaired),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Failure(m)) => {
            eprintln!("spalift: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Input(m)) => {
            eprintln!("spalift: {m}");
            ExitCode::from(2)
        }
    }
}
