use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, ValueEnum};

use bsdelab::bsde::solve_bsde_under;
use bsdelab::config::GeneratorConfig;
use bsdelab::export::{self, Column, Manifest};
use bsdelab::indifference::{asymptotics_sweep, indifference_solve, Route};
use bsdelab::measure::minimal_martingale_measure;
use bsdelab::oracles::{brute_force_dual, brute_force_primal, entropic_recursion, DualGrid, DUAL_MAX_MARKS, DUAL_MAX_STEPS};
use bsdelab::utility::{duality_gap, solve_utility};
use bsdelab::verify::{run_suite, Scenario};
use bsdelab::{Document, Error, GeneratorSpec, SolveMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Command {
    Solve,
    Utility,
    Indifference,
    Asymptotics,
    Verify,
    Oracle,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Euler,
    DtConsistent,
}

#[derive(Debug, Parser)]
#[command(name = "bsdelab", version, about = "Jump BSDE, utility and indifference experiments on scenario lattices")]
struct Args {
    /// JSON configuration document.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "verify")]
    command: Command,
    /// Risk aversions, comma separated. The sweep grid for `asymptotics`,
    /// otherwise the first entry overrides the configured alpha.
    #[arg(long, value_delimiter = ',')]
    alpha: Vec<f64>,
    /// Also cross-check against the brute-force oracles.
    #[arg(long)]
    oracle: bool,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Picard tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

enum Failure {
    Verification,
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::Claim(_)
        | Error::Json(_)
        | Error::Validation(_)
        | Error::StepSize { .. }
        | Error::Singular(_)
        | Error::Budget { .. }
        | Error::InvalidArgument(_)
        | Error::EmptyGrid
        | Error::NotAStoppingRule(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification) => ExitCode::from(1),
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load(args: &Args) -> Result<(Scenario, String), Error> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| Error::Config(format!("cannot read `{}`: {e}", args.config.display())))?;
    let mut doc = Document::from_json(&text)?;
    if let Some(m) = args.mode {
        doc.solver.mode = match m {
            ModeArg::Euler => SolveMode::Euler,
            ModeArg::DtConsistent => SolveMode::DtConsistent,
        };
    }
    if let Some(t) = args.tol {
        if !(t > 0.0) {
            return Err(Error::Config("`--tol` must be positive".into()));
        }
        doc.solver.tol = t;
    }
    if !args.alpha.is_empty() {
        if args.command == Command::Asymptotics {
            doc.experiment.alpha_grid = args.alpha.clone();
        } else {
            doc.experiment.alpha = args.alpha[0];
        }
    }
    if !(doc.experiment.alpha > 0.0) {
        return Err(Error::Config("`experiment.alpha` must be positive".into()));
    }
    Ok((Scenario::from_document(doc)?, export::sha256_hex(text.as_bytes())))
}

fn run(args: &Args) -> Result<(), Failure> {
    if let Some(n) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    let start = Instant::now();
    let (sc, sha) = load(args)?;
    std::fs::create_dir_all(&args.out).map_err(Error::from)?;
    let out = args.out.as_path();
    let mode = sc.document.solver.mode;
    let mut files = Vec::new();
    let mut measures = Vec::new();
    let mut failed = false;
    match args.command {
        Command::Solve => solve(&sc, out, &mut files, &mut measures)?,
        Command::Utility => {
            let r = solve_utility(&sc.model, &sc.terminal, sc.alpha(), sc.wealth(), &sc.utility_options(mode))?;
            let p = out.join("utility.csv");
            export::write_node_fields(
                &p,
                &sc.model,
                &[
                    Column { name: "y", field: &r.y },
                    Column { name: "z", field: &r.z },
                    Column { name: "u", field: &r.u },
                    Column { name: "theta", field: r.theta.theta() },
                ],
            )?;
            files.push(p);
            let p = out.join("density.csv");
            export::write_measure(&p, &sc.model, &r.dual)?;
            files.push(p);
            measures.push(r.dual.label().to_string());
            let p = out.join("summary.csv");
            export::write_scalars(
                &p,
                &[("y0", r.y0()), ("value0", r.value0()), ("duality_gap", duality_gap(&sc.model, &r))],
            )?;
            files.push(p);
            println!("Y_0 = {}  value = {}", r.y0(), r.value0());
        }
        Command::Indifference => {
            let r = indifference_solve(&sc.model, &sc.terminal, sc.alpha(), Route::Direct, &sc.utility_options(mode))?;
            let p = out.join("indifference.csv");
            export::write_indifference(&p, &sc.model, &r)?;
            files.push(p);
            let p = out.join("minimal_entropy.csv");
            export::write_measure(&p, &sc.model, &r.q_e)?;
            files.push(p);
            measures.push(r.q_e.label().to_string());
            println!("pi_0 = {}", r.pi0());
        }
        Command::Asymptotics => {
            let grid = &sc.document.experiment.alpha_grid;
            let r = asymptotics_sweep(&sc.model, &sc.terminal, grid, &sc.utility_options(mode))?;
            let p = out.join("asymptotics.csv");
            export::write_asymptotics(&p, &r)?;
            files.push(p);
            measures.push("Q^E".into());
            println!("slopes (sup, Z, U): {:?}", r.slopes);
        }
        Command::Verify => {
            let r = run_suite(&sc, mode)?;
            print!("{}", r.table());
            let p = out.join("verify.csv");
            export::write_verify(&p, &r)?;
            files.push(p);
            failed = !r.all_passed();
        }
        Command::Oracle => oracle(&sc, out, &mut files)?,
    }
    if args.oracle && args.command != Command::Oracle {
        oracle(&sc, out, &mut files)?;
    }
    let manifest = Manifest {
        command: format!("{:?}", args.command).to_lowercase(),
        scenario: sc.name.clone(),
        config_sha256: sha,
        crate_version: env!("CARGO_PKG_VERSION").into(),
        mode: match mode {
            SolveMode::Euler => "euler".into(),
            SolveMode::DtConsistent => "dt-consistent".into(),
        },
        measure: measures,
        tolerances: serde_json::json!({
            "picard": sc.document.solver.tol,
            "max_iter": sc.document.solver.max_iter,
        }),
        files: files
            .iter()
            .filter_map(|p| p.file_name().map(|f| f.to_string_lossy().into_owned()))
            .collect(),
        timing_ms: start.elapsed().as_millis(),
        exit_status: if failed { 1 } else { 0 },
    };
    export::write_manifest(out, &manifest)?;
    if failed {
        return Err(Failure::Verification);
    }
    Ok(())
}

fn solve(sc: &Scenario, out: &Path, files: &mut Vec<PathBuf>, measures: &mut Vec<String>) -> Result<(), Error> {
    let model = &sc.model;
    let gen_cfg = sc
        .document
        .solver
        .generator
        .clone()
        .unwrap_or(GeneratorConfig::Entropic { alpha: sc.alpha() });
    // the entropic driver is written under the minimal martingale measure
    let (gen, measure) = match gen_cfg {
        GeneratorConfig::Zero => (GeneratorSpec::Zero, None),
        GeneratorConfig::Affine { constant, y, z, u } => (GeneratorSpec::Affine { constant, y, z, u }, None),
        GeneratorConfig::Entropic { alpha } => (GeneratorSpec::Entropic { alpha }, Some(minimal_martingale_measure(model)?)),
    };
    let sol = solve_bsde_under(model, measure.as_ref(), &gen, &sc.terminal, None, &sc.solver_options())?;
    measures.push(measure.as_ref().map(|m| m.label().to_string()).unwrap_or_else(|| "P".into()));
    let p = out.join("bsde.csv");
    export::write_node_fields(
        &p,
        model,
        &[
            Column { name: "y", field: &sol.y },
            Column { name: "z", field: &sol.z },
            Column { name: "u", field: &sol.u },
            Column { name: "residual", field: &sol.residual },
        ],
    )?;
    files.push(p);
    println!("Y_0 = {}", sol.y0());
    Ok(())
}

fn oracle(sc: &Scenario, out: &Path, files: &mut Vec<PathBuf>) -> Result<(), Error> {
    let model = &sc.model;
    let alpha = sc.alpha();
    let primal = brute_force_primal(model, &sc.terminal, alpha, sc.wealth())?;
    let rec = entropic_recursion(model, &sc.terminal, alpha, None, None)?;
    let mut rows = vec![
        ("primal_y0", primal.y.at(0, 0)),
        ("primal_value", primal.value),
        ("recursion_y0", rec.y.at(0, 0)),
        ("recursion_vs_primal", rec.y.max_abs_diff(&primal.y)),
    ];
    for m in [SolveMode::Euler, SolveMode::DtConsistent] {
        let r = solve_utility(model, &sc.terminal, alpha, sc.wealth(), &sc.utility_options(m))?;
        let tag = if m == SolveMode::Euler { "euler_y0_gap" } else { "dt_y0_gap" };
        rows.push((tag, (r.y0() - primal.y.at(0, 0)).abs()));
    }
    if model.steps() <= DUAL_MAX_STEPS && model.m() <= DUAL_MAX_MARKS {
        let d = brute_force_dual(model, &sc.terminal, alpha, &DualGrid::default())?;
        rows.push(("dual_grid_objective", d.objective));
        rows.push(("dual_candidates_per_node", d.candidates_per_node as f64));
    }
    let p = out.join("oracle.csv");
    export::write_scalars(&p, &rows)?;
    files.push(p);
    for (k, v) in &rows {
        println!("{k:<26} {v}");
    }
    Ok(())
}
