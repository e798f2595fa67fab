use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use sonfed_core::clustering::{default_tie_tol, extract_partition, solution_path, PathConfig, PathSolver};
use sonfed_core::datagen::{generate, BenchmarkSpec};
use sonfed_core::experiment::{pdmm_gap_experiment, run_experiment, ExperimentConfig, GapConfig, SolverChoice};
use sonfed_core::oracle::{solve_reference, OracleConfig};
use sonfed_core::pdmm::{pdmm_run, PdmmConfig};
use sonfed_core::theory::{aposteriori_recovery_check, RecoveryCertificate};
use sonfed_core::{Convention, Error, FederationProblem, Partition, PenaltyKind, Stack};

#[derive(Parser)]
#[command(name = "sonfed", version, about = "Sum-of-norms personalized federated learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one problem file and write the solution.
    Solve(Common),
    /// Warm-started lambda sweep up to full consensus.
    Path(Common),
    /// Solve, then check the recovery conditions at the extracted partition.
    Certify(Common),
    /// Train every model family on the synthetic benchmark.
    Benchmark(Common),
    /// Optimality gap of the protocol along its iterations.
    PdmmTrace(Common),
    /// Write a synthetic benchmark draw as CSV.
    Datagen(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// JSON configuration; a problem file for solve, path and certify.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// mean-ordered, sum-ordered, mean-unordered or sum-unordered.
    #[arg(long)]
    convention: Option<String>,
    /// Output directory; results go to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    solver: Option<SolverArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    Oracle,
    Pdmm,
}

enum Failure {
    Config(String),
    NotConverged(String),
    Other(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Dimension { .. } | Error::Partition(_) | Error::Unsupported(_) => {
                Failure::Config(e.to_string())
            }
            _ => Failure::Other(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Other(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

/// A problem file, optionally carrying solver settings next to the problem.
#[derive(Deserialize)]
struct ProblemFile {
    #[serde(flatten)]
    problem: FederationProblem,
    #[serde(default)]
    oracle: OracleConfig,
    #[serde(default)]
    pdmm: Option<PdmmConfig>,
    #[serde(default)]
    path: Option<PathConfig>,
    #[serde(default)]
    tie_tol: Option<f64>,
}

#[derive(Serialize)]
struct SolutionDoc {
    solver: &'static str,
    x: Stack,
    objective: f64,
    kkt_residual: f64,
    converged: bool,
    iterations: usize,
    num_clusters: usize,
    partition: Partition,
}

#[derive(Serialize)]
struct CertifyDoc {
    solution: SolutionDoc,
    certificate: RecoveryCertificate,
    certified: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Solve(c) => cmd_solve(c),
        Command::Path(c) => cmd_path(c),
        Command::Certify(c) => cmd_certify(c),
        Command::Benchmark(c) => cmd_benchmark(c),
        Command::PdmmTrace(c) => cmd_pdmm_trace(c),
        Command::Datagen(c) => cmd_datagen(c),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::NotConverged(m)) => {
            eprintln!("not converged: {m}");
            ExitCode::from(3)
        }
        Err(Failure::Other(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn config_or_default<T: DeserializeOwned + Default>(c: &Common) -> Result<T, Failure> {
    match &c.config {
        Some(p) => read_json(p),
        None => Ok(T::default()),
    }
}

fn convention(c: &Common) -> Result<Option<Convention>, Failure> {
    c.convention
        .as_deref()
        .map(Convention::parse)
        .transpose()
        .map_err(Failure::from)
}

/// Writes `name` under `--out`, or prints it when no directory was given.
fn emit(c: &Common, name: &str, body: &str) -> Outcome {
    match &c.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(name), body)?;
        }
        None => print!("{body}"),
    }
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("outputs serialize") + "\n"
}

fn load_problem(c: &Common) -> Result<ProblemFile, Failure> {
    let path = c
        .config
        .as_ref()
        .ok_or_else(|| Failure::Config("--config <problem.json> is required".into()))?;
    let mut pf: ProblemFile = read_json(path)?;
    if let Some(conv) = convention(c)? {
        pf.problem = pf.problem.with_convention(conv);
    }
    if let Some(lambda) = c.lambda {
        let penalty = match pf.problem.penalty() {
            PenaltyKind::ClusteredSumOfNorms { partition, .. } => PenaltyKind::ClusteredSumOfNorms {
                lambda,
                partition: partition.clone(),
            },
            _ => PenaltyKind::SumOfNorms { lambda },
        };
        pf.problem = pf.problem.with_penalty(penalty)?;
    }
    if let Some(seed) = c.seed {
        pf.oracle.seed = seed;
        if let Some(p) = pf.pdmm.as_mut() {
            p.seed = seed;
        }
    }
    Ok(pf)
}

fn solve_with(pf: &ProblemFile, c: &Common) -> Result<SolutionDoc, Failure> {
    let problem = &pf.problem;
    let (solver, x, iterations) = match c.solver.unwrap_or(SolverArg::Oracle) {
        SolverArg::Oracle => {
            let r = solve_reference(problem, &pf.oracle)?;
            ("oracle", r.x, r.iters_used)
        }
        SolverArg::Pdmm => {
            let cfg = pf
                .pdmm
                .clone()
                .unwrap_or_else(|| PdmmConfig::damped(problem.num_users(), 0.4, 5000, c.seed.unwrap_or(0)));
            let run = pdmm_run(problem, &cfg, None)?;
            ("pdmm", Stack::new(run.state.x), run.state.t)
        }
    };
    let tie = pf.tie_tol.unwrap_or_else(|| default_tie_tol(&x));
    let kkt = problem.subgradient_residual(&x, tie)?;
    let partition = if x.len() == problem.num_users() {
        extract_partition(&x, tie)
    } else {
        Partition::singletons(x.len())
    };
    Ok(SolutionDoc {
        solver,
        objective: problem.objective(&x)?,
        converged: kkt <= pf.oracle.tol,
        kkt_residual: kkt,
        iterations,
        num_clusters: partition.num_blocks(),
        partition,
        x,
    })
}

fn cmd_solve(c: &Common) -> Outcome {
    let pf = load_problem(c)?;
    let doc = solve_with(&pf, c)?;
    emit(c, "solution.json", &to_json(&doc))?;
    if doc.converged {
        Ok(())
    } else {
        Err(Failure::NotConverged(format!(
            "residual {:e} above {:e}",
            doc.kkt_residual, pf.oracle.tol
        )))
    }
}

fn cmd_certify(c: &Common) -> Outcome {
    let pf = load_problem(c)?;
    let doc = solve_with(&pf, c)?;
    let tie = pf.tie_tol.unwrap_or_else(|| default_tie_tol(&doc.x));
    let certificate = aposteriori_recovery_check(&pf.problem, &doc.x, tie)?;
    let converged = doc.converged && certificate.oracle_converged;
    let out = CertifyDoc {
        certified: certificate.certified(),
        certificate,
        solution: doc,
    };
    emit(c, "certificate.json", &to_json(&out))?;
    if converged {
        Ok(())
    } else {
        Err(Failure::NotConverged(
            "solution or clustered solve did not reach tolerance".into(),
        ))
    }
}

fn cmd_path(c: &Common) -> Outcome {
    let pf = load_problem(c)?;
    let mut cfg = pf.path.clone().unwrap_or_default();
    if let Some(l) = c.lambda {
        cfg.lambda_init = Some(l);
    }
    match c.solver {
        Some(SolverArg::Pdmm) => {
            let n = pf.problem.num_users();
            cfg.solver = PathSolver::Pdmm(
                pf.pdmm
                    .clone()
                    .unwrap_or_else(|| PdmmConfig::damped(n, 0.4, 5000, c.seed.unwrap_or(0))),
            );
        }
        Some(SolverArg::Oracle) => cfg.solver = PathSolver::Oracle(pf.oracle.clone()),
        None => {}
    }
    let problem = match pf.problem.penalty() {
        PenaltyKind::SumOfNorms { .. } => pf.problem.clone(),
        _ => pf.problem.with_penalty(PenaltyKind::SumOfNorms { lambda: 0.0 })?,
    };
    let path = solution_path(&problem, &cfg)?;
    match &c.out {
        Some(_) => {
            emit(c, "path.jsonl", &path.to_json_lines())?;
            emit(c, "path_summary.csv", &path.summary_csv())
        }
        None => emit(c, "", &path.summary_csv()),
    }
}

fn cmd_benchmark(c: &Common) -> Outcome {
    let mut cfg: ExperimentConfig = config_or_default(c)?;
    if let Some(seed) = c.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(conv) = convention(c)? {
        cfg.convention = conv;
    }
    if let Some(l) = c.lambda {
        cfg.lambda_grid = vec![l];
    }
    match c.solver {
        Some(SolverArg::Pdmm) if !matches!(cfg.sum_of_norms_solver, SolverChoice::Pdmm(_)) => {
            let n = cfg.benchmark.num_users();
            cfg.sum_of_norms_solver = SolverChoice::Pdmm(PdmmConfig::damped(n, 0.4, 5000, c.seed.unwrap_or(0)));
        }
        Some(SolverArg::Oracle) => cfg.sum_of_norms_solver = SolverChoice::Oracle,
        _ => {}
    }
    let result = run_experiment(&cfg)?;
    match &c.out {
        Some(dir) => Ok(result.write_artifacts(dir)?),
        None => emit(c, "", &result.medians_csv()),
    }
}

fn cmd_pdmm_trace(c: &Common) -> Outcome {
    let mut cfg: GapConfig = config_or_default(c)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
        if let Some(p) = cfg.pdmm.as_mut() {
            p.seed = seed;
        }
    }
    if let Some(l) = c.lambda {
        cfg.lambda = l;
    }
    if let Some(conv) = convention(c)? {
        cfg.convention = conv;
    }
    if matches!(c.solver, Some(SolverArg::Oracle)) {
        return Err(Failure::Config("pdmm-trace always runs the protocol".into()));
    }
    let trace = pdmm_gap_experiment(&cfg)?;
    emit(c, "gap_trace.csv", &trace.to_csv())
}

fn cmd_datagen(c: &Common) -> Outcome {
    let mut spec: BenchmarkSpec = config_or_default(c)?;
    if let Some(seed) = c.seed {
        spec.seed = seed;
    }
    let data = generate(&spec)?;
    match &c.out {
        Some(_) => {
            emit(c, "users.csv", &data.users_csv())?;
            emit(c, "test.csv", &data.test_csv())?;
            emit(c, "partition.json", &to_json(&data.true_partition))
        }
        None => emit(c, "", &data.users_csv()),
    }
}
