//! The classification benchmark: five model families trained on the
//! synthetic clustered data, scored by test accuracy and model compactness,
//! plus the protocol convergence trace.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{num_distinct_models, within_cluster_distance};
use crate::datagen::{generate, BenchmarkData, BenchmarkSpec};
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::losses::{LabeledPoint, LossSpec};
use crate::oracle::{solve_reference, OracleConfig, OracleMethod};
use crate::pdmm::{pdmm_run, PdmmConfig};
use crate::problem::{Convention, FederationProblem, PenaltyKind, Stack};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Global,
    Local,
    SquaredPenalty,
    SumOfNorms,
    Oracle,
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Global => "global",
            Family::Local => "local",
            Family::SquaredPenalty => "squared_penalty",
            Family::SumOfNorms => "sum_of_norms",
            Family::Oracle => "oracle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SolverChoice {
    #[default]
    Oracle,
    Pdmm(PdmmConfig),
}

/// `n` log-spaced points from `lo` to `hi`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..n)
        .map(|k| 10f64.powf(a + (b - a) * k as f64 / (n - 1) as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub benchmark: BenchmarkSpec,
    #[serde(default = "default_grid")]
    pub lambda_grid: Vec<f64>,
    #[serde(default = "default_grid")]
    pub gamma_grid: Vec<f64>,
    #[serde(default = "default_reg_c")]
    pub reg_c: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_convention")]
    pub convention: Convention,
    /// Solver for the sum-of-norms family; the smooth families always use
    /// the reference solver.
    #[serde(default)]
    pub sum_of_norms_solver: SolverChoice,
    #[serde(default = "experiment_oracle")]
    pub oracle: OracleConfig,
    /// Models closer than `distinct_rel_tol * (1 + max ||x_i||)` count as one.
    #[serde(default = "default_distinct_tol")]
    pub distinct_rel_tol: f64,
}

fn default_grid() -> Vec<f64> {
    log_grid(1e-3, 1e3, 30)
}

fn default_reg_c() -> f64 {
    1e-3
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_convention() -> Convention {
    Convention::SUM_ORDERED
}

/// Interior-point solves; the stationarity tolerance is loose because low
/// curvature directions of the hinge losses limit the attainable accuracy.
pub fn experiment_oracle() -> OracleConfig {
    OracleConfig {
        method: OracleMethod::Conic,
        tol: 1e-6,
        ..OracleConfig::default()
    }
}

fn default_distinct_tol() -> f64 {
    1e-7
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            benchmark: BenchmarkSpec::default(),
            lambda_grid: default_grid(),
            gamma_grid: default_grid(),
            reg_c: default_reg_c(),
            seeds: default_seeds(),
            convention: default_convention(),
            sum_of_norms_solver: SolverChoice::Oracle,
            oracle: experiment_oracle(),
            distinct_rel_tol: default_distinct_tol(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.lambda_grid.is_empty() || self.gamma_grid.is_empty() {
            return bad("grids must be nonempty");
        }
        if self
            .lambda_grid
            .iter()
            .chain(&self.gamma_grid)
            .any(|v| !(*v >= 0.0 && v.is_finite()))
        {
            return bad("grid values must be finite and nonnegative");
        }
        if !(self.reg_c >= 0.0 && self.reg_c.is_finite()) {
            return bad("reg_c must be nonnegative");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed required");
        }
        if !(self.distinct_rel_tol > 0.0) {
            return bad("distinct_rel_tol must be positive");
        }
        self.benchmark.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub family: Family,
    pub lambda_or_gamma: f64,
    pub avg_test_accuracy: f64,
    pub avg_within_cluster_distance: f64,
    pub num_distinct_models: usize,
    pub seed: u64,
    /// False when the solver stopped before certifying its tolerance.
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub row: MetricsRow,
    pub x: Stack,
}

/// Median over seeds for one family and grid value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianRow {
    pub family: Family,
    pub lambda_or_gamma: f64,
    pub avg_test_accuracy: f64,
    pub avg_within_cluster_distance: f64,
    pub num_distinct_models: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub schema_version: u32,
    pub convention: Convention,
    pub runs: Vec<RunRecord>,
    pub medians: Vec<MedianRow>,
}

impl ExperimentResult {
    pub fn rows(&self) -> impl Iterator<Item = &MetricsRow> {
        self.runs.iter().map(|r| &r.row)
    }

    pub fn median(&self, family: Family, value: f64) -> Option<&MedianRow> {
        self.medians
            .iter()
            .find(|m| m.family == family && m.lambda_or_gamma == value)
    }

    pub fn medians_of(&self, family: Family) -> Vec<&MedianRow> {
        self.medians.iter().filter(|m| m.family == family).collect()
    }

    pub fn rows_csv(&self) -> String {
        let mut s = String::from(
            "schema_version,family,lambda_or_gamma,seed,avg_test_accuracy,avg_within_cluster_distance,num_distinct_models,converged\n",
        );
        for r in self.rows() {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                self.schema_version,
                r.family.name(),
                r.lambda_or_gamma,
                r.seed,
                r.avg_test_accuracy,
                r.avg_within_cluster_distance,
                r.num_distinct_models,
                r.converged
            ));
        }
        s
    }

    pub fn medians_csv(&self) -> String {
        let mut s = String::from(
            "schema_version,family,lambda_or_gamma,seeds,avg_test_accuracy,avg_within_cluster_distance,num_distinct_models\n",
        );
        for m in &self.medians {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                self.schema_version,
                m.family.name(),
                m.lambda_or_gamma,
                m.seeds,
                m.avg_test_accuracy,
                m.avg_within_cluster_distance,
                m.num_distinct_models
            ));
        }
        s
    }

    /// `metrics.csv`, `medians.csv`, `result.json` and one solution file per run.
    pub fn write_artifacts(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir.join("solutions"))?;
        std::fs::write(dir.join("metrics.csv"), self.rows_csv())?;
        std::fs::write(dir.join("medians.csv"), self.medians_csv())?;
        let summary = serde_json::json!({
            "schema_version": self.schema_version,
            "convention": self.convention,
            "rows": self.rows().collect::<Vec<_>>(),
            "medians": self.medians,
        });
        std::fs::write(dir.join("result.json"), serde_json::to_string_pretty(&summary)?)?;
        for r in &self.runs {
            let name = format!(
                "{}_{:e}_seed{}.json",
                r.row.family.name(),
                r.row.lambda_or_gamma,
                r.row.seed
            );
            let doc = serde_json::json!({
                "schema_version": self.schema_version,
                "row": r.row,
                "x": r.x,
            });
            std::fs::write(dir.join("solutions").join(name), serde_json::to_string(&doc)?)?;
        }
        Ok(())
    }
}

/// Fraction of `test` labeled correctly by `sign(<w, a> - b)`, with
/// `sign(0) = +1`.
pub fn classify_accuracy(model: &[f64], test: &[LabeledPoint]) -> Result<f64> {
    let first = test.first().ok_or_else(|| Error::Data("empty test set".into()))?;
    let p = first.x.len();
    crate::error::check_dim("classifier", p + 1, model.len())?;
    let mut correct = 0usize;
    for pt in test {
        crate::error::check_dim("test feature", p, pt.x.len())?;
        let score = dot(&model[..p], &pt.x) - model[p];
        let pred = if score >= 0.0 { 1 } else { -1 };
        if pred == pt.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Per-user squared hinge problem.
pub fn hinge_problem(
    data: &BenchmarkData,
    reg_c: f64,
    penalty: PenaltyKind,
    convention: Convention,
) -> Result<FederationProblem> {
    let losses = data
        .user_datasets
        .iter()
        .map(|pts| LossSpec::squared_hinge(pts.clone(), reg_c))
        .collect::<Result<Vec<_>>>()?;
    FederationProblem::new(losses, penalty, convention)
}

#[derive(Debug, Clone, Copy)]
struct Task {
    seed_idx: usize,
    family: Family,
    value: f64,
}

fn solve_family(cfg: &ExperimentConfig, data: &BenchmarkData, task: Task) -> Result<(Stack, bool)> {
    let n = data.user_datasets.len();
    let solve = |penalty: PenaltyKind| -> Result<(Stack, bool)> {
        let p = hinge_problem(data, cfg.reg_c, penalty, cfg.convention)?;
        let r = solve_reference(&p, &cfg.oracle)?;
        Ok((r.x, r.converged))
    };
    match task.family {
        Family::Global => {
            let (x, ok) = solve(PenaltyKind::GlobalConsensus)?;
            Ok((Stack::new(vec![x[0].clone(); n]), ok))
        }
        Family::Local => solve(PenaltyKind::LocalOnly),
        Family::SquaredPenalty => solve(PenaltyKind::SquaredNorms { gamma: task.value }),
        Family::SumOfNorms => {
            let penalty = PenaltyKind::SumOfNorms { lambda: task.value };
            match &cfg.sum_of_norms_solver {
                SolverChoice::Oracle => solve(penalty),
                SolverChoice::Pdmm(pc) => {
                    let p = hinge_problem(data, cfg.reg_c, penalty, cfg.convention)?;
                    let run = pdmm_run(&p, pc, None)?;
                    let ok = run.trace.iter().all(|r| r.inner_warnings == 0);
                    Ok((Stack::new(run.state.x), ok))
                }
            }
        }
        Family::Oracle => {
            let mut x = vec![Vec::new(); n];
            let mut ok = true;
            for b in data.true_partition.blocks() {
                let losses = b
                    .iter()
                    .map(|&i| LossSpec::squared_hinge(data.user_datasets[i].clone(), cfg.reg_c))
                    .collect::<Result<Vec<_>>>()?;
                let p = FederationProblem::new(losses, PenaltyKind::GlobalConsensus, cfg.convention)?;
                let r = solve_reference(&p, &cfg.oracle)?;
                ok &= r.converged;
                for &i in b {
                    x[i] = r.x[0].clone();
                }
            }
            Ok((Stack::new(x), ok))
        }
    }
}

fn score(cfg: &ExperimentConfig, data: &BenchmarkData, x: &Stack, task: Task, converged: bool) -> Result<MetricsRow> {
    let mut acc = 0.0;
    for (i, m) in x.models.iter().enumerate() {
        acc += classify_accuracy(m, &data.cluster_test[data.user_cluster[i]])?;
    }
    Ok(MetricsRow {
        family: task.family,
        lambda_or_gamma: task.value,
        avg_test_accuracy: acc / x.len() as f64,
        avg_within_cluster_distance: within_cluster_distance(x, &data.true_partition),
        num_distinct_models: num_distinct_models(x, cfg.distinct_rel_tol),
        seed: cfg.seeds[task.seed_idx],
        converged,
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Every family on every grid value and seed. Work runs in parallel; the
/// output is sorted by family, grid value and seed. A failing solve
/// propagates as an error; non-convergence is flagged on the row.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let datasets = cfg
        .seeds
        .iter()
        .map(|&s| {
            generate(&BenchmarkSpec {
                seed: s,
                ..cfg.benchmark.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut tasks = Vec::new();
    for seed_idx in 0..cfg.seeds.len() {
        for family in [Family::Global, Family::Local, Family::Oracle] {
            tasks.push(Task {
                seed_idx,
                family,
                value: 0.0,
            });
        }
        for &value in &cfg.lambda_grid {
            tasks.push(Task {
                seed_idx,
                family: Family::SumOfNorms,
                value,
            });
        }
        for &value in &cfg.gamma_grid {
            tasks.push(Task {
                seed_idx,
                family: Family::SquaredPenalty,
                value,
            });
        }
    }
    let mut runs = tasks
        .par_iter()
        .map(|&task| {
            let data = &datasets[task.seed_idx];
            let (x, ok) = solve_family(cfg, data, task)?;
            let row = score(cfg, data, &x, task, ok)?;
            Ok(RunRecord { row, x })
        })
        .collect::<Result<Vec<_>>>()?;
    runs.sort_by(|a, b| {
        (a.row.family, a.row.lambda_or_gamma, a.row.seed)
            .partial_cmp(&(b.row.family, b.row.lambda_or_gamma, b.row.seed))
            .expect("grid values are finite")
    });
    let mut medians: Vec<MedianRow> = Vec::new();
    let mut start = 0;
    while start < runs.len() {
        let key = (runs[start].row.family, runs[start].row.lambda_or_gamma);
        let end = start
            + runs[start..]
                .iter()
                .take_while(|r| (r.row.family, r.row.lambda_or_gamma) == key)
                .count();
        let group = &runs[start..end];
        let pick = |f: &dyn Fn(&MetricsRow) -> f64| median(group.iter().map(|r| f(&r.row)).collect());
        medians.push(MedianRow {
            family: key.0,
            lambda_or_gamma: key.1,
            avg_test_accuracy: pick(&|r| r.avg_test_accuracy),
            avg_within_cluster_distance: pick(&|r| r.avg_within_cluster_distance),
            num_distinct_models: pick(&|r| r.num_distinct_models as f64),
            seeds: group.len(),
        });
        start = end;
    }
    Ok(ExperimentResult {
        schema_version: SCHEMA_VERSION,
        convention: cfg.convention,
        runs,
        medians,
    })
}

/// Settings of the protocol convergence trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapConfig {
    #[serde(default = "gap_benchmark")]
    pub benchmark: BenchmarkSpec,
    #[serde(default = "default_reg_c")]
    pub reg_c: f64,
    #[serde(default = "gap_lambda")]
    pub lambda: f64,
    #[serde(default = "default_convention")]
    pub convention: Convention,
    /// `None` uses the damped defaults with 40% activation and [`GAP_ITERS`] iterations.
    #[serde(default)]
    pub pdmm: Option<PdmmConfig>,
    #[serde(default)]
    pub seed: u64,
    /// Optimal value; solved with the reference solver when absent.
    #[serde(default)]
    pub f_star: Option<f64>,
    #[serde(default = "default_distinct_tol")]
    pub distinct_rel_tol: f64,
}

/// Long enough for a tenfold gap reduction on the default instance.
pub const GAP_ITERS: usize = 40_000;

/// Ten users per cluster, each holding 85% of its cluster's pool.
fn gap_benchmark() -> BenchmarkSpec {
    BenchmarkSpec {
        users_per_cluster: 10,
        sample_fraction: Some(0.85),
        ..BenchmarkSpec::default()
    }
}

fn gap_lambda() -> f64 {
    0.02
}

impl Default for GapConfig {
    fn default() -> Self {
        Self {
            benchmark: gap_benchmark(),
            reg_c: default_reg_c(),
            lambda: gap_lambda(),
            convention: default_convention(),
            pdmm: None,
            seed: 0,
            f_star: None,
            distinct_rel_tol: default_distinct_tol(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub t: usize,
    pub objective: f64,
    pub gap: f64,
    pub uplink_msgs_cum: usize,
    pub downlink_msgs_cum: usize,
    pub num_distinct_models: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapTrace {
    pub f_star: f64,
    pub rows: Vec<GapRow>,
}

impl GapTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,objective,gap,uplink_msgs_cum,downlink_msgs_cum,num_distinct_models\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.t, r.objective, r.gap, r.uplink_msgs_cum, r.downlink_msgs_cum, r.num_distinct_models
            ));
        }
        s
    }
}

/// Runs the protocol on a sum-of-norms problem and reports `F(x^t) - F*`.
pub fn pdmm_gap_trace(
    problem: &FederationProblem,
    pdmm: &PdmmConfig,
    f_star: f64,
    distinct_rel_tol: f64,
) -> Result<GapTrace> {
    let mut distinct = Vec::new();
    let mut hook = |_t: usize, x: &[Vec<f64>]| {
        distinct.push(num_distinct_models(&Stack::new(x.to_vec()), distinct_rel_tol));
    };
    let run = pdmm_run(problem, pdmm, Some(&mut hook))?;
    let rows = run
        .trace
        .iter()
        .zip(&distinct)
        .map(|(r, &k)| GapRow {
            t: r.t,
            objective: r.objective,
            gap: r.objective - f_star,
            uplink_msgs_cum: r.uplink_msgs_cum,
            downlink_msgs_cum: r.downlink_msgs_cum,
            num_distinct_models: k,
        })
        .collect();
    Ok(GapTrace { f_star, rows })
}

/// The convergence experiment on squared hinge users.
pub fn pdmm_gap_experiment(cfg: &GapConfig) -> Result<GapTrace> {
    let data = generate(&BenchmarkSpec {
        seed: cfg.seed,
        ..cfg.benchmark.clone()
    })?;
    let problem = hinge_problem(
        &data,
        cfg.reg_c,
        PenaltyKind::SumOfNorms { lambda: cfg.lambda },
        cfg.convention,
    )?;
    let n = problem.num_users();
    let pdmm = cfg
        .pdmm
        .clone()
        .unwrap_or_else(|| PdmmConfig::damped(n, 0.4, GAP_ITERS, cfg.seed));
    let f_star = match cfg.f_star {
        Some(f) => f,
        None => {
            let oc = OracleConfig::with_method(OracleMethod::Conic);
            solve_reference(&problem, &oc)?.objective_value
        }
    };
    pdmm_gap_trace(&problem, &pdmm, f_star, cfg.distinct_rel_tol)
}
