//! Cluster extraction from solution stacks and warm-started lambda paths.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dist, norm};
use crate::oracle::{solve_reference, solve_reference_from, OracleConfig};
use crate::pdmm::{pdmm_run, Init, PdmmConfig};
use crate::problem::{FederationProblem, Partition, PenaltyKind, Stack, UnionFind};
use crate::theory::{aposteriori_recovery_check, RecoveryCertificate};

/// Connected components of the graph joining models within `tie_tol`.
/// Blocks are ordered by their smallest member.
pub fn extract_partition(x: &Stack, tie_tol: f64) -> Partition {
    let n = x.len();
    let mut uf = UnionFind::new(n);
    for i in 0..n {
        for j in i + 1..n {
            if dist(&x[i], &x[j]) <= tie_tol {
                uf.union(i, j);
            }
        }
    }
    let labels: Vec<usize> = (0..n).map(|i| uf.find(i)).collect();
    Partition::from_labels(&labels)
}

/// `1e-5 * (1 + mean ||x_i||)`.
pub fn default_tie_tol(x: &Stack) -> f64 {
    1e-5 * (1.0 + x.mean_norm())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PathSolver {
    Oracle(OracleConfig),
    Pdmm(PdmmConfig),
}

impl Default for PathSolver {
    fn default() -> Self {
        PathSolver::Oracle(OracleConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathConfig {
    /// `None` picks [`default_lambda_init`].
    #[serde(default)]
    pub lambda_init: Option<f64>,
    #[serde(default = "default_growth")]
    pub growth_c: f64,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    /// Absolute tie tolerance; `None` picks [`default_tie_tol`] per entry.
    #[serde(default)]
    pub tie_tol: Option<f64>,
    #[serde(default)]
    pub solver: PathSolver,
    /// Attach an a-posteriori recovery certificate to every entry.
    #[serde(default)]
    pub certify: bool,
}

fn default_growth() -> f64 {
    1.5
}

fn default_max_steps() -> usize {
    100
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            lambda_init: None,
            growth_c: default_growth(),
            max_steps: default_max_steps(),
            tie_tol: None,
            solver: PathSolver::default(),
            certify: false,
        }
    }
}

impl PathConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.growth_c > 1.0 && self.growth_c.is_finite()) {
            return Err(Error::Config(format!("growth_c must exceed 1, got {}", self.growth_c)));
        }
        if self.lambda_init.is_some_and(|l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::Config("lambda_init must be positive".into()));
        }
        if self.tie_tol.is_some_and(|t| !(t > 0.0)) {
            return Err(Error::Config("tie_tol must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathEntry {
    pub lambda: f64,
    pub x: Stack,
    pub objective: f64,
    pub num_clusters: usize,
    pub partition: Partition,
    pub converged: bool,
    pub certificate: Option<RecoveryCertificate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionPath {
    pub entries: Vec<PathEntry>,
}

impl SolutionPath {
    /// One JSON document per line.
    pub fn to_json_lines(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("path entries serialize") + "\n")
            .collect()
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("lambda,num_clusters,objective\n");
        for e in &self.entries {
            s.push_str(&format!("{},{},{}\n", e.lambda, e.num_clusters, e.objective));
        }
        s
    }
}

/// `0.01 * max_{i,j} ||grad f_i(xbar) - grad f_j(xbar)|| / (N kappa)` at the
/// consensus solution `xbar`, in the problem's convention.
pub fn default_lambda_init(problem: &FederationProblem) -> Result<f64> {
    let global = problem.with_penalty(PenaltyKind::GlobalConsensus)?;
    let xbar = solve_reference(&global, &OracleConfig::default())?.x.models.remove(0);
    let grads: Vec<Vec<f64>> = problem.losses().iter().map(|f| f.grad(&xbar)).collect::<Result<_>>()?;
    let mut gap: f64 = 0.0;
    for i in 0..grads.len() {
        for j in i + 1..grads.len() {
            gap = gap.max(dist(&grads[i], &grads[j]));
        }
    }
    let n = problem.num_users() as f64;
    let scale = gap / (n * problem.kappa());
    Ok(if scale > 0.0 { 0.01 * scale } else { 1e-3 })
}

/// Geometric lambda sweep with warm starts, stopping at the first entry with
/// a single cluster.
pub fn solution_path(problem: &FederationProblem, cfg: &PathConfig) -> Result<SolutionPath> {
    cfg.validate()?;
    if !matches!(problem.penalty(), PenaltyKind::SumOfNorms { .. }) {
        return Err(Error::Unsupported("solution paths need a sum-of-norms problem".into()));
    }
    let mut lambda = match cfg.lambda_init {
        Some(l) => l,
        None => default_lambda_init(problem)?,
    };
    let mut warm: Option<Stack> = None;
    let mut entries = Vec::new();
    for _ in 0..cfg.max_steps {
        let p = problem.with_penalty(PenaltyKind::SumOfNorms { lambda })?;
        let (x, converged) = match &cfg.solver {
            PathSolver::Oracle(oc) => {
                let r = solve_reference_from(&p, oc, warm.as_ref())?;
                (r.x, r.converged)
            }
            PathSolver::Pdmm(pc) => {
                let mut pc = pc.clone();
                if let Some(w) = &warm {
                    pc.init = Init::Warm(w.models.clone());
                }
                let run = pdmm_run(&p, &pc, None)?;
                let ok = run.trace.iter().all(|r| r.inner_warnings == 0);
                (Stack::new(run.state.x), ok)
            }
        };
        let tol = cfg.tie_tol.unwrap_or_else(|| default_tie_tol(&x));
        let partition = extract_partition(&x, tol);
        let certificate = if cfg.certify {
            Some(aposteriori_recovery_check(&p, &x, tol)?)
        } else {
            None
        };
        let num_clusters = partition.num_blocks();
        entries.push(PathEntry {
            lambda,
            objective: p.objective(&x)?,
            x: x.clone(),
            num_clusters,
            partition,
            converged,
            certificate,
        });
        if num_clusters == 1 {
            break;
        }
        warm = Some(x);
        lambda *= cfg.growth_c;
    }
    Ok(SolutionPath { entries })
}

/// Mean over clusters of the average pairwise distance between member models.
pub fn within_cluster_distance(x: &Stack, partition: &Partition) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for b in partition.blocks() {
        if b.len() < 2 {
            continue;
        }
        let mut s = 0.0;
        let mut m = 0usize;
        for (a, &i) in b.iter().enumerate() {
            for &j in &b[a + 1..] {
                s += dist(&x[i], &x[j]);
                m += 1;
            }
        }
        total += s / m as f64;
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Number of blocks of [`extract_partition`] with a tolerance relative to
/// the largest model norm.
pub fn num_distinct_models(x: &Stack, rel_tol: f64) -> usize {
    let scale = x.models.iter().map(|m| norm(m)).fold(0.0, f64::max);
    extract_partition(x, rel_tol * (1.0 + scale)).num_blocks()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack1(v: &[f64]) -> Stack {
        Stack::new(v.iter().map(|&a| vec![a]).collect())
    }

    #[test]
    fn near_ties_merge() {
        let p = extract_partition(&stack1(&[0.0, 1e-9, 5.0]), 1e-6);
        assert_eq!(p.blocks(), &[vec![0, 1], vec![2]]);
    }

    #[test]
    fn chaining_joins_far_ends() {
        let t = 0.1;
        let p = extract_partition(&stack1(&[0.0, 0.9 * t, 1.8 * t]), t);
        assert_eq!(p.num_blocks(), 1);
    }

    #[test]
    fn all_equal_single_block() {
        assert_eq!(extract_partition(&stack1(&[2.0; 5]), 1e-9).num_blocks(), 1);
    }
}
