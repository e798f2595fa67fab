//! Deterministic reference solvers.

use serde::{Deserialize, Serialize};

use crate::conic::{newton_polish, solve_conic};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dist, norm, sub, zeros};
use crate::pdmm::{dual_update, residual, x_update, z_update, KernelParams, Peer, XUpdateRule};
use crate::problem::{Convention, FederationProblem, FusionForm, Partition, PenaltyKind, Stack};
use crate::smooth::agd_restart;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OracleMethod {
    #[default]
    SerialAdmm,
    Subgradient,
    ClosedForm,
    /// Interior-point solve of a conic reformulation; quadratic and squared
    /// hinge losses only, polished with Newton steps.
    Conic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    #[serde(default)]
    pub method: OracleMethod,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Splitting penalty of the serial sweep; `None` picks `0.1 * L_max`.
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_max_iters() -> usize {
    200_000
}

fn default_tol() -> f64 {
    1e-9
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            method: OracleMethod::SerialAdmm,
            max_iters: default_max_iters(),
            tol: default_tol(),
            rho: None,
            seed: 0,
        }
    }
}

impl OracleConfig {
    pub fn with_method(method: OracleMethod) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iters == 0 || self.rho.is_some_and(|r| !(r > 0.0)) {
            return Err(Error::Config(format!("invalid oracle config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub x: Stack,
    #[serde(rename = "objective")]
    pub objective_value: f64,
    pub kkt_residual: f64,
    #[serde(rename = "iters")]
    pub iters_used: usize,
    pub converged: bool,
}

pub fn solve_reference(problem: &FederationProblem, cfg: &OracleConfig) -> Result<OracleResult> {
    solve_reference_from(problem, cfg, None)
}

/// As [`solve_reference`], starting from `init` when given.
pub fn solve_reference_from(
    problem: &FederationProblem,
    cfg: &OracleConfig,
    init: Option<&Stack>,
) -> Result<OracleResult> {
    cfg.validate()?;
    if let Some(x0) = init {
        problem.check_stack(x0)?;
    }
    let nonsmooth = matches!(
        problem.penalty(),
        PenaltyKind::SumOfNorms { .. } | PenaltyKind::ClusteredSumOfNorms { .. }
    );
    match (cfg.method, nonsmooth) {
        (OracleMethod::ClosedForm, _) => closed_form(problem),
        (OracleMethod::Conic, _) => conic(problem, cfg),
        (OracleMethod::SerialAdmm, true) => serial_admm(problem, cfg, init),
        (OracleMethod::Subgradient, true) => subgradient(problem, cfg, init),
        (_, false) => smooth(problem, cfg, init),
    }
}

fn finish(problem: &FederationProblem, x: Stack, kkt: f64, iters: usize, tol: f64) -> Result<OracleResult> {
    Ok(OracleResult {
        objective_value: problem.objective(&x)?,
        x,
        kkt_residual: kkt,
        iters_used: iters,
        converged: kkt <= tol,
    })
}

fn conic(problem: &FederationProblem, cfg: &OracleConfig) -> Result<OracleResult> {
    let first = solve_conic(problem, CONIC_TOL)?;
    let x = first.x;
    let nonsmooth = matches!(
        problem.penalty(),
        PenaltyKind::SumOfNorms { .. } | PenaltyKind::ClusteredSumOfNorms { .. }
    );
    if !nonsmooth {
        // polish with the first-order solver from the interior point
        return smooth(problem, cfg, Some(&x));
    }
    let kkt_of = |x: &Stack| problem.subgradient_residual(x, certify_tol(&x.models, 0.0));
    let mut best = (kkt_of(&x)?, x.clone());
    let polished = |p: &FederationProblem, w: &Stack| -> Result<Stack> {
        Ok(newton_polish(&p.fusion_form()?, w).unwrap_or_else(|| w.clone()))
    };
    let lambda = match problem.penalty() {
        PenaltyKind::SumOfNorms { lambda } => *lambda,
        _ => {
            let p = polished(problem, &x)?;
            let kkt = kkt_of(&p)?;
            if kkt < best.0 {
                best = (kkt, p);
            }
            let (kkt, x) = best;
            return finish(problem, x, kkt, 1, cfg.tol);
        }
    };
    // Interior iterates leave fused pairs a small distance apart and are
    // only accurate to about the square root of the duality gap. Snap the
    // pairs by re-solving over the blocks found at a few tolerances, then
    // polish each candidate with Newton steps on the reduced problem.
    let scale = x.models.iter().map(|v| norm(v)).fold(0.0, f64::max);
    let mut tried: Vec<Partition> = Vec::new();
    for rel in [1e-8, 1e-7, 1e-6, 1e-5, 1e-4] {
        if best.0 <= cfg.tol {
            break;
        }
        let part = crate::clustering::extract_partition(&x, rel * (1.0 + scale));
        if tried.iter().any(|p| p.same_grouping(&part)) {
            continue;
        }
        tried.push(part.clone());
        let lifted = if part.num_blocks() == x.len() {
            polished(problem, &x)?
        } else {
            let reduced = problem.with_penalty(PenaltyKind::ClusteredSumOfNorms {
                lambda,
                partition: part.clone(),
            })?;
            let w = solve_conic(&reduced, CONIC_TOL)?.x;
            polished(&reduced, &w)?.lift(&part)
        };
        let kkt = kkt_of(&lifted)?;
        if kkt < best.0 {
            best = (kkt, lifted);
        }
    }
    let (kkt, x) = best;
    finish(problem, x, kkt, 1, cfg.tol)
}

const CONIC_TOL: f64 = 1e-12;

/// Tie tolerance used to certify an iterate whose fused pairs still differ
/// by roughly `slack`.
fn certify_tol(x: &[Vec<f64>], slack: f64) -> f64 {
    let scale = x.iter().map(|v| norm(v)).fold(0.0, f64::max);
    1e-9 * (1.0 + scale) + 10.0 * slack
}

/// Stable defaults for the serial sweep: `rho = 0.1 * L_max`,
/// `eta_x = eta_z = 2 rho`, undamped duals.
pub fn sweep_params(ff: &FusionForm, rho: Option<f64>) -> KernelParams {
    let l_max = (0..ff.num_vars()).map(|k| ff.cost_lipschitz(k)).fold(0.0, f64::max);
    let rho = rho.unwrap_or((0.1 * l_max).max(1e-6));
    KernelParams {
        rho,
        eta_x: 2.0 * rho,
        eta_z: 2.0 * rho,
        tau: 1.0,
        nu: 0.0,
        x_rule: XUpdateRule::BlockExact,
        inner_tol: 1e-12,
        inner_max_iters: 2000,
    }
}

/// Full Jacobi sweep of the protocol's block steps: every `x_i` and every
/// `z_ij` from the previous iterate, then every dual.
#[derive(Debug, Clone)]
pub struct SerialAdmm {
    ff: FusionForm,
    kp: KernelParams,
    x: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    mu: Vec<Vec<f64>>,
    mu_hat: Vec<Vec<f64>>,
    iters: usize,
    inner_warnings: usize,
}

impl SerialAdmm {
    /// Starts at `init` with `z_ij = x_i - x_j` and zero duals.
    pub fn new(problem: &FederationProblem, kp: KernelParams, init: &Stack) -> Result<Self> {
        kp.validate()?;
        problem.check_stack(init)?;
        let ff = problem.fusion_form()?;
        let n = ff.num_vars();
        let d = ff.dim;
        let x = init.models.clone();
        let mut z = vec![zeros(d); n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    z[i * n + j] = sub(&x[i], &x[j]);
                }
            }
        }
        Ok(Self {
            ff,
            kp,
            x,
            z,
            mu: vec![zeros(d); n * n],
            mu_hat: vec![zeros(d); n * n],
            iters: 0,
            inner_warnings: 0,
        })
    }

    pub fn x(&self) -> &[Vec<f64>] {
        &self.x
    }

    pub fn iters(&self) -> usize {
        self.iters
    }

    pub fn inner_warnings(&self) -> usize {
        self.inner_warnings
    }

    /// One sweep; returns the largest coordinate change of `x`.
    pub fn step(&mut self) -> f64 {
        let n = self.x.len();
        let x_next: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let peers: Vec<Peer<'_>> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| Peer {
                        x_j: &self.x[j],
                        x_j_owned: &self.x[j],
                        z_ij: &self.z[i * n + j],
                        mu_hat_ij: &self.mu_hat[i * n + j],
                        z_ji: &self.z[j * n + i],
                        mu_hat_ji: &self.mu_hat[j * n + i],
                    })
                    .collect();
                let s = x_update(&self.ff, i, &self.x[i], &peers, &self.kp);
                if !s.converged {
                    self.inner_warnings += 1;
                }
                s.value
            })
            .collect();
        let mut z_next = self.z.clone();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let p = i * n + j;
                    z_next[p] = z_update(
                        &self.x[i],
                        &self.x[j],
                        &self.mu_hat[p],
                        &self.z[p],
                        self.ff.omega(i, j),
                        &self.kp,
                    );
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let p = i * n + j;
                    let r = residual(&x_next[i], &x_next[j], &z_next[p]);
                    let (mu, mu_hat) = dual_update(&self.mu[p], &r, &self.kp);
                    self.mu[p] = mu;
                    self.mu_hat[p] = mu_hat;
                }
            }
        }
        let change = self
            .x
            .iter()
            .zip(&x_next)
            .map(|(a, b)| crate::linalg::max_abs_diff(a, b))
            .fold(0.0, f64::max);
        self.x = x_next;
        self.z = z_next;
        self.iters += 1;
        change
    }

    /// `max ||x_i - x_j - z_ij||`.
    pub fn primal_residual(&self) -> f64 {
        let n = self.x.len();
        let mut m = 0.0_f64;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    m = m.max(norm(&residual(&self.x[i], &self.x[j], &self.z[i * n + j])));
                }
            }
        }
        m
    }
}

fn serial_admm(problem: &FederationProblem, cfg: &OracleConfig, init: Option<&Stack>) -> Result<OracleResult> {
    let ff = problem.fusion_form()?;
    let kp = sweep_params(&ff, cfg.rho);
    let x0 = init.cloned().unwrap_or_else(|| Stack::zeros(ff.num_vars(), ff.dim));
    let mut admm = SerialAdmm::new(problem, kp, &x0)?;
    let mut kkt = f64::INFINITY;
    let mut next_check = 10;
    while admm.iters() < cfg.max_iters {
        let change = admm.step();
        if admm.iters() < next_check {
            continue;
        }
        let pr = admm.primal_residual();
        if pr <= cfg.tol && change <= cfg.tol {
            let x = Stack::new(admm.x().to_vec());
            kkt = problem.subgradient_residual(&x, certify_tol(&x.models, pr))?;
            if kkt <= cfg.tol {
                break;
            }
            next_check = admm.iters() + 50;
        } else {
            next_check = admm.iters() + 10;
        }
    }
    let x = Stack::new(admm.x().to_vec());
    if !kkt.is_finite() || kkt > cfg.tol {
        kkt = problem.subgradient_residual(&x, certify_tol(&x.models, admm.primal_residual()))?;
    }
    let iters = admm.iters();
    finish(problem, x, kkt, iters, cfg.tol)
}

/// Diminishing-step subgradient descent, `a_t = a_0 / sqrt(t+1)` with
/// `a_0 = 1 / L_max`, returning the best iterate.
///
/// The subgradient is the minimum-norm element over the pairs currently
/// within `a_t * ||g||` of each other. When that element moves a tied group
/// rigidly, the group is first snapped to its mean, so groups that should
/// fuse fuse exactly instead of chattering across the kink.
fn subgradient(problem: &FederationProblem, cfg: &OracleConfig, init: Option<&Stack>) -> Result<OracleResult> {
    let ff = problem.fusion_form()?;
    let k = ff.num_vars();
    let l_max = (0..k).map(|a| ff.cost_lipschitz(a)).fold(0.0, f64::max);
    let a0 = 1.0 / l_max;
    let mut x = init.map_or_else(|| vec![zeros(ff.dim); k], |s| s.models.clone());
    let mut best = x.clone();
    let mut best_f = ff.value(&x);
    let mut g_scale = ff.subgradient(&x).iter().map(|g| norm(g)).fold(0.0, f64::max);
    let mut iters = 0;
    for t in 0..cfg.max_iters {
        let step = a0 / ((t + 1) as f64).sqrt();
        let tie = (step * g_scale).max(1e-14);
        let (mut g, comps) = ff.fitted_residuals(&x, tie);
        for comp in &comps {
            let r0 = g[comp[0]].clone();
            let spread = comp.iter().map(|&a| dist(&g[a], &r0)).fold(0.0, f64::max);
            if spread <= 1e-10 * (1.0 + norm(&r0)) {
                let centre = crate::linalg::mean(&comp.iter().map(|&a| x[a].clone()).collect::<Vec<_>>());
                for &a in comp {
                    x[a].clone_from(&centre);
                    g[a].clone_from(&r0);
                }
            }
        }
        g_scale = g.iter().map(|v| norm(v)).fold(0.0, f64::max);
        iters = t + 1;
        let f_here = ff.value(&x);
        if f_here <= best_f {
            best_f = f_here;
            best.clone_from(&x);
        }
        if g_scale * problem.alpha() <= cfg.tol {
            break;
        }
        for (xa, ga) in x.iter_mut().zip(&g) {
            axpy(xa, -step, ga);
        }
        let f_next = ff.value(&x);
        if f_next <= best_f {
            best_f = f_next;
            best.clone_from(&x);
        }
        if t % 100 == 99 && problem.subgradient_residual(&Stack::new(best.clone()), certify_tol(&best, 0.0))? <= cfg.tol
        {
            break;
        }
    }
    let xs = Stack::new(best);
    let kkt = problem.subgradient_residual(&xs, certify_tol(&xs.models, 0.0))?;
    finish(problem, xs, kkt, iters, cfg.tol)
}

/// Accelerated gradient on the smooth formulations.
fn smooth(problem: &FederationProblem, cfg: &OracleConfig, init: Option<&Stack>) -> Result<OracleResult> {
    let n = problem.num_users();
    let d = problem.dim();
    let alpha = problem.alpha();
    let losses = problem.losses();
    let l_max = losses.iter().map(|l| l.lipschitz()).fold(0.0, f64::max);
    match problem.penalty() {
        PenaltyKind::LocalOnly => {
            let mut models = Vec::with_capacity(n);
            let mut iters = 0;
            for (i, f) in losses.iter().enumerate() {
                let x0 = init.map_or_else(|| zeros(d), |s| s.models[i].clone());
                let r = agd_restart(
                    |x: &[f64], g: &mut [f64]| {
                        g.iter_mut().for_each(|v| *v = 0.0);
                        f.add_grad(x, alpha, g);
                    },
                    &x0,
                    alpha * f.lipschitz(),
                    cfg.tol,
                    cfg.max_iters,
                );
                iters = iters.max(r.iters);
                models.push(r.x);
            }
            let x = Stack::new(models);
            let kkt = problem.subgradient_residual(&x, 1.0)?;
            finish(problem, x, kkt, iters, cfg.tol)
        }
        PenaltyKind::GlobalConsensus => {
            let x0 = init.map_or_else(|| zeros(d), |s| s.models[0].clone());
            let l: f64 = alpha * losses.iter().map(|f| f.lipschitz()).sum::<f64>();
            let r = agd_restart(
                |x: &[f64], g: &mut [f64]| {
                    g.iter_mut().for_each(|v| *v = 0.0);
                    for f in losses {
                        f.add_grad(x, alpha, g);
                    }
                },
                &x0,
                l,
                cfg.tol,
                cfg.max_iters,
            );
            let x = Stack::new(vec![r.x]);
            finish(problem, x, r.grad_norm, r.iters, cfg.tol)
        }
        PenaltyKind::SquaredNorms { gamma } => {
            let c = 2.0 * gamma * problem.convention().pair_factor();
            let l = alpha * l_max + c * n as f64;
            let x0: Vec<f64> = init.map_or_else(|| vec![0.0; n * d], |s| s.models.concat());
            let r = agd_restart(
                |x: &[f64], g: &mut [f64]| {
                    let mut total = zeros(d);
                    for i in 0..n {
                        axpy(&mut total, 1.0, &x[i * d..(i + 1) * d]);
                    }
                    for (i, f) in losses.iter().enumerate() {
                        let xi = &x[i * d..(i + 1) * d];
                        let gi = &mut g[i * d..(i + 1) * d];
                        for q in 0..d {
                            gi[q] = c * (n as f64 * xi[q] - total[q]);
                        }
                        f.add_grad(xi, alpha, gi);
                    }
                },
                &x0,
                l,
                cfg.tol,
                cfg.max_iters,
            );
            let x = Stack::new(r.x.chunks(d).map(<[f64]>::to_vec).collect());
            let kkt = problem.subgradient_residual(&x, 1.0)?;
            finish(problem, x, kkt, r.iters, cfg.tol)
        }
        _ => Err(Error::Unsupported("smooth solver on a nonsmooth problem".into())),
    }
}

/// Exact minimizers of the quadratic instances that have one.
fn closed_form(problem: &FederationProblem) -> Result<OracleResult> {
    let quad: Vec<(f64, &[f64])> = problem
        .losses()
        .iter()
        .map(|l| l.as_quadratic())
        .collect::<Option<_>>()
        .ok_or_else(|| Error::Unsupported("closed form needs quadratic losses".into()))?;
    let d = problem.dim();
    let weighted_mean = |members: &[usize]| {
        let mut m = zeros(d);
        let mut s = 0.0;
        for &i in members {
            axpy(&mut m, quad[i].0, quad[i].1);
            s += quad[i].0;
        }
        m.iter().map(|v| v / s).collect::<Vec<f64>>()
    };
    let models: Vec<Vec<f64>> = match problem.penalty() {
        PenaltyKind::LocalOnly => quad.iter().map(|q| q.1.to_vec()).collect(),
        PenaltyKind::SumOfNorms { lambda } if *lambda == 0.0 => quad.iter().map(|q| q.1.to_vec()).collect(),
        PenaltyKind::GlobalConsensus => vec![weighted_mean(&(0..quad.len()).collect::<Vec<_>>())],
        PenaltyKind::ClusteredSumOfNorms { lambda, partition } if *lambda == 0.0 => {
            partition.blocks().iter().map(|b| weighted_mean(b)).collect()
        }
        PenaltyKind::SquaredNorms { gamma } => {
            let n = quad.len() as f64;
            let beta = 2.0 * gamma * problem.convention().pair_factor() / problem.alpha();
            let mut num = zeros(d);
            let mut den = 1.0;
            for (s, a) in &quad {
                axpy(&mut num, s / (s + beta * n), a);
                den -= beta / (s + beta * n);
            }
            let total: Vec<f64> = num.iter().map(|v| v / den).collect();
            quad.iter()
                .map(|(s, a)| (0..d).map(|q| (s * a[q] + beta * total[q]) / (s + beta * n)).collect())
                .collect()
        }
        other => {
            return Err(Error::Unsupported(format!("no closed form for {other:?}")));
        }
    };
    let x = Stack::new(models);
    let kkt = problem.subgradient_residual(&x, 1e-12)?;
    finish(problem, x, kkt, 0, f64::INFINITY)
}

/// Smallest `lambda` at which the two-user quadratic instance with anchors
/// `a1`, `a2` has a consensual solution, in the units of `convention`.
pub fn two_point_threshold(a1: &[f64], a2: &[f64], convention: Convention) -> f64 {
    dist(a1, a2) / (2.0 * convention.kappa(2))
}
