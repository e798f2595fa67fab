//! Executable recovery conditions: the fusion threshold that guarantees each
//! planted cluster collapses onto its clustered solution, the separation
//! threshold that keeps clusters apart, their conservative sublevel-set
//! versions and the homogeneity/heterogeneity profile behind them.
//!
//! All thresholds are returned in the `lambda` units of the problem's
//! convention.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::clustering::extract_partition;
use crate::error::{check_dim, Error, Result};
use crate::linalg::{dist, norm, zeros};
use crate::losses::LossSpec;
use crate::oracle::{solve_reference, OracleConfig};
use crate::problem::{Convention, FederationProblem, Partition, PenaltyKind, Stack};
use crate::smooth::agd_restart;

fn grad(f: &LossSpec, x: &[f64]) -> Vec<f64> {
    let mut g = zeros(x.len());
    f.add_grad(x, 1.0, &mut g);
    g
}

/// `grad g_k(x)`, the average gradient over block `b`.
fn block_grad(losses: &[LossSpec], b: &[usize], x: &[f64]) -> Vec<f64> {
    let mut g = zeros(x.len());
    for &i in b {
        losses[i].add_grad(x, 1.0 / b.len() as f64, &mut g);
    }
    g
}

/// `2 max_k sum_{l != k} n_l`.
fn separation_denominator(partition: &Partition) -> f64 {
    let n = partition.num_users();
    let smallest = partition.sizes().into_iter().min().unwrap_or(0);
    2.0 * (n - smallest) as f64
}

/// Common scale when every loss is quadratic with the same curvature; then
/// all gradient gaps are constant in the argument.
fn common_quadratic_scale(losses: &[LossSpec]) -> Option<f64> {
    let s = losses.first()?.as_quadratic()?.0;
    losses
        .iter()
        .all(|f| f.as_quadratic().is_some_and(|(t, _)| t == s))
        .then_some(s)
}

fn check_clustered(problem: &FederationProblem, partition: &Partition, w: &Stack) -> Result<()> {
    partition.validate(problem.num_users())?;
    check_dim("clustered solution length", partition.num_blocks(), w.len())?;
    for m in &w.models {
        check_dim("clustered model dimension", problem.dim(), m.len())?;
    }
    Ok(())
}

fn intra_gap(losses: &[LossSpec], b: &[usize], x: &[f64]) -> f64 {
    let gs: Vec<Vec<f64>> = b.iter().map(|&i| grad(&losses[i], x)).collect();
    let mut m: f64 = 0.0;
    for a in 0..gs.len() {
        for c in a + 1..gs.len() {
            m = m.max(dist(&gs[a], &gs[c]));
        }
    }
    m
}

/// Smallest `lambda` at which every cluster of `partition` is certified to
/// fuse onto the clustered solution `w`:
/// `max_k max_{i,j in C_k} ||grad f_i(w_k) - grad f_j(w_k)|| / n_k`, divided
/// by the convention factor `kappa`.
pub fn theorem1_threshold(problem: &FederationProblem, partition: &Partition, w: &Stack) -> Result<f64> {
    check_clustered(problem, partition, w)?;
    let losses = problem.losses();
    let m = partition
        .blocks()
        .iter()
        .zip(&w.models)
        .map(|(b, wk)| intra_gap(losses, b, wk) / b.len() as f64)
        .fold(0.0, f64::max);
    Ok(m / problem.kappa())
}

/// Largest `lambda` (exclusive) below which the clustered solution `w` is
/// certified to keep all clusters distinct:
/// `min_{k != l} ||grad g_k(w_k) - grad g_l(w_k)|| / (2 max_k sum_{l != k} n_l)`,
/// divided by `kappa`. Infinite for a single cluster.
pub fn theorem2_threshold(problem: &FederationProblem, partition: &Partition, w: &Stack) -> Result<f64> {
    check_clustered(problem, partition, w)?;
    let k = partition.num_blocks();
    if k < 2 {
        return Ok(f64::INFINITY);
    }
    let losses = problem.losses();
    let blocks = partition.blocks();
    let mut m = f64::INFINITY;
    for a in 0..k {
        let ga = block_grad(losses, &blocks[a], &w[a]);
        for b in 0..k {
            if a != b {
                m = m.min(dist(&ga, &block_grad(losses, &blocks[b], &w[a])));
            }
        }
    }
    Ok(m / separation_denominator(partition) / problem.kappa())
}

/// Points of `{w : (1/N) sum_k n_k g_k(w_k) <= upper_value}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SublevelBox {
    pub upper_value: f64,
    pub sample_points: Vec<Stack>,
    pub sampler_seed: u64,
}

/// `(1/N) sum_k sum_{i in C_k} f_i(w_k)`.
pub fn clustered_loss(problem: &FederationProblem, partition: &Partition, w: &Stack) -> f64 {
    let losses = problem.losses();
    let s: f64 = partition
        .blocks()
        .iter()
        .zip(&w.models)
        .map(|(b, wk)| b.iter().map(|&i| losses[i].value_unchecked(wk)).sum::<f64>())
        .sum();
    s / problem.num_users() as f64
}

/// `(1/N) sum_i f_i(y)` at the consensus minimizer `y`.
pub fn consensus_value(problem: &FederationProblem) -> Result<f64> {
    let global = problem.with_penalty(PenaltyKind::GlobalConsensus)?;
    let y = solve_reference(&global, &OracleConfig::default())?.x;
    let n = problem.num_users() as f64;
    Ok(problem.losses().iter().map(|f| f.value_unchecked(&y[0])).sum::<f64>() / n)
}

impl SublevelBox {
    /// Draws `count` points of the sublevel set at `upper_value` (default:
    /// the consensus value). Common-scale quadratics sample the sublevel
    /// ellipsoid exactly; other losses use a radial sampler around the
    /// minimizer of `G`.
    pub fn sample(
        problem: &FederationProblem,
        partition: &Partition,
        upper_value: Option<f64>,
        count: usize,
        seed: u64,
    ) -> Result<Self> {
        partition.validate(problem.num_users())?;
        let upper = match upper_value {
            Some(u) => u,
            None => consensus_value(problem)?,
        };
        let center = cluster_minimizers(problem, partition)?;
        let base = clustered_loss(problem, partition, &center);
        if base > upper + 1e-9 {
            return Err(Error::Config(format!(
                "upper value {upper} lies below the minimum {base} of the clustered loss"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = match common_quadratic_scale(problem.losses()) {
            Some(s) => ellipsoid_points(problem, partition, &center, upper, s, count, &mut rng),
            None => radial_points(problem, partition, &center, upper, count, &mut rng)?,
        };
        Ok(Self {
            upper_value: upper,
            sample_points: points,
            sampler_seed: seed,
        })
    }
}

/// Per-cluster minimizers of `g_k`.
fn cluster_minimizers(problem: &FederationProblem, partition: &Partition) -> Result<Stack> {
    let losses = problem.losses();
    let d = problem.dim();
    let mut out = Vec::new();
    for b in partition.blocks() {
        let l: f64 = b.iter().map(|&i| losses[i].lipschitz()).sum::<f64>() / b.len() as f64;
        let r = agd_restart(
            |x, g| g.copy_from_slice(&block_grad(losses, b, x)),
            &zeros(d),
            l,
            1e-10,
            200_000,
        );
        out.push(r.x);
    }
    Ok(Stack::new(out))
}

/// Uniform points of the ellipsoid
/// `(s / 2N) sum_k n_k ||w_k - c_k||^2 <= upper - G(c)`, drawn directly
/// rather than by rejection from its bounding box, whose acceptance rate
/// decays geometrically in `K d` and vanishes when the set is a point.
fn ellipsoid_points(
    problem: &FederationProblem,
    partition: &Partition,
    center: &Stack,
    upper: f64,
    scale: f64,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Stack> {
    let n = problem.num_users() as f64;
    let slack = (upper - clustered_loss(problem, partition, center)).max(0.0);
    let axes: Vec<f64> = partition
        .sizes()
        .iter()
        .map(|&nk| (2.0 * n / (scale * nk as f64)).sqrt())
        .collect();
    let m = center.len() * problem.dim();
    (0..count)
        .map(|_| {
            let u: Vec<Vec<f64>> = center
                .models
                .iter()
                .map(|c| c.iter().map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
                .collect();
            let len = u
                .iter()
                .map(|v| norm(v).powi(2))
                .sum::<f64>()
                .sqrt()
                .max(f64::MIN_POSITIVE);
            let frac: f64 = rng.gen_range(0.0..=1.0);
            // shrink a hair so rounding keeps the point inside
            let r = (1.0 - 1e-12) * slack.sqrt() * frac.powf(1.0 / m as f64) / len;
            Stack::new(
                center
                    .models
                    .iter()
                    .zip(&u)
                    .zip(&axes)
                    .map(|((c, v), ax)| c.iter().zip(v).map(|(ci, vi)| ci + r * ax * vi).collect())
                    .collect(),
            )
        })
        .collect()
}

fn radial_points(
    problem: &FederationProblem,
    partition: &Partition,
    center: &Stack,
    upper: f64,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Stack>> {
    let k = center.len();
    let d = problem.dim();
    let at = |u: &[Vec<f64>], t: f64| {
        Stack::new(
            center
                .models
                .iter()
                .zip(u)
                .map(|(c, v)| c.iter().zip(v).map(|(a, b)| a + t * b).collect())
                .collect(),
        )
    };
    let inside = |u: &[Vec<f64>], t: f64| clustered_loss(problem, partition, &at(u, t)) <= upper;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut u: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let len = u.iter().map(|v| norm(v).powi(2)).sum::<f64>().sqrt();
        for v in &mut u {
            for a in v.iter_mut() {
                *a /= len;
            }
        }
        let mut hi = 1.0;
        let mut doublings = 0;
        while inside(&u, hi) {
            hi *= 2.0;
            doublings += 1;
            if doublings > 80 {
                return Err(Error::Data("sublevel set is unbounded along a sampled ray".into()));
            }
        }
        let mut lo = 0.0;
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if inside(&u, mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let frac: f64 = rng.gen_range(0.0..=1.0);
        out.push(at(&u, lo * frac.powf(1.0 / (k * d) as f64)));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConservativeBounds {
    pub lambda_lower: f64,
    pub lambda_upper: f64,
    /// True when the bounds come from samples: the lower bound may then
    /// under-estimate its supremum and the upper bound over-estimate its
    /// infimum.
    pub approximate: bool,
}

impl ConservativeBounds {
    pub fn nonempty(&self) -> bool {
        self.lambda_lower < self.lambda_upper
    }
}

/// Threshold formulas maximized (lower) and minimized (upper) over the
/// sublevel set. Exact for common-scale quadratics.
pub fn conservative_bounds(
    problem: &FederationProblem,
    partition: &Partition,
    sampler: &SublevelBox,
) -> Result<ConservativeBounds> {
    partition.validate(problem.num_users())?;
    if common_quadratic_scale(problem.losses()).is_some() {
        let w = Stack::zeros(partition.num_blocks(), problem.dim());
        return Ok(ConservativeBounds {
            lambda_lower: theorem1_threshold(problem, partition, &w)?,
            lambda_upper: theorem2_threshold(problem, partition, &w)?,
            approximate: false,
        });
    }
    if sampler.sample_points.is_empty() {
        return Err(Error::Config("conservative bounds need sublevel-set samples".into()));
    }
    let mut lower: f64 = 0.0;
    let mut upper = f64::INFINITY;
    for w in &sampler.sample_points {
        lower = lower.max(theorem1_threshold(problem, partition, w)?);
        upper = upper.min(theorem2_threshold(problem, partition, w)?);
    }
    Ok(ConservativeBounds {
        lambda_lower: lower,
        lambda_upper: upper,
        approximate: true,
    })
}

/// Within-cluster gradient-gap bounds `eps` and cross-cluster gaps `delta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityProfile {
    pub eps: Vec<f64>,
    /// Symmetric K x K, zero diagonal.
    pub delta: Vec<Vec<f64>>,
    pub exact: bool,
}

/// Exact for common-scale quadratics (gaps are constant); otherwise `eps`
/// is the largest gap seen at the probes and `delta` the smallest.
pub fn assumption3_profile(
    problem: &FederationProblem,
    partition: &Partition,
    probe_points: &[Vec<f64>],
) -> Result<HeterogeneityProfile> {
    partition.validate(problem.num_users())?;
    let losses = problem.losses();
    let exact = common_quadratic_scale(losses).is_some();
    let probes: Vec<Vec<f64>> = if exact {
        vec![zeros(problem.dim())]
    } else if probe_points.is_empty() {
        return Err(Error::Config("non-quadratic profiles need probe points".into()));
    } else {
        for p in probe_points {
            check_dim("probe point", problem.dim(), p.len())?;
        }
        probe_points.to_vec()
    };
    let blocks = partition.blocks();
    let k = blocks.len();
    let mut eps = vec![0.0_f64; k];
    let mut delta = vec![vec![f64::INFINITY; k]; k];
    for x in &probes {
        let g: Vec<Vec<f64>> = losses.iter().map(|f| grad(f, x)).collect();
        for a in 0..k {
            for (p, &i) in blocks[a].iter().enumerate() {
                for &j in &blocks[a][p + 1..] {
                    eps[a] = eps[a].max(dist(&g[i], &g[j]));
                }
            }
            for b in a + 1..k {
                for &i in &blocks[a] {
                    for &j in &blocks[b] {
                        let v = dist(&g[i], &g[j]);
                        if v < delta[a][b] {
                            delta[a][b] = v;
                            delta[b][a] = v;
                        }
                    }
                }
            }
        }
    }
    for (a, row) in delta.iter_mut().enumerate() {
        row[a] = 0.0;
    }
    Ok(HeterogeneityProfile { eps, delta, exact })
}

/// `[max_k eps_k / n_k, min_{k != l} (delta_kl - eps_k - eps_l) / (2 max_k sum_{l != k} n_l)]`
/// divided by `kappa`, or `None` when empty.
pub fn theorem3_interval(
    profile: &HeterogeneityProfile,
    partition: &Partition,
    convention: Convention,
) -> Option<(f64, f64)> {
    let sizes = partition.sizes();
    let k = sizes.len();
    let kappa = convention.kappa(partition.num_users());
    let lo = profile
        .eps
        .iter()
        .zip(&sizes)
        .map(|(e, &n)| e / n as f64)
        .fold(0.0, f64::max)
        / kappa;
    let mut num = f64::INFINITY;
    for a in 0..k {
        for b in 0..k {
            if a != b {
                num = num.min(profile.delta[a][b] - profile.eps[a] - profile.eps[b]);
            }
        }
    }
    let hi = if k < 2 {
        f64::INFINITY
    } else {
        num / separation_denominator(partition) / kappa
    };
    (hi > 0.0 && lo <= hi).then_some((lo, hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairCheck {
    pub i: usize,
    pub j: usize,
    pub same_cluster: bool,
    pub distance: f64,
    /// `eps_k / mu` within a cluster, `delta_kl / L` across clusters.
    pub bound: f64,
    /// Nonnegative when the inequality holds.
    pub margin: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationChecks {
    pub mu: f64,
    pub lipschitz: f64,
    /// One entry per pair `i < j`.
    pub pairs: Vec<PairCheck>,
}

impl SeparationChecks {
    pub fn all_hold(&self) -> bool {
        self.pairs.iter().all(|p| p.holds)
    }

    /// `holds` as an N x N matrix; the diagonal is true.
    pub fn matrix(&self, n: usize) -> Vec<Vec<bool>> {
        let mut m = vec![vec![true; n]; n];
        for p in &self.pairs {
            m[p.i][p.j] = p.holds;
            m[p.j][p.i] = p.holds;
        }
        m
    }
}

/// Compares distances between local minimizers with `eps_k / mu` inside
/// clusters and `delta_kl / L` across them, where `mu` is the smallest
/// strong convexity modulus and `L` the largest Lipschitz constant.
pub fn theorem4_separation(
    profile: &HeterogeneityProfile,
    losses: &[LossSpec],
    partition: &Partition,
    local_optima: &[Vec<f64>],
) -> Result<SeparationChecks> {
    partition.validate(losses.len())?;
    check_dim("local optima", losses.len(), local_optima.len())?;
    let mut mu = f64::INFINITY;
    for (i, f) in losses.iter().enumerate() {
        match f.strong_mu() {
            Some(m) if m > 0.0 && f.strongly_convex_all_coords() => mu = mu.min(m),
            _ => return Err(Error::MissingStrongConvexity(i)),
        }
    }
    let lipschitz = losses.iter().map(|f| f.lipschitz()).fold(0.0, f64::max);
    let labels = partition.labels();
    let n = losses.len();
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (labels[i], labels[j]);
            let distance = dist(&local_optima[i], &local_optima[j]);
            let (bound, margin) = if a == b {
                let bound = profile.eps[a] / mu;
                (bound, bound - distance)
            } else {
                let bound = profile.delta[a][b] / lipschitz;
                (bound, distance - bound)
            };
            pairs.push(PairCheck {
                i,
                j,
                same_cluster: a == b,
                distance,
                bound,
                margin,
                holds: margin >= -1e-12 * (1.0 + bound),
            });
        }
    }
    Ok(SeparationChecks { mu, lipschitz, pairs })
}

/// Outcome of checking a solution against both thresholds for the
/// partition it induces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryCertificate {
    pub partition: Partition,
    pub lambda: f64,
    pub lower_threshold: f64,
    pub upper_threshold: f64,
    pub clustered_solution: Stack,
    pub satisfied_lower: bool,
    pub satisfied_upper: bool,
    pub lower_margin: f64,
    pub upper_margin: f64,
    pub convention: Convention,
    pub tie_tol: f64,
    pub oracle_converged: bool,
}

impl RecoveryCertificate {
    pub fn certified(&self) -> bool {
        self.satisfied_lower && self.satisfied_upper
    }
}

/// Fixes the partition induced by `solution`, solves the clustered problem
/// for it and evaluates both thresholds there.
pub fn aposteriori_recovery_check(
    problem: &FederationProblem,
    solution: &Stack,
    tol_tie: f64,
) -> Result<RecoveryCertificate> {
    let lambda = match problem.penalty() {
        PenaltyKind::SumOfNorms { lambda } => *lambda,
        other => {
            return Err(Error::Unsupported(format!(
                "recovery checks need a sum-of-norms problem, got {other:?}"
            )))
        }
    };
    problem.check_stack(solution)?;
    let partition = extract_partition(solution, tol_tie);
    let reduced = problem.clustered_reduction(&partition)?;
    let r = solve_reference(&reduced, &OracleConfig::default())?;
    let lower = theorem1_threshold(problem, &partition, &r.x)?;
    let upper = theorem2_threshold(problem, &partition, &r.x)?;
    Ok(RecoveryCertificate {
        partition,
        lambda,
        lower_threshold: lower,
        upper_threshold: upper,
        clustered_solution: r.x,
        satisfied_lower: lambda >= lower,
        satisfied_upper: lambda < upper,
        lower_margin: lambda - lower,
        upper_margin: upper - lambda,
        convention: problem.convention(),
        tie_tol: tol_tie,
        oracle_converged: r.converged,
    })
}

/// Unpenalized minimizers of every loss.
pub fn local_optima(problem: &FederationProblem) -> Result<Vec<Vec<f64>>> {
    let local = problem.with_penalty(PenaltyKind::LocalOnly)?;
    Ok(solve_reference(&local, &OracleConfig::default())?.x.models)
}
