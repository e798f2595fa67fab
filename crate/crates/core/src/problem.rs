//! Objective formulations built from N local losses.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{axpy, dist, norm, project_unit_ball, sub, zeros};
use crate::losses::LossSpec;

/// Whether the loss term carries a `1/N` factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossScale {
    #[default]
    MeanOverN,
    Sum,
}

/// Whether the pair sum runs over ordered pairs `(i,j), i != j` or over `i < j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PairOrder {
    #[default]
    OrderedPairs,
    UnorderedPairs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Convention {
    pub loss_scale: LossScale,
    pub pair_order: PairOrder,
}

impl Convention {
    pub const MEAN_ORDERED: Self = Self::new(LossScale::MeanOverN, PairOrder::OrderedPairs);
    pub const SUM_ORDERED: Self = Self::new(LossScale::Sum, PairOrder::OrderedPairs);
    pub const MEAN_UNORDERED: Self = Self::new(LossScale::MeanOverN, PairOrder::UnorderedPairs);
    pub const SUM_UNORDERED: Self = Self::new(LossScale::Sum, PairOrder::UnorderedPairs);

    pub const fn new(loss_scale: LossScale, pair_order: PairOrder) -> Self {
        Self { loss_scale, pair_order }
    }

    /// Weight on the loss sum for `n` users.
    pub fn alpha(&self, n: usize) -> f64 {
        match self.loss_scale {
            LossScale::MeanOverN => 1.0 / n as f64,
            LossScale::Sum => 1.0,
        }
    }

    /// Number of times each unordered pair enters the penalty.
    pub fn pair_factor(&self) -> f64 {
        match self.pair_order {
            PairOrder::OrderedPairs => 2.0,
            PairOrder::UnorderedPairs => 1.0,
        }
    }

    /// Ratio between the fusion weight of the stationarity condition
    /// `grad f_i + lam' sum_j s_ij = 0` (unnormalized losses, antisymmetric
    /// `s`) and the `lambda` of this convention: `lam' = kappa * lambda`.
    pub fn kappa(&self, n: usize) -> f64 {
        self.pair_factor() / self.alpha(n)
    }

    /// Parse the CLI spelling `mean-ordered`, `sum-unordered`, ...
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean-ordered" => Ok(Self::MEAN_ORDERED),
            "sum-ordered" => Ok(Self::SUM_ORDERED),
            "mean-unordered" => Ok(Self::MEAN_UNORDERED),
            "sum-unordered" => Ok(Self::SUM_UNORDERED),
            other => Err(Error::Config(format!("unknown convention '{other}'"))),
        }
    }
}

/// Disjoint nonempty blocks covering `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    blocks: Vec<Vec<usize>>,
}

impl Partition {
    pub fn new(blocks: Vec<Vec<usize>>, n: usize) -> Result<Self> {
        let p = Self { blocks };
        p.validate(n)?;
        Ok(p)
    }

    /// Build from per-user block labels; blocks are ordered by smallest member.
    pub fn from_labels(labels: &[usize]) -> Self {
        let mut order: Vec<usize> = Vec::new();
        let mut blocks: Vec<Vec<usize>> = Vec::new();
        for (i, &l) in labels.iter().enumerate() {
            match order.iter().position(|&o| o == l) {
                Some(k) => blocks[k].push(i),
                None => {
                    order.push(l);
                    blocks.push(vec![i]);
                }
            }
        }
        Self { blocks }
    }

    pub fn singletons(n: usize) -> Self {
        Self {
            blocks: (0..n).map(|i| vec![i]).collect(),
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for b in &self.blocks {
            if b.is_empty() {
                return Err(Error::Partition("empty block".into()));
            }
            for &i in b {
                if i >= n {
                    return Err(Error::Partition(format!("index {i} out of range for {n} users")));
                }
                if seen[i] {
                    return Err(Error::Partition(format!("index {i} appears twice")));
                }
                seen[i] = true;
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Partition(format!("index {i} not covered")));
        }
        Ok(())
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_users(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(Vec::len).collect()
    }

    /// Block index of every user.
    pub fn labels(&self) -> Vec<usize> {
        let mut l = vec![0; self.num_users()];
        for (k, b) in self.blocks.iter().enumerate() {
            for &i in b {
                l[i] = k;
            }
        }
        l
    }

    /// Blocks compared as sets, ignoring block order.
    pub fn same_grouping(&self, other: &Partition) -> bool {
        if self.num_users() != other.num_users() || self.num_blocks() != other.num_blocks() {
            return false;
        }
        let a = self.labels();
        let b = other.labels();
        let mut map = vec![usize::MAX; self.num_blocks()];
        for (x, y) in a.iter().zip(&b) {
            if map[*x] == usize::MAX {
                map[*x] = *y;
            } else if map[*x] != *y {
                return false;
            }
        }
        let mut used = map.clone();
        used.sort_unstable();
        used.dedup();
        used.len() == map.len()
    }
}

/// Stacked model vectors, one per user (or per cluster).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Stack {
    pub models: Vec<Vec<f64>>,
}

impl Stack {
    pub fn new(models: Vec<Vec<f64>>) -> Self {
        Self { models }
    }

    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            models: vec![zeros(d); n],
        }
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    /// `x_i = w_{k(i)}`.
    pub fn lift(&self, partition: &Partition) -> Stack {
        let labels = partition.labels();
        Stack::new(labels.iter().map(|&k| self.models[k].clone()).collect())
    }

    pub fn max_abs_diff(&self, other: &Stack) -> f64 {
        self.models
            .iter()
            .zip(&other.models)
            .map(|(a, b)| crate::linalg::max_abs_diff(a, b))
            .fold(0.0, f64::max)
    }

    pub fn mean_norm(&self) -> f64 {
        self.models.iter().map(|m| norm(m)).sum::<f64>() / self.len().max(1) as f64
    }
}

impl std::ops::Index<usize> for Stack {
    type Output = Vec<f64>;
    fn index(&self, i: usize) -> &Vec<f64> {
        &self.models[i]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PenaltyKind {
    SumOfNorms { lambda: f64 },
    SquaredNorms { gamma: f64 },
    LocalOnly,
    GlobalConsensus,
    ClusteredSumOfNorms { lambda: f64, partition: Partition },
}

impl PenaltyKind {
    fn validate(&self) -> Result<()> {
        let v = match self {
            PenaltyKind::SumOfNorms { lambda } | PenaltyKind::ClusteredSumOfNorms { lambda, .. } => *lambda,
            PenaltyKind::SquaredNorms { gamma } => *gamma,
            _ => 0.0,
        };
        if v >= 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "penalty weight must be finite and nonnegative, got {v}"
            )))
        }
    }

    pub fn lambda(&self) -> Option<f64> {
        match self {
            PenaltyKind::SumOfNorms { lambda } | PenaltyKind::ClusteredSumOfNorms { lambda, .. } => Some(*lambda),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
struct ProblemDoc {
    losses: Vec<LossSpec>,
    #[serde(default)]
    dim_d: Option<usize>,
    penalty: PenaltyKind,
    #[serde(default)]
    convention: Convention,
}

/// N local losses, a penalty and a normalization convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProblemDoc")]
pub struct FederationProblem {
    losses: Vec<LossSpec>,
    dim_d: usize,
    penalty: PenaltyKind,
    convention: Convention,
}

impl TryFrom<ProblemDoc> for FederationProblem {
    type Error = Error;
    fn try_from(doc: ProblemDoc) -> Result<Self> {
        let p = Self::new(doc.losses, doc.penalty, doc.convention)?;
        if let Some(d) = doc.dim_d {
            check_dim("problem dim_d", p.dim_d, d)?;
        }
        Ok(p)
    }
}

impl FederationProblem {
    pub fn new(losses: Vec<LossSpec>, penalty: PenaltyKind, convention: Convention) -> Result<Self> {
        let first = losses
            .first()
            .ok_or_else(|| Error::Config("a problem needs at least one loss".into()))?;
        let d = first.dim();
        for l in &losses {
            check_dim("loss dimension", d, l.dim())?;
        }
        penalty.validate()?;
        if let PenaltyKind::ClusteredSumOfNorms { partition, .. } = &penalty {
            partition.validate(losses.len())?;
        }
        Ok(Self {
            losses,
            dim_d: d,
            penalty,
            convention,
        })
    }

    pub fn losses(&self) -> &[LossSpec] {
        &self.losses
    }

    pub fn num_users(&self) -> usize {
        self.losses.len()
    }

    pub fn dim(&self) -> usize {
        self.dim_d
    }

    pub fn penalty(&self) -> &PenaltyKind {
        &self.penalty
    }

    pub fn convention(&self) -> Convention {
        self.convention
    }

    pub fn alpha(&self) -> f64 {
        self.convention.alpha(self.num_users())
    }

    pub fn kappa(&self) -> f64 {
        self.convention.kappa(self.num_users())
    }

    /// Same losses and convention, different penalty.
    pub fn with_penalty(&self, penalty: PenaltyKind) -> Result<Self> {
        Self::new(self.losses.clone(), penalty, self.convention)
    }

    pub fn with_convention(&self, convention: Convention) -> Self {
        Self {
            convention,
            ..self.clone()
        }
    }

    pub fn all_quadratic(&self) -> bool {
        self.losses.iter().all(|l| l.as_quadratic().is_some())
    }

    /// Number of model vectors a stack for this problem holds.
    pub fn num_variables(&self) -> usize {
        match &self.penalty {
            PenaltyKind::GlobalConsensus => 1,
            PenaltyKind::ClusteredSumOfNorms { partition, .. } => partition.num_blocks(),
            _ => self.num_users(),
        }
    }

    pub fn check_stack(&self, x: &Stack) -> Result<()> {
        check_dim("stack length", self.num_variables(), x.len())?;
        for m in &x.models {
            check_dim("model dimension", self.dim_d, m.len())?;
        }
        Ok(())
    }

    /// The problem as `alpha * (sum_k h_k(w_k) + sum_{k != l} omega_kl ||w_k - w_l||)`
    /// with `h_k` the sum of the member losses. Defined for the two
    /// sum-of-norms penalties.
    pub fn fusion_form(&self) -> Result<FusionForm> {
        let n = self.num_users();
        let alpha = self.alpha();
        // per ordered pair, in units of the unnormalized loss sum
        let unit = |lambda: f64| lambda * self.convention.pair_factor() / (2.0 * alpha);
        let (groups, omega) = match &self.penalty {
            PenaltyKind::SumOfNorms { lambda } => {
                let w = unit(*lambda);
                let groups: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
                let mut om = vec![w; n * n];
                for i in 0..n {
                    om[i * n + i] = 0.0;
                }
                (groups, om)
            }
            PenaltyKind::ClusteredSumOfNorms { lambda, partition } => {
                let w = unit(*lambda);
                let k = partition.num_blocks();
                let sizes = partition.sizes();
                let mut om = vec![0.0; k * k];
                for a in 0..k {
                    for b in 0..k {
                        if a != b {
                            om[a * k + b] = w * (sizes[a] * sizes[b]) as f64;
                        }
                    }
                }
                (partition.blocks().to_vec(), om)
            }
            other => {
                return Err(Error::Unsupported(format!(
                    "fusion form needs a sum-of-norms penalty, got {other:?}"
                )))
            }
        };
        Ok(FusionForm {
            losses: self.losses.clone(),
            groups,
            omega,
            alpha,
            dim: self.dim_d,
        })
    }

    /// Objective value under the problem's convention.
    pub fn objective(&self, x: &Stack) -> Result<f64> {
        self.check_stack(x)?;
        let alpha = self.alpha();
        let pf = self.convention.pair_factor();
        let v = match &self.penalty {
            PenaltyKind::SumOfNorms { lambda } => {
                let loss: f64 = self
                    .losses
                    .iter()
                    .zip(&x.models)
                    .map(|(f, xi)| f.value_unchecked(xi))
                    .sum();
                alpha * loss + lambda * pf * pair_sum(&x.models, |_, _, d| d)
            }
            PenaltyKind::SquaredNorms { gamma } => {
                let loss: f64 = self
                    .losses
                    .iter()
                    .zip(&x.models)
                    .map(|(f, xi)| f.value_unchecked(xi))
                    .sum();
                alpha * loss + gamma * pf * pair_sum(&x.models, |_, _, d| d * d)
            }
            PenaltyKind::LocalOnly => {
                alpha
                    * self
                        .losses
                        .iter()
                        .zip(&x.models)
                        .map(|(f, xi)| f.value_unchecked(xi))
                        .sum::<f64>()
            }
            PenaltyKind::GlobalConsensus => {
                alpha * self.losses.iter().map(|f| f.value_unchecked(&x.models[0])).sum::<f64>()
            }
            PenaltyKind::ClusteredSumOfNorms { lambda, partition } => {
                let sizes = partition.sizes();
                let loss: f64 = partition
                    .blocks()
                    .iter()
                    .zip(&x.models)
                    .map(|(b, w)| b.iter().map(|&i| self.losses[i].value_unchecked(w)).sum::<f64>())
                    .sum();
                alpha * loss + lambda * pf * pair_sum(&x.models, |k, l, d| (sizes[k] * sizes[l]) as f64 * d)
            }
        };
        Ok(v)
    }

    /// Gradient of a smooth formulation, per variable, in convention units.
    pub fn smooth_gradient(&self, x: &Stack) -> Result<Vec<Vec<f64>>> {
        self.check_stack(x)?;
        let alpha = self.alpha();
        let d = self.dim_d;
        match &self.penalty {
            PenaltyKind::LocalOnly | PenaltyKind::SquaredNorms { .. } => {
                let mut g: Vec<Vec<f64>> = self
                    .losses
                    .iter()
                    .zip(&x.models)
                    .map(|(f, xi)| {
                        let mut g = zeros(d);
                        f.add_grad(xi, alpha, &mut g);
                        g
                    })
                    .collect();
                if let PenaltyKind::SquaredNorms { gamma } = &self.penalty {
                    let c = 2.0 * gamma * self.convention.pair_factor();
                    let n = x.len();
                    let total = x.models.iter().fold(zeros(d), |mut acc, m| {
                        axpy(&mut acc, 1.0, m);
                        acc
                    });
                    for (gi, xi) in g.iter_mut().zip(&x.models) {
                        for k in 0..d {
                            gi[k] += c * (n as f64 * xi[k] - total[k]);
                        }
                    }
                }
                Ok(g)
            }
            PenaltyKind::GlobalConsensus => {
                let mut g = zeros(d);
                for f in &self.losses {
                    f.add_grad(&x.models[0], alpha, &mut g);
                }
                Ok(vec![g])
            }
            _ => Err(Error::Unsupported("gradient of a nonsmooth formulation".into())),
        }
    }

    /// Smallest achievable maximum per-variable stationarity violation over
    /// admissible subgradients, in convention units. Pairs closer than
    /// `tol_tie` count as tied.
    pub fn subgradient_residual(&self, x: &Stack, tol_tie: f64) -> Result<f64> {
        self.check_stack(x)?;
        match &self.penalty {
            PenaltyKind::SumOfNorms { .. } | PenaltyKind::ClusteredSumOfNorms { .. } => {
                let ff = self.fusion_form()?;
                Ok(self.alpha() * ff.residual(&x.models, tol_tie))
            }
            _ => Ok(self.smooth_gradient(x)?.iter().map(|g| norm(g)).fold(0.0, f64::max)),
        }
    }

    /// The K-variable clustered problem for `partition`.
    pub fn clustered_reduction(&self, partition: &Partition) -> Result<FederationProblem> {
        partition.validate(self.num_users())?;
        match &self.penalty {
            PenaltyKind::SumOfNorms { lambda } => self.with_penalty(PenaltyKind::ClusteredSumOfNorms {
                lambda: *lambda,
                partition: partition.clone(),
            }),
            other => Err(Error::Unsupported(format!(
                "clustered reduction needs a sum-of-norms penalty, got {other:?}"
            ))),
        }
    }
}

/// `sum_{i<j} w(i, j, ||x_i - x_j||)`
fn pair_sum(xs: &[Vec<f64>], w: impl Fn(usize, usize, f64) -> f64) -> f64 {
    let mut s = 0.0;
    for i in 0..xs.len() {
        for j in i + 1..xs.len() {
            s += w(i, j, dist(&xs[i], &xs[j]));
        }
    }
    s
}

/// A sum-of-norms problem in unnormalized form:
/// `F / alpha = sum_k h_k(w_k) + sum_{k != l} omega_kl ||w_k - w_l||`,
/// where `h_k` sums the losses of group `k`.
#[derive(Debug, Clone)]
pub struct FusionForm {
    pub losses: Vec<LossSpec>,
    pub groups: Vec<Vec<usize>>,
    /// Row-major K x K, symmetric, zero diagonal.
    pub omega: Vec<f64>,
    pub alpha: f64,
    pub dim: usize,
}

impl FusionForm {
    pub fn num_vars(&self) -> usize {
        self.groups.len()
    }

    pub fn omega(&self, k: usize, l: usize) -> f64 {
        self.omega[k * self.groups.len() + l]
    }

    pub fn cost_value(&self, k: usize, w: &[f64]) -> f64 {
        self.groups[k].iter().map(|&i| self.losses[i].value_unchecked(w)).sum()
    }

    /// `g += s * grad h_k(w)`
    pub fn cost_add_grad(&self, k: usize, w: &[f64], s: f64, g: &mut [f64]) {
        for &i in &self.groups[k] {
            self.losses[i].add_grad(w, s, g);
        }
    }

    /// `h += s * H_k(w)`, row-major `dim x dim`.
    pub(crate) fn cost_add_hessian(&self, k: usize, w: &[f64], s: f64, h: &mut [f64]) {
        for &i in &self.groups[k] {
            self.losses[i].add_hessian(w, s, h);
        }
    }

    pub fn cost_lipschitz(&self, k: usize) -> f64 {
        self.groups[k].iter().map(|&i| self.losses[i].lipschitz()).sum()
    }

    /// `h_k = (s/2)||w - a||^2 + const` when every member is quadratic.
    pub fn cost_quadratic(&self, k: usize) -> Option<(f64, Vec<f64>)> {
        let mut s = 0.0;
        let mut a = zeros(self.dim);
        for &i in &self.groups[k] {
            let (si, ai) = self.losses[i].as_quadratic()?;
            s += si;
            axpy(&mut a, si, ai);
        }
        Some((s, a.into_iter().map(|v| v / s).collect()))
    }

    /// Unnormalized objective `F / alpha`.
    pub fn value(&self, w: &[Vec<f64>]) -> f64 {
        let k = self.num_vars();
        let mut v: f64 = (0..k).map(|a| self.cost_value(a, &w[a])).sum();
        for a in 0..k {
            for b in a + 1..k {
                v += 2.0 * self.omega(a, b) * dist(&w[a], &w[b]);
            }
        }
        v
    }

    /// A subgradient of `F / alpha`, with zero subgradient on exact ties.
    pub fn subgradient(&self, w: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let k = self.num_vars();
        let mut g: Vec<Vec<f64>> = (0..k)
            .map(|a| {
                let mut g = zeros(self.dim);
                self.cost_add_grad(a, &w[a], 1.0, &mut g);
                g
            })
            .collect();
        for a in 0..k {
            for b in a + 1..k {
                let diff = sub(&w[a], &w[b]);
                let r = norm(&diff);
                if r > 0.0 {
                    let c = 2.0 * self.omega(a, b) / r;
                    axpy(&mut g[a], c, &diff);
                    axpy(&mut g[b], -c, &diff);
                }
            }
        }
        g
    }

    /// Stationarity residual of `F / alpha` (see
    /// [`FederationProblem::subgradient_residual`]).
    ///
    /// Untied pairs contribute their gradient. Each tied pair `{a,b}`
    /// contributes `±2 omega_ab t_ab` with `||t_ab|| <= 1` free; the `t` are
    /// chosen per tied component by accelerated projected gradient on the
    /// sum of squared residuals, which is exact whenever the residual can be
    /// driven to zero and an upper bound on the min-max otherwise.
    pub fn residual(&self, w: &[Vec<f64>], tol_tie: f64) -> f64 {
        self.fitted_residuals(w, tol_tie)
            .0
            .iter()
            .map(|g| norm(g))
            .fold(0.0, f64::max)
    }

    /// Per-variable residuals under the fitted tie multipliers, and the
    /// tied components (as sorted member lists).
    pub fn fitted_residuals(&self, w: &[Vec<f64>], tol_tie: f64) -> (Vec<Vec<f64>>, Vec<Vec<usize>>) {
        let k = self.num_vars();
        let d = self.dim;
        let mut base: Vec<Vec<f64>> = (0..k)
            .map(|a| {
                let mut g = zeros(d);
                self.cost_add_grad(a, &w[a], 1.0, &mut g);
                g
            })
            .collect();
        let mut tied: Vec<(usize, usize, f64)> = Vec::new();
        let mut uf = UnionFind::new(k);
        for a in 0..k {
            for b in a + 1..k {
                let om = self.omega(a, b);
                if om == 0.0 {
                    continue;
                }
                let diff = sub(&w[a], &w[b]);
                let r = norm(&diff);
                if r <= tol_tie {
                    tied.push((a, b, 2.0 * om));
                    uf.union(a, b);
                } else {
                    let c = 2.0 * om / r;
                    axpy(&mut base[a], c, &diff);
                    axpy(&mut base[b], -c, &diff);
                }
            }
        }
        if tied.is_empty() {
            return (base, Vec::new());
        }
        // group tied edges by component
        let mut comp_edges: std::collections::BTreeMap<usize, Vec<(usize, usize, f64)>> =
            std::collections::BTreeMap::new();
        for e in tied {
            comp_edges.entry(uf.find(e.0)).or_default().push(e);
        }
        let mut resid = base.clone();
        let mut comps = Vec::with_capacity(comp_edges.len());
        for edges in comp_edges.values() {
            let fitted = fit_tie_multipliers(&base, edges, d);
            comps.push(fitted.iter().map(|(a, _)| *a).collect());
            for (a, r) in fitted {
                resid[a] = r;
            }
        }
        (resid, comps)
    }
}

/// Minimize `sum_a ||b_a + sum_{e=(a,b)} c_e t_e - sum_{e=(b,a)} c_e t_e||^2`
/// over `||t_e|| <= 1`; returns the final residual of each touched node.
fn fit_tie_multipliers(base: &[Vec<f64>], edges: &[(usize, usize, f64)], d: usize) -> Vec<(usize, Vec<f64>)> {
    let mut nodes: Vec<usize> = edges.iter().flat_map(|e| [e.0, e.1]).collect();
    nodes.sort_unstable();
    nodes.dedup();
    let slot = |a: usize| nodes.binary_search(&a).unwrap();
    let mut load = vec![0.0; nodes.len()];
    for &(a, b, c) in edges {
        load[slot(a)] += c * c;
        load[slot(b)] += c * c;
    }
    let lip = 4.0 * load.iter().cloned().fold(0.0, f64::max);
    let scale = nodes.iter().map(|&a| norm(&base[a])).fold(0.0, f64::max).max(1.0);

    let residuals = |t: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let mut r: Vec<Vec<f64>> = nodes.iter().map(|&a| base[a].clone()).collect();
        for (e, &(a, b, c)) in edges.iter().enumerate() {
            axpy(&mut r[slot(a)], c, &t[e]);
            axpy(&mut r[slot(b)], -c, &t[e]);
        }
        r
    };
    let sq = |r: &[Vec<f64>]| r.iter().map(|v| crate::linalg::dot(v, v)).sum::<f64>();

    let mut t = vec![zeros(d); edges.len()];
    let mut y = t.clone();
    let mut theta = 1.0_f64;
    let mut best_t = t.clone();
    let mut best = sq(&residuals(&t));
    for _ in 0..20_000 {
        if best.sqrt() <= 1e-15 * scale {
            break;
        }
        let r = residuals(&y);
        let mut t_next = y.clone();
        for (e, &(a, b, c)) in edges.iter().enumerate() {
            let ga = &r[slot(a)];
            let gb = &r[slot(b)];
            for q in 0..d {
                t_next[e][q] -= 2.0 * c * (ga[q] - gb[q]) / lip;
            }
            project_unit_ball(&mut t_next[e]);
        }
        let v = sq(&residuals(&t_next));
        let restart = v > best;
        if v < best {
            best = v;
            best_t.clone_from(&t_next);
        }
        let theta_next = (1.0 + (1.0 + 4.0 * theta * theta).sqrt()) / 2.0;
        let mom = if restart { 0.0 } else { (theta - 1.0) / theta_next };
        let mut moved = 0.0_f64;
        for e in 0..edges.len() {
            for q in 0..d {
                let step = t_next[e][q] - t[e][q];
                moved = moved.max(step.abs());
                y[e][q] = t_next[e][q] + mom * step;
            }
        }
        t = t_next;
        theta = if restart { 1.0 } else { theta_next };
        if moved < 1e-16 {
            break;
        }
    }
    let r = residuals(&best_t);
    nodes.iter().zip(r).map(|(&a, v)| (a, v)).collect()
}

pub(crate) struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    pub(crate) fn find(&mut self, mut a: usize) -> usize {
        while self.parent[a] != a {
            self.parent[a] = self.parent[self.parent[a]];
            a = self.parent[a];
        }
        a
    }

    pub(crate) fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quads(anchors: &[f64]) -> Vec<LossSpec> {
        anchors.iter().map(|&a| LossSpec::quadratic(vec![a]).unwrap()).collect()
    }

    fn son(anchors: &[f64], lambda: f64, c: Convention) -> FederationProblem {
        FederationProblem::new(quads(anchors), PenaltyKind::SumOfNorms { lambda }, c).unwrap()
    }

    fn st(v: &[f64]) -> Stack {
        Stack::new(v.iter().map(|&x| vec![x]).collect())
    }

    #[test]
    fn objective_examples() {
        for c in [Convention::MEAN_ORDERED, Convention::SUM_UNORDERED] {
            assert_eq!(son(&[0.0, 4.0], 0.0, c).objective(&st(&[0.0, 4.0])).unwrap(), 0.0);
        }
        let p = son(&[0.0, 4.0], 1.0, Convention::MEAN_ORDERED);
        assert_eq!(p.objective(&st(&[0.0, 4.0])).unwrap(), 8.0);
    }

    #[test]
    fn single_cluster_reduction_equals_global() {
        let p = son(&[0.0, 1.0, 5.0], 0.7, Convention::MEAN_ORDERED);
        let r = p
            .clustered_reduction(&Partition::new(vec![vec![0, 1, 2]], 3).unwrap())
            .unwrap();
        let g = p.with_penalty(PenaltyKind::GlobalConsensus).unwrap();
        let w = st(&[1.3]);
        assert!((r.objective(&w).unwrap() - g.objective(&w).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn reduction_of_two_identical_pairs() {
        let p = son(&[0.0, 0.0, 4.0, 4.0], 1.0, Convention::SUM_UNORDERED);
        let part = Partition::new(vec![vec![0, 1], vec![2, 3]], 4).unwrap();
        let r = p.clustered_reduction(&part).unwrap();
        let ff = r.fusion_form().unwrap();
        assert_eq!(ff.cost_quadratic(0), Some((2.0, vec![0.0])));
        assert_eq!(ff.cost_quadratic(1), Some((2.0, vec![4.0])));
        // unordered penalty lambda * n1 n2 |w1-w2| = 4 |w1-w2|, split over both orders
        assert_eq!(ff.omega(0, 1) * 2.0, 4.0);
        assert_eq!(r.objective(&st(&[0.0, 4.0])).unwrap(), 16.0);
    }

    #[test]
    fn residual_examples() {
        let p = son(&[0.0, 4.0], 2.0, Convention::SUM_ORDERED);
        assert!(p.subgradient_residual(&st(&[2.0, 2.0]), 1e-9).unwrap() <= 1e-9);
        let p = son(&[0.0, 4.0], 1.0, Convention::SUM_ORDERED);
        assert!(p.subgradient_residual(&st(&[2.0, 2.0]), 1e-9).unwrap() <= 1e-9);
        let p = son(&[0.0, 4.0], 0.9, Convention::SUM_ORDERED);
        let r = p.subgradient_residual(&st(&[2.0, 2.0]), 1e-9).unwrap();
        assert!((r - 0.2).abs() < 1e-9, "{r}");
        let p = son(&[0.0, 4.0, -3.0], 0.0, Convention::MEAN_ORDERED);
        assert_eq!(p.subgradient_residual(&st(&[0.0, 4.0, -3.0]), 1e-9).unwrap(), 0.0);
    }

    #[test]
    fn partition_validation() {
        assert!(Partition::new(vec![vec![0], vec![0, 1]], 2).is_err());
        assert!(Partition::new(vec![vec![0], vec![]], 1).is_err());
        assert!(Partition::new(vec![vec![1]], 2).is_err());
        let p = Partition::from_labels(&[2, 0, 2, 1]);
        assert_eq!(p.blocks(), &[vec![0, 2], vec![1], vec![3]]);
        let q = Partition::new(vec![vec![1], vec![3], vec![0, 2]], 4).unwrap();
        assert!(p.same_grouping(&q));
        assert!(!p.same_grouping(&Partition::singletons(4)));
    }

    #[test]
    fn convention_kappa() {
        assert_eq!(Convention::SUM_UNORDERED.kappa(7), 1.0);
        assert_eq!(Convention::SUM_ORDERED.kappa(7), 2.0);
        assert_eq!(Convention::MEAN_ORDERED.kappa(7), 14.0);
        assert_eq!(Convention::parse("mean-unordered").unwrap(), Convention::MEAN_UNORDERED);
        assert!(Convention::parse("bogus").is_err());
    }

    #[test]
    fn problem_json_round_trip() {
        let doc = r#"{"losses":[{"kind":"quadratic","anchor":[0]},{"kind":"quadratic","anchor":[4]}],
                      "penalty":{"kind":"sum_of_norms","lambda":1.0},
                      "convention":{"loss_scale":"sum","pair_order":"ordered_pairs"}}"#;
        let p: FederationProblem = serde_json::from_str(doc).unwrap();
        assert_eq!(p.convention(), Convention::SUM_ORDERED);
        let back: FederationProblem = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        assert_eq!(p, back);
        let bad = doc.replace("[4]", "[4, 1]");
        assert!(serde_json::from_str::<FederationProblem>(&bad).is_err());
    }
}
