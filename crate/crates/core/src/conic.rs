//! Interior-point reference solves through a conic reformulation, for
//! quadratic and squared hinge losses.
//!
//! Variables are the model blocks, one slack per hinge row and one norm
//! epigraph per coupled pair. Constraints take the solver's form
//! `A v + s = b, s in K`.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{dist, norm, sub};
use crate::losses::{LossKind, LossSpec};
use crate::problem::{FederationProblem, FusionForm, PenaltyKind, Stack};

#[derive(Default)]
struct Builder {
    nvars: usize,
    p: Vec<(usize, usize, f64)>,
    q: Vec<f64>,
    a: Vec<(usize, usize, f64)>,
    b: Vec<f64>,
    nonneg: Vec<(Vec<(usize, f64)>, f64)>,
    soc: Vec<Vec<(Vec<(usize, f64)>, f64)>>,
}

impl Builder {
    fn var(&mut self) -> usize {
        self.q.push(0.0);
        self.nvars += 1;
        self.nvars - 1
    }

    /// `(1/2) c v_i v_j`-style entry; only the upper triangle is kept.
    fn hess(&mut self, i: usize, j: usize, c: f64) {
        let (r, s) = if i <= j { (i, j) } else { (j, i) };
        self.p.push((r, s, c));
    }

    fn add_loss(&mut self, f: &LossSpec, block: &[usize], w: f64) -> Result<()> {
        match f.kind() {
            LossKind::Quadratic { anchor, scale } => {
                for (k, &v) in block.iter().enumerate() {
                    self.hess(v, v, w * scale);
                    self.q[v] -= w * scale * anchor[k];
                }
            }
            LossKind::SquaredHinge { points, reg_c } => {
                let p = block.len() - 1;
                for &v in &block[..p] {
                    self.hess(v, v, w * reg_c);
                }
                let m = points.len() as f64;
                for pt in points {
                    let t = self.var();
                    self.hess(t, t, 2.0 * w / m);
                    self.nonneg.push((vec![(t, 1.0)], 0.0));
                    // t + l (<w, a> - b) >= 1
                    let l = f64::from(pt.label);
                    let mut row: Vec<(usize, f64)> = vec![(t, 1.0)];
                    for (k, &v) in block[..p].iter().enumerate() {
                        row.push((v, l * pt.x[k]));
                    }
                    row.push((block[p], -l));
                    self.nonneg.push((row, -1.0));
                }
            }
            LossKind::Huber { .. } => {
                return Err(Error::Unsupported(
                    "the conic solver does not model Huber losses".into(),
                ))
            }
        }
        Ok(())
    }

    /// `weight * ||x_a - x_b||` through an epigraph variable.
    fn add_norm(&mut self, xa: &[usize], xb: &[usize], weight: f64) {
        let s = self.var();
        self.q[s] += weight;
        let mut cone = vec![(vec![(s, 1.0)], 0.0)];
        for (&u, &v) in xa.iter().zip(xb) {
            cone.push((vec![(u, 1.0), (v, -1.0)], 0.0));
        }
        self.soc.push(cone);
    }

    /// Expressions `e(v) + c` constrained to the cone become rows
    /// `-e(v)` with right-hand side `c`.
    fn solve(mut self, tol: f64, max_iter: u32) -> Result<(Vec<f64>, SolverStatus)> {
        let mut cones = Vec::new();
        let mut row = 0;
        let mut push = |a: &mut Vec<(usize, usize, f64)>, b: &mut Vec<f64>, e: &[(usize, f64)], c: f64| {
            for &(v, coef) in e {
                a.push((row, v, -coef));
            }
            b.push(c);
            row += 1;
        };
        let nonneg = std::mem::take(&mut self.nonneg);
        for (e, c) in &nonneg {
            push(&mut self.a, &mut self.b, e, *c);
        }
        if !nonneg.is_empty() {
            cones.push(SupportedConeT::NonnegativeConeT(nonneg.len()));
        }
        let soc = std::mem::take(&mut self.soc);
        for cone in &soc {
            for (e, c) in cone {
                push(&mut self.a, &mut self.b, e, *c);
            }
            cones.push(SupportedConeT::SecondOrderConeT(cone.len()));
        }
        let n = self.nvars;
        let split = |t: Vec<(usize, usize, f64)>| {
            let mut i = Vec::with_capacity(t.len());
            let mut j = Vec::with_capacity(t.len());
            let mut v = Vec::with_capacity(t.len());
            for (r, c, x) in t {
                i.push(r);
                j.push(c);
                v.push(x);
            }
            (i, j, v)
        };
        let (pi, pj, pv) = split(self.p);
        let p = CscMatrix::new_from_triplets(n, n, pi, pj, pv);
        let (ai, aj, av) = split(self.a);
        let a = CscMatrix::new_from_triplets(row, n, ai, aj, av);
        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .max_iter(max_iter)
            .tol_gap_abs(tol)
            .tol_gap_rel(tol)
            .tol_feas(tol)
            .tol_ktratio(1e-8)
            .build()
            .map_err(|e| Error::Config(format!("conic settings: {e:?}")))?;
        let mut solver = DefaultSolver::new(&p, &self.q, &a, &self.b, &cones, settings);
        solver.solve();
        Ok((solver.solution.x.clone(), solver.solution.status))
    }
}

pub(crate) struct ConicSolve {
    pub x: Stack,
    #[allow(dead_code)]
    pub solved: bool,
}

/// Minimizes the problem's objective with an interior-point method.
pub(crate) fn solve_conic(problem: &FederationProblem, tol: f64) -> Result<ConicSolve> {
    let d = problem.dim();
    let n = problem.num_users();
    let alpha = problem.alpha();
    let nv = problem.num_variables();
    let mut bld = Builder::default();
    let blocks: Vec<Vec<usize>> = (0..nv).map(|_| (0..d).map(|_| bld.var()).collect()).collect();
    let owner: Vec<usize> = match problem.penalty() {
        PenaltyKind::GlobalConsensus => vec![0; n],
        PenaltyKind::ClusteredSumOfNorms { partition, .. } => partition.labels(),
        _ => (0..n).collect(),
    };
    for (i, f) in problem.losses().iter().enumerate() {
        bld.add_loss(f, &blocks[owner[i]], alpha)?;
    }
    let pf = problem.convention().pair_factor();
    match problem.penalty() {
        PenaltyKind::SumOfNorms { .. } | PenaltyKind::ClusteredSumOfNorms { .. } => {
            let ff = problem.fusion_form()?;
            for k in 0..nv {
                for l in k + 1..nv {
                    let w = 2.0 * alpha * ff.omega(k, l);
                    if w > 0.0 {
                        bld.add_norm(&blocks[k], &blocks[l], w);
                    }
                }
            }
        }
        PenaltyKind::SquaredNorms { gamma } => {
            let c = gamma * pf;
            if c > 0.0 {
                for i in 0..nv {
                    for j in i + 1..nv {
                        for k in 0..d {
                            let (u, v) = (blocks[i][k], blocks[j][k]);
                            bld.hess(u, u, 2.0 * c);
                            bld.hess(v, v, 2.0 * c);
                            bld.hess(u, v, -2.0 * c);
                        }
                    }
                }
            }
        }
        PenaltyKind::LocalOnly | PenaltyKind::GlobalConsensus => {}
    }
    let (v, status) = bld.solve(tol, 400)?;
    let x = Stack::new(blocks.iter().map(|b| b.iter().map(|&k| v[k]).collect()).collect());
    Ok(ConicSolve {
        x,
        solved: matches!(status, SolverStatus::Solved | SolverStatus::AlmostSolved),
    })
}

/// Damped Newton on `F / alpha` from a point where every pair of distinct
/// variables is apart, so the norms are twice differentiable along the way.
/// Returns `None` when a pair collapses or no step makes progress.
pub(crate) fn newton_polish(ff: &FusionForm, x: &Stack) -> Option<Stack> {
    let k = ff.num_vars();
    let d = ff.dim;
    let n = k * d;
    let scale = x.models.iter().map(|v| norm(v)).fold(0.0, f64::max);
    let floor = 1e-12 * (1.0 + scale);
    let apart =
        |w: &[Vec<f64>]| (0..k).all(|a| (a + 1..k).all(|b| ff.omega(a, b) == 0.0 || dist(&w[a], &w[b]) > floor));
    let mut w = x.models.clone();
    if !apart(&w) {
        return None;
    }
    let mut val = ff.value(&w);
    for _ in 0..50 {
        let g = ff.subgradient(&w);
        let gvec = DVector::from_iterator(n, g.iter().flatten().copied());
        if gvec.amax() <= 1e-14 * (1.0 + val.abs()) {
            break;
        }
        let mut h = DMatrix::<f64>::zeros(n, n);
        let mut blk = vec![0.0; d * d];
        for a in 0..k {
            blk.iter_mut().for_each(|v| *v = 0.0);
            ff.cost_add_hessian(a, &w[a], 1.0, &mut blk);
            for i in 0..d {
                for j in 0..d {
                    h[(a * d + i, a * d + j)] += blk[i * d + j];
                }
            }
        }
        for a in 0..k {
            for b in a + 1..k {
                let om = ff.omega(a, b);
                if om == 0.0 {
                    continue;
                }
                let u = sub(&w[a], &w[b]);
                let r = norm(&u);
                let c = 2.0 * om / r;
                for i in 0..d {
                    for j in 0..d {
                        let m = c * (f64::from(u8::from(i == j)) - u[i] * u[j] / (r * r));
                        h[(a * d + i, a * d + j)] += m;
                        h[(b * d + i, b * d + j)] += m;
                        h[(a * d + i, b * d + j)] -= m;
                        h[(b * d + i, a * d + j)] -= m;
                    }
                }
            }
        }
        let shift = 1e-12 * h.diagonal().amax().max(1.0);
        for i in 0..n {
            h[(i, i)] += shift;
        }
        let step = h.cholesky()?.solve(&gvec);
        let mut t = 1.0;
        let mut moved = false;
        while t > 1e-10 {
            let trial: Vec<Vec<f64>> = (0..k)
                .map(|a| (0..d).map(|i| w[a][i] - t * step[a * d + i]).collect())
                .collect();
            if apart(&trial) {
                let v = ff.value(&trial);
                if v <= val - 1e-4 * t * gvec.dot(&step) || (v <= val && t == 1.0) {
                    w = trial;
                    val = v;
                    moved = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    Some(Stack::new(w))
}
