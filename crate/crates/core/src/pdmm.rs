//! Randomized primal-dual protocol between a server and N users.
//!
//! The fusion penalty is split with one auxiliary vector per ordered pair,
//! `x_i - x_j = z_ij`. Each iteration the server draws a random subset of
//! primal variables (the `x_i` and `z_ij`) and a random subset of pair
//! constraints; selected primal variables take a proximal block step,
//! selected constraints take a damped dual step. Users only ever see what
//! the server sends them, and every d-vector crossing the link is counted.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{block_soft_threshold, norm, sub, zeros};
use crate::problem::{FederationProblem, FusionForm, PenaltyKind};
use crate::smooth::agd_strongly_convex;

/// Which terms of the augmented Lagrangian the `x_i` block step minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum XUpdateRule {
    /// Every term that depends on `x_i`, including the constraints
    /// `x_j - x_i = z_ji` owned by the other users.
    #[default]
    BlockExact,
    /// Only the constraints `x_i - x_j = z_ij` owned by user `i`. Its fixed
    /// points need not minimize the objective when models tie.
    OwnedTermsOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    #[default]
    Zeros,
    CommonPoint(Vec<f64>),
    /// One model per user, with `z_ij = x_i - x_j`. Used for warm starts.
    Warm(Vec<Vec<f64>>),
}

/// Stop updating `z_ij` once it stayed within `tol` of zero for `window`
/// consecutive selected updates. Only a restart unfreezes a pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZFreeze {
    pub window: usize,
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdmmConfig {
    pub rho: f64,
    pub eta_x: f64,
    pub eta_z: f64,
    pub tau: f64,
    pub nu: f64,
    pub s_p: usize,
    pub s_d: usize,
    pub max_iters: usize,
    #[serde(default = "default_inner_tol")]
    pub inner_tol: f64,
    #[serde(default = "default_inner_max_iters")]
    pub inner_max_iters: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub init: Init,
    #[serde(default)]
    pub z_freeze: Option<ZFreeze>,
    #[serde(default)]
    pub x_rule: XUpdateRule,
}

fn default_inner_tol() -> f64 {
    1e-10
}

fn default_inner_max_iters() -> usize {
    1000
}

impl PdmmConfig {
    /// `rho = eta = 10`, `tau = 4/5`, `nu = 1/5`, with a fraction `activation`
    /// of the primal and dual index sets drawn per iteration.
    pub fn damped(n: usize, activation: f64, max_iters: usize, seed: u64) -> Self {
        let s_p = ((activation * (n * n) as f64).round() as usize).clamp(1, n * n);
        let s_d = ((activation * (n * (n - 1)) as f64).round() as usize).clamp(1, (n * (n - 1)).max(1));
        Self {
            rho: 10.0,
            eta_x: 10.0,
            eta_z: 10.0,
            tau: 0.8,
            nu: 0.2,
            s_p,
            s_d,
            max_iters,
            inner_tol: default_inner_tol(),
            inner_max_iters: default_inner_max_iters(),
            seed,
            init: Init::Zeros,
            z_freeze: None,
            x_rule: XUpdateRule::BlockExact,
        }
    }

    /// Every variable and constraint active each iteration.
    pub fn full_activation(n: usize, rho: f64, max_iters: usize) -> Self {
        Self {
            rho,
            eta_x: 0.0,
            eta_z: 0.0,
            tau: 1.0,
            nu: 0.0,
            s_p: n * n,
            s_d: n * (n - 1),
            ..Self::damped(n, 1.0, max_iters, 0)
        }
    }

    pub fn kernel(&self) -> KernelParams {
        KernelParams {
            rho: self.rho,
            eta_x: self.eta_x,
            eta_z: self.eta_z,
            tau: self.tau,
            nu: self.nu,
            x_rule: self.x_rule,
            inner_tol: self.inner_tol,
            inner_max_iters: self.inner_max_iters,
        }
    }

    pub fn validate(&self, n: usize, d: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if n < 2 {
            return bad(format!("the protocol needs at least 2 users, got {n}"));
        }
        self.kernel().validate()?;
        if self.s_p < 1 || self.s_p > n * n {
            return bad(format!("s_p must lie in [1, {}], got {}", n * n, self.s_p));
        }
        if self.s_d < 1 || self.s_d > n * (n - 1) {
            return bad(format!("s_d must lie in [1, {}], got {}", n * (n - 1), self.s_d));
        }
        match &self.init {
            Init::Zeros => {}
            Init::CommonPoint(p) => check_dim("initial point", d, p.len())?,
            Init::Warm(xs) => {
                check_dim("warm start length", n, xs.len())?;
                for x in xs {
                    check_dim("warm start model", d, x.len())?;
                }
            }
        }
        if let Some(f) = &self.z_freeze {
            if f.window == 0 || !(f.tol > 0.0) {
                return bad("z_freeze needs window >= 1 and tol > 0".into());
            }
        }
        Ok(())
    }
}

/// Step parameters shared by the protocol and the serial sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub rho: f64,
    pub eta_x: f64,
    pub eta_z: f64,
    pub tau: f64,
    pub nu: f64,
    pub x_rule: XUpdateRule,
    pub inner_tol: f64,
    pub inner_max_iters: usize,
}

impl KernelParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.rho > 0.0
            && self.rho.is_finite()
            && self.eta_x >= 0.0
            && self.eta_z >= 0.0
            && self.tau > 0.0
            && self.nu >= 0.0
            && self.inner_tol > 0.0
            && self.inner_max_iters >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "need rho > 0, eta >= 0, tau > 0, nu >= 0, inner_tol > 0, inner_max_iters >= 1; got {self:?}"
            )))
        }
    }
}

/// What user `i` knows about one peer `j` when updating `x_i`.
#[derive(Debug, Clone, Copy)]
pub struct Peer<'a> {
    pub x_j: &'a [f64],
    /// `x_j` as used in the owned term; user `i` substitutes its own model
    /// for a frozen pair.
    pub x_j_owned: &'a [f64],
    pub z_ij: &'a [f64],
    pub mu_hat_ij: &'a [f64],
    pub z_ji: &'a [f64],
    pub mu_hat_ji: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct XStep {
    pub value: Vec<f64>,
    pub converged: bool,
}

/// Block step for `x_i`: minimizes
/// `h_i(x) + sum_j mu_hat_ij.x + rho/2 ||x - x_j - z_ij||^2 + eta_x/2 ||x - x_prev||^2`,
/// plus `- mu_hat_ji.x + rho/2 ||x_j - x - z_ji||^2` under [`XUpdateRule::BlockExact`].
/// Closed form when `h_i` is quadratic, accelerated gradient otherwise.
pub fn x_update(ff: &FusionForm, i: usize, x_prev: &[f64], peers: &[Peer<'_>], kp: &KernelParams) -> XStep {
    let d = x_prev.len();
    let rho = kp.rho;
    let both = kp.x_rule == XUpdateRule::BlockExact;
    let mut c: Vec<f64> = x_prev.iter().map(|v| kp.eta_x * v).collect();
    for p in peers {
        for k in 0..d {
            c[k] += rho * (p.x_j_owned[k] + p.z_ij[k]) - p.mu_hat_ij[k];
            if both {
                c[k] += rho * (p.x_j[k] - p.z_ji[k]) + p.mu_hat_ji[k];
            }
        }
    }
    let m = peers.len() as f64;
    let q = kp.eta_x + rho * m * if both { 2.0 } else { 1.0 };
    if let Some((s, a)) = ff.cost_quadratic(i) {
        let value = (0..d).map(|k| (s * a[k] + c[k]) / (s + q)).collect();
        return XStep { value, converged: true };
    }
    let grad = |x: &[f64], g: &mut [f64]| {
        for k in 0..d {
            g[k] = q * x[k] - c[k];
        }
        ff.cost_add_grad(i, x, 1.0, g);
    };
    let r = agd_strongly_convex(
        grad,
        x_prev,
        ff.cost_lipschitz(i) + q,
        q,
        kp.inner_tol,
        kp.inner_max_iters,
    );
    XStep {
        value: r.x,
        converged: r.converged,
    }
}

/// Block step for `z_ij`: the proximal map of `omega ||.||` at the
/// dual-shifted difference.
pub fn z_update(
    x_i: &[f64],
    x_j: &[f64],
    mu_hat_ij: &[f64],
    z_prev: &[f64],
    omega: f64,
    kp: &KernelParams,
) -> Vec<f64> {
    let den = kp.rho + kp.eta_z;
    let v: Vec<f64> = (0..x_i.len())
        .map(|k| (kp.rho * (x_i[k] - x_j[k]) + mu_hat_ij[k] + kp.eta_z * z_prev[k]) / den)
        .collect();
    block_soft_threshold(&v, omega / den)
}

/// Damped dual ascent on `mu` and the backward correction giving `mu_hat`,
/// for constraint residual `r = x_i - x_j - z_ij`.
pub fn dual_update(mu: &[f64], r: &[f64], kp: &KernelParams) -> (Vec<f64>, Vec<f64>) {
    let mu_next: Vec<f64> = mu.iter().zip(r).map(|(m, ri)| m + kp.tau * kp.rho * ri).collect();
    let mu_hat = mu_next.iter().zip(r).map(|(m, ri)| m - kp.nu * kp.rho * ri).collect();
    (mu_next, mu_hat)
}

pub(crate) fn residual(x_i: &[f64], x_j: &[f64], z_ij: &[f64]) -> Vec<f64> {
    (0..x_i.len()).map(|k| x_i[k] - x_j[k] - z_ij[k]).collect()
}

/// A primal variable addressed by an index of the primal universe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrimalIndex {
    X(usize),
    Z(usize, usize),
}

/// Index universes: primal indices `0..n` are the `x_i`, then the `z_ij`
/// in lexicographic order of ordered pairs; dual indices are the ordered
/// pairs in the same order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexSets {
    pub n: usize,
}

impl IndexSets {
    pub fn primal_len(&self) -> usize {
        self.n * self.n
    }

    pub fn dual_len(&self) -> usize {
        self.n * (self.n - 1)
    }

    pub fn pair(&self, l: usize) -> (usize, usize) {
        let i = l / (self.n - 1);
        let r = l % (self.n - 1);
        (i, if r >= i { r + 1 } else { r })
    }

    pub fn pair_index(&self, i: usize, j: usize) -> usize {
        i * (self.n - 1) + if j > i { j - 1 } else { j }
    }

    pub fn primal(&self, l: usize) -> PrimalIndex {
        if l < self.n {
            PrimalIndex::X(l)
        } else {
            let (i, j) = self.pair(l - self.n);
            PrimalIndex::Z(i, j)
        }
    }
}

/// A d-vector crossing the server link.
#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    X { user: usize, value: Vec<f64> },
    Z { i: usize, j: usize, value: Vec<f64> },
    Dual { i: usize, j: usize, value: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationTally {
    pub t: usize,
    pub up: usize,
    pub down: usize,
    pub freeze_skips: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct CommLedger {
    pub uplink_msgs: usize,
    pub downlink_msgs: usize,
    pub uplink_floats: usize,
    pub downlink_floats: usize,
    pub freeze_skips: usize,
    pub per_iteration: Vec<IterationTally>,
}

impl CommLedger {
    fn record(&mut self, t: usize, up: usize, down: usize, skips: usize, d: usize) {
        self.uplink_msgs += up;
        self.downlink_msgs += down;
        self.uplink_floats += up * d;
        self.downlink_floats += down * d;
        self.freeze_skips += skips;
        self.per_iteration.push(IterationTally {
            t,
            up,
            down,
            freeze_skips: skips,
        });
    }
}

/// Snapshot of every protocol variable. Pair-indexed vectors follow
/// [`IndexSets::pair`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdmmState {
    pub x: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    pub mu: Vec<Vec<f64>>,
    pub mu_hat: Vec<Vec<f64>>,
    pub t: usize,
    pub frozen: Vec<(usize, usize)>,
}

impl PdmmState {
    pub fn z(&self, i: usize, j: usize) -> &[f64] {
        &self.z[IndexSets { n: self.x.len() }.pair_index(i, j)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: usize,
    pub objective: f64,
    pub uplink_msgs_cum: usize,
    pub downlink_msgs_cum: usize,
    pub inner_warnings: usize,
}

#[derive(Debug, Clone)]
pub struct PdmmRun {
    pub state: PdmmState,
    pub ledger: CommLedger,
    pub trace: Vec<TraceRow>,
}

/// Per-iteration observer: iteration count and current models.
pub type TraceHook<'a> = &'a mut dyn FnMut(usize, &[Vec<f64>]);

/// What one user holds. Rows `*_out[j]` belong to pairs `(i, j)` owned by
/// this user, `*_in[j]` mirror pairs `(j, i)`.
struct UserNode {
    id: usize,
    x: Vec<Vec<f64>>,
    z_out: Vec<Vec<f64>>,
    z_in: Vec<Vec<f64>>,
    mu_hat_out: Vec<Vec<f64>>,
    mu_hat_in: Vec<Vec<f64>>,
    small_streak: Vec<usize>,
    frozen: Vec<bool>,
}

impl UserNode {
    fn compute_x(&self, ff: &FusionForm, kp: &KernelParams) -> XStep {
        let me = self.id;
        let peers: Vec<Peer<'_>> = (0..self.x.len())
            .filter(|&j| j != me)
            .map(|j| Peer {
                x_j: &self.x[j],
                x_j_owned: if self.frozen[j] { &self.x[me] } else { &self.x[j] },
                z_ij: &self.z_out[j],
                mu_hat_ij: &self.mu_hat_out[j],
                z_ji: &self.z_in[j],
                mu_hat_ji: &self.mu_hat_in[j],
            })
            .collect();
        x_update(ff, me, &self.x[me], &peers, kp)
    }

    fn compute_z(&self, j: usize, ff: &FusionForm, kp: &KernelParams) -> Vec<f64> {
        let me = self.id;
        z_update(
            &self.x[me],
            &self.x[j],
            &self.mu_hat_out[j],
            &self.z_out[j],
            ff.omega(me, j),
            kp,
        )
    }

    fn note_z(&mut self, j: usize, z_norm: f64, freeze: Option<&ZFreeze>) {
        if let Some(f) = freeze {
            if z_norm <= f.tol {
                self.small_streak[j] += 1;
                if self.small_streak[j] >= f.window {
                    self.frozen[j] = true;
                }
            } else {
                self.small_streak[j] = 0;
            }
        }
    }

    fn receive(&mut self, msg: &Message, kp: &KernelParams) {
        let me = self.id;
        match msg {
            Message::X { user, value } => self.x[*user].clone_from(value),
            Message::Z { i, j, value } => {
                if *i == me {
                    self.z_out[*j].clone_from(value);
                } else if *j == me {
                    self.z_in[*i].clone_from(value);
                }
            }
            Message::Dual { i, j, value } => {
                if *i == me {
                    let r = residual(&self.x[me], &self.x[*j], &self.z_out[*j]);
                    self.mu_hat_out[*j] = dual_update_hat(value, &r, kp);
                } else if *j == me {
                    let r = residual(&self.x[*i], &self.x[me], &self.z_in[*i]);
                    self.mu_hat_in[*i] = dual_update_hat(value, &r, kp);
                }
            }
        }
    }
}

fn dual_update_hat(mu_next: &[f64], r: &[f64], kp: &KernelParams) -> Vec<f64> {
    mu_next.iter().zip(r).map(|(m, ri)| m - kp.nu * kp.rho * ri).collect()
}

/// The server's copy of the primal variables and the dual `mu`, indexed
/// `i * n + j`.
struct Server {
    n: usize,
    x: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    mu: Vec<Vec<f64>>,
}

impl Server {
    fn absorb(&mut self, msg: &Message) {
        match msg {
            Message::X { user, value } => self.x[*user].clone_from(value),
            Message::Z { i, j, value } => self.z[*i * self.n + *j].clone_from(value),
            Message::Dual { .. } => {}
        }
    }

    fn dual_step(&mut self, i: usize, j: usize, kp: &KernelParams) -> Message {
        let p = i * self.n + j;
        let r = residual(&self.x[i], &self.x[j], &self.z[p]);
        let (mu_next, _) = dual_update(&self.mu[p], &r, kp);
        self.mu[p].clone_from(&mu_next);
        Message::Dual { i, j, value: mu_next }
    }
}

fn subsets(seed: u64, t: usize, sets: &IndexSets, s_p: usize, s_d: usize) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * t as u64);
    let mut sp = sample(&mut rng, sets.primal_len(), s_p).into_vec();
    rng.set_stream(2 * t as u64 + 1);
    rng.set_word_pos(0);
    let mut sd = sample(&mut rng, sets.dual_len(), s_d).into_vec();
    sp.sort_unstable();
    sd.sort_unstable();
    (sp, sd)
}

/// Runs `cfg.max_iters` protocol iterations on a sum-of-norms problem.
pub fn pdmm_run(problem: &FederationProblem, cfg: &PdmmConfig, mut hook: Option<TraceHook<'_>>) -> Result<PdmmRun> {
    if !matches!(
        problem.penalty(),
        PenaltyKind::SumOfNorms { .. } | PenaltyKind::ClusteredSumOfNorms { .. }
    ) {
        return Err(Error::Unsupported("the protocol runs on sum-of-norms problems".into()));
    }
    let ff = problem.fusion_form()?;
    let n = ff.num_vars();
    let d = ff.dim;
    cfg.validate(n, d)?;
    let kp = cfg.kernel();
    let sets = IndexSets { n };
    let x0: Vec<Vec<f64>> = match &cfg.init {
        Init::Zeros => vec![zeros(d); n],
        Init::CommonPoint(p) => vec![p.clone(); n],
        Init::Warm(xs) => xs.clone(),
    };
    let blank = vec![zeros(d); n];
    let gap = |i: usize, j: usize| if i == j { zeros(d) } else { sub(&x0[i], &x0[j]) };
    let mut users: Vec<UserNode> = (0..n)
        .map(|id| UserNode {
            id,
            x: x0.clone(),
            z_out: (0..n).map(|j| gap(id, j)).collect(),
            z_in: (0..n).map(|j| gap(j, id)).collect(),
            mu_hat_out: blank.clone(),
            mu_hat_in: blank.clone(),
            small_streak: vec![0; n],
            frozen: vec![false; n],
        })
        .collect();
    let mut server = Server {
        n,
        x: x0.clone(),
        z: (0..n * n).map(|l| gap(l / n, l % n)).collect(),
        mu: vec![zeros(d); n * n],
    };
    let mut ledger = CommLedger::default();
    let observe = |x: &[Vec<f64>]| -> f64 {
        problem
            .objective(&crate::problem::Stack::new(x.to_vec()))
            .unwrap_or(f64::NAN)
    };
    let mut trace = vec![TraceRow {
        t: 0,
        objective: observe(&server.x),
        uplink_msgs_cum: 0,
        downlink_msgs_cum: 0,
        inner_warnings: 0,
    }];
    if let Some(h) = hook.as_mut() {
        h(0, &server.x);
    }

    for t in 0..cfg.max_iters {
        let (sp, sd) = subsets(cfg.seed, t, &sets, cfg.s_p, cfg.s_d);
        // S2-S3: every selected update reads the iteration-start views
        let mut uplink = Vec::with_capacity(sp.len());
        let mut skips = 0;
        let mut warnings = 0;
        let mut z_notes = Vec::new();
        for &l in &sp {
            match sets.primal(l) {
                PrimalIndex::X(i) => {
                    let step = users[i].compute_x(&ff, &kp);
                    if !step.converged {
                        warnings += 1;
                    }
                    uplink.push(Message::X {
                        user: i,
                        value: step.value,
                    });
                }
                PrimalIndex::Z(i, j) => {
                    if users[i].frozen[j] {
                        skips += 1;
                        continue;
                    }
                    let value = users[i].compute_z(j, &ff, &kp);
                    z_notes.push((i, j, norm(&value)));
                    uplink.push(Message::Z { i, j, value });
                }
            }
        }
        // S5-S7: uplink, then broadcast of all collected primal updates
        for msg in &uplink {
            server.absorb(msg);
        }
        for u in users.iter_mut() {
            for msg in &uplink {
                u.receive(msg, &kp);
            }
        }
        for (i, j, zn) in z_notes {
            users[i].note_z(j, zn, cfg.z_freeze.as_ref());
        }
        // S8-S11: dual steps on the server, multicast to both endpoints
        let mut duals = Vec::with_capacity(sd.len());
        for &l in &sd {
            let (i, j) = sets.pair(l);
            duals.push(server.dual_step(i, j, &kp));
        }
        for msg in &duals {
            if let Message::Dual { i, j, .. } = msg {
                users[*i].receive(msg, &kp);
                users[*j].receive(msg, &kp);
            }
        }
        let up = uplink.len();
        let down = uplink.len() + duals.len();
        ledger.record(t + 1, up, down, skips, d);
        trace.push(TraceRow {
            t: t + 1,
            objective: observe(&server.x),
            uplink_msgs_cum: ledger.uplink_msgs,
            downlink_msgs_cum: ledger.downlink_msgs,
            inner_warnings: warnings,
        });
        if let Some(h) = hook.as_mut() {
            h(t + 1, &server.x);
        }
    }

    let mut frozen = Vec::new();
    let mut z = Vec::with_capacity(sets.dual_len());
    let mut mu = Vec::with_capacity(sets.dual_len());
    let mut mu_hat = Vec::with_capacity(sets.dual_len());
    for l in 0..sets.dual_len() {
        let (i, j) = sets.pair(l);
        z.push(users[i].z_out[j].clone());
        mu.push(server.mu[i * n + j].clone());
        mu_hat.push(users[i].mu_hat_out[j].clone());
        if users[i].frozen[j] {
            frozen.push((i, j));
        }
    }
    Ok(PdmmRun {
        state: PdmmState {
            x: server.x,
            z,
            mu,
            mu_hat,
            t: cfg.max_iters,
            frozen,
        },
        ledger,
        trace,
    })
}
