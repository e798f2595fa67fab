//! Accelerated gradient methods on flat parameter vectors.

use crate::linalg::norm;

#[derive(Debug, Clone)]
pub struct Minimized {
    pub x: Vec<f64>,
    pub grad_norm: f64,
    pub iters: usize,
    pub converged: bool,
}

/// Nesterov's constant-momentum method for an `mu`-strongly convex,
/// `l`-smooth function given by its gradient. Stops when the gradient norm
/// drops to `tol`; returns the iterate with the smallest gradient seen.
pub fn agd_strongly_convex<G>(grad: G, x0: &[f64], l: f64, mu: f64, tol: f64, max_iters: usize) -> Minimized
where
    G: Fn(&[f64], &mut [f64]),
{
    let n = x0.len();
    let beta = if mu > 0.0 {
        (l.sqrt() - mu.sqrt()) / (l.sqrt() + mu.sqrt())
    } else {
        0.9
    };
    let mut x = x0.to_vec();
    let mut y = x.clone();
    let mut g = vec![0.0; n];
    let mut best = x.clone();
    grad(&x, &mut g);
    let mut best_norm = norm(&g);
    let mut iters = 0;
    while best_norm > tol && iters < max_iters {
        grad(&y, &mut g);
        let x_next: Vec<f64> = y.iter().zip(&g).map(|(yi, gi)| yi - gi / l).collect();
        for k in 0..n {
            y[k] = x_next[k] + beta * (x_next[k] - x[k]);
        }
        x = x_next;
        iters += 1;
        grad(&x, &mut g);
        let gn = norm(&g);
        if gn < best_norm {
            best_norm = gn;
            best.clone_from(&x);
        }
    }
    Minimized {
        x: best,
        grad_norm: best_norm,
        iters,
        converged: best_norm <= tol,
    }
}

/// FISTA with gradient-based adaptive restart for an `l`-smooth convex
/// function, stopping on the gradient norm.
pub fn agd_restart<G>(grad: G, x0: &[f64], l: f64, tol: f64, max_iters: usize) -> Minimized
where
    G: Fn(&[f64], &mut [f64]),
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut y = x.clone();
    let mut g = vec![0.0; n];
    let mut theta = 1.0_f64;
    grad(&x, &mut g);
    let mut best = x.clone();
    let mut best_norm = norm(&g);
    let mut iters = 0;
    while best_norm > tol && iters < max_iters {
        grad(&y, &mut g);
        let x_next: Vec<f64> = y.iter().zip(&g).map(|(yi, gi)| yi - gi / l).collect();
        // restart when the momentum direction opposes descent
        let restart = g
            .iter()
            .zip(x_next.iter().zip(&x))
            .map(|(gi, (a, b))| gi * (a - b))
            .sum::<f64>()
            > 0.0;
        let theta_next = (1.0 + (1.0 + 4.0 * theta * theta).sqrt()) / 2.0;
        let mom = if restart { 0.0 } else { (theta - 1.0) / theta_next };
        for k in 0..n {
            y[k] = x_next[k] + mom * (x_next[k] - x[k]);
        }
        theta = if restart { 1.0 } else { theta_next };
        x = x_next;
        iters += 1;
        grad(&x, &mut g);
        let gn = norm(&g);
        if gn < best_norm {
            best_norm = gn;
            best.clone_from(&x);
        }
    }
    Minimized {
        x: best,
        grad_norm: best_norm,
        iters,
        converged: best_norm <= tol,
    }
}
