//! Convex local costs `f_i` with exact gradients and curvature metadata.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{dist, dot, sub};

/// One labeled feature vector. Labels are +1 or -1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoint {
    pub x: Vec<f64>,
    pub label: i8,
}

impl LabeledPoint {
    pub fn new(x: Vec<f64>, label: i8) -> Self {
        Self { x, label }
    }
}

fn one() -> f64 {
    1.0
}

fn is_one(s: &f64) -> bool {
    *s == 1.0
}

/// Parameters of a loss, as they appear in problem files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    /// `(scale/2) ||x - anchor||^2`.
    Quadratic {
        anchor: Vec<f64>,
        #[serde(default = "one", skip_serializing_if = "is_one")]
        scale: f64,
    },
    /// `c/2 ||w||^2 + (1/m) sum max(0, 1 - l (<w,a> - b))^2` with `x = [w, b]`.
    SquaredHinge { points: Vec<LabeledPoint>, reg_c: f64 },
    /// Quadratic within `delta` of the anchor, linear outside.
    Huber { anchor: Vec<f64>, delta: f64 },
}

/// A validated loss with its gradient Lipschitz constant and, when known,
/// its strong convexity modulus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LossKind", into = "LossKind")]
pub struct LossSpec {
    kind: LossKind,
    dim: usize,
    lipschitz: f64,
    strong_mu: Option<f64>,
    /// Augmented hinge rows `(l a, -l)`, cached.
    rows: Vec<Vec<f64>>,
}

impl From<LossSpec> for LossKind {
    fn from(s: LossSpec) -> Self {
        s.kind
    }
}

impl TryFrom<LossKind> for LossSpec {
    type Error = Error;

    fn try_from(kind: LossKind) -> Result<Self> {
        match kind {
            LossKind::Quadratic { anchor, scale } => Self::quadratic_scaled(anchor, scale),
            LossKind::SquaredHinge { points, reg_c } => Self::squared_hinge(points, reg_c),
            LossKind::Huber { anchor, delta } => Self::huber(anchor, delta),
        }
    }
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Data(format!("{what} has non-finite entries")))
    }
}

impl LossSpec {
    /// `½||x - a||²`.
    pub fn quadratic(anchor: Vec<f64>) -> Result<Self> {
        Self::quadratic_scaled(anchor, 1.0)
    }

    /// `(s/2)||x - a||²`, with `L = mu = s`.
    pub fn quadratic_scaled(anchor: Vec<f64>, scale: f64) -> Result<Self> {
        if anchor.is_empty() {
            return Err(Error::Data("empty anchor".into()));
        }
        check_finite(&anchor, "anchor")?;
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Data(format!("quadratic scale must be positive, got {scale}")));
        }
        Ok(Self {
            dim: anchor.len(),
            kind: LossKind::Quadratic { anchor, scale },
            lipschitz: scale,
            strong_mu: Some(scale),
            rows: Vec::new(),
        })
    }

    pub fn huber(anchor: Vec<f64>, delta: f64) -> Result<Self> {
        if anchor.is_empty() {
            return Err(Error::Data("empty anchor".into()));
        }
        check_finite(&anchor, "anchor")?;
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::Data(format!("huber delta must be positive, got {delta}")));
        }
        Ok(Self {
            dim: anchor.len(),
            kind: LossKind::Huber { anchor, delta },
            lipschitz: 1.0,
            strong_mu: None,
            rows: Vec::new(),
        })
    }

    pub fn squared_hinge(points: Vec<LabeledPoint>, reg_c: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Data("squared hinge loss needs at least one point".into()));
        }
        if !(reg_c >= 0.0 && reg_c.is_finite()) {
            return Err(Error::Data(format!("reg_c must be nonnegative, got {reg_c}")));
        }
        let p = points[0].x.len();
        if p == 0 {
            return Err(Error::Data("empty feature vector".into()));
        }
        let mut rows = Vec::with_capacity(points.len());
        for pt in &points {
            check_dim("squared hinge feature", p, pt.x.len())?;
            check_finite(&pt.x, "feature")?;
            if pt.label != 1 && pt.label != -1 {
                return Err(Error::Data(format!("label must be +1 or -1, got {}", pt.label)));
            }
            let l = f64::from(pt.label);
            let mut row: Vec<f64> = pt.x.iter().map(|v| l * v).collect();
            row.push(-l);
            rows.push(row);
        }
        let d = p + 1;
        let m = rows.len();
        let gram = DMatrix::from_fn(d, d, |r, c| rows.iter().map(|a| a[r] * a[c]).sum::<f64>());
        let lam_max = gram.symmetric_eigenvalues().iter().cloned().fold(0.0_f64, f64::max);
        let lipschitz = reg_c + 2.0 / m as f64 * lam_max;
        Ok(Self {
            dim: d,
            kind: LossKind::SquaredHinge { points, reg_c },
            lipschitz,
            strong_mu: if reg_c > 0.0 { Some(reg_c) } else { None },
            rows,
        })
    }

    pub fn kind(&self) -> &LossKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    /// Strong convexity modulus. For the squared hinge this is `reg_c` and
    /// holds only on the `w` block.
    pub fn strong_mu(&self) -> Option<f64> {
        self.strong_mu
    }

    /// True when `strong_mu` holds on every coordinate.
    pub fn strongly_convex_all_coords(&self) -> bool {
        matches!(self.kind, LossKind::Quadratic { .. })
    }

    /// `(scale, anchor)` for quadratic losses.
    pub fn as_quadratic(&self) -> Option<(f64, &[f64])> {
        match &self.kind {
            LossKind::Quadratic { anchor, scale } => Some((*scale, anchor)),
            _ => None,
        }
    }

    pub fn value(&self, x: &[f64]) -> Result<f64> {
        check_dim("loss argument", self.dim, x.len())?;
        Ok(self.value_unchecked(x))
    }

    pub fn grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("loss argument", self.dim, x.len())?;
        let mut g = vec![0.0; self.dim];
        self.add_grad(x, 1.0, &mut g);
        Ok(g)
    }

    pub(crate) fn value_unchecked(&self, x: &[f64]) -> f64 {
        match &self.kind {
            LossKind::Quadratic { anchor, scale } => {
                let r = dist(x, anchor);
                0.5 * scale * r * r
            }
            LossKind::Huber { anchor, delta } => {
                let r = dist(x, anchor);
                if r <= *delta {
                    0.5 * r * r
                } else {
                    delta * (r - 0.5 * delta)
                }
            }
            LossKind::SquaredHinge { reg_c, .. } => {
                let p = self.dim - 1;
                let reg = 0.5 * reg_c * dot(&x[..p], &x[..p]);
                let m = self.rows.len() as f64;
                let data: f64 = self
                    .rows
                    .iter()
                    .map(|a| {
                        let s = (1.0 - dot(a, x)).max(0.0);
                        s * s
                    })
                    .sum();
                reg + data / m
            }
        }
    }

    /// `h += w * H(x)` for a generalized Hessian `H`, with `h` row-major
    /// `dim x dim`.
    pub(crate) fn add_hessian(&self, x: &[f64], w: f64, h: &mut [f64]) {
        let d = self.dim;
        match &self.kind {
            LossKind::Quadratic { scale, .. } => {
                for k in 0..d {
                    h[k * d + k] += w * scale;
                }
            }
            LossKind::Huber { anchor, delta } => {
                let diff = sub(x, anchor);
                let r = crate::linalg::norm(&diff);
                if r <= *delta {
                    for k in 0..d {
                        h[k * d + k] += w;
                    }
                } else {
                    let s = delta / r;
                    for a in 0..d {
                        h[a * d + a] += w * s;
                        for b in 0..d {
                            h[a * d + b] -= w * s * diff[a] * diff[b] / (r * r);
                        }
                    }
                }
            }
            LossKind::SquaredHinge { reg_c, .. } => {
                for k in 0..d - 1 {
                    h[k * d + k] += w * reg_c;
                }
                let c = 2.0 * w / self.rows.len() as f64;
                for a in &self.rows {
                    if 1.0 - dot(a, x) > 0.0 {
                        for i in 0..d {
                            for j in 0..d {
                                h[i * d + j] += c * a[i] * a[j];
                            }
                        }
                    }
                }
            }
        }
    }

    /// `g += w * grad f(x)`
    pub(crate) fn add_grad(&self, x: &[f64], w: f64, g: &mut [f64]) {
        match &self.kind {
            LossKind::Quadratic { anchor, scale } => {
                for ((gi, xi), ai) in g.iter_mut().zip(x).zip(anchor) {
                    *gi += w * scale * (xi - ai);
                }
            }
            LossKind::Huber { anchor, delta } => {
                let diff = sub(x, anchor);
                let r = crate::linalg::norm(&diff);
                let s = if r <= *delta { 1.0 } else { delta / r };
                for (gi, di) in g.iter_mut().zip(&diff) {
                    *gi += w * s * di;
                }
            }
            LossKind::SquaredHinge { reg_c, .. } => {
                let p = self.dim - 1;
                for (gi, xi) in g[..p].iter_mut().zip(&x[..p]) {
                    *gi += w * reg_c * xi;
                }
                let c = -2.0 * w / self.rows.len() as f64;
                for a in &self.rows {
                    let s = 1.0 - dot(a, x);
                    if s > 0.0 {
                        for (gi, ai) in g.iter_mut().zip(a) {
                            *gi += c * s * ai;
                        }
                    }
                }
            }
        }
    }
}

/// Convenience: `value` of a loss.
pub fn loss_value(spec: &LossSpec, x: &[f64]) -> Result<f64> {
    spec.value(x)
}

/// Convenience: gradient of a loss.
pub fn loss_grad(spec: &LossSpec, x: &[f64]) -> Result<Vec<f64>> {
    spec.grad(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_value_at_anchor_is_zero() {
        let f = LossSpec::quadratic(vec![1.0, 2.0]).unwrap();
        assert_eq!(f.value(&[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(f.grad(&[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(f.lipschitz(), 1.0);
        assert_eq!(f.strong_mu(), Some(1.0));
    }

    #[test]
    fn hinge_zero_classifier_single_point() {
        let f = LossSpec::squared_hinge(vec![LabeledPoint::new(vec![1.0, 0.0], 1)], 0.0).unwrap();
        assert_eq!(f.dim(), 3);
        assert_eq!(f.value(&[0.0, 0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(f.grad(&[0.0, 0.0, 0.0]).unwrap(), vec![-2.0, 0.0, 2.0]);
    }

    #[test]
    fn huber_outside_quadratic_zone() {
        let f = LossSpec::huber(vec![0.0], 1.0).unwrap();
        assert_eq!(f.value(&[3.0]).unwrap(), 2.5);
        assert_eq!(f.grad(&[3.0]).unwrap(), vec![1.0]);
        assert_eq!(f.value(&[0.5]).unwrap(), 0.125);
    }

    #[test]
    fn dimension_mismatch_names_dims() {
        let f = LossSpec::quadratic(vec![0.0, 0.0]).unwrap();
        let err = f.value(&[1.0]).unwrap_err();
        assert_eq!(
            err,
            Error::Dimension {
                context: "loss argument",
                expected: 2,
                got: 1
            }
        );
    }

    #[test]
    fn bad_label_rejected() {
        assert!(LossSpec::squared_hinge(vec![LabeledPoint::new(vec![1.0], 0)], 0.0).is_err());
    }

    #[test]
    fn json_round_trip() {
        let f = LossSpec::squared_hinge(
            vec![
                LabeledPoint::new(vec![1.0, 2.0], 1),
                LabeledPoint::new(vec![-1.0, 0.5], -1),
            ],
            1e-3,
        )
        .unwrap();
        let s = serde_json::to_string(&f).unwrap();
        assert!(s.contains("\"kind\":\"squared_hinge\""));
        let g: LossSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(f, g);
        let q: LossSpec = serde_json::from_str(r#"{"kind":"quadratic","anchor":[1,2]}"#).unwrap();
        assert_eq!(q.as_quadratic(), Some((1.0, &[1.0, 2.0][..])));
    }
}
