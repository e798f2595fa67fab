//! Small dense-vector helpers. Model vectors are short (d is 1 to 3 in
//! practice), so plain slices beat a matrix library here.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

/// `y += s * x`
pub fn axpy(y: &mut [f64], s: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

pub fn zeros(d: usize) -> Vec<f64> {
    vec![0.0; d]
}

/// Block soft-thresholding, the proximal map of `t * ||.||`.
pub fn block_soft_threshold(v: &[f64], t: f64) -> Vec<f64> {
    let n = norm(v);
    if n <= t || n == 0.0 {
        zeros(v.len())
    } else {
        scale(v, 1.0 - t / n)
    }
}

/// Euclidean projection onto the unit ball.
pub fn project_unit_ball(v: &mut [f64]) {
    let n = norm(v);
    if n > 1.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Mean of a set of equal-length vectors.
pub fn mean(vs: &[Vec<f64>]) -> Vec<f64> {
    let d = vs.first().map_or(0, |v| v.len());
    let mut m = zeros(d);
    for v in vs {
        axpy(&mut m, 1.0, v);
    }
    scale(&m, 1.0 / vs.len().max(1) as f64)
}
