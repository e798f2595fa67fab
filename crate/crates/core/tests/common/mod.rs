#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sonfed_core::{Convention, FederationProblem, LossSpec, Partition, PenaltyKind, Stack};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn quad(anchors: &[Vec<f64>], penalty: PenaltyKind, conv: Convention) -> FederationProblem {
    let losses = anchors
        .iter()
        .map(|a| LossSpec::quadratic(a.clone()).unwrap())
        .collect();
    FederationProblem::new(losses, penalty, conv).unwrap()
}

pub fn son(lambda: f64) -> PenaltyKind {
    PenaltyKind::SumOfNorms { lambda }
}

pub fn two_point(lambda: f64, conv: Convention) -> FederationProblem {
    quad(&[vec![0.0], vec![4.0]], son(lambda), conv)
}

/// Clustered anchors: `sizes[k]` users around center `k`, each within
/// `radius` of it. Centers sit `sep` apart along random directions.
#[derive(Debug, Clone)]
pub struct Planted {
    pub anchors: Vec<Vec<f64>>,
    pub partition: Partition,
}

pub fn planted(seed: u64, sizes: &[usize], d: usize, radius: f64, sep: f64) -> Planted {
    let mut r = rng(seed);
    let k = sizes.len();
    let mut centers: Vec<Vec<f64>> = Vec::new();
    while centers.len() < k {
        let c: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0) * sep * k as f64).collect();
        if centers.iter().all(|o| sonfed_core::linalg::dist(o, &c) >= sep) {
            centers.push(c);
        }
    }
    let mut anchors = Vec::new();
    let mut blocks = Vec::new();
    for (c, &n) in centers.iter().zip(sizes) {
        let start = anchors.len();
        for _ in 0..n {
            loop {
                let p: Vec<f64> = (0..d).map(|_| r.gen_range(-radius..radius)).collect();
                if sonfed_core::linalg::norm(&p) <= radius {
                    anchors.push(c.iter().zip(&p).map(|(a, b)| a + b).collect());
                    break;
                }
            }
        }
        blocks.push((start..start + n).collect());
    }
    let n = anchors.len();
    Planted {
        anchors,
        partition: Partition::new(blocks, n).unwrap(),
    }
}

pub fn random_stack(r: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Stack {
    Stack::new(
        (0..n)
            .map(|_| (0..d).map(|_| r.gen_range(-scale..scale)).collect())
            .collect(),
    )
}
