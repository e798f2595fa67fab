//! Synthetic clustered classification data: per cluster, two overlapping
//! class ellipses in the plane; users subsample their cluster's pool.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::losses::LabeledPoint;
use crate::problem::Partition;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipseSpec {
    pub center: [f64; 2],
    /// Semi-axis along the rotated first axis, then the second.
    pub semi_axes: [f64; 2],
    pub rotation: f64,
    pub label: i8,
}

impl EllipseSpec {
    pub fn validate(&self) -> Result<()> {
        let [a, b] = self.semi_axes;
        if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
            return Err(Error::Data(format!(
                "degenerate ellipse semi-axes {:?}",
                self.semi_axes
            )));
        }
        if self.label != 1 && self.label != -1 {
            return Err(Error::Data(format!("label must be +1 or -1, got {}", self.label)));
        }
        Ok(())
    }

    /// `((u/a)^2 + (v/b)^2)` in the ellipse frame; at most 1 inside.
    pub fn level(&self, p: [f64; 2]) -> f64 {
        let (s, c) = self.rotation.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.semi_axes[0]).powi(2) + (v / self.semi_axes[1]).powi(2)
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        self.level(p) <= 1.0
    }

    /// Uniform point by rejection from the bounding box.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> [f64; 2] {
        let (s, c) = self.rotation.sin_cos();
        let [a, b] = self.semi_axes;
        let wx = (a * a * c * c + b * b * s * s).sqrt();
        let wy = (a * a * s * s + b * b * c * c).sqrt();
        loop {
            let p = [
                self.center[0] + rng.gen_range(-wx..=wx),
                self.center[1] + rng.gen_range(-wy..=wy),
            ];
            if self.contains(p) {
                return p;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterGeometry {
    pub positive: EllipseSpec,
    pub negative: EllipseSpec,
}

impl ClusterGeometry {
    /// Class ellipses offset by `±offset` along the unit axis at angle
    /// `axis_angle`, elongated across it.
    pub fn offset_pair(center: [f64; 2], axis_angle: f64, offset: f64, semi_axes: [f64; 2]) -> Self {
        let (s, c) = axis_angle.sin_cos();
        let mk = |sign: f64, label: i8| EllipseSpec {
            center: [center[0] + sign * offset * c, center[1] + sign * offset * s],
            semi_axes,
            rotation: axis_angle + PI / 2.0,
            label,
        };
        Self {
            positive: mk(1.0, 1),
            negative: mk(-1.0, -1),
        }
    }

    /// Three clusters at 90, 210 and 330 degrees on a radius-6 circle, each
    /// split radially.
    pub fn default_set() -> Vec<Self> {
        [90.0_f64, 210.0, 330.0]
            .iter()
            .map(|deg| {
                let th = deg.to_radians();
                Self::offset_pair([6.0 * th.cos(), 6.0 * th.sin()], th, 0.8, [2.0, 1.0])
            })
            .collect()
    }

    /// Whether some positive sample falls inside the negative ellipse.
    pub fn classes_overlap(&self, seed: u64) -> bool {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..10_000).any(|_| self.negative.contains(self.positive.sample(&mut rng)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub clusters: Vec<ClusterGeometry>,
    pub points_per_class: usize,
    pub users_per_cluster: usize,
    pub points_per_user: usize,
    #[serde(default)]
    pub sample_fraction: Option<f64>,
    pub test_points_per_class: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            clusters: ClusterGeometry::default_set(),
            points_per_class: 100,
            users_per_cluster: 20,
            points_per_user: 10,
            sample_fraction: None,
            test_points_per_class: 100,
            seed: 0,
        }
    }
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clusters.is_empty() {
            return Err(Error::Config("at least one cluster required".into()));
        }
        for (k, c) in self.clusters.iter().enumerate() {
            c.positive.validate()?;
            c.negative.validate()?;
            if c.positive.label != 1 || c.negative.label != -1 {
                return Err(Error::Data(format!("cluster {k}: ellipse labels must be +1 / -1")));
            }
        }
        if self.points_per_class == 0 || self.users_per_cluster == 0 || self.test_points_per_class == 0 {
            return Err(Error::Config("point and user counts must be positive".into()));
        }
        let pool = 2 * self.points_per_class;
        let per_user = self.user_sample_size();
        if per_user == 0 || per_user > pool {
            return Err(Error::Config(format!(
                "each user needs between 1 and {pool} points, got {per_user}"
            )));
        }
        if let Some(f) = self.sample_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("sample_fraction must lie in (0, 1], got {f}")));
            }
        }
        Ok(())
    }

    pub fn user_sample_size(&self) -> usize {
        match self.sample_fraction {
            Some(f) => (f * (2 * self.points_per_class) as f64).round() as usize,
            None => self.points_per_user,
        }
    }

    pub fn num_users(&self) -> usize {
        self.clusters.len() * self.users_per_cluster
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkData {
    pub cluster_train: Vec<Vec<LabeledPoint>>,
    pub user_datasets: Vec<Vec<LabeledPoint>>,
    pub cluster_test: Vec<Vec<LabeledPoint>>,
    pub true_partition: Partition,
    /// Cluster of each user.
    pub user_cluster: Vec<usize>,
}

fn draw(e: &EllipseSpec, count: usize, rng: &mut ChaCha8Rng) -> Vec<LabeledPoint> {
    (0..count)
        .map(|_| LabeledPoint::new(e.sample(rng).to_vec(), e.label))
        .collect()
}

pub fn generate(spec: &BenchmarkSpec) -> Result<BenchmarkData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut cluster_train = Vec::new();
    let mut cluster_test = Vec::new();
    for c in &spec.clusters {
        let mut pool = draw(&c.positive, spec.points_per_class, &mut rng);
        pool.extend(draw(&c.negative, spec.points_per_class, &mut rng));
        cluster_train.push(pool);
    }
    for c in &spec.clusters {
        let mut test = draw(&c.positive, spec.test_points_per_class, &mut rng);
        test.extend(draw(&c.negative, spec.test_points_per_class, &mut rng));
        cluster_test.push(test);
    }
    let m = spec.user_sample_size();
    let mut user_datasets = Vec::new();
    let mut user_cluster = Vec::new();
    for (k, pool) in cluster_train.iter().enumerate() {
        for _ in 0..spec.users_per_cluster {
            let idx = sample(&mut rng, pool.len(), m);
            user_datasets.push(idx.iter().map(|i| pool[i].clone()).collect());
            user_cluster.push(k);
        }
    }
    Ok(BenchmarkData {
        cluster_train,
        user_datasets,
        cluster_test,
        true_partition: Partition::from_labels(&user_cluster),
        user_cluster,
    })
}

impl BenchmarkData {
    /// Rows `x1,x2,label,cluster,user` for every user sample.
    pub fn users_csv(&self) -> String {
        let mut s = String::from("x1,x2,label,cluster,user\n");
        for (u, data) in self.user_datasets.iter().enumerate() {
            for p in data {
                s.push_str(&format!(
                    "{},{},{},{},{}\n",
                    p.x[0], p.x[1], p.label, self.user_cluster[u], u
                ));
            }
        }
        s
    }

    /// Rows `x1,x2,label,cluster,user` for the test sets, with an empty user.
    pub fn test_csv(&self) -> String {
        let mut s = String::from("x1,x2,label,cluster,user\n");
        for (k, data) in self.cluster_test.iter().enumerate() {
            for p in data {
                s.push_str(&format!("{},{},{},{},\n", p.x[0], p.x[1], p.label, k));
            }
        }
        s
    }
}
