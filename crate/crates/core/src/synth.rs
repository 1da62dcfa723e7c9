//! Synthetic data: the clustered toy world used for desk-scale training and
//! evaluation, and planted homographies for geometric verification.

pub mod suite;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoders::FeatureRecord;
use crate::geodesy::{destination, generate_uniform_gallery, GeoError, GpsCoordinate};
use crate::refine::{Correspondence, MatchInput};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyWorldConfig {
    pub clusters: usize,
    pub per_cluster: usize,
    pub visual_dim: usize,
    /// Standard deviation of per-sample feature noise relative to unit-variance prototypes.
    pub feature_noise: f64,
    pub jitter_km: f64,
    pub seed: u64,
}

impl Default for ToyWorldConfig {
    fn default() -> Self {
        Self {
            clusters: 64,
            per_cluster: 16,
            visual_dim: 32,
            feature_noise: 0.3,
            jitter_km: 25.0,
            seed: 0,
        }
    }
}

/// Clusters of photos: each has a site, a visual prototype, and a text prototype.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyWorld {
    pub config: ToyWorldConfig,
    pub centers: Vec<GpsCoordinate>,
    pub visual_prototypes: Vec<Vec<f64>>,
    pub text_prototypes: Vec<Vec<f64>>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

impl ToyWorld {
    pub fn generate(config: ToyWorldConfig) -> Result<Self, GeoError> {
        let centers = generate_uniform_gallery(config.clusters, config.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x0070_7977_6f72_6c64);
        let visual_prototypes = (0..config.clusters).map(|_| gaussian_vec(&mut rng, config.visual_dim)).collect();
        let text_prototypes = (0..config.clusters).map(|_| gaussian_vec(&mut rng, config.visual_dim)).collect();
        Ok(Self {
            config,
            centers,
            visual_prototypes,
            text_prototypes,
        })
    }

    pub fn site_name(cluster: usize) -> String {
        format!("Toy site {cluster}")
    }

    /// A photo from `cluster`, drawn with `rng`.
    pub fn sample<T: Scalar>(&self, cluster: usize, id: String, rng: &mut ChaCha8Rng) -> FeatureRecord<T> {
        let noise = Normal::new(0.0, self.config.feature_noise).expect("noise scale is finite");
        let mut perturb = |proto: &[f64]| proto.iter().map(|&p| T::of(p + noise.sample(rng))).collect::<Vec<T>>();
        let visual = perturb(&self.visual_prototypes[cluster]);
        let text_feature = perturb(&self.text_prototypes[cluster]);
        let bearing = rng.random_range(0.0..360.0);
        let dist = self.config.jitter_km * rng.random::<f64>().sqrt();
        FeatureRecord {
            id,
            visual,
            text_feature,
            gps: destination(self.centers[cluster], bearing, dist),
            description: Some(Self::site_name(cluster)),
        }
    }

    /// `per_cluster` photos of every cluster, ids `{prefix}{cluster:03}-{i:03}`, with their cluster index.
    pub fn dataset<T: Scalar>(&self, prefix: &str, seed: u64) -> (Vec<FeatureRecord<T>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut records = Vec::with_capacity(self.config.clusters * self.config.per_cluster);
        let mut labels = Vec::with_capacity(records.capacity());
        for c in 0..self.config.clusters {
            for i in 0..self.config.per_cluster {
                records.push(self.sample(c, format!("{prefix}{c:03}-{i:03}"), &mut rng));
                labels.push(c);
            }
        }
        (records, labels)
    }
}

/// A random mild projective transform of a 640x480 frame.
pub fn planted_homography(rng: &mut impl Rng) -> Matrix3<f64> {
    let theta: f64 = rng.random_range(-0.3..0.3);
    let s: f64 = rng.random_range(0.8..1.25);
    let (tx, ty) = (rng.random_range(-60.0..60.0), rng.random_range(-60.0..60.0));
    let (p, q) = (rng.random_range(-2e-4..2e-4), rng.random_range(-2e-4..2e-4));
    let shear: f64 = rng.random_range(-0.1..0.1);
    Matrix3::new(
        s * theta.cos(),
        -s * theta.sin() + shear,
        tx,
        s * theta.sin(),
        s * theta.cos(),
        ty,
        p,
        q,
        1.0,
    )
}

fn project(h: &Matrix3<f64>, x: f64, y: f64) -> (f64, f64) {
    let v = h * Vector3::new(x, y, 1.0);
    (v.x / v.z, v.y / v.z)
}

/// `n` correspondences under `h`; a fraction `outlier_frac` are outliers placed at least
/// `3 * tau_r` from their true image. Inliers carry isotropic Gaussian noise of `noise_px`.
/// Returns the matches and the planted inlier mask.
pub fn planted_matches(
    h: &Matrix3<f64>,
    n: usize,
    outlier_frac: f64,
    noise_px: f64,
    tau_r: f64,
    rng: &mut impl Rng,
) -> (MatchInput, Vec<bool>) {
    let n_out = (n as f64 * outlier_frac).round() as usize;
    let noise = Normal::new(0.0, noise_px.max(0.0)).expect("noise scale is finite");
    let mut matches = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    for i in 0..n {
        let (x, y) = (rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
        let (u, v) = project(h, x, y);
        if i < n_out {
            let (xp, yp) = loop {
                let cand = (rng.random_range(-100.0..740.0), rng.random_range(-100.0..580.0));
                if (cand.0 - u).hypot(cand.1 - v) >= 3.0 * tau_r {
                    break cand;
                }
            };
            matches.push(Correspondence::new(x, y, xp, yp));
            mask.push(false);
        } else {
            let (xp, yp) = if noise_px > 0.0 {
                (u + noise.sample(rng), v + noise.sample(rng))
            } else {
                (u, v)
            };
            matches.push(Correspondence::new(x, y, xp, yp));
            mask.push(true);
        }
    }
    // interleave outliers with inliers
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
    let matches = order.iter().map(|&i| matches[i]).collect();
    let mask = order.iter().map(|&i| mask[i]).collect();
    (
        MatchInput {
            matches,
            image_size: Some((640, 480)),
        },
        mask,
    )
}
