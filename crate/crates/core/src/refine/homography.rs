use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Layer1Stats, RefineError};

/// `(x, y)` in the query image matched to `(xp, yp)` in the linked image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub x: f64,
    pub y: f64,
    pub xp: f64,
    pub yp: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl Correspondence {
    pub fn new(x: f64, y: f64, xp: f64, yp: f64) -> Self {
        Self {
            x,
            y,
            xp,
            yp,
            confidence: None,
        }
    }

    fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.xp.is_finite() && self.yp.is_finite()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchInput {
    pub matches: Vec<Correspondence>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_size: Option<(u32, u32)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacConfig {
    pub tau_r: f64,
    pub max_iters: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            tau_r: 4.0,
            max_iters: 2000,
            confidence: 0.99,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub m: usize,
    /// Row-major, scaled so that the bottom-right entry is 1.
    pub h: [[f64; 3]; 3],
    pub inliers: Vec<bool>,
    pub inlier_count: usize,
    pub rho: f64,
    pub iterations: usize,
}

impl MatchReport {
    pub fn stats(&self) -> Layer1Stats {
        Layer1Stats {
            m: self.m,
            rho: self.rho,
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.h[r][c])
    }
}

fn apply(h: &Matrix3<f64>, x: f64, y: f64) -> Option<(f64, f64)> {
    let v = h * Vector3::new(x, y, 1.0);
    if v.z.abs() < 1e-12 {
        return None;
    }
    Some((v.x / v.z, v.y / v.z))
}

/// Larger of the forward and backward transfer distances, in pixels.
pub fn transfer_error(h: &Matrix3<f64>, h_inv: &Matrix3<f64>, c: &Correspondence) -> f64 {
    let (Some(f), Some(b)) = (apply(h, c.x, c.y), apply(h_inv, c.xp, c.yp)) else {
        return f64::INFINITY;
    };
    let fwd = (f.0 - c.xp).hypot(f.1 - c.yp);
    let bwd = (b.0 - c.x).hypot(b.1 - c.y);
    fwd.max(bwd)
}

fn normalizer(pts: impl Iterator<Item = (f64, f64)> + Clone) -> Matrix3<f64> {
    let n = pts.clone().count() as f64;
    let (sx, sy) = pts.clone().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let (cx, cy) = (sx / n, sy / n);
    let mean_dist = pts.map(|p| (p.0 - cx).hypot(p.1 - cy)).sum::<f64>() / n;
    let s = if mean_dist > 0.0 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

/// Normalized direct linear transform over all given correspondences.
pub fn fit_homography(matches: &[Correspondence]) -> Option<Matrix3<f64>> {
    if matches.len() < 4 {
        return None;
    }
    let t_src = normalizer(matches.iter().map(|c| (c.x, c.y)));
    let t_dst = normalizer(matches.iter().map(|c| (c.xp, c.yp)));
    let rows = (2 * matches.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, c) in matches.iter().enumerate() {
        let p = t_src * Vector3::new(c.x, c.y, 1.0);
        let q = t_dst * Vector3::new(c.xp, c.yp, 1.0);
        let (x, y, u, v) = (p.x, p.y, q.x, q.y);
        let r = 2 * i;
        for (j, val) in [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u].into_iter().enumerate() {
            a[(r, j)] = val;
        }
        for (j, val) in [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v].into_iter().enumerate() {
            a[(r + 1, j)] = val;
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let (k, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let h = v_t.row(k);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let h = t_dst.try_inverse()? * hn * t_src;
    if h[(2, 2)].abs() < 1e-12 {
        return None;
    }
    let h = h / h[(2, 2)];
    if !h.iter().all(|v| v.is_finite()) || h.determinant().abs() < 1e-12 {
        return None;
    }
    Some(h)
}

fn collinear(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> bool {
    let area = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
    area.abs() < 1e-6
}

fn degenerate_sample(s: &[Correspondence]) -> bool {
    let src: Vec<_> = s.iter().map(|c| (c.x, c.y)).collect();
    let dst: Vec<_> = s.iter().map(|c| (c.xp, c.yp)).collect();
    [(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)].iter().any(|&(i, j, k)| {
        collinear(src[i], src[j], src[k]) || collinear(dst[i], dst[j], dst[k])
    })
}

fn inlier_mask(h: &Matrix3<f64>, matches: &[Correspondence], tau_r: f64) -> Option<(Vec<bool>, usize)> {
    let h_inv = h.try_inverse()?;
    let mask: Vec<bool> = matches.iter().map(|c| transfer_error(h, &h_inv, c) <= tau_r).collect();
    let count = mask.iter().filter(|&&b| b).count();
    Some((mask, count))
}

fn required_iterations(confidence: f64, inlier_frac: f64, cap: usize) -> usize {
    let w4 = inlier_frac.powi(4);
    if w4 >= 1.0 {
        return 0;
    }
    if w4 <= 0.0 {
        return cap;
    }
    let n = (1.0 - confidence).ln() / (1.0 - w4).ln();
    if n.is_finite() {
        (n.ceil() as usize).min(cap)
    } else {
        cap
    }
}

/// Seeded RANSAC over minimal 4-point samples, refit on the best consensus set.
pub fn estimate_homography_ransac(input: &MatchInput, cfg: &RansacConfig) -> Result<MatchReport, RefineError> {
    let matches = &input.matches;
    let m = matches.len();
    if m < 4 {
        return Err(RefineError::DegenerateInput(m));
    }
    if !matches.iter().all(Correspondence::is_finite) {
        return Err(RefineError::NonFinite);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(Matrix3<f64>, Vec<bool>, usize)> = None;
    let mut limit = cfg.max_iters;
    let mut iterations = 0;
    while iterations < limit {
        iterations += 1;
        let idx = sample(&mut rng, m, 4);
        let s: Vec<Correspondence> = idx.iter().map(|i| matches[i]).collect();
        if degenerate_sample(&s) {
            continue;
        }
        let Some(h) = fit_homography(&s) else { continue };
        let Some((mask, count)) = inlier_mask(&h, matches, cfg.tau_r) else { continue };
        if best.as_ref().is_none_or(|b| count > b.2) {
            limit = limit.min(required_iterations(cfg.confidence, count as f64 / m as f64, cfg.max_iters));
            best = Some((h, mask, count));
        }
    }
    let (mut h, mut mask, mut count) = best.ok_or(RefineError::NoModel)?;

    let consensus: Vec<Correspondence> = matches.iter().zip(&mask).filter(|(_, &k)| k).map(|(c, _)| *c).collect();
    if let Some(refit) = fit_homography(&consensus) {
        if let Some((rmask, rcount)) = inlier_mask(&refit, matches, cfg.tau_r) {
            if rcount >= count {
                h = refit;
                mask = rmask;
                count = rcount;
            }
        }
    }

    Ok(MatchReport {
        m,
        h: [
            [h[(0, 0)], h[(0, 1)], h[(0, 2)]],
            [h[(1, 0)], h[(1, 1)], h[(1, 2)]],
            [h[(2, 0)], h[(2, 1)], h[(2, 2)]],
        ],
        inliers: mask,
        inlier_count: count,
        rho: count as f64 / m as f64,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{planted_homography, planted_matches};
    use proptest::prelude::*;

    fn grid(n: usize) -> Vec<(f64, f64)> {
        (0..n).map(|i| ((i % 10) as f64 * 37.0 + 11.0, (i / 10) as f64 * 29.0 + (i % 3) as f64 * 5.0)).collect()
    }

    #[test]
    fn identity_consensus() {
        let input = MatchInput {
            matches: grid(60).into_iter().map(|(x, y)| Correspondence::new(x, y, x, y)).collect(),
            image_size: None,
        };
        let r = estimate_homography_ransac(&input, &RansacConfig::default()).unwrap();
        assert_eq!(r.rho, 1.0);
        let h = r.matrix();
        assert!((h - Matrix3::identity()).abs().max() < 1e-6, "{h}");
    }

    #[test]
    fn too_few_matches() {
        let input = MatchInput {
            matches: grid(3).into_iter().map(|(x, y)| Correspondence::new(x, y, x, y)).collect(),
            image_size: None,
        };
        assert!(matches!(
            estimate_homography_ransac(&input, &RansacConfig::default()),
            Err(RefineError::DegenerateInput(3))
        ));
    }

    #[test]
    fn collinear_points_have_no_model() {
        let input = MatchInput {
            matches: (0..20).map(|i| Correspondence::new(i as f64, 2.0 * i as f64, i as f64, 2.0 * i as f64)).collect(),
            image_size: None,
        };
        assert!(matches!(
            estimate_homography_ransac(&input, &RansacConfig::default()),
            Err(RefineError::NoModel)
        ));
    }

    #[test]
    fn exact_fit_recovers_planted_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let truth = planted_homography(&mut rng);
        let pts: Vec<Correspondence> = grid(12)
            .into_iter()
            .map(|(x, y)| {
                let v = truth * Vector3::new(x, y, 1.0);
                Correspondence::new(x, y, v.x / v.z, v.y / v.z)
            })
            .collect();
        let h = fit_homography(&pts).unwrap();
        assert!((h - truth / truth[(2, 2)]).abs().max() < 1e-8);
    }

    #[test]
    fn planted_outliers_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let truth = planted_homography(&mut rng);
        let (input, planted) = planted_matches(&truth, 100, 0.3, 0.5, 4.0, &mut rng);
        let r = estimate_homography_ransac(&input, &RansacConfig::default()).unwrap();
        assert_eq!(r.inliers, planted);
        let h = r.matrix();
        let h_inv = h.try_inverse().unwrap();
        for (c, &k) in input.matches.iter().zip(&planted) {
            if k {
                assert!(transfer_error(&h, &h_inv, c) <= 4.0);
            }
        }
    }

    #[test]
    fn seeded_runs_are_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let truth = planted_homography(&mut rng);
        let (input, _) = planted_matches(&truth, 80, 0.4, 0.5, 4.0, &mut rng);
        let cfg = RansacConfig {
            seed: 17,
            ..RansacConfig::default()
        };
        assert_eq!(
            estimate_homography_ransac(&input, &cfg).unwrap(),
            estimate_homography_ransac(&input, &cfg).unwrap()
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn no_outliers_means_full_consensus(seed: u64, data_seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
            let truth = planted_homography(&mut rng);
            let (input, _) = planted_matches(&truth, 40, 0.0, 0.0, 4.0, &mut rng);
            let r = estimate_homography_ransac(&input, &RansacConfig { seed, ..RansacConfig::default() }).unwrap();
            prop_assert_eq!(r.rho, 1.0);
        }
    }
}
