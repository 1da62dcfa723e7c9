//! Threshold tuning as a binary classification between the search and baseline predictions.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{layer1_verify, GateThresholds, Preference, RefineError};

/// The two numbers Layer 1 looks at.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Layer1Stats {
    pub m: usize,
    pub rho: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledCase {
    pub layer1: Option<Layer1Stats>,
    pub sigma: f64,
    pub preference: Preference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuningGrid {
    pub tau_m: Vec<usize>,
    pub tau_in: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl Default for TuningGrid {
    fn default() -> Self {
        Self {
            tau_m: (0..=20).map(|i| i * 10).collect(),
            tau_in: (0..=20).map(|i| i as f64 / 20.0).collect(),
            alpha: (0..=100).map(|i| i as f64 / 100.0).collect(),
        }
    }
}

impl TuningGrid {
    fn validate(&self) -> Result<(), RefineError> {
        if self.tau_m.is_empty() || self.tau_in.is_empty() || self.alpha.is_empty() {
            return Err(RefineError::InvalidGrid("every grid axis needs at least one value".into()));
        }
        if self.tau_in.iter().chain(&self.alpha).any(|v| !v.is_finite()) {
            return Err(RefineError::InvalidGrid("grid values must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Layer1Point {
    pub tau_m: usize,
    pub tau_in: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaPoint {
    pub alpha: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningResult {
    pub thresholds: GateThresholds,
    pub layer1_accuracy: f64,
    pub alpha_accuracy: f64,
    pub alpha_f1: f64,
    pub cases: usize,
    pub layer2_cases: usize,
    pub layer1_curve: Vec<Layer1Point>,
    pub alpha_curve: Vec<AlphaPoint>,
}

fn is_search(p: Preference) -> bool {
    p == Preference::SearchPreferred
}

fn alpha_point(cases: &[&LabeledCase], alpha: f64) -> AlphaPoint {
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for c in cases {
        match (c.sigma >= alpha, is_search(c.preference)) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let n = cases.len();
    let accuracy = if n == 0 { 0.0 } else { (tp + tn) as f64 / n as f64 };
    let denom = 2 * tp + fp + fn_;
    let f1 = if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
    AlphaPoint {
        alpha,
        accuracy,
        f1,
        tp,
        fp,
        tn,
        fn_,
    }
}

/// Tunes Layer 1 on all cases for accuracy (ties keep the stricter thresholds), then sweeps
/// `alpha` over the cases Layer 1 rejects for F1 (ties keep the smaller alpha).
pub fn tune_thresholds(
    cases: &[LabeledCase],
    grid: &TuningGrid,
    base: GateThresholds,
) -> Result<TuningResult, RefineError> {
    if cases.is_empty() {
        return Err(RefineError::EmptyCases);
    }
    grid.validate()?;

    let mut layer1_curve = Vec::with_capacity(grid.tau_m.len() * grid.tau_in.len());
    for &tau_m in &grid.tau_m {
        for &tau_in in &grid.tau_in {
            let t = GateThresholds { tau_m, tau_in, ..base };
            let correct = cases
                .iter()
                .filter(|c| layer1_verify(c.layer1.as_ref(), &t) == is_search(c.preference))
                .count();
            layer1_curve.push(Layer1Point {
                tau_m,
                tau_in,
                accuracy: correct as f64 / cases.len() as f64,
            });
        }
    }
    let best_l1 = layer1_curve
        .iter()
        .copied()
        .reduce(|a, b| {
            let stricter = (b.tau_m, b.tau_in) > (a.tau_m, a.tau_in);
            if b.accuracy > a.accuracy || (b.accuracy == a.accuracy && stricter) {
                b
            } else {
                a
            }
        })
        .expect("grid is non-empty");
    let tuned_l1 = GateThresholds {
        tau_m: best_l1.tau_m,
        tau_in: best_l1.tau_in,
        ..base
    };

    let rest: Vec<&LabeledCase> = cases.iter().filter(|c| !layer1_verify(c.layer1.as_ref(), &tuned_l1)).collect();
    let mut alphas = grid.alpha.clone();
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();
    let alpha_curve: Vec<AlphaPoint> = alphas.iter().map(|&a| alpha_point(&rest, a)).collect();
    let best_alpha = alpha_curve
        .iter()
        .copied()
        .reduce(|a, b| if b.f1 > a.f1 { b } else { a })
        .expect("grid is non-empty");

    Ok(TuningResult {
        thresholds: GateThresholds {
            alpha: best_alpha.alpha,
            ..tuned_l1
        },
        layer1_accuracy: best_l1.accuracy,
        alpha_accuracy: best_alpha.accuracy,
        alpha_f1: best_alpha.f1,
        cases: cases.len(),
        layer2_cases: rest.len(),
        layer1_curve,
        alpha_curve,
    })
}

pub fn write_alpha_curve_csv<W: Write>(w: W, curve: &[AlphaPoint]) -> Result<(), RefineError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["alpha", "accuracy", "f1", "tp", "fp", "tn", "fn"])?;
    for p in curve {
        out.write_record([
            format!("{:.4}", p.alpha),
            format!("{:.6}", p.accuracy),
            format!("{:.6}", p.f1),
            p.tp.to_string(),
            p.fp.to_string(),
            p.tn.to_string(),
            p.fn_.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_layer1_grid_csv<W: Write>(w: W, curve: &[Layer1Point]) -> Result<(), RefineError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["tau_m", "tau_in", "accuracy"])?;
    for p in curve {
        out.write_record([p.tau_m.to_string(), format!("{:.4}", p.tau_in), format!("{:.6}", p.accuracy)])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn case(sigma: f64, search: bool) -> LabeledCase {
        LabeledCase {
            layer1: None,
            sigma,
            preference: if search {
                Preference::SearchPreferred
            } else {
                Preference::BaselinePreferred
            },
        }
    }

    #[test]
    fn planted_separator() {
        let mut cases: Vec<LabeledCase> = (0..200)
            .map(|i| {
                let s = i as f64 / 199.0;
                case(s, s >= 0.3)
            })
            .collect();
        cases.push(case(0.2999, false));
        cases.push(case(0.3, true));
        let r = tune_thresholds(&cases, &TuningGrid::default(), GateThresholds::default()).unwrap();
        assert_eq!(r.thresholds.alpha, 0.3);
        assert_eq!(r.alpha_f1, 1.0);
    }

    #[test]
    fn all_search_preferred() {
        let cases: Vec<LabeledCase> = (0..20).map(|i| case(i as f64 / 20.0, true)).collect();
        let r = tune_thresholds(&cases, &TuningGrid::default(), GateThresholds::default()).unwrap();
        assert_eq!(r.thresholds.alpha, 0.0);
        assert_eq!(r.alpha_f1, 1.0);
    }

    #[test]
    fn empty_input() {
        assert!(matches!(
            tune_thresholds(&[], &TuningGrid::default(), GateThresholds::default()),
            Err(RefineError::EmptyCases)
        ));
    }

    #[test]
    fn layer1_tuned_on_geometric_evidence() {
        let mut cases = Vec::new();
        for i in 0..40 {
            let good = i % 2 == 0;
            cases.push(LabeledCase {
                layer1: Some(Layer1Stats {
                    m: if good { 120 } else { 30 },
                    rho: if good { 0.8 } else { 0.2 },
                }),
                sigma: 0.0,
                preference: if good {
                    Preference::SearchPreferred
                } else {
                    Preference::BaselinePreferred
                },
            });
        }
        let r = tune_thresholds(&cases, &TuningGrid::default(), GateThresholds::default()).unwrap();
        assert_eq!(r.layer1_accuracy, 1.0);
        // strictest perfect thresholds
        assert_eq!((r.thresholds.tau_m, r.thresholds.tau_in), (120, 0.8));
        assert_eq!(r.layer2_cases, 20);
    }

    #[test]
    fn csv_headers() {
        let mut buf = Vec::new();
        write_alpha_curve_csv(&mut buf, &[alpha_point(&[], 0.5)]).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("alpha,accuracy,f1,tp,fp,tn,fn\n0.5000,"));
    }

    proptest! {
        #[test]
        fn sweep_matches_naive_recount(
            data in proptest::collection::vec((-1.0f64..1.0, any::<bool>()), 1..60)
        ) {
            let cases: Vec<LabeledCase> = data.iter().map(|&(s, b)| case(s, b)).collect();
            let r = tune_thresholds(&cases, &TuningGrid::default(), GateThresholds::default()).unwrap();
            for p in &r.alpha_curve {
                let mut cm = [0usize; 4];
                for c in &cases {
                    let pred = c.sigma >= p.alpha;
                    let truth = c.preference == Preference::SearchPreferred;
                    cm[(pred as usize) * 2 + truth as usize] += 1;
                }
                let (tn, fn_, fp, tp) = (cm[0], cm[1], cm[2], cm[3]);
                let f1 = if tp + fp + fn_ == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
                prop_assert_eq!((p.tp, p.fp, p.tn, p.fn_), (tp, fp, tn, fn_));
                prop_assert_eq!(p.f1, f1);
            }
            let best = r.alpha_curve.iter().map(|p| p.f1).fold(f64::NEG_INFINITY, f64::max);
            let first = r.alpha_curve.iter().find(|p| p.f1 == best).unwrap();
            prop_assert_eq!(r.thresholds.alpha, first.alpha);
        }
    }
}
