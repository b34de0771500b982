//! Depth accuracy metrics with optional median scaling.

use serde::Serialize;

use crate::geometry::DepthField;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n_pixels: usize,
}

impl EvalMetrics {
    pub const CSV_HEADER: &'static str = "abs_rel,sq_rel,delta1,delta2,delta3,n_pixels";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.abs_rel, self.sq_rel, self.delta1, self.delta2, self.delta3, self.n_pixels
        )
    }

    /// Header line plus one row per labelled entry.
    pub fn table(rows: &[(String, EvalMetrics)]) -> String {
        let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(6);
        let mut out = format!(
            "{:<label_w$}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}\n",
            "method", "Abs Rel", "Sq Rel", "d<1.25", "d<1.25^2", "d<1.25^3"
        );
        for (label, m) in rows {
            out += &format!(
                "{:<label_w$}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}\n",
                label, m.abs_rel, m.sq_rel, m.delta1, m.delta2, m.delta3
            );
        }
        out
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Metrics over pixels where `valid` holds (all pixels when `None`). With
/// `median_scale`, `pred` is first multiplied by `median(gt) / median(pred)`.
pub fn compute_metrics(
    pred: &DepthField,
    gt: &DepthField,
    valid: Option<&[bool]>,
    median_scale: bool,
) -> Result<EvalMetrics> {
    if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
        return Err(Error::Config("prediction and ground-truth dimensions differ".into()));
    }
    let n = pred.width() * pred.height();
    if valid.is_some_and(|v| v.len() != n) {
        return Err(Error::Config("valid mask length does not match the depth maps".into()));
    }
    let (p_all, g_all) = (pred.depths(), gt.depths());
    let idx: Vec<usize> = (0..n).filter(|&i| valid.is_none_or(|v| v[i])).collect();
    if idx.is_empty() {
        return Err(Error::Config("no valid pixels to evaluate".into()));
    }
    if let Some(&i) = idx.iter().find(|&&i| !(g_all[i] > 0.0)) {
        return Err(Error::Config(format!("non-positive ground-truth depth {} at pixel {i}", g_all[i])));
    }
    let mut p: Vec<f64> = idx.iter().map(|&i| p_all[i]).collect();
    let g: Vec<f64> = idx.iter().map(|&i| g_all[i]).collect();
    if median_scale {
        let scale = median(&mut g.clone()) / median(&mut p.clone());
        p.iter_mut().for_each(|v| *v *= scale);
    }

    let count = p.len() as f64;
    let (mut abs_rel, mut sq_rel) = (0.0, 0.0);
    let mut hits = [0usize; 3];
    for (pv, gv) in p.iter().zip(&g) {
        let diff = pv - gv;
        abs_rel += diff.abs() / gv;
        sq_rel += diff * diff / gv;
        let ratio = (pv / gv).max(gv / pv);
        for (k, hit) in hits.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                *hit += 1;
            }
        }
    }
    Ok(EvalMetrics {
        abs_rel: abs_rel / count,
        sq_rel: sq_rel / count,
        delta1: hits[0] as f64 / count,
        delta2: hits[1] as f64 / count,
        delta3: hits[2] as f64 / count,
        n_pixels: p.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn field(values: &[f64]) -> DepthField {
        DepthField::from_depth(values.len(), 1, values).unwrap()
    }

    fn close(m: &EvalMetrics, expected: [f64; 5]) -> bool {
        [m.abs_rel, m.sq_rel, m.delta1, m.delta2, m.delta3]
            .iter()
            .zip(expected)
            .all(|(a, b)| (a - b).abs() < 1e-12)
    }

    #[test]
    fn identical_maps_are_perfect() {
        let d = field(&[1.0, 2.5, 3.0, 0.7]);
        assert!(close(&compute_metrics(&d, &d, None, true).unwrap(), [0.0, 0.0, 1.0, 1.0, 1.0]));
    }

    #[test]
    fn doubled_prediction_with_and_without_scaling() {
        let gt = field(&[1.0; 6]);
        let pred = field(&[2.0; 6]);
        assert!(close(&compute_metrics(&pred, &gt, None, false).unwrap(), [1.0, 1.0, 0.0, 0.0, 0.0]));
        assert!(close(&compute_metrics(&pred, &gt, None, true).unwrap(), [0.0, 0.0, 1.0, 1.0, 1.0]));
    }

    #[test]
    fn mixed_four_pixel_table() {
        let gt = field(&[1.0, 1.0, 2.0, 2.0]);
        let pred = field(&[1.1, 0.9, 2.6, 2.0]);
        let m = compute_metrics(&pred, &gt, None, false).unwrap();
        assert!((m.abs_rel - 0.125).abs() < 1e-12);
        // (0.01 + 0.01 + 0.36/2 + 0) / 4
        assert!((m.sq_rel - 0.05).abs() < 1e-12);
        assert_eq!(m.delta1, 0.75);
        assert_eq!(m.delta2, 1.0);
    }

    #[test]
    fn errors_on_empty_mask_and_bad_gt() {
        let d = field(&[1.0, 2.0]);
        assert!(compute_metrics(&d, &d, Some(&[false, false]), true).is_err());
        let bad = DepthField::from_log_depth(2, 1, vec![0.0, f64::NEG_INFINITY]);
        if let Ok(bad) = bad {
            assert!(compute_metrics(&d, &bad, None, false).is_err());
        }
    }

    #[test]
    fn mask_restricts_pixels() {
        let gt = field(&[1.0, 1.0, 5.0]);
        let pred = field(&[1.0, 1.0, 1.0]);
        let m = compute_metrics(&pred, &gt, Some(&[true, true, false]), false).unwrap();
        assert_eq!(m.n_pixels, 2);
        assert_eq!(m.abs_rel, 0.0);
    }

    fn brute(p: &[f64], g: &[f64], scale: bool) -> [f64; 5] {
        let mut ps = p.to_vec();
        if scale {
            let med = |v: &[f64]| {
                let mut s = v.to_vec();
                s.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let n = s.len();
                if n % 2 == 1 { s[n / 2] } else { (s[n / 2 - 1] + s[n / 2]) / 2.0 }
            };
            let c = med(g) / med(p);
            ps = p.iter().map(|v| v * c).collect();
        }
        let n = p.len() as f64;
        let mut out = [0.0; 5];
        for (a, b) in ps.iter().zip(g) {
            out[0] += (a - b).abs() / b / n;
            out[1] += (a - b) * (a - b) / b / n;
            let r = if a > b { a / b } else { b / a };
            out[2] += if r < 1.25 { 1.0 / n } else { 0.0 };
            out[3] += if r < 1.5625 { 1.0 / n } else { 0.0 };
            out[4] += if r < 1.953125 { 1.0 / n } else { 0.0 };
        }
        out
    }

    proptest! {
        #[test]
        fn matches_brute_force(p in prop::collection::vec(0.2f64..20.0, 64), g in prop::collection::vec(0.2f64..20.0, 64), scale: bool) {
            let m = compute_metrics(
                &DepthField::from_depth(8, 8, &p).unwrap(),
                &DepthField::from_depth(8, 8, &g).unwrap(),
                None,
                scale,
            ).unwrap();
            // inputs pass through log/exp in DepthField
            let pr: Vec<f64> = DepthField::from_depth(8, 8, &p).unwrap().depths();
            let gr: Vec<f64> = DepthField::from_depth(8, 8, &g).unwrap().depths();
            let b = brute(&pr, &gr, scale);
            for (a, e) in [m.abs_rel, m.sq_rel, m.delta1, m.delta2, m.delta3].iter().zip(b) {
                prop_assert!((a - e).abs() < 1e-12);
            }
            prop_assert!(m.delta1 <= m.delta2 && m.delta2 <= m.delta3 && m.delta3 <= 1.0);
        }

        #[test]
        fn median_scaling_removes_uniform_scale(p in prop::collection::vec(0.2f64..20.0, 16), g in prop::collection::vec(0.2f64..20.0, 16), c in prop::sample::select(vec![0.1, 3.0, 10.0])) {
            let gt = DepthField::from_depth(4, 4, &g).unwrap();
            let base = compute_metrics(&DepthField::from_depth(4, 4, &p).unwrap(), &gt, None, true).unwrap();
            let scaled: Vec<f64> = p.iter().map(|v| v * c).collect();
            let m = compute_metrics(&DepthField::from_depth(4, 4, &scaled).unwrap(), &gt, None, true).unwrap();
            prop_assert!((m.abs_rel - base.abs_rel).abs() < 1e-12);
            prop_assert!((m.sq_rel - base.sq_rel).abs() < 1e-12);
            prop_assert_eq!((m.delta1, m.delta2, m.delta3), (base.delta1, base.delta2, base.delta3));
        }
    }
}
