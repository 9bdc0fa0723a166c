//! Training losses with analytic gradients.
//!
//! * Regression: reliability- and visibility-weighted Huber loss on scaled
//!   keypoint residuals, applied per coordinate and summed, averaged over
//!   all K keypoint slots.
//! * Segmentation: visibility-weighted binary cross-entropy with separate
//!   positive/negative weights, written as a negative log-likelihood so it
//!   is minimized, averaged over K.
//! * Combined: `L = L_reg + λ L_seg`.
//! * Heatmap: visibility-masked MSE normalized by `H'·W'·K`.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::Heatmap;
use crate::geometry::Point3;
use crate::keypoints::{Visibility, NUM_KEYPOINTS};
use crate::labelgen::{PointwiseLabels, PseudoLabels};

/// Segmentation scores are clamped to `[EPS, 1 − EPS]`.
pub const PROB_EPS: f64 = 1e-7;

const K: f64 = NUM_KEYPOINTS as f64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Huber transition, in units of the scaled residual.
    pub huber_delta: f64,
    /// Per-keypoint residual scales s_k, meters.
    pub scale_factors: [f64; NUM_KEYPOINTS],
    pub w_pos: f64,
    pub w_neg: f64,
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            huber_delta: 1.0,
            scale_factors: [0.1; NUM_KEYPOINTS],
            w_pos: 10.0,
            w_neg: 1.0,
            lambda: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.huber_delta > 0.0) {
            return Err(Error::config("huber_delta must be positive"));
        }
        if !self.scale_factors.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return Err(Error::config("every scale factor s_k must be positive"));
        }
        if !(self.w_pos > 0.0 && self.w_neg > 0.0) {
            return Err(Error::config("w_pos and w_neg must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda must be non-negative"));
        }
        Ok(())
    }
}

pub fn huber(x: f64, delta: f64) -> f64 {
    let a = x.abs();
    if a <= delta {
        0.5 * x * x
    } else {
        delta * (a - 0.5 * delta)
    }
}

pub fn huber_grad(x: f64, delta: f64) -> f64 {
    if x.abs() <= delta {
        x
    } else {
        delta * x.signum()
    }
}

/// Weighted Huber regression loss and its gradient w.r.t. the predictions.
pub fn regression_loss(
    pred: &[Point3; NUM_KEYPOINTS],
    labels: &PseudoLabels,
    config: &LossConfig,
) -> (f64, [[f64; 3]; NUM_KEYPOINTS]) {
    let mut value = 0.0;
    let mut grad = [[0.0; 3]; NUM_KEYPOINTS];
    for k in (0..NUM_KEYPOINTS).filter(|&k| labels.visibility[k]) {
        let s = config.scale_factors[k];
        let w = labels.reliability[k] / K;
        let residual = pred[k].sub(labels.y_tilde[k]).to_array();
        for c in 0..3 {
            let e = residual[c] / s;
            value += w * huber(e, config.huber_delta);
            grad[k][c] = w * huber_grad(e, config.huber_delta) / s;
        }
    }
    (value, grad)
}

/// Weighted cross-entropy over an `N x K` score matrix. The gradient is
/// taken w.r.t. the unclamped scores and is zero where clamping is active.
pub fn segmentation_loss(
    scores: ArrayView2<'_, f64>,
    labels: &PointwiseLabels,
    visibility: &Visibility,
    config: &LossConfig,
) -> Result<(f64, Array2<f64>)> {
    if scores.ncols() != NUM_KEYPOINTS || scores.nrows() != labels.n_points() {
        return Err(Error::ShapeMismatch(format!(
            "scores are {}x{}, labels cover {} points",
            scores.nrows(),
            scores.ncols(),
            labels.n_points()
        )));
    }
    let mut value = 0.0;
    let mut grad = Array2::zeros(scores.raw_dim());
    for (i, row) in scores.outer_iter().enumerate() {
        for k in (0..NUM_KEYPOINTS).filter(|&k| visibility[k]) {
            let raw = row[k];
            let p = raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
            let inside = raw > PROB_EPS && raw < 1.0 - PROB_EPS;
            if labels.get(i, k) {
                value -= config.w_pos * p.ln();
                if inside {
                    grad[[i, k]] = -config.w_pos / p / K;
                }
            } else {
                value -= config.w_neg * (1.0 - p).ln();
                if inside {
                    grad[[i, k]] = config.w_neg / (1.0 - p) / K;
                }
            }
        }
    }
    Ok((value / K, grad))
}

pub fn combined_loss(reg: f64, seg: f64, lambda: f64) -> f64 {
    reg + lambda * seg
}

/// `(1 / H'W'K) Σ v_k (h − g)²`.
pub fn heatmap_mse_loss(pred: &Heatmap, gt: &Heatmap, visibility: &Visibility) -> Result<f64> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::ShapeMismatch(format!(
            "heatmaps are {}x{} and {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let mut acc = 0.0;
    for k in (0..NUM_KEYPOINTS).filter(|&k| visibility[k]) {
        acc += pred
            .channel(k)
            .iter()
            .zip(gt.channel(k))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(acc / (pred.height() * pred.width() * NUM_KEYPOINTS) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, max_relative_error, STEP};
    use proptest::prelude::*;
    use rand::Rng;

    fn single_visible(k: usize, y: Point3, r: f64) -> PseudoLabels {
        let mut visibility = [false; NUM_KEYPOINTS];
        visibility[k] = true;
        let mut y_tilde = [Point3::ZERO; NUM_KEYPOINTS];
        y_tilde[k] = y;
        let mut reliability = [0.0; NUM_KEYPOINTS];
        reliability[k] = r;
        PseudoLabels {
            y_tilde,
            reliability,
            pointwise: PointwiseLabels::zeros(0),
            visibility,
        }
    }

    fn unit_scale() -> LossConfig {
        LossConfig {
            scale_factors: [1.0; NUM_KEYPOINTS],
            ..Default::default()
        }
    }

    #[test]
    fn exact_prediction_has_zero_loss() {
        let labels = single_visible(3, Point3::new(1.0, 2.0, 3.0), 0.7);
        let (v, g) = regression_loss(&labels.y_tilde, &labels, &LossConfig::default());
        assert_eq!(v, 0.0);
        assert!(g.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn huber_branches_by_hand() {
        let labels = single_visible(0, Point3::ZERO, 1.0);
        let mut pred = [Point3::ZERO; NUM_KEYPOINTS];
        pred[0] = Point3::new(0.5, 0.0, 0.0);
        let (v, _) = regression_loss(&pred, &labels, &unit_scale());
        assert!((v - 0.125 / 13.0).abs() < 1e-15);
        pred[0] = Point3::new(2.0, 0.0, 0.0);
        let (v, g) = regression_loss(&pred, &labels, &unit_scale());
        assert!((v - 1.5 / 13.0).abs() < 1e-15);
        assert!((g[0][0] - 1.0 / 13.0).abs() < 1e-15);
    }

    #[test]
    fn invisible_keypoints_do_not_contribute() {
        let labels = single_visible(0, Point3::ZERO, 1.0);
        let mut pred = [Point3::ZERO; NUM_KEYPOINTS];
        pred[5] = Point3::new(1e6, -1e6, 1e6);
        let (v, g) = regression_loss(&pred, &labels, &LossConfig::default());
        assert_eq!(v, 0.0);
        assert!(g[5].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn huber_is_c1_at_the_transition() {
        for delta in [0.3, 1.0, 2.5] {
            let (a, b) = (delta - 1e-9, delta + 1e-9);
            assert!((huber(a, delta) - huber(b, delta)).abs() <= 1e-8);
            assert!((huber_grad(a, delta) - huber_grad(b, delta)).abs() <= 1e-8);
            assert!((huber(-a, delta) - huber(-b, delta)).abs() <= 1e-8);
            assert!((huber_grad(-a, delta) - huber_grad(-b, delta)).abs() <= 1e-8);
        }
    }

    #[test]
    fn segmentation_by_hand() {
        let mut labels = PointwiseLabels::zeros(1);
        labels.set(0, 2, true);
        let mut vis = [false; NUM_KEYPOINTS];
        vis[2] = true;
        let mut scores = Array2::from_elem((1, NUM_KEYPOINTS), 0.5);
        let cfg = LossConfig {
            w_pos: 1.0,
            ..Default::default()
        };
        let (v, _) = segmentation_loss(scores.view(), &labels, &vis, &cfg).unwrap();
        assert!((v - 2f64.ln() / 13.0).abs() < 1e-15);
        assert!((v - 0.05332).abs() < 1e-5);
        // Invisible columns ignore whatever score they carry.
        scores[[0, 7]] = 1e-9;
        let (v2, g) = segmentation_loss(scores.view(), &labels, &vis, &cfg).unwrap();
        assert_eq!(v, v2);
        assert_eq!(g[[0, 7]], 0.0);
    }

    #[test]
    fn perfect_segmentation_is_nearly_free() {
        let n = 20;
        let mut labels = PointwiseLabels::zeros(n);
        let mut scores = Array2::zeros((n, NUM_KEYPOINTS));
        for i in 0..n {
            for k in 0..NUM_KEYPOINTS {
                let on = (i + k) % 3 == 0;
                labels.set(i, k, on);
                scores[[i, k]] = if on { 1.0 } else { 0.0 };
            }
        }
        let cfg = LossConfig::default();
        let (v, g) =
            segmentation_loss(scores.view(), &labels, &[true; NUM_KEYPOINTS], &cfg).unwrap();
        assert!(v >= 0.0 && v <= K * n as f64 * cfg.w_pos * PROB_EPS * 2.0);
        // Clamped region: gradient is zero.
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn combined_weighting() {
        assert!((combined_loss(1.0, 2.0, 0.1) - 1.2).abs() < 1e-15);
        assert_eq!(combined_loss(1.5, 9.0, 0.0), 1.5);
        assert_eq!(combined_loss(0.0, 0.0, 0.3), 0.0);
    }

    #[test]
    fn heatmap_mse_values() {
        let gt = Heatmap::from_channels(4, 4, vec![0.5; 4 * 4 * NUM_KEYPOINTS]).unwrap();
        let pred = Heatmap::from_channels(4, 4, vec![0.6; 4 * 4 * NUM_KEYPOINTS]).unwrap();
        assert_eq!(
            heatmap_mse_loss(&gt, &gt, &[true; NUM_KEYPOINTS]).unwrap(),
            0.0
        );
        assert!(
            (heatmap_mse_loss(&pred, &gt, &[true; NUM_KEYPOINTS]).unwrap() - 0.01).abs() < 1e-12
        );
        assert_eq!(
            heatmap_mse_loss(&pred, &gt, &[false; NUM_KEYPOINTS]).unwrap(),
            0.0
        );
        let other = Heatmap::zeros(2, 4);
        assert!(matches!(
            heatmap_mse_loss(&pred, &other, &[true; NUM_KEYPOINTS]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    fn random_labels(rng: &mut impl Rng) -> PseudoLabels {
        let mut labels = single_visible(0, Point3::ZERO, 1.0);
        for k in 0..NUM_KEYPOINTS {
            labels.visibility[k] = rng.random_bool(0.7);
            labels.reliability[k] = rng.random_range(0.05..1.0);
            labels.y_tilde[k] = Point3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
        }
        labels
    }

    #[test]
    fn regression_gradient_matches_finite_differences() {
        let mut rng = crate::rng::from_seed(17);
        for _ in 0..100 {
            let labels = random_labels(&mut rng);
            let mut cfg = LossConfig::default();
            for s in cfg.scale_factors.iter_mut() {
                *s = rng.random_range(0.05..0.3);
            }
            let x: Vec<f64> = (0..3 * NUM_KEYPOINTS)
                .map(|_| rng.random_range(-1.2..1.2))
                .collect();
            let to_pred = |x: &[f64]| {
                let mut p = [Point3::ZERO; NUM_KEYPOINTS];
                for k in 0..NUM_KEYPOINTS {
                    p[k] = Point3::new(x[3 * k], x[3 * k + 1], x[3 * k + 2]);
                }
                p
            };
            let (_, g) = regression_loss(&to_pred(&x), &labels, &cfg);
            let analytic: Vec<f64> = g.iter().flatten().copied().collect();
            let numeric =
                central_difference(&x, STEP, |x| regression_loss(&to_pred(x), &labels, &cfg).0);
            assert!(max_relative_error(&analytic, &numeric) <= 1e-4);
        }
    }

    #[test]
    fn segmentation_gradient_matches_finite_differences() {
        let mut rng = crate::rng::from_seed(23);
        for _ in 0..100 {
            let n = rng.random_range(1..12);
            let mut labels = PointwiseLabels::zeros(n);
            let mut vis = [false; NUM_KEYPOINTS];
            for (k, v) in vis.iter_mut().enumerate() {
                *v = rng.random_bool(0.7);
                for i in 0..n {
                    labels.set(i, k, rng.random_bool(0.2));
                }
            }
            let x: Vec<f64> = (0..n * NUM_KEYPOINTS)
                .map(|_| rng.random_range(0.02..0.98))
                .collect();
            let cfg = LossConfig::default();
            let f = |x: &[f64]| {
                let s = ArrayView2::from_shape((n, NUM_KEYPOINTS), x).unwrap();
                segmentation_loss(s, &labels, &vis, &cfg).unwrap()
            };
            let analytic: Vec<f64> = f(&x).1.iter().copied().collect();
            let numeric = central_difference(&x, STEP, |x| f(x).0);
            assert!(max_relative_error(&analytic, &numeric) <= 1e-4);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn regression_is_nonnegative_and_zero_only_at_labels(
            seed in any::<u64>(), offset in prop::collection::vec(-2.0f64..2.0, 3 * NUM_KEYPOINTS)
        ) {
            let mut rng = crate::rng::from_seed(seed);
            let labels = random_labels(&mut rng);
            let mut pred = labels.y_tilde;
            for k in 0..NUM_KEYPOINTS {
                pred[k] = pred[k].add(Point3::new(offset[3 * k], offset[3 * k + 1], offset[3 * k + 2]));
            }
            let (v, _) = regression_loss(&pred, &labels, &LossConfig::default());
            prop_assert!(v >= 0.0);
            let any_visible_residual = (0..NUM_KEYPOINTS)
                .any(|k| labels.visibility[k] && pred[k] != labels.y_tilde[k]);
            prop_assert_eq!(v > 0.0, any_visible_residual);
        }

        #[test]
        fn regression_is_scale_covariant(seed in any::<u64>(), c in 0.01f64..100.0) {
            let mut rng = crate::rng::from_seed(seed);
            let labels = random_labels(&mut rng);
            let mut cfg = LossConfig::default();
            let mut pred = [Point3::ZERO; NUM_KEYPOINTS];
            for k in 0..NUM_KEYPOINTS {
                cfg.scale_factors[k] = rng.random_range(0.05..0.3);
                pred[k] = Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            }
            let (base, _) = regression_loss(&pred, &labels, &cfg);
            let mut scaled_labels = labels.clone();
            let mut scaled_pred = pred;
            let mut scaled_cfg = cfg.clone();
            for k in 0..NUM_KEYPOINTS {
                scaled_labels.y_tilde[k] = labels.y_tilde[k].scale(c);
                scaled_pred[k] = pred[k].scale(c);
                scaled_cfg.scale_factors[k] = cfg.scale_factors[k] * c;
            }
            let (scaled, _) = regression_loss(&scaled_pred, &scaled_labels, &scaled_cfg);
            prop_assert!((base - scaled).abs() <= 1e-12 * (1.0 + base.abs()));
        }

        #[test]
        fn segmentation_improves_toward_label(
            p in 0.01f64..0.99, step in 0.001f64..0.5, positive in any::<bool>(), k in 0usize..NUM_KEYPOINTS
        ) {
            let mut labels = PointwiseLabels::zeros(1);
            labels.set(0, k, positive);
            let vis = [true; NUM_KEYPOINTS];
            let cfg = LossConfig::default();
            let toward = if positive { (p + step).min(0.999) } else { (p - step).max(0.001) };
            prop_assume!(toward != p);
            let mut a = Array2::from_elem((1, NUM_KEYPOINTS), 0.3);
            a[[0, k]] = p;
            let mut b = a.clone();
            b[[0, k]] = toward;
            let (la, _) = segmentation_loss(a.view(), &labels, &vis, &cfg).unwrap();
            let (lb, _) = segmentation_loss(b.view(), &labels, &vis, &cfg).unwrap();
            prop_assert!(lb < la);
        }
    }
}
