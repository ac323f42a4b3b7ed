//! Pixel-wise Smooth L1, focal and binary cross-entropy losses, the epoch
//! schedule that weights them, and their gradients w.r.t. head logits.

use ndarray::{Array1, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::{sigmoid, Scalar};

/// Probabilities are clamped to `[P_MIN, 1 - P_MIN]` before any logarithm.
pub const P_MIN: f64 = 1e-7;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Smooth L1 on the pixel map plus focal loss on the binary head.
    #[default]
    FocalSl,
    /// 0.5 / 0.5 weighted binary cross-entropy on both heads.
    Bce,
}

/// Step schedule for the pixel-term weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lambda1Schedule {
    pub initial: f64,
    /// First 0-based epoch that uses `value`.
    pub after_epoch: usize,
    pub value: f64,
}

impl Default for Lambda1Schedule {
    fn default() -> Self {
        Self {
            initial: 1.0,
            after_epoch: 5,
            value: 100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub kind: LossKind,
    pub lambda1_schedule: Lambda1Schedule,
    pub lambda2: f64,
    pub gamma: f64,
    /// Head weights of the cross-entropy ablation (pixel, binary).
    pub bce_weights: (f64, f64),
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            kind: LossKind::FocalSl,
            lambda1_schedule: Lambda1Schedule::default(),
            lambda2: 1.0,
            gamma: 2.0,
            bce_weights: (0.5, 0.5),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let s = &self.lambda1_schedule;
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if ![
            s.initial,
            s.value,
            self.lambda2,
            self.gamma,
            self.bce_weights.0,
            self.bce_weights.1,
        ]
        .into_iter()
        .all(finite_nonneg)
        {
            return invalid("loss weights and gamma must be finite and nonnegative");
        }
        Ok(())
    }

    pub fn lambda1(&self, epoch: usize) -> f64 {
        let s = &self.lambda1_schedule;
        if epoch >= s.after_epoch {
            s.value
        } else {
            s.initial
        }
    }

    /// Weights with the schedule pinned to its initial value (λ1 = λ2 = 1 by default).
    pub fn unscheduled(&self) -> Self {
        let mut w = *self;
        w.lambda1_schedule.value = w.lambda1_schedule.initial;
        w
    }
}

fn check_label(y: f64) -> Result<()> {
    if y != 0.0 && y != 1.0 {
        return invalid(format!("label must be 0 or 1, got {y}"));
    }
    Ok(())
}

fn clamp_p(p: f64) -> f64 {
    p.clamp(P_MIN, 1.0 - P_MIN)
}

fn smooth_l1_term(d: f64) -> f64 {
    let a = d.abs();
    if a < 1.0 {
        0.5 * d * d
    } else {
        a - 0.5
    }
}

fn smooth_l1_slope(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

/// Mean Smooth L1 over all pixels of `pred` against `gt`.
pub fn smooth_l1(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return invalid(format!(
            "prediction has {} pixels but mask has {}",
            pred.len(),
            gt.len()
        ));
    }
    if !pred.iter().all(|v| v.is_finite()) {
        return invalid("prediction map contains non-finite values");
    }
    let sum: f64 = pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| smooth_l1_term(p - g))
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Derivative of [`smooth_l1`] w.r.t. each predicted pixel.
pub fn smooth_l1_grad(pred: &[f64], gt: &[f64]) -> Result<Vec<f64>> {
    if pred.len() != gt.len() || pred.is_empty() {
        return invalid(format!(
            "prediction has {} pixels but mask has {}",
            pred.len(),
            gt.len()
        ));
    }
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| smooth_l1_slope(p - g) / n)
        .collect())
}

/// `-(1 - p_t)^gamma * ln(p_t)` with `p_t = p` for `y = 1` and `1 - p` for `y = 0`.
pub fn focal_loss(p: f64, y: f64, gamma: f64) -> Result<f64> {
    check_label(y)?;
    if !p.is_finite() || gamma < 0.0 {
        return invalid("focal loss needs a finite probability and gamma >= 0");
    }
    let pt = clamp_p(if y == 1.0 { p } else { 1.0 - p });
    Ok(-(1.0 - pt).powf(gamma) * pt.ln())
}

/// d focal / d p, zero where the clamp is active.
pub fn focal_grad(p: f64, y: f64, gamma: f64) -> Result<f64> {
    check_label(y)?;
    let raw = if y == 1.0 { p } else { 1.0 - p };
    if raw <= P_MIN || raw >= 1.0 - P_MIN {
        return Ok(0.0);
    }
    let pt = raw;
    let q = 1.0 - pt;
    let d_pt = if gamma == 0.0 {
        -1.0 / pt
    } else {
        gamma * q.powf(gamma - 1.0) * pt.ln() - q.powf(gamma) / pt
    };
    Ok(if y == 1.0 { d_pt } else { -d_pt })
}

/// Binary cross-entropy on a clamped probability.
pub fn bce_loss(p: f64, y: f64) -> Result<f64> {
    check_label(y)?;
    if !p.is_finite() {
        return invalid("cross-entropy needs a finite probability");
    }
    let p = clamp_p(p);
    Ok(-(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
}

/// d bce / d p, zero where the clamp is active.
pub fn bce_grad(p: f64, y: f64) -> Result<f64> {
    check_label(y)?;
    if p <= P_MIN || p >= 1.0 - P_MIN {
        return Ok(0.0);
    }
    Ok(-y / p + (1.0 - y) / (1.0 - p))
}

/// `lambda1(epoch) * pixel + lambda2 * binary`.
pub fn overall_loss(pixel: f64, binary: f64, epoch: usize, w: &LossWeights) -> Result<f64> {
    if !(pixel >= 0.0 && binary >= 0.0) {
        return invalid(format!(
            "component losses must be nonnegative, got {pixel} and {binary}"
        ));
    }
    Ok(w.lambda1(epoch) * pixel + w.lambda2 * binary)
}

/// Constant ground-truth mask: all ones for bona fide, all zeros for attack.
pub fn ground_truth_mask(label: f64, pixels: usize) -> Result<Vec<f64>> {
    check_label(label)?;
    Ok(vec![label; pixels])
}

/// Batch loss components and gradients w.r.t. the head logits.
#[derive(Debug, Clone)]
pub struct BatchLoss<T> {
    pub pixel: f64,
    pub binary: f64,
    pub total: f64,
    pub d_pixel_logits: Array4<T>,
    pub d_binary_logits: Array1<T>,
}

/// Mean-over-batch loss of one forward pass.
///
/// `labels` use 1 = bona fide, 0 = attack.
pub fn batch_loss<T: Scalar>(
    pixel_logits: &Array4<T>,
    binary_logits: &Array1<T>,
    labels: &[f64],
    epoch: usize,
    w: &LossWeights,
) -> Result<BatchLoss<T>> {
    let (n, c, h, wd) = pixel_logits.dim();
    if c != 1 || n != labels.len() || binary_logits.len() != n || n == 0 {
        return invalid(format!(
            "batch shapes disagree: pixel {:?}, binary {}, labels {}",
            pixel_logits.dim(),
            binary_logits.len(),
            labels.len()
        ));
    }
    let pixels = h * wd;
    let (pix_w, bin_w) = match w.kind {
        LossKind::FocalSl => (w.lambda1(epoch), w.lambda2),
        LossKind::Bce => w.bce_weights,
    };
    let inv_n = 1.0 / n as f64;
    let mut d_pixel = Array4::<T>::zeros((n, 1, h, wd));
    let mut d_binary = Array1::<T>::zeros(n);
    let (mut pixel_sum, mut binary_sum) = (0.0, 0.0);
    for (i, &y) in labels.iter().enumerate() {
        let gt = ground_truth_mask(y, pixels)?;
        let probs: Vec<f64> = pixel_logits
            .slice(ndarray::s![i, 0, .., ..])
            .iter()
            .map(|&z| sigmoid(z).f64())
            .collect();
        let d_probs = match w.kind {
            LossKind::FocalSl => {
                pixel_sum += smooth_l1(&probs, &gt)?;
                smooth_l1_grad(&probs, &gt)?
            }
            LossKind::Bce => {
                let mut s = 0.0;
                let mut grads = Vec::with_capacity(pixels);
                for &p in &probs {
                    s += bce_loss(p, y)?;
                    grads.push(bce_grad(p, y)? / pixels as f64);
                }
                pixel_sum += s / pixels as f64;
                grads
            }
        };
        for ((d, &p), &dp) in d_pixel
            .slice_mut(ndarray::s![i, 0, .., ..])
            .iter_mut()
            .zip(&probs)
            .zip(&d_probs)
        {
            *d = T::of(pix_w * inv_n * dp * p * (1.0 - p));
        }
        let p = sigmoid(binary_logits[i]).f64();
        let (l, dp) = match w.kind {
            LossKind::FocalSl => (focal_loss(p, y, w.gamma)?, focal_grad(p, y, w.gamma)?),
            LossKind::Bce => (bce_loss(p, y)?, bce_grad(p, y)?),
        };
        binary_sum += l;
        d_binary[i] = T::of(bin_w * inv_n * dp * p * (1.0 - p));
    }
    let pixel = pixel_sum * inv_n;
    let binary = binary_sum * inv_n;
    Ok(BatchLoss {
        pixel,
        binary,
        total: pix_w * pixel + bin_w * binary,
        d_pixel_logits: d_pixel,
        d_binary_logits: d_binary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array;

    #[test]
    fn smooth_l1_examples() {
        let gt = vec![1.0; 196];
        assert_eq!(smooth_l1(&gt, &gt).unwrap(), 0.0);
        let half: Vec<f64> = vec![0.5; 196];
        assert_abs_diff_eq!(smooth_l1(&half, &gt).unwrap(), 0.125, epsilon = 1e-15);
        let far: Vec<f64> = vec![3.0; 196];
        assert_abs_diff_eq!(smooth_l1(&far, &gt).unwrap(), 1.5, epsilon = 1e-15);
        assert!(smooth_l1(&gt[..10], &gt).is_err());
    }

    #[test]
    fn smooth_l1_seam_is_c1() {
        let eps = 1e-9;
        let below = smooth_l1_term(1.0 - eps);
        let above = smooth_l1_term(1.0 + eps);
        assert_abs_diff_eq!(below, 0.5, epsilon = 1e-8);
        assert_abs_diff_eq!(above, 0.5, epsilon = 1e-8);
        assert_abs_diff_eq!(smooth_l1_slope(1.0 - eps), 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(smooth_l1_slope(1.0 + eps), 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(smooth_l1_slope(-1.0 - eps), -1.0, epsilon = 1e-8);
    }

    #[test]
    fn focal_examples() {
        assert_abs_diff_eq!(
            focal_loss(0.5, 1.0, 2.0).unwrap(),
            0.25 * 2f64.ln(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            focal_loss(0.1, 0.0, 2.0).unwrap(),
            -0.01 * 0.9f64.ln(),
            epsilon = 1e-12
        );
        assert!(focal_loss(1.0 - 1e-9, 1.0, 2.0).unwrap() < 1e-12);
        assert!(focal_loss(0.5, 0.5, 2.0).is_err());
        assert!(bce_loss(0.5, 2.0).is_err());
    }

    #[test]
    fn bce_examples() {
        assert_abs_diff_eq!(bce_loss(0.5, 1.0).unwrap(), 2f64.ln(), epsilon = 1e-12);
        assert!(bce_loss(1.0, 1.0).unwrap() < 1e-6);
        for &p in &[0.01, 0.3, 0.77, 0.99] {
            for &y in &[0.0, 1.0] {
                assert_abs_diff_eq!(
                    bce_loss(p, y).unwrap(),
                    focal_loss(p, y, 0.0).unwrap(),
                    epsilon = 1e-15
                );
            }
        }
    }

    #[test]
    fn overall_schedule() {
        let w = LossWeights::default();
        assert_abs_diff_eq!(overall_loss(0.1, 0.2, 0, &w).unwrap(), 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(
            overall_loss(0.1, 0.2, 5, &w).unwrap(),
            10.2,
            epsilon = 1e-12
        );
        assert_eq!(overall_loss(0.0, 0.0, 17, &w).unwrap(), 0.0);
        assert_eq!(w.lambda1(4), 1.0);
        assert_eq!(w.lambda1(5), 100.0);
        assert!(overall_loss(-0.1, 0.2, 0, &w).is_err());
        assert_eq!(w.unscheduled().lambda1(50), 1.0);
    }

    fn central(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
    }

    #[test]
    fn scalar_gradients_match_finite_differences() {
        for &p in &[0.03, 0.2, 0.5, 0.81, 0.97] {
            for &y in &[0.0, 1.0] {
                for &g in &[0.0, 0.5, 2.0] {
                    let fd = central(|q| focal_loss(q, y, g).unwrap(), p);
                    assert!(
                        rel_err(fd, focal_grad(p, y, g).unwrap()) < 1e-6,
                        "focal p={p} y={y} g={g}"
                    );
                }
                let fd = central(|q| bce_loss(q, y).unwrap(), p);
                assert!(rel_err(fd, bce_grad(p, y).unwrap()) < 1e-6);
            }
        }
        let gt = vec![1.0, 0.0, 1.0];
        let pred = vec![0.3, 0.4, -1.7];
        let g = smooth_l1_grad(&pred, &gt).unwrap();
        for k in 0..3 {
            let fd = central(
                |v| {
                    let mut q = pred.clone();
                    q[k] = v;
                    smooth_l1(&q, &gt).unwrap()
                },
                pred[k],
            );
            assert!(rel_err(fd, g[k]) < 1e-6);
        }
    }

    #[test]
    fn batch_loss_logit_gradients() {
        let pix = Array::from_shape_fn((2, 1, 3, 3), |(n, _, i, j)| {
            (n as f64 - 0.5) * 0.7 + 0.3 * i as f64 - 0.2 * j as f64
        });
        let bin = Array1::from(vec![0.4, -1.1]);
        let labels = [1.0, 0.0];
        for (kind, epoch) in [
            (LossKind::FocalSl, 0),
            (LossKind::FocalSl, 7),
            (LossKind::Bce, 0),
        ] {
            let w = LossWeights {
                kind,
                ..Default::default()
            };
            let base = batch_loss(&pix, &bin, &labels, epoch, &w).unwrap();
            let h = 1e-6;
            for idx in [(0, 0, 1, 2), (1, 0, 2, 0)] {
                let mut a = pix.clone();
                a[idx] += h;
                let mut b = pix.clone();
                b[idx] -= h;
                let fd = (batch_loss(&a, &bin, &labels, epoch, &w).unwrap().total
                    - batch_loss(&b, &bin, &labels, epoch, &w).unwrap().total)
                    / (2.0 * h);
                assert!(
                    rel_err(fd, base.d_pixel_logits[idx]) < 1e-6,
                    "{kind:?} pixel {idx:?}"
                );
            }
            for i in 0..2 {
                let mut a = bin.clone();
                a[i] += h;
                let mut b = bin.clone();
                b[i] -= h;
                let fd = (batch_loss(&pix, &a, &labels, epoch, &w).unwrap().total
                    - batch_loss(&pix, &b, &labels, epoch, &w).unwrap().total)
                    / (2.0 * h);
                assert!(
                    rel_err(fd, base.d_binary_logits[i]) < 1e-6,
                    "{kind:?} binary {i}"
                );
            }
        }
    }
}
