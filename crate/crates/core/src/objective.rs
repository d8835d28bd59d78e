//! Loss terms: label-smoothed NLL, component-wise alignment, Gaussian KL to a
//! unit prior, and their weighted total.

use serde::{Deserialize, Serialize};

use crate::affine::AffineComponents;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_align: f64,
    pub lambda_kl: f64,
    pub w_theta: f64,
    pub w_s: f64,
    pub w_h: f64,
    pub label_smoothing: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_align: 1.0,
            lambda_kl: 0.0,
            w_theta: 2.0,
            w_s: 0.5,
            w_h: 0.5,
            label_smoothing: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("lambda_align", self.lambda_align),
            ("lambda_kl", self.lambda_kl),
            ("w_theta", self.w_theta),
            ("w_s", self.w_s),
            ("w_h", self.w_h),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss.{key} = {v} must be finite and >= 0")));
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "loss.label_smoothing = {} must be in [0, 1)",
                self.label_smoothing
            )));
        }
        Ok(())
    }
}

/// Per-term values of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll: f64,
    pub align: f64,
    pub kl: f64,
    pub total: f64,
    /// Weighted rotation, scale and shear parts of `align`.
    pub per_component_align: [f64; 3],
}

fn check_target(k: usize, y: usize, eps: f64) -> Result<()> {
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {k}")));
    }
    if y >= k {
        return Err(Error::invalid(format!("label {y} out of range for {k} classes")));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::invalid(format!("label smoothing {eps} outside [0, 1)")));
    }
    Ok(())
}

/// Smoothed target: `1 - eps` on `y`, `eps / (K - 1)` elsewhere.
pub fn smoothed_target(k: usize, y: usize, eps: f64) -> Result<Tensor> {
    check_target(k, y, eps)?;
    let off = eps / (k - 1) as f64;
    let mut t = vec![off; k];
    t[y] = 1.0 - eps;
    Ok(Tensor::vector(t))
}

pub fn nll_label_smoothed(logits: &[f64], y: usize, eps: f64) -> Result<f64> {
    let target = smoothed_target(logits.len(), y, eps)?;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(-target.data().iter().zip(logits).map(|(t, l)| t * (l - lse)).sum::<f64>())
}

pub fn nll_label_smoothed_var<'t>(logits: Var<'t>, y: usize, eps: f64) -> Result<Var<'t>> {
    let k = logits.value().numel();
    let target = logits.tape().constant(smoothed_target(k, y, eps)?);
    Ok(logits.log_softmax().mul(target)?.sum().neg())
}

/// Weighted `(rotation, scale, shear)` alignment terms.
pub fn alignment_terms(truth: &AffineComponents, pred: &AffineComponents, w: &LossWeights) -> [f64; 3] {
    let rot = w.w_theta * (1.0 - (pred.theta - truth.theta).cos());
    let (sx, sy) = truth.scales();
    let (px, py) = pred.scales();
    let scale = w.w_s * ((px - sx).powi(2) + (py - sy).powi(2)).sqrt();
    let shear = w.w_h * ((1.0 - (pred.hx - truth.hx).cos()) + (1.0 - (pred.hy - truth.hy).cos()));
    [rot, scale, shear]
}

pub fn alignment_loss(truth: &AffineComponents, pred: &AffineComponents, w: &LossWeights) -> (f64, [f64; 3]) {
    let t = alignment_terms(truth, pred, w);
    (t.iter().sum(), t)
}

/// Differentiable alignment loss against a `[5]` prediction; returns the
/// total and its three weighted parts.
pub fn alignment_loss_var<'t>(
    truth: &AffineComponents,
    pred: Var<'t>,
    w: &LossWeights,
) -> Result<(Var<'t>, [Var<'t>; 3])> {
    if pred.value().numel() != AffineComponents::LEN {
        return Err(Error::Shape {
            op: "alignment_loss",
            lhs: pred.shape(),
            rhs: vec![AffineComponents::LEN],
        });
    }
    let tape = pred.tape();
    let t = truth.to_array();
    let one_minus_cos = |v: Var<'t>, target: f64| v.offset(-target).cos().neg().offset(1.0);

    let rot = one_minus_cos(pred.at(0)?, t[0]).scale(w.w_theta);
    let true_s = tape.constant(Tensor::vector(vec![t[1].exp(), t[2].exp()]));
    let scale = pred.narrow(0, 1, 2)?.exp().sub(true_s)?.norm().scale(w.w_s);
    let shear = one_minus_cos(pred.at(3)?, t[3])
        .add(one_minus_cos(pred.at(4)?, t[4]))?
        .scale(w.w_h);
    let total = rot.add(scale)?.add(shear)?;
    Ok((total, [rot, scale, shear]))
}

/// `Σ ½(μ² + σ² − 1 − ln σ²)` over components.
pub fn kl_gaussian_unit(mean: &[f64], sigma: &[f64]) -> Result<f64> {
    if mean.len() != sigma.len() {
        return Err(Error::invalid(format!(
            "{} means but {} standard deviations",
            mean.len(),
            sigma.len()
        )));
    }
    let mut kl = 0.0;
    for (m, s) in mean.iter().zip(sigma) {
        if !(*s > 0.0) {
            return Err(Error::Domain {
                op: "kl_gaussian_unit",
                detail: format!("standard deviation {s} is not positive"),
            });
        }
        kl += 0.5 * (m * m + s * s - 1.0 - (s * s).ln());
    }
    Ok(kl)
}

pub fn kl_gaussian_unit_var<'t>(mean: Var<'t>, sigma: Var<'t>) -> Result<Var<'t>> {
    let log_var = sigma.log()?.scale(2.0);
    Ok(mean
        .square()
        .add(sigma.square())?
        .sub(log_var)?
        .offset(-1.0)
        .sum()
        .scale(0.5))
}

/// Weighted sum of already sample-averaged terms.
pub fn total_loss(nll: f64, align: f64, kl: f64, per_component_align: [f64; 3], w: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        nll,
        align,
        kl,
        total: nll + w.lambda_align * align + w.lambda_kl * kl,
        per_component_align,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, grad_check_many, Tape};
    use crate::verify::oracle::kl_by_quadrature;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn uniform_logits_give_log_k() {
        for k in [2, 5, 10] {
            let v = nll_label_smoothed(&vec![0.3; k], 1, 0.0).unwrap();
            assert!((v - (k as f64).ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn dominant_logit_gives_zero_loss() {
        let v = nll_label_smoothed(&[1e6, 0.0, 0.0], 0, 0.0).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn smoothed_nll_matches_direct_formula() {
        let logits = [1.0, 0.0, 0.0, 0.0];
        let z = 1f64.exp() + 3.0;
        let (p0, p1) = (1f64.exp() / z, 1.0 / z);
        let direct = -(0.9 * p0.ln() + 3.0 * (0.1 / 3.0) * p1.ln());
        let v = nll_label_smoothed(&logits, 0, 0.1).unwrap();
        assert!((v - direct).abs() < 1e-14);
        let tape = Tape::new();
        let var = nll_label_smoothed_var(tape.constant(Tensor::vector(logits.to_vec())), 0, 0.1).unwrap();
        assert!((var.item() - direct).abs() < 1e-14);
    }

    #[test]
    fn invalid_label_is_rejected() {
        assert!(nll_label_smoothed(&[0.0, 1.0], 2, 0.1).is_err());
        assert!(nll_label_smoothed(&[0.0], 0, 0.1).is_err());
    }

    #[test]
    fn alignment_anchors() {
        let w = LossWeights::default();
        let a = AffineComponents::new(0.4, -0.1, -0.2, 0.1, -0.3);
        assert_eq!(alignment_loss(&a, &a, &w).0, 0.0);
        let flipped = AffineComponents { theta: a.theta + PI, ..a };
        assert!((alignment_loss(&a, &flipped, &w).0 - 4.0).abs() < 1e-12);
        let wrapped = AffineComponents { theta: a.theta + 2.0 * PI, ..a };
        assert!(alignment_loss(&a, &wrapped, &w).0.abs() < 1e-12);
    }

    #[test]
    fn alignment_var_matches_plain() {
        let w = LossWeights::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = AffineComponents::from_slice(&(0..5).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap();
            let b = AffineComponents::from_slice(&(0..5).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap();
            let tape = Tape::new();
            let (total, parts) = alignment_loss_var(&a, tape.constant(Tensor::vector(b.to_array().to_vec())), &w).unwrap();
            let (plain, plain_parts) = alignment_loss(&a, &b, &w);
            assert!((total.item() - plain).abs() < 1e-14);
            for (v, p) in parts.iter().zip(plain_parts) {
                assert!((v.item() - p).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn alignment_gradient_check() {
        let w = LossWeights::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let truth = AffineComponents::new(rng.random_range(-3.0..3.0), -0.1, -0.2, 0.3, -0.1);
            let x = Tensor::vector((0..5).map(|_| rng.random_range(-0.5..0.5)).collect());
            let err = grad_check(|v| Ok(alignment_loss_var(&truth, v, &w)?.0), &x, 1e-6).unwrap();
            assert!(err < 1e-5, "{err}");
        }
    }

    #[test]
    fn kl_anchors() {
        assert_eq!(kl_gaussian_unit(&[0.0; 5], &[1.0; 5]).unwrap(), 0.0);
        assert!((kl_gaussian_unit(&[1.0], &[1.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(kl_gaussian_unit(&[0.0], &[0.0]).is_err());
        assert!(kl_gaussian_unit(&[0.0], &[-1.0]).is_err());
    }

    #[test]
    fn kl_matches_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..25 {
            let mu: f64 = rng.random_range(-2.0..2.0);
            let sigma = rng.random_range(-5.0f64..1.0).exp();
            let closed = kl_gaussian_unit(&[mu], &[sigma]).unwrap();
            let numeric = kl_by_quadrature(mu, sigma);
            assert!((closed - numeric).abs() < 1e-6, "{mu} {sigma}: {closed} vs {numeric}");
        }
    }

    #[test]
    fn kl_var_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mean = Tensor::vector((0..5).map(|_| rng.random_range(-1.0..1.0)).collect());
        let sigma = Tensor::vector((0..5).map(|_| rng.random_range(0.1..2.0)).collect());
        let err = grad_check_many(|v| kl_gaussian_unit_var(v[0], v[1]), &[mean.clone(), sigma.clone()], 1e-6).unwrap();
        assert!(err < 1e-5, "{err}");
        let tape = Tape::new();
        let v = kl_gaussian_unit_var(tape.constant(mean.clone()), tape.constant(sigma.clone())).unwrap();
        let plain = kl_gaussian_unit(mean.data(), sigma.data()).unwrap();
        assert!((v.item() - plain).abs() < 1e-13);
    }

    #[test]
    fn nll_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let logits = Tensor::vector((0..6).map(|_| rng.random_range(-2.0..2.0)).collect());
        let err = grad_check(|v| nll_label_smoothed_var(v, 2, 0.1), &logits, 1e-6).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn total_combines_terms() {
        let w = LossWeights {
            lambda_align: 0.7,
            lambda_kl: 0.3,
            ..LossWeights::default()
        };
        let b = total_loss(1.5, 0.25, 2.0, [0.1, 0.1, 0.05], &w);
        assert!((b.total - (1.5 + 0.7 * 0.25 + 0.3 * 2.0)).abs() < 1e-12);
        let zero = LossWeights {
            lambda_align: 0.0,
            lambda_kl: 0.0,
            ..w
        };
        assert_eq!(total_loss(1.5, 9.0, 9.0, [0.0; 3], &zero).total, 1.5);
        assert_eq!(total_loss(0.0, 0.0, 0.0, [0.0; 3], &w).total, 0.0);
    }

    proptest! {
        #[test]
        fn alignment_is_nonnegative_and_periodic(
            a in proptest::array::uniform5(-3.0f64..3.0),
            b in proptest::array::uniform5(-3.0f64..3.0),
            k in -3i32..3,
        ) {
            let w = LossWeights::default();
            let ta = AffineComponents::from_slice(&a).unwrap();
            let tb = AffineComponents::from_slice(&b).unwrap();
            let base = alignment_loss(&ta, &tb, &w).0;
            prop_assert!(base >= 0.0);
            let shift = 2.0 * PI * k as f64;
            let moved = AffineComponents { theta: tb.theta + shift, hx: tb.hx - shift, ..tb };
            prop_assert!((alignment_loss(&ta, &moved, &w).0 - base).abs() < 1e-9);
        }

        #[test]
        fn kl_is_nonnegative(m in -3.0f64..3.0, ls in -5.0f64..1.0) {
            prop_assert!(kl_gaussian_unit(&[m], &[ls.exp()]).unwrap() >= 0.0);
        }
    }
}
