//! Geometric augmentation with recorded components, plus flip and
//! blur/sharpen jitter that are not part of the recorded transform.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::affine::{compose_matrix, AffineComponents};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::warp::warp_image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSpec {
    pub theta_range: [f64; 2],
    /// Linear scale factors, drawn independently per axis.
    pub scale_range: [f64; 2],
    pub shear_range: [f64; 2],
    pub flip_prob: f64,
    pub blur_or_sharpen_prob: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            theta_range: [-PI, PI],
            scale_range: [0.75, 1.0],
            shear_range: [-0.2, 0.2],
            flip_prob: 0.5,
            blur_or_sharpen_prob: 0.1,
        }
    }
}

impl AugmentSpec {
    /// No geometric change; photometric jitter as in the default spec.
    pub fn photometric_only() -> Self {
        Self {
            theta_range: [0.0, 0.0],
            scale_range: [1.0, 1.0],
            shear_range: [0.0, 0.0],
            ..Self::default()
        }
    }

    /// Nothing at all.
    pub fn none() -> Self {
        Self {
            flip_prob: 0.0,
            blur_or_sharpen_prob: 0.0,
            ..Self::photometric_only()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range = |key: &str, r: [f64; 2], lo: f64, hi: f64, lo_open: bool| {
            let lo_ok = if lo_open { r[0] > lo } else { r[0] >= lo };
            if r.iter().all(|v| v.is_finite()) && r[0] <= r[1] && lo_ok && r[1] <= hi {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "augment.{key} = {r:?} must be an ordered range inside {}{lo}, {hi}]",
                    if lo_open { "(" } else { "[" }
                )))
            }
        };
        range("theta_range", self.theta_range, -PI, PI, false)?;
        range("scale_range", self.scale_range, 0.0, 1.0, true)?;
        range("shear_range", self.shear_range, -PI, PI, false)?;
        for (key, p) in [("flip_prob", self.flip_prob), ("blur_or_sharpen_prob", self.blur_or_sharpen_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment.{key} = {p} must be in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Uniform draw from `[lo, hi)`, or `lo` when the range is degenerate.
pub fn sample_range(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[0] < r[1] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

pub fn sample_components(spec: &AugmentSpec, rng: &mut impl Rng) -> AffineComponents {
    let theta = sample_range(rng, spec.theta_range);
    let sx = sample_range(rng, spec.scale_range);
    let sy = sample_range(rng, spec.scale_range);
    let hx = sample_range(rng, spec.shear_range);
    let hy = sample_range(rng, spec.shear_range);
    AffineComponents::new(theta, sx.ln(), sy.ln(), hx, hy)
}

/// Mirrors every row of a `C×H×W` image.
pub fn flip_horizontal(image: &Tensor) -> Tensor {
    let s = image.shape();
    let w = s[s.len() - 1];
    let mut out = image.clone();
    for row in out.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    out
}

/// 3×3 binomial blur with reflected borders.
pub fn blur3(image: &Tensor) -> Tensor {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let k = [0.25, 0.5, 0.25];
    let reflect = |i: isize, n: usize| -> usize {
        if i < 0 {
            (-i) as usize
        } else if i as usize >= n {
            2 * n - 2 - i as usize
        } else {
            i as usize
        }
    };
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (di, ki) in k.iter().enumerate() {
                    let ii = reflect(i as isize + di as isize - 1, h);
                    for (dj, kj) in k.iter().enumerate() {
                        let jj = reflect(j as isize + dj as isize - 1, w);
                        acc += ki * kj * plane[ii * w + jj];
                    }
                }
                out[ch * h * w + i * w + j] = acc;
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

/// Unsharp mask `x + (x - blur(x))`, clamped to `[0, 1]`.
pub fn sharpen(image: &Tensor) -> Tensor {
    let b = blur3(image);
    let data = image
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (2.0 * x - y).clamp(0.0, 1.0))
        .collect();
    Tensor::new(image.shape().to_vec(), data).expect("same shape")
}

/// Flip, then warp by the sampled components, then blur or sharpen. The
/// returned components describe the warp exactly.
pub fn augment_with_params(
    image: &Tensor,
    spec: &AugmentSpec,
    rng: &mut impl Rng,
) -> Result<(Tensor, AffineComponents)> {
    let comps = sample_components(spec, rng);
    let flip = spec.flip_prob > 0.0 && rng.random::<f64>() < spec.flip_prob;
    let jitter = spec.blur_or_sharpen_prob > 0.0 && rng.random::<f64>() < spec.blur_or_sharpen_prob;
    let use_blur = rng.random::<bool>();

    let mut out = if flip { flip_horizontal(image) } else { image.clone() };
    out = warp_image(&out, &compose_matrix(&comps)?)?;
    if jitter {
        out = if use_blur { blur3(&out) } else { sharpen(&out) };
    }
    Ok((out, comps))
}
