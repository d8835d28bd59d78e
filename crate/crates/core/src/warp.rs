//! Grid generation and bilinear resampling.
//!
//! Normalised coordinates put `-1` and `+1` on the centres of the edge
//! pixels, so the identity grid lands exactly on pixel centres. Sampling is
//! pull-based: output pixel `p` reads the source at `T·p`. Coordinates that
//! leave `[-1, 1]` are folded back by reflecting about the edge-pixel centres.

use crate::affine::AffineMatrix;
use crate::autodiff::kernels;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Distance to a lattice point below which a source coordinate is snapped
/// onto it, so lattice-aligned grids reproduce pixels exactly.
const LATTICE_SNAP: f64 = 1e-9;

/// `H×W×2` normalised `(x, y)` source coordinates, one per output pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingGrid {
    coords: Tensor,
}

impl SamplingGrid {
    pub fn from_tensor(coords: Tensor) -> Result<Self> {
        let s = coords.shape();
        if s.len() != 3 || s[2] != 2 {
            return Err(Error::Shape {
                op: "sampling_grid",
                lhs: s.to_vec(),
                rhs: vec![0, 0, 2],
            });
        }
        Ok(Self { coords })
    }

    pub fn height(&self) -> usize {
        self.coords.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.coords.shape()[1]
    }

    pub fn coords(&self) -> &Tensor {
        &self.coords
    }

    pub fn at(&self, i: usize, j: usize) -> [f64; 2] {
        let k = (i * self.width() + j) * 2;
        [self.coords.data()[k], self.coords.data()[k + 1]]
    }
}

/// Folds `u` into `[-1, 1]` with a period-4 triangle wave. Returns the folded
/// coordinate and `d(folded)/du` (±1).
pub fn reflect_coord(u: f64) -> (f64, f64) {
    if (-1.0..=1.0).contains(&u) {
        return (u, 1.0);
    }
    let v = (u + 1.0).rem_euclid(4.0);
    if v <= 2.0 {
        (v - 1.0, 1.0)
    } else {
        (3.0 - v, -1.0)
    }
}

/// `[H·W, 3]` rows of `(x, y, 1)` for every output pixel centre.
pub fn base_coords(h: usize, w: usize) -> Result<Tensor> {
    if h < 2 || w < 2 {
        return Err(Error::invalid(format!("grid needs H, W >= 2, got {h}x{w}")));
    }
    let mut data = Vec::with_capacity(h * w * 3);
    for i in 0..h {
        let y = 2.0 * i as f64 / (h - 1) as f64 - 1.0;
        for j in 0..w {
            let x = 2.0 * j as f64 / (w - 1) as f64 - 1.0;
            data.extend_from_slice(&[x, y, 1.0]);
        }
    }
    Tensor::new(vec![h * w, 3], data)
}

pub fn generate_grid(t: &AffineMatrix, h: usize, w: usize) -> Result<SamplingGrid> {
    let base = base_coords(h, w)?;
    let r = t.to_rows();
    // Tᵀ as a 3×2 matrix, the same product the differentiable path evaluates.
    let tt = [r[0], r[3], r[1], r[4], r[2], r[5]];
    let coords = kernels::matmul(base.data(), &tt, h * w, 3, 2);
    SamplingGrid::from_tensor(Tensor::new(vec![h, w, 2], coords)?)
}

/// Differentiable [`generate_grid`] from a `[2, 3]` matrix variable.
pub fn generate_grid_var<'t>(t: Var<'t>, h: usize, w: usize) -> Result<Var<'t>> {
    let base = t.tape().constant(base_coords(h, w)?);
    base.matmul(t.transpose()?)?.reshape(&[h, w, 2])
}

pub fn bilinear_sample(image: &Tensor, grid: &SamplingGrid) -> Result<Tensor> {
    sample_forward(image, &grid.coords)
}

/// One axis of a bilinear tap: lower index, fractional weight and the
/// derivative of the pixel coordinate with respect to the normalised one.
#[derive(Clone, Copy)]
struct AxisTap {
    lo: usize,
    frac: f64,
    dpdu: f64,
}

fn axis_tap(u: f64, n: usize) -> AxisTap {
    let (r, sign) = reflect_coord(u);
    let half = 0.5 * (n - 1) as f64;
    let mut p = (r + 1.0) * half;
    let nearest = p.round();
    if (p - nearest).abs() < LATTICE_SNAP {
        p = nearest;
    }
    let lo = (p.floor() as usize).min(n - 2);
    AxisTap {
        lo,
        frac: p - lo as f64,
        dpdu: sign * half,
    }
}

fn check_shapes(image: &Tensor, grid: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    let (si, sg) = (image.shape(), grid.shape());
    if si.len() != 3 || sg.len() != 3 || sg[2] != 2 || si[1] < 2 || si[2] < 2 {
        return Err(Error::Shape {
            op: "grid_sample",
            lhs: si.to_vec(),
            rhs: sg.to_vec(),
        });
    }
    Ok((si[0], si[1], si[2], sg[0], sg[1]))
}

pub(crate) fn sample_forward(image: &Tensor, grid: &Tensor) -> Result<Tensor> {
    let (c, h, w, oh, ow) = check_shapes(image, grid)?;
    let src = image.data();
    let g = grid.data();
    let plane = h * w;
    let mut out = vec![0.0; c * oh * ow];
    for k in 0..oh * ow {
        let tx = axis_tap(g[2 * k], w);
        let ty = axis_tap(g[2 * k + 1], h);
        let (fx, fy) = (tx.frac, ty.frac);
        let w00 = (1.0 - fx) * (1.0 - fy);
        let w01 = fx * (1.0 - fy);
        let w10 = (1.0 - fx) * fy;
        let w11 = fx * fy;
        let i00 = ty.lo * w + tx.lo;
        for ch in 0..c {
            let base = ch * plane + i00;
            let (v00, v01, v10, v11) = (src[base], src[base + 1], src[base + w], src[base + w + 1]);
            let v = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11;
            // Rounding can push the blend a few ulps past its corners.
            let lo = v00.min(v01).min(v10.min(v11));
            let hi = v00.max(v01).max(v10.max(v11));
            out[ch * oh * ow + k] = v.clamp(lo, hi);
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// Gradients of [`sample_forward`] with respect to the image and the grid.
pub(crate) fn sample_backward(
    image: &Tensor,
    grid: &Tensor,
    g_out: &[f64],
    want_image: bool,
    want_grid: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let (oh, ow) = (grid.shape()[0], grid.shape()[1]);
    let src = image.data();
    let gd = grid.data();
    let plane = h * w;
    let mut gi = want_image.then(|| vec![0.0; image.numel()]);
    let mut gg = want_grid.then(|| vec![0.0; grid.numel()]);
    for k in 0..oh * ow {
        let tx = axis_tap(gd[2 * k], w);
        let ty = axis_tap(gd[2 * k + 1], h);
        let (fx, fy) = (tx.frac, ty.frac);
        let i00 = ty.lo * w + tx.lo;
        let mut dx = 0.0;
        let mut dy = 0.0;
        for ch in 0..c {
            let go = g_out[ch * oh * ow + k];
            if go == 0.0 {
                continue;
            }
            let base = ch * plane + i00;
            if let Some(gi) = gi.as_mut() {
                gi[base] += go * (1.0 - fx) * (1.0 - fy);
                gi[base + 1] += go * fx * (1.0 - fy);
                gi[base + w] += go * (1.0 - fx) * fy;
                gi[base + w + 1] += go * fx * fy;
            }
            if gg.is_some() {
                let (v00, v01, v10, v11) = (src[base], src[base + 1], src[base + w], src[base + w + 1]);
                dx += go * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                dy += go * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
            }
        }
        if let Some(gg) = gg.as_mut() {
            gg[2 * k] += dx * tx.dpdu;
            gg[2 * k + 1] += dy * ty.dpdu;
        }
    }
    (gi, gg)
}

/// Pull-warps `image` by `t`: output pixel `p` reads the source at `t·p`.
pub fn warp_image(image: &Tensor, t: &AffineMatrix) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::Shape {
            op: "warp",
            lhs: s.to_vec(),
            rhs: vec![0, 0, 0],
        });
    }
    let grid = generate_grid(t, s[1], s[2])?;
    bilinear_sample(image, &grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affine::{compose_matrix, invert, AffineComponents};
    use crate::autodiff::{grad_check_many, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn smooth_image(c: usize, h: usize, w: usize) -> Tensor {
        let mut data = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let (x, y) = (j as f64 / (w - 1) as f64, i as f64 / (h - 1) as f64);
                    data.push(0.5 + 0.25 * (2.0 * x + ch as f64).sin() * (1.5 * y).cos() + 0.2 * x * y);
                }
            }
        }
        Tensor::new(vec![c, h, w], data).unwrap()
    }

    #[test]
    fn identity_grid_corners() {
        let g = generate_grid(&AffineMatrix::identity(), 4, 4).unwrap();
        assert_eq!(g.at(0, 0), [-1.0, -1.0]);
        assert_eq!(g.at(0, 3), [1.0, -1.0]);
        assert_eq!(g.at(3, 0), [-1.0, 1.0]);
        assert_eq!(g.at(3, 3), [1.0, 1.0]);
    }

    #[test]
    fn half_scale_grid_corners() {
        let g = generate_grid(&AffineMatrix::scaling(0.5, 0.5), 4, 4).unwrap();
        assert_eq!(g.at(0, 0), [-0.5, -0.5]);
        assert_eq!(g.at(3, 3), [0.5, 0.5]);
    }

    #[test]
    fn rotated_grid_is_rotated_identity_grid() {
        let id = generate_grid(&AffineMatrix::identity(), 8, 8).unwrap();
        let rot = AffineMatrix::rotation(PI / 2.0);
        let g = generate_grid(&rot, 8, 8).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let want = rot.apply(id.at(i, j));
                let got = g.at(i, j);
                assert!((want[0] - got[0]).abs() < 1e-15 && (want[1] - got[1]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn grid_rejects_degenerate_sizes() {
        assert!(generate_grid(&AffineMatrix::identity(), 1, 4).is_err());
        assert!(generate_grid(&AffineMatrix::identity(), 4, 1).is_err());
    }

    #[test]
    fn identity_warp_is_bitwise_lossless() {
        let img = smooth_image(3, 9, 7);
        let out = warp_image(&img, &AffineMatrix::identity()).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Tensor::full(&[1, 6, 6], 0.37);
        let m = compose_matrix(&AffineComponents::new(1.1, -0.2, -0.1, 0.3, -0.4)).unwrap();
        let out = warp_image(&img, &m).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.37));
    }

    #[test]
    fn warp_then_inverse_recovers_interior() {
        let img = smooth_image(1, 32, 32);
        let m = compose_matrix(&AffineComponents::new(0.6, -0.1, -0.2, 0.1, -0.05)).unwrap();
        let there = warp_image(&img, &m).unwrap();
        let back = warp_image(&there, &invert(&m).unwrap()).unwrap();
        let mut worst: f64 = 0.0;
        for i in 8..24 {
            for j in 8..24 {
                let k = i * 32 + j;
                worst = worst.max((back.data()[k] - img.data()[k]).abs());
            }
        }
        assert!(worst < 0.02, "{worst}");
    }

    #[test]
    fn reflection_folds_into_range_and_is_idempotent() {
        assert_eq!(reflect_coord(1.5), (0.5, -1.0));
        assert_eq!(reflect_coord(-1.5), (-0.5, -1.0));
        assert_eq!(reflect_coord(3.5).0, -0.5);
        assert_eq!(reflect_coord(0.25), (0.25, 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let u = rng.random_range(-50.0..50.0);
            let (r, _) = reflect_coord(u);
            assert!((-1.0..=1.0).contains(&r));
            assert_eq!(reflect_coord(r).0, r);
        }
    }

    #[test]
    fn sample_rejects_mismatched_shapes() {
        let img = Tensor::zeros(&[1, 4, 4]);
        let bad = Tensor::zeros(&[4, 4, 3]);
        assert!(sample_forward(&img, &bad).is_err());
        assert!(SamplingGrid::from_tensor(bad).is_err());
    }

    #[test]
    fn sampler_gradients_off_lattice() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = smooth_image(2, 6, 5);
        // Keep every coordinate at least 1e-3 (in pixel units) from the lattice.
        let mut coords = Vec::new();
        while coords.len() < 4 * 3 * 2 {
            let u: f64 = rng.random_range(-1.6..1.6);
            let n = if coords.len() % 2 == 0 { 5 } else { 6 };
            let (r, _) = reflect_coord(u);
            let p = (r + 1.0) * 0.5 * (n - 1) as f64;
            if (p - p.round()).abs() > 1e-3 && (u.abs() - 1.0).abs() > 1e-3 {
                coords.push(u);
            }
        }
        let grid = Tensor::new(vec![4, 3, 2], coords).unwrap();
        let weights = Tensor::new(vec![2, 4, 3], (0..24).map(|i| (i as f64 * 0.7).cos()).collect()).unwrap();
        let err = grad_check_many(
            |v| {
                let w = v[0].tape().constant(weights.clone());
                Ok(v[0].grid_sample(v[1])?.mul(w)?.sum())
            },
            &[img, grid],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn var_grid_matches_plain_grid() {
        let m = compose_matrix(&AffineComponents::new(0.3, -0.1, 0.05, 0.2, 0.1)).unwrap();
        let tape = Tape::new();
        let g = generate_grid_var(tape.constant(m.to_tensor()), 5, 7).unwrap();
        let plain = generate_grid(&m, 5, 7).unwrap();
        assert_eq!(&*g.value(), plain.coords());
    }

    proptest::proptest! {
        #[test]
        fn output_within_input_range(
            theta in -PI..PI, l in -0.5f64..0.3, hx in -0.5f64..0.5, seed in 0u64..500,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..2 * 7 * 6).map(|_| rng.random_range(-3.0..5.0)).collect();
            let img = Tensor::new(vec![2, 7, 6], data).unwrap();
            let m = compose_matrix(&AffineComponents::new(theta, l, -l, hx, 0.0)).unwrap();
            let out = warp_image(&img, &m).unwrap();
            proptest::prop_assert!(out.min() >= img.min() && out.max() <= img.max());
        }
    }
}
