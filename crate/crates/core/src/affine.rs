//! Rotation, anisotropic scaling and shearing of the plane, composed in the
//! fixed order `M = R(θ) · S(sx, sy) · H(hx, hy)`.
//!
//! Scales are carried in log-space. The translation column exists on every
//! matrix but is zero for anything built from [`AffineComponents`].

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Determinant magnitude below which a matrix is treated as singular.
pub const SINGULAR_DET: f64 = 1e-12;

/// Canonical coordinates `(θ, log sx, log sy, hx, hy)` of the modelled
/// subgroup.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AffineComponents {
    pub theta: f64,
    pub log_sx: f64,
    pub log_sy: f64,
    pub hx: f64,
    pub hy: f64,
}

impl AffineComponents {
    pub const LEN: usize = 5;

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn new(theta: f64, log_sx: f64, log_sy: f64, hx: f64, hy: f64) -> Self {
        Self {
            theta,
            log_sx,
            log_sy,
            hx,
            hy,
        }
    }

    /// Rotation plus isotropic scale factor `s` (not its log).
    pub fn rotoscale(theta: f64, scale: f64) -> Self {
        Self::new(theta, scale.ln(), scale.ln(), 0.0, 0.0)
    }

    pub fn to_array(self) -> [f64; 5] {
        [self.theta, self.log_sx, self.log_sy, self.hx, self.hy]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        match v {
            [theta, log_sx, log_sy, hx, hy] => Ok(Self::new(*theta, *log_sx, *log_sy, *hx, *hy)),
            _ => Err(Error::invalid(format!(
                "expected 5 affine components, got {}",
                v.len()
            ))),
        }
    }

    pub fn scales(&self) -> (f64, f64) {
        (self.log_sx.exp(), self.log_sy.exp())
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    fn check_finite(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("affine components {self:?}")))
        }
    }
}

/// `T = [M | t]`, acting on points as `p ↦ M·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineMatrix {
    pub m: [[f64; 2]; 2],
    pub t: [f64; 2],
}

impl AffineMatrix {
    pub fn identity() -> Self {
        Self::linear([[1.0, 0.0], [0.0, 1.0]])
    }

    pub fn linear(m: [[f64; 2]; 2]) -> Self {
        Self { m, t: [0.0, 0.0] }
    }

    pub fn rotation(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self::linear([[c, -s], [s, c]])
    }

    pub fn scaling(sx: f64, sy: f64) -> Self {
        Self::linear([[sx, 0.0], [0.0, sy]])
    }

    pub fn det(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.m[0][0] * p[0] + self.m[0][1] * p[1] + self.t[0],
            self.m[1][0] * p[0] + self.m[1][1] * p[1] + self.t[1],
        ]
    }

    /// Row-major `2×3` entries `[a, b, tx, c, d, ty]`.
    pub fn to_rows(&self) -> [f64; 6] {
        [
            self.m[0][0],
            self.m[0][1],
            self.t[0],
            self.m[1][0],
            self.m[1][1],
            self.t[1],
        ]
    }

    pub fn from_rows(r: &[f64]) -> Result<Self> {
        match r {
            [a, b, tx, c, d, ty] => Ok(Self {
                m: [[*a, *b], [*c, *d]],
                t: [*tx, *ty],
            }),
            _ => Err(Error::invalid(format!("expected 6 matrix entries, got {}", r.len()))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![2, 3], self.to_rows().to_vec())
    }

    pub fn max_abs_diff(&self, other: &AffineMatrix) -> f64 {
        self.to_rows()
            .iter()
            .zip(other.to_rows())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl fmt::Display for AffineMatrix {
    /// Two lines, three space-separated entries each.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:e} {:e} {:e}", self.m[0][0], self.m[0][1], self.t[0])?;
        write!(f, "{:e} {:e} {:e}", self.m[1][0], self.m[1][1], self.t[1])
    }
}

fn mul2(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    [
        [
            a[0][0] * b[0][0] + a[0][1] * b[1][0],
            a[0][0] * b[0][1] + a[0][1] * b[1][1],
        ],
        [
            a[1][0] * b[0][0] + a[1][1] * b[1][0],
            a[1][0] * b[0][1] + a[1][1] * b[1][1],
        ],
    ]
}

/// `[[1, hx], [hy, hx·hy + 1]]`, the product of a y-shear and an x-shear.
pub fn shear_matrix(hx: f64, hy: f64) -> Result<[[f64; 2]; 2]> {
    if !hx.is_finite() || !hy.is_finite() {
        return Err(Error::NonFinite(format!("shear ({hx}, {hy})")));
    }
    Ok([[1.0, hx], [hy, hx * hy + 1.0]])
}

pub fn compose_matrix(c: &AffineComponents) -> Result<AffineMatrix> {
    c.check_finite()?;
    let r = AffineMatrix::rotation(c.theta).m;
    let (sx, sy) = c.scales();
    let s = [[sx, 0.0], [0.0, sy]];
    let h = shear_matrix(c.hx, c.hy)?;
    Ok(AffineMatrix::linear(mul2(mul2(r, s), h)))
}

/// Group product: `(a ∘ b)(p) = a(b(p))`.
pub fn matmul_affine(a: &AffineMatrix, b: &AffineMatrix) -> AffineMatrix {
    let bt = [
        a.m[0][0] * b.t[0] + a.m[0][1] * b.t[1] + a.t[0],
        a.m[1][0] * b.t[0] + a.m[1][1] * b.t[1] + a.t[1],
    ];
    AffineMatrix {
        m: mul2(a.m, b.m),
        t: bt,
    }
}

pub fn invert(t: &AffineMatrix) -> Result<AffineMatrix> {
    let det = t.det();
    if !det.is_finite() || det.abs() <= SINGULAR_DET {
        return Err(Error::Singular { det });
    }
    let [[a, b], [c, d]] = t.m;
    let m = [[d / det, -b / det], [-c / det, a / det]];
    let tr = [
        -(m[0][0] * t.t[0] + m[0][1] * t.t[1]),
        -(m[1][0] * t.t[0] + m[1][1] * t.t[1]),
    ];
    Ok(AffineMatrix { m, t: tr })
}

/// Differentiable [`compose_matrix`]: a `[5]` component vector to a `[2, 3]`
/// matrix with zero translation.
pub fn compose_matrix_var<'t>(c: Var<'t>) -> Result<Var<'t>> {
    let tape = c.tape();
    if c.value().numel() != AffineComponents::LEN {
        return Err(Error::Shape {
            op: "compose_matrix",
            lhs: c.shape(),
            rhs: vec![AffineComponents::LEN],
        });
    }
    let theta = c.at(0)?;
    let (cos, sin) = (theta.cos(), theta.sin());
    let sx = c.at(1)?.exp();
    let sy = c.at(2)?.exp();
    let hx = c.at(3)?;
    let hy = c.at(4)?;
    let zero = tape.scalar(0.0);
    let one = tape.scalar(1.0);

    let rot = Var::stack_scalars(&[cos, sin.neg(), sin, cos])?.reshape(&[2, 2])?;
    let scale = Var::stack_scalars(&[sx, zero, zero, sy])?.reshape(&[2, 2])?;
    let h11 = hx.mul(hy)?.offset(1.0);
    let shear = Var::stack_scalars(&[one, hx, hy, h11])?.reshape(&[2, 2])?;
    let m = rot.matmul(scale)?.matmul(shear)?;
    let t = tape.constant(Tensor::zeros(&[2, 1]));
    Var::concat(&[m, t], 1)
}

/// Differentiable [`invert`] of a `[2, 3]` matrix.
pub fn invert_var<'t>(t: Var<'t>) -> Result<Var<'t>> {
    if t.shape() != [2, 3] {
        return Err(Error::Shape {
            op: "invert",
            lhs: t.shape(),
            rhs: vec![2, 3],
        });
    }
    let e: Vec<Var<'t>> = (0..6).map(|i| t.at(i)).collect::<Result<_>>()?;
    let (a, b, tx, c, d, ty) = (e[0], e[1], e[2], e[3], e[4], e[5]);
    let det = a.mul(d)?.sub(b.mul(c)?)?;
    let det_v = det.item();
    if !det_v.is_finite() || det_v.abs() <= SINGULAR_DET {
        return Err(Error::Singular { det: det_v });
    }
    let ia = d.div(det)?;
    let ib = b.neg().div(det)?;
    let ic = c.neg().div(det)?;
    let id = a.div(det)?;
    let itx = ia.mul(tx)?.add(ib.mul(ty)?)?.neg();
    let ity = ic.mul(tx)?.add(id.mul(ty)?)?.neg();
    Var::stack_scalars(&[ia, ib, itx, ic, id, ity])?.reshape(&[2, 3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_components(rng: &mut ChaCha8Rng) -> AffineComponents {
        AffineComponents::new(
            rng.random_range(-PI..PI),
            rng.random_range(-0.7..0.3),
            rng.random_range(-0.7..0.3),
            rng.random_range(-0.8..0.8),
            rng.random_range(-0.8..0.8),
        )
    }

    #[test]
    fn zero_components_compose_to_identity() {
        let m = compose_matrix(&AffineComponents::identity()).unwrap();
        assert_eq!(m, AffineMatrix::identity());
    }

    #[test]
    fn quarter_turn() {
        let m = compose_matrix(&AffineComponents::new(PI / 2.0, 0.0, 0.0, 0.0, 0.0)).unwrap();
        let want = [[0.0, -1.0], [1.0, 0.0]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((m.m[i][j] - want[i][j]).abs() < 1e-15);
            }
        }
        assert_eq!(m.t, [0.0, 0.0]);
    }

    #[test]
    fn scale_then_shear_by_hand() {
        let l = 0.8f64.ln();
        let m = compose_matrix(&AffineComponents::new(0.0, l, l, 0.3, -0.2)).unwrap();
        let want = [[0.8, 0.8 * 0.3], [0.8 * -0.2, 0.8 * 0.94]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((m.m[i][j] - want[i][j]).abs() < 1e-14, "{m}");
            }
        }
    }

    #[test]
    fn shear_examples() {
        assert_eq!(shear_matrix(0.0, 0.0).unwrap(), [[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(shear_matrix(0.5, 0.0).unwrap(), [[1.0, 0.5], [0.0, 1.0]]);
        assert!(shear_matrix(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn non_finite_components_rejected() {
        let c = AffineComponents::new(f64::INFINITY, 0.0, 0.0, 0.0, 0.0);
        assert!(compose_matrix(&c).is_err());
    }

    #[test]
    fn invert_identity_and_rotation() {
        assert_eq!(invert(&AffineMatrix::identity()).unwrap(), AffineMatrix::identity());
        let r = invert(&AffineMatrix::rotation(0.7)).unwrap();
        assert!(r.max_abs_diff(&AffineMatrix::rotation(-0.7)) < 1e-15);
    }

    #[test]
    fn invert_reports_determinant_of_singular_matrix() {
        let m = AffineMatrix::linear([[1.0, 2.0], [0.5, 1.0]]);
        match invert(&m) {
            Err(Error::Singular { det }) => assert_eq!(det, 0.0),
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn inverse_round_trip_on_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = compose_matrix(&random_components(&mut rng)).unwrap();
        m.t = [0.1, -0.3];
        let inv = invert(&m).unwrap();
        for _ in 0..100 {
            let p = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let q = inv.apply(m.apply(p));
            assert!((q[0] - p[0]).abs() < 1e-9 && (q[1] - p[1]).abs() < 1e-9);
        }
        let id = matmul_affine(&inv, &m);
        assert!(id.max_abs_diff(&AffineMatrix::identity()) < 1e-12);
    }

    #[test]
    fn composition_acts_like_nested_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut a = compose_matrix(&random_components(&mut rng)).unwrap();
        let mut b = compose_matrix(&random_components(&mut rng)).unwrap();
        a.t = [0.2, 0.1];
        b.t = [-0.4, 0.3];
        let ab = matmul_affine(&a, &b);
        let p = [0.3, -0.6];
        let (x, y) = (ab.apply(p), a.apply(b.apply(p)));
        assert!((x[0] - y[0]).abs() < 1e-14 && (x[1] - y[1]).abs() < 1e-14);
        assert_eq!(matmul_affine(&a, &AffineMatrix::identity()), a);
    }

    #[test]
    fn display_is_two_rows_of_three() {
        let text = AffineMatrix::identity().to_string();
        let rows: Vec<&str> = text.lines().collect();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.split_whitespace().count() == 3));
    }

    #[test]
    fn var_compose_matches_plain_compose() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let c = random_components(&mut rng);
            let tape = Tape::new();
            let m = compose_matrix_var(tape.constant(Tensor::vector(c.to_array().to_vec()))).unwrap();
            let plain = compose_matrix(&c).unwrap();
            let got = AffineMatrix::from_rows(m.value().data()).unwrap();
            assert!(got.max_abs_diff(&plain) < 1e-15);
            let inv = invert_var(m).unwrap();
            let got_inv = AffineMatrix::from_rows(inv.value().data()).unwrap();
            assert!(got_inv.max_abs_diff(&invert(&plain).unwrap()) < 1e-13);
        }
    }

    #[test]
    fn compose_and_invert_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let c = Tensor::vector(random_components(&mut rng).to_array().to_vec());
            let w = Tensor::vector((0..6).map(|_| rng.random_range(-1.0..1.0)).collect());
            for entry in 0..6 {
                let err = grad_check(|v| compose_matrix_var(v)?.reshape(&[6])?.at(entry), &c, 1e-6).unwrap();
                assert!(err < 1e-6, "entry {entry}: {err}");
            }
            let w2 = w.clone();
            let err = grad_check(
                move |v| {
                    let m = invert_var(compose_matrix_var(v)?)?.reshape(&[6])?;
                    let w = v.tape().constant(w2.clone());
                    Ok(m.mul(w)?.sum())
                },
                &c,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-6, "{err}");
        }
    }

    proptest::proptest! {
        #[test]
        fn determinant_is_product_of_scales(
            theta in -PI..PI, lx in -1.0f64..0.5, ly in -1.0f64..0.5,
            hx in -2.0f64..2.0, hy in -2.0f64..2.0,
        ) {
            let c = AffineComponents::new(theta, lx, ly, hx, hy);
            let m = compose_matrix(&c).unwrap();
            let want = (lx + ly).exp();
            proptest::prop_assert!((m.det() - want).abs() <= 1e-12 * want.max(1.0) * 16.0);
        }

        #[test]
        fn rotations_compose_additively(a in -PI..PI, b in -PI..PI) {
            let ab = matmul_affine(&AffineMatrix::rotation(a), &AffineMatrix::rotation(b));
            proptest::prop_assert!(ab.max_abs_diff(&AffineMatrix::rotation(a + b)) < 1e-12);
        }
    }
}
