//! Release-gate property suites. Each suite returns a report with the number
//! of checks run, the worst error as a fraction of its tolerance, and the
//! failing cases.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::oracle::kl_by_quadrature;
use crate::affine::{
    compose_matrix, compose_matrix_var, invert, invert_var, matmul_affine, shear_matrix, AffineComponents,
    AffineMatrix,
};
use crate::autodiff::{fault, grad_check_many, Tape, Var};
use crate::error::Result;
use crate::localization::{
    regress_posterior, sample_components, warp_var, HeadBounds, HeadKind, LocalizerConfig,
    PosteriorParams, TokenizerConfig,
};
use crate::nn::{bind_vars, Bound, ParamStore};
use crate::objective::{
    alignment_loss, alignment_loss_var, kl_gaussian_unit, kl_gaussian_unit_var, nll_label_smoothed,
    nll_label_smoothed_var, total_loss, LossWeights,
};
use crate::pipeline::{AblationFlags, ClassifierConfig, Model, ModelConfig};
use crate::tensor::Tensor;
use crate::warp::{generate_grid, warp_image};

const PRIMITIVE_TOL: f64 = 1e-5;
const COMPOSITE_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub name: &'static str,
    pub checks: usize,
    /// Largest `error / tolerance` seen; below 1 on a passing suite.
    pub worst: f64,
    pub failures: Vec<String>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checks > 0
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SelfcheckOptions {
    pub seed: u64,
    /// Flip the sign of one backward rule while the gradient suite runs.
    pub inject_tanh_fault: bool,
}

struct Recorder {
    report: SuiteReport,
    start: Instant,
}

impl Recorder {
    fn new(name: &'static str) -> Self {
        Self {
            report: SuiteReport {
                name,
                checks: 0,
                worst: 0.0,
                failures: Vec::new(),
                seconds: 0.0,
            },
            start: Instant::now(),
        }
    }

    fn check(&mut self, label: impl FnOnce() -> String, err: f64, tol: f64) {
        self.report.checks += 1;
        let ratio = if err.is_nan() { f64::INFINITY } else { err / tol };
        self.report.worst = self.report.worst.max(ratio);
        if !(err <= tol) {
            self.fail(format!("{}: error {err:.3e} > {tol:.1e}", label()));
        }
    }

    fn holds(&mut self, label: impl FnOnce() -> String, ok: bool) {
        self.report.checks += 1;
        if !ok {
            self.fail(label());
        }
    }

    fn result<T>(&mut self, label: &str, r: Result<T>) -> Option<T> {
        match r {
            Ok(v) => Some(v),
            Err(e) => {
                self.report.checks += 1;
                self.fail(format!("{label}: {e}"));
                None
            }
        }
    }

    fn fail(&mut self, msg: String) {
        // keep reports readable when a whole family breaks
        if self.report.failures.len() < 20 {
            self.report.failures.push(msg);
        }
        if self.report.failures.len() == 20 {
            self.report.failures.push("further failures omitted".into());
        }
    }

    fn finish(mut self) -> SuiteReport {
        self.report.seconds = self.start.elapsed().as_secs_f64();
        self.report
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Magnitudes in `[lo, hi)` with random signs.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(lo..hi);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Contracts a tensor-valued result with fixed pseudo-random weights so every
/// output coordinate reaches the scalar.
fn contract<'t>(y: Var<'t>) -> Result<Var<'t>> {
    let shape = y.shape();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| (1.3 * i as f64 + 0.7).sin() + 0.25).collect())?;
    y.mul(y.tape().constant(w))?.sum().reshape(&[])
}

/// Pins a closure to the higher-ranked signature the checker expects.
fn scalar_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    f
}

type Scalar = for<'t> fn(&[Var<'t>]) -> Result<Var<'t>>;
type Maker = fn(&mut ChaCha8Rng) -> Vec<Tensor>;

fn primitives() -> Vec<(&'static str, Maker, Scalar)> {
    fn m34(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        vec![uniform(rng, &[3, 4], -2.0, 2.0), uniform(rng, &[3, 4], -2.0, 2.0)]
    }
    fn one(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        vec![uniform(rng, &[3, 4], -2.0, 2.0)]
    }
    vec![
        ("add", m34, |v| contract(v[0].add(v[1])?)),
        ("add_broadcast_row", |r| vec![uniform(r, &[3, 4], -2.0, 2.0), uniform(r, &[4], -2.0, 2.0)], |v| {
            contract(v[0].add(v[1])?)
        }),
        ("mul_broadcast_scalar", |r| vec![uniform(r, &[3, 4], -2.0, 2.0), uniform(r, &[1], -2.0, 2.0)], |v| {
            contract(v[0].mul(v[1])?)
        }),
        ("sub", m34, |v| contract(v[0].sub(v[1])?)),
        ("mul", m34, |v| contract(v[0].mul(v[1])?)),
        ("div", |r| vec![uniform(r, &[3, 4], -2.0, 2.0), away_from_zero(r, &[3, 4], 0.5, 2.0)], |v| {
            contract(v[0].div(v[1])?)
        }),
        ("neg_scale_offset", one, |v| contract(v[0].neg().scale(1.7).offset(0.3))),
        ("square", one, |v| contract(v[0].square())),
        ("tanh", one, |v| contract(v[0].tanh())),
        ("sigmoid", one, |v| contract(v[0].sigmoid())),
        ("exp", one, |v| contract(v[0].exp())),
        ("log", |r| vec![uniform(r, &[3, 4], 0.2, 3.0)], |v| contract(v[0].log()?)),
        ("sin", one, |v| contract(v[0].sin())),
        ("cos", one, |v| contract(v[0].cos())),
        ("gelu", one, |v| contract(v[0].gelu())),
        ("softmax", |r| vec![uniform(r, &[6], -2.0, 2.0)], |v| contract(v[0].softmax())),
        ("log_softmax", |r| vec![uniform(r, &[6], -2.0, 2.0)], |v| contract(v[0].log_softmax())),
        ("sum", one, |v| Ok(v[0].square().sum())),
        ("mean", one, |v| Ok(v[0].square().mean())),
        ("mean_rows", one, |v| contract(v[0].mean_rows()?)),
        ("norm", |r| vec![away_from_zero(r, &[5], 0.3, 2.0)], |v| contract(v[0].norm())),
        ("reshape", one, |v| contract(v[0].reshape(&[2, 6])?.square())),
        ("matmul", |r| vec![uniform(r, &[3, 4], -2.0, 2.0), uniform(r, &[4, 2], -2.0, 2.0)], |v| {
            contract(v[0].matmul(v[1])?)
        }),
        ("transpose", one, |v| contract(v[0].transpose()?.square())),
        ("narrow", one, |v| contract(v[0].narrow(1, 1, 2)?.square())),
        ("at", |r| vec![uniform(r, &[5], -2.0, 2.0)], |v| contract(v[0].at(3)?.square())),
        ("layer_norm", |r| vec![uniform(r, &[3, 5], -2.0, 2.0)], |v| contract(v[0].layer_norm(1e-5))),
        ("patches", |r| vec![uniform(r, &[2, 8, 8], -1.0, 1.0)], |v| contract(v[0].patches(4, 4)?.square())),
        ("patches_overlapping", |r| vec![uniform(r, &[1, 6, 6], -1.0, 1.0)], |v| {
            contract(v[0].patches(4, 2)?.square())
        }),
        ("concat", m34, |v| contract(Var::concat(&[v[0], v[1].square()], 1)?)),
        ("stack_scalars", |r| vec![uniform(r, &[3], -2.0, 2.0)], |v| {
            let parts = [v[0].at(0)?, v[0].at(2)?.square(), v[0].at(1)?.tanh()];
            contract(Var::stack_scalars(&parts)?)
        }),
        ("grid_sample", grid_instance, |v| contract(v[0].grid_sample(v[1])?)),
    ]
}

/// Distance from `u` to the nearest point where bilinear sampling is not
/// differentiable: pixel centres and the reflection edges.
fn kink_distance(u: f64, n: usize) -> f64 {
    let (f, _) = crate::warp::reflect_coord(u);
    let pos = (f + 1.0) / 2.0 * (n - 1) as f64;
    let to_lattice = (pos - pos.round()).abs() * 2.0 / (n - 1) as f64;
    let to_edge = ((u - 1.0).rem_euclid(2.0)).min(2.0 - (u - 1.0).rem_euclid(2.0));
    to_lattice.min(to_edge)
}

fn grid_instance(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let image = uniform(rng, &[2, 5, 5], 0.0, 1.0);
    loop {
        let grid = uniform(rng, &[3, 4, 2], -1.4, 1.4);
        if grid.data().iter().all(|&u| kink_distance(u, 5) > 1e-3) {
            return vec![image, grid];
        }
    }
}

fn random_components(rng: &mut ChaCha8Rng, b: &HeadBounds) -> AffineComponents {
    let (slo, shi) = b.scale_range();
    let (hlo, hhi) = b.shear_range();
    AffineComponents::new(
        rng.random_range(-PI..PI),
        rng.random_range(slo..=shi).ln(),
        rng.random_range(slo..=shi).ln(),
        rng.random_range(hlo..hhi),
        rng.random_range(hlo..hhi),
    )
}

fn components_tensor(c: &AffineComponents) -> Tensor {
    Tensor::vector(c.to_array().to_vec())
}

fn fd_check(rec: &mut Recorder, name: &str, i: usize, tol: f64, f: &dyn for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>, xs: &[Tensor]) {
    match grad_check_many(f, xs, FD_STEP) {
        Ok(err) => rec.check(|| format!("{name} #{i}"), err, tol),
        Err(e) => {
            rec.report.checks += 1;
            rec.fail(format!("{name} #{i}: {e}"));
        }
    }
}

fn tiny_model(seed: u64, flags: &AblationFlags) -> Result<Model> {
    let tok = TokenizerConfig {
        patch_size: 4,
        embed_dim: 4,
        channels: 1,
        image_size: 16,
        frozen: false,
    };
    let loc = LocalizerConfig {
        depth: 1,
        num_heads: 2,
        conv_channels: 3,
        ..LocalizerConfig::default()
    };
    let cfg = ModelConfig {
        num_classes: 3,
        tokenizer: tok,
        classifier: ClassifierConfig {
            depth: 1,
            num_heads: 2,
            mlp_ratio: 1,
            dropout: 0.25,
        },
        localizer: Some(loc),
    }
    .with_flags(flags);
    let mut m = Model::new(cfg, seed)?;
    // move the heads off their flat initialisation so every branch is generic
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (_, t) in m.params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    Ok(m)
}

fn end_to_end(rec: &mut Recorder, name: &str, i: usize, seed: u64, flags: AblationFlags) {
    let Some(model) = rec.result(name, tiny_model(seed, &flags)) else {
        return;
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = uniform(&mut rng, &[1, 16, 16], 0.0, 1.0);
    let truth = random_components(&mut rng, &HeadBounds::default());
    let Some(noise) = rec.result(name, model.draw_noise(2, true, &mut rng)) else {
        return;
    };
    let weights = LossWeights {
        lambda_kl: 0.3,
        ..LossWeights::default()
    };
    let flags = AblationFlags { use_kl: true, ..flags };
    let names: Vec<String> = model.params.names().cloned().collect();
    let xs: Vec<Tensor> = names.iter().map(|n| model.params.get(n).expect("listed").clone()).collect();
    let f = scalar_fn(|v| {
        let tape = v[0].tape();
        let p = bind_vars(&names, v);
        Ok(model.forward_train(tape, &p, &image, 1, &truth, &noise, &weights, &flags, false)?.total)
    });
    fd_check(rec, name, i, COMPOSITE_TOL, &f, &xs);
}

/// Random instances per primitive and per composite family.
const INSTANCES: usize = 100;

pub fn gradients(opts: &SelfcheckOptions) -> SuiteReport {
    let mut rec = Recorder::new("gradients");
    fault::set_tanh_backward_sign_flip(opts.inject_tanh_fault);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    for (name, make, f) in primitives() {
        for i in 0..INSTANCES {
            let xs = make(&mut rng);
            fd_check(&mut rec, name, i, PRIMITIVE_TOL, &f, &xs);
        }
    }

    let bounds = HeadBounds::default();
    for i in 0..INSTANCES {
        let c = components_tensor(&random_components(&mut rng, &bounds));
        fd_check(&mut rec, "compose_matrix", i, COMPOSITE_TOL, &|v| contract(compose_matrix_var(v[0])?), &[c]);

        let m = compose_matrix(&random_components(&mut rng, &bounds)).expect("finite");
        let mut rows = m.to_rows();
        rows[2] = rng.random_range(-0.3..0.3);
        rows[5] = rng.random_range(-0.3..0.3);
        let t = Tensor::new(vec![2, 3], rows.to_vec()).expect("2x3");
        fd_check(&mut rec, "invert", i, COMPOSITE_TOL, &|v| contract(invert_var(v[0])?), &[t]);

        let image = uniform(&mut rng, &[1, 6, 6], 0.0, 1.0);
        let matrix = loop {
            let c = AffineComponents::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.2..0.0),
                rng.random_range(-0.2..0.0),
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
            );
            let m = compose_matrix(&c).expect("finite");
            let grid = generate_grid(&m, 6, 6).expect("grid");
            if grid.coords().data().iter().all(|&u| kink_distance(u, 6) > 1e-3) {
                break Tensor::new(vec![2, 3], m.to_rows().to_vec()).expect("2x3");
            }
        };
        fd_check(&mut rec, "warp", i, COMPOSITE_TOL, &|v| contract(warp_var(v[0], v[1])?), &[image, matrix]);

        heads_instance(&mut rec, &mut rng, i);

        let truth = random_components(&mut rng, &bounds);
        let pred = components_tensor(&random_components(&mut rng, &bounds));
        let w = LossWeights::default();
        fd_check(
            &mut rec,
            "alignment_loss",
            i,
            COMPOSITE_TOL,
            &|v| Ok(alignment_loss_var(&truth, v[0], &w)?.0),
            &[pred],
        );

        let mu = uniform(&mut rng, &[5], -2.0, 2.0);
        let sigma = uniform(&mut rng, &[5], 0.05, 2.0);
        fd_check(&mut rec, "kl", i, COMPOSITE_TOL, &|v| kl_gaussian_unit_var(v[0], v[1]), &[mu, sigma]);

        let logits = uniform(&mut rng, &[7], -3.0, 3.0);
        let y = rng.random_range(0..7);
        fd_check(&mut rec, "nll", i, COMPOSITE_TOL, &|v| nll_label_smoothed_var(v[0], y, 0.1), &[logits]);
    }

    let base = AblationFlags::default();
    let variants = [
        ("end_to_end", base),
        ("end_to_end_matrix", AblationFlags { decomposed_heads: false, ..base }),
        ("end_to_end_conv", AblationFlags { conv_localizer: true, ..base }),
    ];
    for (name, flags) in variants {
        end_to_end(&mut rec, name, 0, opts.seed.wrapping_add(17), flags);
    }
    end_to_end(&mut rec, "end_to_end", 1, opts.seed.wrapping_add(18), base);

    fault::set_tanh_backward_sign_flip(false);
    rec.finish()
}

fn heads_instance(rec: &mut Recorder, rng: &mut ChaCha8Rng, i: usize) {
    let c = 6;
    let cfg = LocalizerConfig {
        heads: if i % 4 == 3 { HeadKind::Matrix } else { HeadKind::Decomposed },
        ..LocalizerConfig::default()
    };
    let n = cfg.param_len();
    let names: Vec<String> = ["loc.mean.w", "loc.mean.b", "loc.var.w", "loc.var.b"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let xs = vec![
        uniform(rng, &[c], -2.0, 2.0),
        uniform(rng, &[c, n], -0.5, 0.5),
        uniform(rng, &[n], -1.0, 1.0),
        uniform(rng, &[c, n], -0.5, 0.5),
        uniform(rng, &[n], -1.0, 1.0),
    ];
    let f = scalar_fn(|v| {
        let p = bind_vars(&names, &v[1..]);
        let post = regress_posterior(&p, &cfg, v[0])?;
        let sigma = post.sigma.expect("probabilistic");
        contract(post.mean)?.add(contract(sigma)?)
    });
    fd_check(rec, "heads", i, COMPOSITE_TOL, &f, &xs);
}

pub fn group_laws(opts: &SelfcheckOptions) -> SuiteReport {
    let mut rec = Recorder::new("group_laws");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let bounds = HeadBounds::default();
    let random_matrix = |rng: &mut ChaCha8Rng| {
        let mut r = compose_matrix(&random_components(rng, &bounds)).expect("finite").to_rows();
        r[2] = rng.random_range(-0.5..0.5);
        r[5] = rng.random_range(-0.5..0.5);
        AffineMatrix::from_rows(&r).expect("2x3")
    };
    let draws = 1000;
    let ident = compose_matrix(&AffineComponents::identity()).expect("finite");
    rec.holds(|| "identity components compose to the identity".into(), ident == AffineMatrix::identity());
    for i in 0..draws {
        let p = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        rec.holds(|| format!("identity application #{i}"), ident.apply(p) == p);

        let t = random_matrix(&mut rng);
        let back = invert(&t).expect("invertible").apply(t.apply(p));
        rec.check(|| format!("inverse round trip #{i}"), (back[0] - p[0]).abs().max((back[1] - p[1]).abs()), 1e-9);

        let (a, b, c) = (random_matrix(&mut rng), random_matrix(&mut rng), random_matrix(&mut rng));
        let left = matmul_affine(&matmul_affine(&a, &b), &c);
        let right = matmul_affine(&a, &matmul_affine(&b, &c));
        rec.check(|| format!("associativity #{i}"), left.max_abs_diff(&right), 1e-12);

        let (x, y) = (rng.random_range(-PI..PI), rng.random_range(-PI..PI));
        let rr = matmul_affine(&AffineMatrix::rotation(x), &AffineMatrix::rotation(y));
        rec.check(|| format!("rotation addition #{i}"), rr.max_abs_diff(&AffineMatrix::rotation(x + y)), 1e-12);

        let (hx, hy) = (rng.random_range(-PI / 4.0..PI / 4.0), rng.random_range(-PI / 4.0..PI / 4.0));
        let h = shear_matrix(hx, hy).expect("finite");
        let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
        rec.check(|| format!("det(shear) #{i}"), (det - 1.0).abs(), 2.0 * f64::EPSILON);

        let comp = random_components(&mut rng, &bounds);
        let (sx, sy) = comp.scales();
        let m = compose_matrix(&comp).expect("finite");
        rec.check(|| format!("det(M) #{i}"), (m.det() - sx * sy).abs(), 1e-12);
    }
    rec.finish()
}

fn smooth_image(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let (a, b, c, d) = (
        rng.random_range(0.5..2.0),
        rng.random_range(0.5..2.0),
        rng.random_range(0.0..PI),
        rng.random_range(0.0..PI),
    );
    let data = (0..n * n)
        .map(|k| {
            let (y, x) = ((k / n) as f64 / (n - 1) as f64 * 2.0 - 1.0, (k % n) as f64 / (n - 1) as f64 * 2.0 - 1.0);
            0.5 + 0.25 * (a * x + c).sin() * (b * y + d).cos()
        })
        .collect();
    Tensor::new(vec![1, n, n], data).expect("n×n")
}

pub fn sampler(opts: &SelfcheckOptions) -> SuiteReport {
    let mut rec = Recorder::new("sampler");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(2));
    let bounds = HeadBounds::default();
    for i in 0..100 {
        let n = rng.random_range(2..24);
        let c = rng.random_range(1..4);
        let img = uniform(&mut rng, &[c, n, n + 3], -1.0, 1.0);
        let out = warp_image(&img, &AffineMatrix::identity());
        rec.holds(|| format!("identity warp is lossless #{i}"), out.as_ref().ok() == Some(&img));

        let smooth = smooth_image(&mut rng, 32);
        let t = compose_matrix(&random_components(&mut rng, &bounds)).expect("finite");
        let inv = invert(&t).expect("invertible");
        let round = warp_image(&warp_image(&smooth, &t).expect("warp"), &inv).expect("warp");
        let grid = generate_grid(&inv, 32, 32).expect("grid");
        let mut worst: f64 = 0.0;
        for r in 0..32 {
            for col in 0..32 {
                let [u, v] = grid.at(r, col);
                if u.abs() <= 0.98 && v.abs() <= 0.98 {
                    let k = r * 32 + col;
                    worst = worst.max((round.data()[k] - smooth.data()[k]).abs());
                }
            }
        }
        rec.check(|| format!("warp then inverse warp #{i}"), worst, 0.02);

        let any = random_components(&mut rng, &bounds);
        let mut rows = compose_matrix(&any).expect("finite").to_rows();
        rows[2] = rng.random_range(-1.0..1.0);
        let warped = warp_image(&img, &AffineMatrix::from_rows(&rows).expect("2x3")).expect("warp");
        rec.holds(
            || format!("output range within input range #{i}"),
            warped.min() >= img.min() - 1e-12 && warped.max() <= img.max() + 1e-12,
        );
    }
    rec.finish()
}

pub fn posterior(opts: &SelfcheckOptions) -> SuiteReport {
    let mut rec = Recorder::new("posterior");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(3));
    let n = 100_000;
    for trial in 0..3 {
        let mean = random_components(&mut rng, &HeadBounds::default());
        let sigma: [f64; 5] = std::array::from_fn(|_| rng.random_range(0.01..1.0));
        let p = PosteriorParams::gaussian(mean, sigma);
        let Some(draws) = rec.result("sample_components", sample_components(&p, &mut rng, n)) else {
            continue;
        };
        let mu = mean.to_array();
        for k in 0..5 {
            let xs: Vec<f64> = draws.iter().map(|c| c.to_array()[k]).collect();
            let m = xs.iter().sum::<f64>() / n as f64;
            let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
            rec.check(
                || format!("sample mean, posterior {trial} component {k}"),
                (m - mu[k]).abs(),
                4.0 * sigma[k] / (n as f64).sqrt(),
            );
            rec.check(|| format!("sample std, posterior {trial} component {k}"), (sd / sigma[k] - 1.0).abs(), 0.02);
        }
    }

    for i in 0..50 {
        let mu = rng.random_range(-3.0..3.0);
        let s = rng.random_range(0.05..3.0);
        let closed = kl_gaussian_unit(&[mu], &[s]).unwrap_or(f64::NAN);
        rec.check(|| format!("KL vs quadrature #{i} (mu {mu:.3}, sigma {s:.3})"), (closed - kl_by_quadrature(mu, s)).abs(), 1e-6);
    }

    let cfg = LocalizerConfig::default();
    let b = cfg.bounds;
    let c = 8;
    let mut store = ParamStore::default();
    store.insert("loc.mean.w", uniform(&mut rng, &[c, 5], -1.0, 1.0));
    store.insert("loc.mean.b", uniform(&mut rng, &[5], -1.0, 1.0));
    store.insert("loc.var.w", uniform(&mut rng, &[c, 5], -1.0, 1.0));
    store.insert("loc.var.b", uniform(&mut rng, &[5], -1.0, 1.0));
    let (vlo, vhi) = b.sigma_range();
    let mut inside = 0;
    let total = 10_000;
    for _ in 0..total {
        let z = crate::localization::standard_normal(&mut rng, c).map(|v| 5.0 * v);
        let tape = Tape::new();
        let p = Bound::bind(&tape, &store, |_| false);
        let Some(post) = rec.result("regress_posterior", regress_posterior(&p, &cfg, tape.constant(z))) else {
            break;
        };
        let params = post.to_params();
        let comp = params.mean_components().expect("decomposed");
        if b.contains(&comp) && params.sigma.iter().all(|s| *s >= vlo && *s <= vhi) {
            inside += 1;
        }
    }
    rec.holds(|| format!("{} of {total} regressed posteriors left their domains", total - inside), inside == total);

    for (u, want) in [(1e6, [PI, (1.0 - b.lambda_s).ln(), b.lambda_h * PI]), (-1e6, [-PI, 0.0, -b.lambda_h * PI])] {
        let got = [b.theta(u), b.log_scale(u), b.shear(u)];
        for (k, (g, w)) in got.iter().zip(want).enumerate() {
            rec.check(|| format!("saturation at u = {u:e}, component {k}"), (g - w).abs(), 1e-12);
        }
        let lv = b.log_var(u);
        let lw = if u > 0.0 { b.alpha - b.beta } else { -b.alpha - b.beta };
        rec.check(|| format!("log-variance saturation at u = {u:e}"), (lv - lw).abs(), 1e-12);
    }
    rec.finish()
}

pub fn loss_anchors(_: &SelfcheckOptions) -> SuiteReport {
    let mut rec = Recorder::new("loss_anchors");
    let w = LossWeights::default();
    let c = AffineComponents::new(0.4, -0.1, -0.2, 0.05, -0.3);
    rec.check(|| "alignment at equality".into(), alignment_loss(&c, &c, &w).0.abs(), 0.0);
    let flipped = AffineComponents { theta: c.theta - PI, ..c };
    rec.check(|| "alignment at theta error pi".into(), (alignment_loss(&c, &flipped, &w).0 - 4.0).abs(), 1e-12);
    rec.check(
        || "KL of the unit Gaussian".into(),
        kl_gaussian_unit(&[0.0; 5], &[1.0; 5]).map(f64::abs).unwrap_or(f64::NAN),
        0.0,
    );
    for k in [2usize, 10, 37] {
        let nll = nll_label_smoothed(&vec![0.3; k], 0, w.label_smoothing).unwrap_or(f64::NAN);
        rec.check(|| format!("NLL of uniform logits, K = {k}"), (nll - (k as f64).ln()).abs(), 1e-12);
    }
    let weights = LossWeights {
        lambda_align: 0.7,
        lambda_kl: 0.2,
        ..w
    };
    let b = total_loss(1.25, 0.5, 3.0, [0.1, 0.2, 0.2], &weights);
    rec.check(|| "total composition".into(), (b.total - (1.25 + 0.7 * 0.5 + 0.2 * 3.0)).abs(), 1e-12);
    rec.finish()
}

pub const SUITES: [&str; 5] = ["gradients", "group_laws", "sampler", "posterior", "loss_anchors"];

pub fn run_suite(name: &str, opts: &SelfcheckOptions) -> Option<SuiteReport> {
    Some(match name {
        "gradients" => gradients(opts),
        "group_laws" => group_laws(opts),
        "sampler" => sampler(opts),
        "posterior" => posterior(opts),
        "loss_anchors" => loss_anchors(opts),
        _ => return None,
    })
}

pub fn run_all(opts: &SelfcheckOptions) -> Vec<SuiteReport> {
    SUITES.iter().filter_map(|s| run_suite(s, opts)).collect()
}

pub fn format_table(reports: &[SuiteReport]) -> String {
    let mut out = format!("{:<14} {:>6} {:>8} {:>10} {:>8}\n", "suite", "result", "checks", "worst/tol", "seconds");
    for r in reports {
        let _ = writeln!(
            out,
            "{:<14} {:>6} {:>8} {:>10.3} {:>8.2}",
            r.name,
            if r.passed() { "pass" } else { "FAIL" },
            r.checks,
            r.worst,
            r.seconds
        );
        for f in &r.failures {
            let _ = writeln!(out, "  {f}");
        }
    }
    out
}
