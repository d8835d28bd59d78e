//! The canonicalizer: shared patch tokenizer, shallow token encoder with mean
//! pooling, and bounded Gaussian regression heads over the affine components.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::affine::{compose_matrix, compose_matrix_var, invert, invert_var, AffineComponents};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{self, encoder_block, init_block, init_linear, linear, BlockShape, Bound, ParamStore};
use crate::tensor::Tensor;
use crate::warp::{generate_grid_var, warp_image};

/// Domain constants of the regression heads.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadBounds {
    pub lambda_theta: f64,
    pub lambda_s: f64,
    pub lambda_h: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for HeadBounds {
    fn default() -> Self {
        Self {
            lambda_theta: 1.0,
            lambda_s: 0.25,
            lambda_h: 0.25,
            alpha: 4.0,
            beta: 6.0,
        }
    }
}

impl HeadBounds {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, range: &str, v: f64| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("bounds.{key} = {v} must be in {range}")))
            }
        };
        check(self.lambda_theta > 0.0 && self.lambda_theta <= 1.0, "lambda_theta", "(0, 1]", self.lambda_theta)?;
        check(self.lambda_s > 0.0 && self.lambda_s < 1.0, "lambda_s", "(0, 1)", self.lambda_s)?;
        check(self.lambda_h > 0.0 && self.lambda_h <= 1.0, "lambda_h", "(0, 1]", self.lambda_h)?;
        check(self.alpha > 0.0 && self.alpha.is_finite(), "alpha", "(0, inf)", self.alpha)?;
        check(self.beta > 0.0 && self.beta.is_finite(), "beta", "(0, inf)", self.beta)
    }

    pub fn theta(&self, u: f64) -> f64 {
        self.lambda_theta * PI * u.tanh()
    }

    pub fn log_scale(&self, u: f64) -> f64 {
        (1.0 - self.lambda_s * crate::autodiff::kernels::sigmoid(u)).ln()
    }

    pub fn shear(&self, u: f64) -> f64 {
        self.lambda_h * PI * u.tanh()
    }

    pub fn log_var(&self, u: f64) -> f64 {
        self.alpha * u.tanh() - self.beta
    }

    pub fn theta_range(&self) -> (f64, f64) {
        (-self.lambda_theta * PI, self.lambda_theta * PI)
    }

    pub fn scale_range(&self) -> (f64, f64) {
        (1.0 - self.lambda_s, 1.0)
    }

    pub fn shear_range(&self) -> (f64, f64) {
        (-self.lambda_h * PI, self.lambda_h * PI)
    }

    pub fn log_var_range(&self) -> (f64, f64) {
        (-self.alpha - self.beta, self.alpha - self.beta)
    }

    pub fn sigma_range(&self) -> (f64, f64) {
        let (lo, hi) = self.log_var_range();
        ((0.5 * lo).exp(), (0.5 * hi).exp())
    }

    /// Whether `c` lies in the closed domains the mean heads can reach.
    pub fn contains(&self, c: &AffineComponents) -> bool {
        let inside = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
        let (slo, shi) = self.scale_range();
        inside(c.theta, self.theta_range())
            && inside(c.log_sx, (slo.ln(), shi.ln()))
            && inside(c.log_sy, (slo.ln(), shi.ln()))
            && inside(c.hx, self.shear_range())
            && inside(c.hy, self.shear_range())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub channels: usize,
    pub image_size: usize,
    pub frozen: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            patch_size: 16,
            embed_dim: 32,
            channels: 1,
            image_size: 64,
            frozen: true,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "tokenizer.image_size {} is not divisible by tokenizer.patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.channels == 0 {
            return Err(Error::Config("tokenizer.embed_dim and tokenizer.channels must be positive".into()));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalizerKind {
    /// Transformer encoder over the shared tokens.
    Tokens,
    /// Two strided convolutions on raw pixels.
    Conv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Bounded per-component heads over `(θ, log sx, log sy, hx, hy)`.
    Decomposed,
    /// Unconstrained 2×3 sampling matrix, initialised at the identity.
    Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalizerConfig {
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub positional: bool,
    pub kind: LocalizerKind,
    pub heads: HeadKind,
    pub probabilistic: bool,
    pub bounds: HeadBounds,
    pub scale_bias_init: f64,
    pub conv_channels: usize,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            num_heads: 2,
            mlp_ratio: 2,
            positional: false,
            kind: LocalizerKind::Tokens,
            heads: HeadKind::Decomposed,
            probabilistic: true,
            bounds: HeadBounds::default(),
            scale_bias_init: -5.0,
            conv_channels: 16,
        }
    }
}

impl LocalizerConfig {
    pub fn validate(&self, tok: &TokenizerConfig) -> Result<()> {
        self.bounds.validate()?;
        if self.num_heads == 0 || tok.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "localizer.num_heads {} must divide tokenizer.embed_dim {}",
                self.num_heads, tok.embed_dim
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("localizer.mlp_ratio must be positive".into()));
        }
        if self.kind == LocalizerKind::Conv && (tok.image_size % 16 != 0 || self.conv_channels == 0) {
            return Err(Error::Config(
                "conv localizer needs tokenizer.image_size divisible by 16 and positive localizer.conv_channels".into(),
            ));
        }
        if !self.scale_bias_init.is_finite() {
            return Err(Error::Config("localizer.scale_bias_init must be finite".into()));
        }
        Ok(())
    }

    /// Length of the regressed parameter vector.
    pub fn param_len(&self) -> usize {
        match self.heads {
            HeadKind::Decomposed => AffineComponents::LEN,
            HeadKind::Matrix => 6,
        }
    }
}

pub fn init_tokenizer(store: &mut ParamStore, cfg: &TokenizerConfig, rng: &mut impl Rng) {
    init_linear(store, "tok.proj", cfg.patch_len(), cfg.embed_dim, rng);
    store.insert("tok.pos", nn::normal_tensor(rng, &[cfg.num_tokens(), cfg.embed_dim], 0.02));
}

pub fn init_localizer(store: &mut ParamStore, tok: &TokenizerConfig, cfg: &LocalizerConfig, rng: &mut impl Rng) {
    let c = tok.embed_dim;
    match cfg.kind {
        LocalizerKind::Tokens => {
            let shape = BlockShape {
                dim: c,
                heads: cfg.num_heads,
                mlp_hidden: c * cfg.mlp_ratio,
            };
            for i in 0..cfg.depth {
                init_block(store, &format!("loc.block{i}"), shape, rng);
            }
        }
        LocalizerKind::Conv => {
            let f = cfg.conv_channels;
            init_linear(store, "loc.conv1", tok.channels * 16, f, rng);
            init_linear(store, "loc.conv2", f * 16, c, rng);
        }
    }
    init_linear(store, "loc.mlp.fc1", c, c, rng);
    init_linear(store, "loc.mlp.fc2", c, c, rng);

    let n = cfg.param_len();
    store.insert("loc.mean.w", Tensor::zeros(&[c, n]));
    let bias = match cfg.heads {
        HeadKind::Decomposed => vec![0.0, cfg.scale_bias_init, cfg.scale_bias_init, 0.0, 0.0],
        HeadKind::Matrix => vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
    };
    store.insert("loc.mean.b", Tensor::vector(bias));
    if cfg.probabilistic {
        store.insert("loc.var.w", Tensor::zeros(&[c, n]));
        store.insert("loc.var.b", Tensor::zeros(&[n]));
    }
}

/// Patch projection of a `C×H×W` image into `[N, C]` tokens, optionally plus
/// the positional encodings.
pub fn tokenize<'t>(p: &Bound<'t>, cfg: &TokenizerConfig, image: Var<'t>, positional: bool) -> Result<Var<'t>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != cfg.channels || s[1] % cfg.patch_size != 0 || s[2] % cfg.patch_size != 0 {
        return Err(Error::invalid(format!(
            "image shape {s:?} does not tile into {}-pixel patches with {} channel(s)",
            cfg.patch_size, cfg.channels
        )));
    }
    let patches = image.patches(cfg.patch_size, cfg.patch_size)?;
    let tokens = linear(p, "tok.proj", patches)?;
    if positional {
        tokens.add(p.get("tok.pos")?)
    } else {
        Ok(tokens)
    }
}

fn head_mlp<'t>(p: &Bound<'t>, pooled: Var<'t>) -> Result<Var<'t>> {
    let h = linear(p, "loc.mlp.fc1", pooled)?.gelu();
    linear(p, "loc.mlp.fc2", h)
}

/// Encoder blocks, mean pooling over tokens, then the two-layer MLP.
pub fn encode<'t>(p: &Bound<'t>, cfg: &LocalizerConfig, tokens: Var<'t>) -> Result<Var<'t>> {
    let mut x = tokens;
    for i in 0..cfg.depth {
        x = encoder_block(p, &format!("loc.block{i}"), x, cfg.num_heads, None)?;
    }
    head_mlp(p, x.mean_rows()?)
}

/// Convolutional feature path on raw pixels: two 4×4 stride-4 convolutions,
/// mean pooling, then the same MLP as [`encode`].
pub fn encode_conv<'t>(p: &Bound<'t>, image: Var<'t>) -> Result<Var<'t>> {
    let s = image.shape();
    let (h, w) = (s[1] / 4, s[2] / 4);
    let a = linear(p, "loc.conv1", image.patches(4, 4)?)?.gelu();
    let f = a.shape()[1];
    let a = a.transpose()?.reshape(&[f, h, w])?;
    let b = linear(p, "loc.conv2", a.patches(4, 4)?)?.gelu();
    head_mlp(p, b.mean_rows()?)
}

/// Posterior over the regressed parameters, on a tape.
#[derive(Clone, Copy)]
pub struct Posterior<'t> {
    pub kind: HeadKind,
    pub mean: Var<'t>,
    /// `None` for deterministic localizers.
    pub sigma: Option<Var<'t>>,
}

/// Bounded means and standard deviations from pooled features `z`.
pub fn regress_posterior<'t>(p: &Bound<'t>, cfg: &LocalizerConfig, z: Var<'t>) -> Result<Posterior<'t>> {
    let b = cfg.bounds;
    let u = linear(p, "loc.mean", z)?;
    let mean = match cfg.heads {
        HeadKind::Decomposed => {
            let theta = u.narrow(0, 0, 1)?.tanh().scale(b.lambda_theta * PI);
            let log_s = u.narrow(0, 1, 2)?.sigmoid().scale(-b.lambda_s).offset(1.0).log()?;
            let shear = u.narrow(0, 3, 2)?.tanh().scale(b.lambda_h * PI);
            Var::concat(&[theta, log_s, shear], 0)?
        }
        HeadKind::Matrix => u,
    };
    let sigma = if cfg.probabilistic {
        let v = linear(p, "loc.var", z)?;
        Some(v.tanh().scale(0.5 * b.alpha).offset(-0.5 * b.beta).exp())
    } else {
        None
    };
    Ok(Posterior {
        kind: cfg.heads,
        mean,
        sigma,
    })
}

/// Full localizer forward on one image. When `detach_tokenizer` is set the
/// tokenizer weights are cut from this branch's gradient.
pub fn localize<'t>(
    p: &Bound<'t>,
    tok: &TokenizerConfig,
    cfg: &LocalizerConfig,
    image: Var<'t>,
    detach_tokenizer: bool,
) -> Result<Posterior<'t>> {
    let z = match cfg.kind {
        LocalizerKind::Tokens => {
            let mut tokens = tokenize(p, tok, image, cfg.positional)?;
            if detach_tokenizer {
                tokens = tokens.detach();
            }
            encode(p, cfg, tokens)?
        }
        LocalizerKind::Conv => encode_conv(p, image)?,
    };
    regress_posterior(p, cfg, z)
}

impl<'t> Posterior<'t> {
    /// `mean + sigma ⊙ eps`; the mean itself when deterministic or `eps` is
    /// `None`.
    pub fn sample(&self, eps: Option<&Tensor>) -> Result<Var<'t>> {
        match (self.sigma, eps) {
            (Some(sigma), Some(eps)) => {
                let e = self.mean.tape().constant(eps.clone());
                self.mean.add(sigma.mul(e)?)
            }
            _ => Ok(self.mean),
        }
    }

    /// The matrix that pulls the rectified image out of the input.
    pub fn sampling_matrix(&self, params: Var<'t>) -> Result<Var<'t>> {
        match self.kind {
            HeadKind::Decomposed => invert_var(compose_matrix_var(params)?),
            HeadKind::Matrix => params.reshape(&[2, 3]),
        }
    }

    pub fn to_params(&self) -> PosteriorParams {
        let mean = self.mean.to_tensor().into_data();
        let sigma = match self.sigma {
            Some(s) => s.to_tensor().into_data(),
            None => vec![0.0; mean.len()],
        };
        PosteriorParams {
            kind: self.kind,
            mean,
            sigma,
        }
    }
}

/// Plain-valued posterior: means and standard deviations per parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorParams {
    pub kind: HeadKind,
    pub mean: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl PosteriorParams {
    pub fn gaussian(mean: AffineComponents, sigma: [f64; 5]) -> Self {
        Self {
            kind: HeadKind::Decomposed,
            mean: mean.to_array().to_vec(),
            sigma: sigma.to_vec(),
        }
    }

    /// Mean as components; `None` for matrix posteriors.
    pub fn mean_components(&self) -> Option<AffineComponents> {
        match self.kind {
            HeadKind::Decomposed => AffineComponents::from_slice(&self.mean).ok(),
            HeadKind::Matrix => None,
        }
    }

    /// Draws `count` reparameterized samples `mean + sigma ⊙ eps`.
    pub fn sample(&self, rng: &mut impl Rng, count: usize) -> Result<Vec<Vec<f64>>> {
        if count == 0 {
            return Err(Error::invalid("sample count must be at least 1"));
        }
        Ok((0..count)
            .map(|_| {
                self.mean
                    .iter()
                    .zip(&self.sigma)
                    .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect())
    }
}

/// Component samples from a decomposed posterior.
pub fn sample_components(p: &PosteriorParams, rng: &mut impl Rng, count: usize) -> Result<Vec<AffineComponents>> {
    if p.kind != HeadKind::Decomposed {
        return Err(Error::invalid("component sampling needs a decomposed posterior"));
    }
    p.sample(rng, count)?
        .iter()
        .map(|v| AffineComponents::from_slice(v))
        .collect()
}

/// Standard-normal noise of length `n`.
pub fn standard_normal(rng: &mut impl Rng, n: usize) -> Tensor {
    Tensor::vector((0..n).map(|_| rng.sample(StandardNormal)).collect())
}

/// Undoes the transform described by `c`: pull-warps by its inverse.
pub fn rectify(image: &Tensor, c: &AffineComponents) -> Result<Tensor> {
    warp_image(image, &invert(&compose_matrix(c)?)?)
}

pub fn rectify_batch(images: &[Tensor], comps: &[AffineComponents]) -> Result<Vec<Tensor>> {
    if images.len() != comps.len() {
        return Err(Error::invalid(format!(
            "{} images but {} component sets",
            images.len(),
            comps.len()
        )));
    }
    images.iter().zip(comps).map(|(x, c)| rectify(x, c)).collect()
}

/// Differentiable warp of `image` by a `[2, 3]` sampling matrix.
pub fn warp_var<'t>(image: Var<'t>, matrix: Var<'t>) -> Result<Var<'t>> {
    let s = image.shape();
    let grid = generate_grid_var(matrix, s[1], s[2])?;
    image.grid_sample(grid)
}
