//! Canonicalizer plus tied-tokenizer classifier, the training forward pass
//! and Monte-Carlo prediction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::affine::{AffineComponents, AffineMatrix};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::localization::{
    self, init_localizer, init_tokenizer, standard_normal, HeadKind, LocalizerConfig, LocalizerKind, Posterior,
    PosteriorParams, TokenizerConfig,
};
use crate::nn::{
    dropout_mask, encoder_block, init_block, init_layer_norm, init_linear, layer_norm, linear, BlockShape, Bound,
    ParamStore,
};
use crate::objective::{
    alignment_loss_var, kl_gaussian_unit_var, nll_label_smoothed_var, total_loss, LossBreakdown, LossWeights,
};
use crate::tensor::Tensor;
use crate::warp::warp_image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            num_heads: 2,
            mlp_ratio: 2,
            dropout: 0.2,
        }
    }
}

/// Toggles of the method's parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub decomposed_heads: bool,
    pub probabilistic: bool,
    pub use_align: bool,
    pub use_kl: bool,
    pub conv_localizer: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            decomposed_heads: true,
            probabilistic: true,
            use_align: true,
            use_kl: false,
            conv_localizer: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub tokenizer: TokenizerConfig,
    pub classifier: ClassifierConfig,
    /// `None` builds a plain classifier.
    pub localizer: Option<LocalizerConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            tokenizer: TokenizerConfig::default(),
            classifier: ClassifierConfig::default(),
            localizer: Some(LocalizerConfig::default()),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("model.num_classes = {} must be >= 2", self.num_classes)));
        }
        self.tokenizer.validate()?;
        let c = &self.classifier;
        if c.num_heads == 0 || self.tokenizer.embed_dim % c.num_heads != 0 {
            return Err(Error::Config(format!(
                "classifier.num_heads {} must divide tokenizer.embed_dim {}",
                c.num_heads, self.tokenizer.embed_dim
            )));
        }
        if c.depth == 0 || c.mlp_ratio == 0 {
            return Err(Error::Config("classifier.depth and classifier.mlp_ratio must be positive".into()));
        }
        if !(0.0..1.0).contains(&c.dropout) {
            return Err(Error::Config(format!("classifier.dropout = {} must be in [0, 1)", c.dropout)));
        }
        if let Some(l) = &self.localizer {
            l.validate(&self.tokenizer)?;
        }
        Ok(())
    }

    /// Applies the architectural toggles to the localizer.
    pub fn with_flags(mut self, flags: &AblationFlags) -> Self {
        if let Some(l) = self.localizer.as_mut() {
            l.heads = if flags.decomposed_heads {
                HeadKind::Decomposed
            } else {
                HeadKind::Matrix
            };
            l.probabilistic = flags.probabilistic;
            l.kind = if flags.conv_localizer {
                LocalizerKind::Conv
            } else {
                LocalizerKind::Tokens
            };
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Random draws consumed by one forward pass: per-sample posterior noise and
/// classifier dropout masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    pub eps: Vec<Option<Tensor>>,
    pub dropout: Vec<Option<Tensor>>,
}

impl Noise {
    pub fn samples(&self) -> usize {
        self.eps.len()
    }
}

/// Rectified image and the transform behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct Canonical {
    pub image: Tensor,
    pub matrix: AffineMatrix,
    /// Mean components; `None` for matrix-regression localizers.
    pub components: Option<AffineComponents>,
    pub posterior: PosteriorParams,
}

/// Rectified images with the transforms that produced them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WarpedBatch {
    pub images: Vec<Tensor>,
    pub matrices: Vec<AffineMatrix>,
    pub components: Vec<Option<AffineComponents>>,
}

pub struct TrainForward<'t> {
    pub total: Var<'t>,
    pub breakdown: LossBreakdown,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let tok = &config.tokenizer;
        init_tokenizer(&mut params, tok, &mut rng);
        let c = tok.embed_dim;
        let shape = BlockShape {
            dim: c,
            heads: config.classifier.num_heads,
            mlp_hidden: c * config.classifier.mlp_ratio,
        };
        for i in 0..config.classifier.depth {
            init_block(&mut params, &format!("cls.block{i}"), shape, &mut rng);
        }
        init_layer_norm(&mut params, "cls.norm", c);
        init_linear(&mut params, "cls.head", c, config.num_classes, &mut rng);
        if let Some(loc) = &config.localizer {
            init_localizer(&mut params, tok, loc, &mut rng);
        }
        Ok(Self { config, params })
    }

    pub fn localizer(&self) -> Option<&LocalizerConfig> {
        self.config.localizer.as_ref()
    }

    /// Whether posterior noise is drawn at all.
    pub fn is_stochastic(&self) -> bool {
        self.localizer().is_some_and(|l| l.probabilistic)
    }

    /// Number of forward samples actually evaluated for a requested count:
    /// deterministic models need only one.
    pub fn effective_samples(&self, requested: usize) -> usize {
        if self.is_stochastic() {
            requested
        } else {
            1
        }
    }

    pub fn validate_image(&self, image: &Tensor) -> Result<()> {
        let t = &self.config.tokenizer;
        let want = [t.channels, t.image_size, t.image_size];
        if image.shape() != want {
            return Err(Error::Shape {
                op: "model input",
                lhs: image.shape().to_vec(),
                rhs: want.to_vec(),
            });
        }
        Ok(())
    }

    pub fn draw_noise(&self, samples: usize, train: bool, rng: &mut impl Rng) -> Result<Noise> {
        if samples == 0 {
            return Err(Error::invalid("sample count must be at least 1"));
        }
        let s = self.effective_samples(samples);
        let n = self.localizer().map_or(0, |l| l.param_len());
        let tok = &self.config.tokenizer;
        let rate = self.config.classifier.dropout;
        let mut noise = Noise {
            eps: Vec::with_capacity(s),
            dropout: Vec::with_capacity(s),
        };
        for _ in 0..s {
            noise.eps.push(self.is_stochastic().then(|| standard_normal(rng, n)));
            noise.dropout.push(
                (train && rate > 0.0).then(|| dropout_mask(rng, &[tok.num_tokens(), tok.embed_dim], rate)),
            );
        }
        Ok(noise)
    }

    /// Logits of the classifier on one (already rectified) image.
    pub fn classify<'t>(&self, p: &Bound<'t>, image: Var<'t>, dropout: Option<&Tensor>) -> Result<Var<'t>> {
        let cfg = &self.config.classifier;
        let mut x = localization::tokenize(p, &self.config.tokenizer, image, true)?;
        for i in 0..cfg.depth {
            let mask = if i + 1 == cfg.depth {
                dropout.map(|m| image.tape().constant(m.clone()))
            } else {
                None
            };
            x = encoder_block(p, &format!("cls.block{i}"), x, cfg.num_heads, mask)?;
        }
        let pooled = layer_norm(p, "cls.norm", x.mean_rows()?)?;
        linear(p, "cls.head", pooled)
    }

    pub fn localize<'t>(&self, p: &Bound<'t>, image: Var<'t>, detach_tokenizer: bool) -> Result<Posterior<'t>> {
        let loc = self
            .localizer()
            .ok_or_else(|| Error::invalid("model has no localizer"))?;
        localization::localize(p, &self.config.tokenizer, loc, image, detach_tokenizer)
    }

    /// The image the classifier sees for one posterior draw.
    pub fn rectified<'t>(&self, post: &Posterior<'t>, image: Var<'t>, eps: Option<&Tensor>) -> Result<Var<'t>> {
        let sample = post.sample(eps)?;
        localization::warp_var(image, post.sampling_matrix(sample)?)
    }

    /// Sample-averaged loss terms for one example. `truth` is the recorded
    /// augmentation; the alignment term only reaches the localizer.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_train<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        image: &Tensor,
        label: usize,
        truth: &AffineComponents,
        noise: &Noise,
        weights: &LossWeights,
        flags: &AblationFlags,
        detach_tokenizer: bool,
    ) -> Result<TrainForward<'t>> {
        self.validate_image(image)?;
        let eps = weights.label_smoothing;
        let x = tape.constant(image.clone());
        let s = noise.samples();
        if s == 0 {
            return Err(Error::invalid("sample count must be at least 1"));
        }
        if self.localizer().is_none() {
            let mut nll = tape.scalar(0.0);
            for d in &noise.dropout {
                let logits = self.classify(p, x, d.as_ref())?;
                nll = nll.add(nll_label_smoothed_var(logits, label, eps)?)?;
            }
            let nll = nll.scale(1.0 / s as f64);
            let breakdown = total_loss(nll.item(), 0.0, 0.0, [0.0; 3], weights);
            return Ok(TrainForward { total: nll, breakdown });
        }

        let post = self.localize(p, x, detach_tokenizer)?;
        let decomposed = post.kind == HeadKind::Decomposed;
        let mut nll = tape.scalar(0.0);
        let mut align = tape.scalar(0.0);
        let mut parts = [tape.scalar(0.0); 3];
        for k in 0..s {
            let sample = post.sample(noise.eps[k].as_ref())?;
            let rect = localization::warp_var(x, post.sampling_matrix(sample)?)?;
            let logits = self.classify(p, rect, noise.dropout[k].as_ref())?;
            nll = nll.add(nll_label_smoothed_var(logits, label, eps)?)?;
            if decomposed {
                let (a, per) = alignment_loss_var(truth, sample, weights)?;
                align = align.add(a)?;
                for (acc, v) in parts.iter_mut().zip(per) {
                    *acc = acc.add(v)?;
                }
            }
        }
        let inv = 1.0 / s as f64;
        let nll = nll.scale(inv);
        let align = align.scale(inv);
        let kl = match post.sigma {
            Some(sigma) => kl_gaussian_unit_var(post.mean, sigma)?,
            None => tape.scalar(0.0),
        };

        let effective = LossWeights {
            lambda_align: if flags.use_align && decomposed { weights.lambda_align } else { 0.0 },
            lambda_kl: if flags.use_kl && post.sigma.is_some() { weights.lambda_kl } else { 0.0 },
            ..*weights
        };
        let mut total = nll;
        if effective.lambda_align > 0.0 {
            total = total.add(align.scale(effective.lambda_align))?;
        }
        if effective.lambda_kl > 0.0 {
            total = total.add(kl.scale(effective.lambda_kl))?;
        }
        let per = [parts[0].item() * inv, parts[1].item() * inv, parts[2].item() * inv];
        let breakdown = total_loss(nll.item(), align.item(), kl.item(), per, &effective);
        Ok(TrainForward { total, breakdown })
    }

    /// Posterior for one image, or `None` for a plain classifier.
    pub fn posterior(&self, image: &Tensor) -> Result<Option<PosteriorParams>> {
        if self.localizer().is_none() {
            return Ok(None);
        }
        self.validate_image(image)?;
        let tape = Tape::new();
        let p = Bound::bind(&tape, &self.params, |_| false);
        Ok(Some(self.localize(&p, tape.constant(image.clone()), false)?.to_params()))
    }

    /// Averaged class probabilities after each prefix length in `sizes` of a
    /// single sequence of posterior draws. Prefixes share their draws, so a
    /// sweep over sample counts evaluates one chain.
    pub fn predict_mc_prefixes(&self, image: &Tensor, sizes: &[usize], rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
        self.validate_image(image)?;
        let max = sizes.iter().copied().max().unwrap_or(0);
        if max == 0 || sizes.contains(&0) {
            return Err(Error::invalid("sample count must be at least 1"));
        }
        let draws = self.effective_samples(max);
        let noise = self.draw_noise(max, false, rng)?;
        let tape = Tape::new();
        let p = Bound::bind(&tape, &self.params, |_| false);
        let x = tape.constant(image.clone());
        let post = match self.localizer() {
            Some(_) => Some(self.localize(&p, x, false)?),
            None => None,
        };
        let k = self.config.num_classes;
        let mut acc = vec![0.0; k];
        let mut prefix = Vec::with_capacity(draws);
        for eps in noise.eps.iter().take(draws) {
            let input = match &post {
                Some(post) => self.rectified(post, x, eps.as_ref())?,
                None => x,
            };
            let probs = self.classify(&p, input, None)?.softmax().to_tensor();
            for (a, v) in acc.iter_mut().zip(probs.data()) {
                *a += v;
            }
            prefix.push(acc.clone());
        }
        Ok(sizes
            .iter()
            .map(|&s| {
                let used = s.min(draws);
                prefix[used - 1].iter().map(|v| v / used as f64).collect()
            })
            .collect())
    }

    /// `(1/S) Σ softmax(c(rectified_s))`.
    pub fn predict_mc(&self, image: &Tensor, samples: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
        Ok(self.predict_mc_prefixes(image, &[samples], rng)?.remove(0))
    }

    /// Rectification at the posterior mean, without sampling.
    pub fn canonicalize(&self, image: &Tensor) -> Result<Canonical> {
        let post = self
            .posterior(image)?
            .ok_or_else(|| Error::invalid("model has no localizer"))?;
        let (matrix, components) = match post.kind {
            HeadKind::Decomposed => {
                let c = AffineComponents::from_slice(&post.mean)?;
                (crate::affine::invert(&crate::affine::compose_matrix(&c)?)?, Some(c))
            }
            HeadKind::Matrix => (AffineMatrix::from_rows(&post.mean)?, None),
        };
        let rectified = if post.kind == HeadKind::Decomposed {
            localization::rectify(image, components.as_ref().expect("decomposed"))?
        } else {
            warp_image(image, &matrix)?
        };
        Ok(Canonical {
            image: rectified,
            matrix,
            components,
            posterior: post,
        })
    }

    pub fn canonicalize_batch(&self, images: &[Tensor]) -> Result<WarpedBatch> {
        let mut out = WarpedBatch::default();
        for img in images {
            let c = self.canonicalize(img)?;
            out.images.push(c.image);
            out.matrices.push(c.matrix);
            out.components.push(c.components);
        }
        Ok(out)
    }
}
