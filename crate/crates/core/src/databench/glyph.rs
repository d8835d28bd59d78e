//! Procedural glyph classes: filled closed curves whose radius is a
//! class-specific harmonic series, rendered centred and upright. All classes
//! share the upright body plan, so pose is readable without knowing the class.


use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::affine::AffineComponents;
use crate::error::{Error, Result};
use crate::pipeline::{derive_seed, Example};
use crate::tensor::Tensor;

pub const HARMONICS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlyphDatasetSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    /// Strength of background blobs and pixel noise, in `[0, 1]`.
    pub clutter: f64,
    /// Fraction of the training images held out for validation.
    pub val_fraction: f64,
    /// Seed of the class prototypes, kept apart from the sampling seed so
    /// differently seeded datasets share their classes.
    pub prototype_seed: u64,
}

impl Default for GlyphDatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            train_per_class: 200,
            test_per_class: 50,
            image_size: 64,
            clutter: 0.05,
            val_fraction: 0.1,
            prototype_seed: 0,
        }
    }
}

impl GlyphDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("data.num_classes = {} must be >= 2", self.num_classes)));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config("data.train_per_class and data.test_per_class must be >= 1".into()));
        }
        if self.image_size < 8 {
            return Err(Error::Config(format!("data.image_size = {} must be >= 8", self.image_size)));
        }
        if !(0.0..=1.0).contains(&self.clutter) {
            return Err(Error::Config(format!("data.clutter = {} must be in [0, 1]", self.clutter)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("data.val_fraction = {} must be in [0, 1)", self.val_fraction)));
        }
        Ok(())
    }
}

/// Shape parameters of one class. Every class shares one body plan: an
/// outline mirror-symmetric about the vertical axis, a head disk on top and a
/// mirrored pair of dark spots. Classes differ in harmonics and spots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub radius: f64,
    /// Cosine amplitude of harmonic `h + 1`, angle measured from "up".
    pub amplitudes: [f64; HARMONICS],
    /// Spot centre as (distance, angle from up); mirrored across the axis.
    pub spot: (f64, f64),
    pub spot_radius: f64,
}

const BODY_TAPER: f64 = 0.1;
const HEAD_RADIUS: f64 = 0.07;
const HEAD_GAP: f64 = 0.08;

fn signature_distance(a: &Prototype, b: &Prototype) -> f64 {
    let amp: f64 = a.amplitudes.iter().zip(&b.amplitudes).map(|(x, y)| (x - y).powi(2)).sum();
    let spot = (a.spot.0 - b.spot.0).powi(2) + (a.spot.1 - b.spot.1).powi(2) * 0.01 + (a.spot_radius - b.spot_radius).powi(2);
    (amp + spot).sqrt()
}

/// Class prototypes with pairwise-distinct signatures.
pub fn prototypes(k: usize, seed: u64) -> Vec<Prototype> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x6c79_7068]));
    let mut out: Vec<Prototype> = Vec::with_capacity(k);
    let mut min_gap = 0.1;
    let mut attempts = 0;
    while out.len() < k {
        let dominant = 2 + out.len() % (HARMONICS - 1);
        let mut amplitudes = [0.0; HARMONICS];
        for (h, a) in amplitudes.iter_mut().enumerate().skip(1) {
            *a = if h + 1 == dominant {
                rng.random_range(0.1..0.18)
            } else {
                rng.random_range(-0.05..0.05)
            };
        }
        amplitudes[0] = BODY_TAPER;
        let mut candidate = Prototype {
            radius: rng.random_range(0.36..0.42),
            amplitudes,
            spot: (0.0, rng.random_range(0.5..2.6)),
            spot_radius: rng.random_range(0.05..0.09),
        };
        let room = outline_radius(&candidate, candidate.spot.1) - candidate.spot_radius - 0.03;
        candidate.spot.0 = rng.random_range(0.35..0.8) * room.max(0.05);
        attempts += 1;
        if attempts % 500 == 0 {
            min_gap *= 0.8;
        }
        if out.iter().all(|p| signature_distance(p, &candidate) >= min_gap) {
            out.push(candidate);
        }
    }
    out
}

/// Per-image jitter of a prototype.
fn jitter(p: &Prototype, rng: &mut impl Rng) -> Prototype {
    let mut q = p.clone();
    q.radius *= 1.0 + 0.04 * rng.sample::<f64, _>(StandardNormal);
    for a in q.amplitudes.iter_mut().skip(1) {
        *a *= 1.0 + 0.1 * rng.sample::<f64, _>(StandardNormal);
    }
    q.spot.0 *= 1.0 + 0.05 * rng.sample::<f64, _>(StandardNormal);
    q.spot.1 += 0.05 * rng.sample::<f64, _>(StandardNormal);
    q
}

/// Outline distance from the centre at angle `phi` from up.
fn outline_radius(p: &Prototype, phi: f64) -> f64 {
    let mut r = 1.0;
    for (h, a) in p.amplitudes.iter().enumerate() {
        r += a * ((h + 1) as f64 * phi).cos();
    }
    p.radius * r
}

fn disk(d: f64, r: f64, px: f64) -> f64 {
    (0.5 + (r - d) / px).clamp(0.0, 1.0)
}

/// Renders a glyph into a `1×n×n` image with analytic edge anti-aliasing.
/// Up is the first row.
pub fn render(p: &Prototype, n: usize, clutter: f64, rng: &mut impl Rng) -> Tensor {
    let px = 2.0 / (n - 1) as f64;
    let (sr, sa) = p.spot;
    let (sx, sy) = (sr * sa.sin(), -sr * sa.cos());
    let head_y = -(outline_radius(p, 0.0) + HEAD_GAP);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.1..0.35),
                rng.random_range(0.3..1.0),
            )
        })
        .collect();
    let mut data = Vec::with_capacity(n * n);
    for i in 0..n {
        let y = i as f64 * px - 1.0;
        for j in 0..n {
            let x = j as f64 * px - 1.0;
            let rho = (x * x + y * y).sqrt();
            let phi = x.atan2(-y);
            let body = disk(rho, outline_radius(p, phi), px);
            let spots = disk(((x.abs() - sx.abs()).powi(2) + (y - sy).powi(2)).sqrt(), p.spot_radius, px);
            let head = disk((x * x + (y - head_y).powi(2)).sqrt(), HEAD_RADIUS, px);
            let inside = body.max(head);
            let mut v = body * (0.9 - 0.3 * rho) * (1.0 - 0.8 * spots) + (1.0 - body) * head;
            if clutter > 0.0 {
                let bg: f64 = blobs
                    .iter()
                    .map(|(bx, by, s, a)| a * (-((x - bx).powi(2) + (y - by).powi(2)) / (2.0 * s * s)).exp())
                    .sum();
                v += (1.0 - inside) * clutter * bg + clutter * 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Tensor::new(vec![1, n, n], data).expect("n×n raster")
}

/// Where an image came from and how it was transformed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub label: usize,
    pub seed: u64,
    /// Index of the source image in the underlying split, for derived sets.
    pub source: Option<usize>,
    /// Components of the warp applied to the source.
    pub components: AffineComponents,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledSet {
    pub images: Vec<Tensor>,
    pub records: Vec<ImageRecord>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn examples(&self) -> Vec<Example> {
        self.images
            .iter()
            .zip(&self.records)
            .map(|(image, r)| Example {
                image: image.clone(),
                label: r.label,
            })
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledSet {
        LabeledSet {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            records: indices.iter().map(|&i| self.records[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: GlyphDatasetSpec,
    pub seed: u64,
    pub train: LabeledSet,
    pub val: LabeledSet,
    pub test: LabeledSet,
}

fn render_split(spec: &GlyphDatasetSpec, protos: &[Prototype], seed: u64, stream: u64, per_class: usize) -> LabeledSet {
    let k = spec.num_classes;
    let (images, records): (Vec<Tensor>, Vec<ImageRecord>) = (0..k * per_class)
        .into_par_iter()
        .map(|i| {
            let label = i % k;
            let s = derive_seed(seed, &[stream, i as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let proto = jitter(&protos[label], &mut rng);
            let img = render(&proto, spec.image_size, spec.clutter, &mut rng);
            (
                img,
                ImageRecord {
                    label,
                    seed: s,
                    source: None,
                    components: AffineComponents::identity(),
                },
            )
        })
        .unzip();
    LabeledSet { images, records }
}

pub fn generate_dataset(spec: &GlyphDatasetSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let protos = prototypes(spec.num_classes, spec.prototype_seed);
    let full = render_split(spec, &protos, seed, 1, spec.train_per_class);
    let test = render_split(spec, &protos, seed, 2, spec.test_per_class);

    let mut order: Vec<usize> = (0..full.len()).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[3])));
    let n_val = (full.len() as f64 * spec.val_fraction).round() as usize;
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut val_idx = val_idx.to_vec();
    let mut train_idx = train_idx.to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok(Dataset {
        spec: spec.clone(),
        seed,
        train: full.subset(&train_idx),
        val: full.subset(&val_idx),
        test,
    })
}

/// Test accuracy of a nearest-class-mean classifier on raw pixels.
pub fn nearest_centroid_accuracy(train: &LabeledSet, test: &LabeledSet, k: usize) -> f64 {
    let dim = train.images[0].numel();
    let mut centroids = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (img, r) in train.images.iter().zip(&train.records) {
        counts[r.label] += 1;
        for (c, v) in centroids[r.label].iter_mut().zip(img.data()) {
            *c += v;
        }
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= (*n).max(1) as f64);
    }
    let correct = test
        .images
        .iter()
        .zip(&test.records)
        .filter(|(img, r)| {
            let dist = |c: &Vec<f64>| c.iter().zip(img.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..k)
                .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                .expect("k >= 1");
            best == r.label
        })
        .count();
    correct as f64 / test.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GlyphDatasetSpec {
        GlyphDatasetSpec {
            num_classes: 3,
            train_per_class: 6,
            test_per_class: 3,
            image_size: 16,
            ..GlyphDatasetSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&small(), 5).unwrap();
        let b = generate_dataset(&small(), 5).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&small(), 6).unwrap();
        assert_ne!(a.train.images, c.train.images);
    }

    #[test]
    fn split_sizes_and_glyph_presence() {
        let d = generate_dataset(&small(), 1).unwrap();
        assert_eq!(d.train.len() + d.val.len(), 18);
        assert_eq!(d.val.len(), 2);
        assert_eq!(d.test.len(), 9);
        for img in d.train.images.iter().chain(&d.test.images) {
            assert!(img.max() > 0.0);
            assert!(img.min() >= 0.0 && img.max() <= 1.0);
        }
    }

    #[test]
    fn prototypes_are_distinct() {
        let p = prototypes(10, 0);
        for i in 0..10 {
            for j in 0..i {
                assert!(signature_distance(&p[i], &p[j]) > 0.05);
            }
        }
    }

    #[test]
    fn degenerate_spec_is_rejected() {
        let bad = GlyphDatasetSpec {
            num_classes: 1,
            ..small()
        };
        assert!(generate_dataset(&bad, 0).is_err());
    }

    #[test]
    fn two_classes_separable_by_nearest_centroid() {
        let spec = GlyphDatasetSpec {
            num_classes: 2,
            clutter: 0.0,
            ..GlyphDatasetSpec::default()
        };
        let d = generate_dataset(&spec, 11).unwrap();
        let acc = nearest_centroid_accuracy(&d.train, &d.test, 2);
        assert!(acc > 0.95, "{acc}");
    }
}
