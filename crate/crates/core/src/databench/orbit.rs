//! Test sets expanded over a finite roto-scaling subgroup, optionally after
//! one random shear per source image.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::glyph::{ImageRecord, LabeledSet};
use crate::affine::{compose_matrix, AffineComponents};
use crate::error::{Error, Result};
use crate::pipeline::augment::sample_range;
use crate::pipeline::derive_seed;
use crate::warp::warp_image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// Rotation `k` with scale `k`: `n` elements.
    Paired,
    /// Every rotation with every scale: `n²` elements.
    Cartesian,
}

impl std::str::FromStr for Pairing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paired" => Ok(Self::Paired),
            "cartesian" => Ok(Self::Cartesian),
            other => Err(Error::Config(format!("pairing must be paired or cartesian, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OrbitSpec {
    pub n: usize,
    pub lambda_s: f64,
    pub pairing: Pairing,
    /// Half-width of the uniform shear range drawn once per source image.
    pub pre_shear: Option<f64>,
}

impl Default for OrbitSpec {
    fn default() -> Self {
        Self {
            n: 16,
            lambda_s: 0.25,
            pairing: Pairing::Paired,
            pre_shear: Some(0.2),
        }
    }
}

impl OrbitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("orbit.n must be >= 1".into()));
        }
        if !(self.lambda_s >= 0.0 && self.lambda_s < 1.0) {
            return Err(Error::Config(format!("orbit.lambda_s = {} must be in [0, 1)", self.lambda_s)));
        }
        if let Some(r) = self.pre_shear {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(Error::Config(format!("orbit.pre_shear = {r} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    /// Rotation angles `2πk/n`, wrapped into `(-π, π]`.
    pub fn rotations(&self) -> Vec<f64> {
        (0..self.n)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / self.n as f64;
                if a > PI {
                    a - 2.0 * PI
                } else {
                    a
                }
            })
            .collect()
    }

    /// Scales evenly spaced from 1 down to `1 - lambda_s`; element 0 is 1.
    pub fn scales(&self) -> Vec<f64> {
        if self.n == 1 {
            return vec![1.0];
        }
        (0..self.n)
            .map(|k| 1.0 - self.lambda_s * k as f64 / (self.n - 1) as f64)
            .collect()
    }

    /// `(θ, s)` subgroup elements in expansion order.
    pub fn elements(&self) -> Vec<(f64, f64)> {
        let (r, s) = (self.rotations(), self.scales());
        match self.pairing {
            Pairing::Paired => r.into_iter().zip(s).collect(),
            Pairing::Cartesian => r.iter().flat_map(|&a| s.iter().map(move |&b| (a, b))).collect(),
        }
    }
}

/// A test set expanded over the subgroup; records carry source index and
/// applied components.
pub type OrbitTestSet = LabeledSet;

fn expand(test: &LabeledSet, spec: &OrbitSpec, shears: &[(f64, f64)]) -> Result<OrbitTestSet> {
    spec.validate()?;
    let elements = spec.elements();
    let jobs: Vec<(usize, f64, f64)> = (0..test.len())
        .flat_map(|i| elements.iter().map(move |&(t, s)| (i, t, s)))
        .collect();
    let (images, records) = jobs
        .par_iter()
        .map(|&(i, theta, s)| {
            let (hx, hy) = shears[i];
            let c = AffineComponents::new(theta, s.ln(), s.ln(), hx, hy);
            let img = warp_image(&test.images[i], &compose_matrix(&c)?)?;
            let src = &test.records[i];
            Ok((
                img,
                ImageRecord {
                    label: src.label,
                    seed: src.seed,
                    source: Some(i),
                    components: c,
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    Ok(LabeledSet { images, records })
}

pub fn build_orbit_testset(test: &LabeledSet, spec: &OrbitSpec) -> Result<OrbitTestSet> {
    expand(test, spec, &vec![(0.0, 0.0); test.len()])
}

/// One uniform shear in `[-pre_shear, pre_shear]²` per source, then the orbit.
pub fn build_sheared_orbit_testset(test: &LabeledSet, spec: &OrbitSpec, seed: u64) -> Result<OrbitTestSet> {
    let r = spec
        .pre_shear
        .ok_or_else(|| Error::Config("sheared orbit needs orbit.pre_shear".into()))?;
    let shears: Vec<(f64, f64)> = (0..test.len())
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x7368_6561, i as u64]));
            (sample_range(&mut rng, [-r, r]), sample_range(&mut rng, [-r, r]))
        })
        .collect();
    expand(test, spec, &shears)
}

/// Re-renders an expanded image from its record.
pub fn regenerate(source: &LabeledSet, record: &ImageRecord) -> Result<crate::tensor::Tensor> {
    let i = record
        .source
        .ok_or_else(|| Error::invalid("record has no source image"))?;
    warp_image(&source.images[i], &compose_matrix(&record.components)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::databench::glyph::{generate_dataset, GlyphDatasetSpec};

    fn test_set() -> LabeledSet {
        let spec = GlyphDatasetSpec {
            num_classes: 2,
            train_per_class: 2,
            test_per_class: 3,
            image_size: 16,
            ..GlyphDatasetSpec::default()
        };
        generate_dataset(&spec, 3).unwrap().test
    }

    #[test]
    fn element_counts() {
        let t = test_set();
        let paired = build_orbit_testset(&t, &OrbitSpec::default()).unwrap();
        assert_eq!(paired.len(), 16 * t.len());
        let cart = OrbitSpec {
            n: 4,
            pairing: Pairing::Cartesian,
            ..OrbitSpec::default()
        };
        assert_eq!(build_orbit_testset(&t, &cart).unwrap().len(), 16 * t.len());
    }

    #[test]
    fn single_element_orbit_is_the_test_set() {
        let t = test_set();
        let o = build_orbit_testset(&t, &OrbitSpec { n: 1, ..OrbitSpec::default() }).unwrap();
        assert_eq!(o.images, t.images);
    }

    #[test]
    fn scales_span_the_head_range() {
        let s = OrbitSpec::default().scales();
        assert_eq!(s[0], 1.0);
        assert!((s[15] - 0.75).abs() < 1e-15);
        let r = OrbitSpec::default().rotations();
        assert!(r.iter().all(|a| *a > -PI && *a <= PI));
    }

    #[test]
    fn records_regenerate_images_exactly() {
        let t = test_set();
        let o = build_sheared_orbit_testset(&t, &OrbitSpec { n: 4, ..OrbitSpec::default() }, 9).unwrap();
        for (img, r) in o.images.iter().zip(&o.records) {
            assert_eq!(&regenerate(&t, r).unwrap(), img);
            assert_eq!(r.label, t.records[r.source.unwrap()].label);
            assert!(r.components.hx.abs() <= 0.2 && r.components.hy.abs() <= 0.2);
        }
    }

    #[test]
    fn zero_shear_matches_plain_orbit() {
        let t = test_set();
        let spec = OrbitSpec {
            n: 4,
            pre_shear: Some(0.0),
            ..OrbitSpec::default()
        };
        let a = build_orbit_testset(&t, &spec).unwrap();
        let b = build_sheared_orbit_testset(&t, &spec, 1).unwrap();
        assert_eq!(a, b);
        let none = OrbitSpec { pre_shear: None, ..spec };
        assert!(build_sheared_orbit_testset(&t, &none, 1).is_err());
    }
}
