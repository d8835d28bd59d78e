//! Top-1 evaluation over labeled sets, with per-class breakdown and
//! sample-count sweeps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::glyph::LabeledSet;
use crate::error::{Error, Result};
use crate::pipeline::train::argmax;
use crate::pipeline::{derive_seed, Model};
use crate::tensor::Tensor;

const EVAL_STREAM: u64 = 0x6576_616c;

/// Anything that maps an image to class probabilities, possibly stochastically.
pub trait Classifier: Sync {
    fn num_classes(&self) -> usize;

    /// Probabilities after each prefix length in `sizes` of one draw chain.
    /// `index` is the position of the image within the evaluated set.
    fn predict_prefixes(&self, index: usize, image: &Tensor, sizes: &[usize], rng: &mut ChaCha8Rng)
        -> Result<Vec<Vec<f64>>>;
}

impl Classifier for Model {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn predict_prefixes(&self, _: usize, image: &Tensor, sizes: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
        self.predict_mc_prefixes(image, sizes, rng)
    }
}

/// Looks up the true label; a test stub.
pub struct Oracle {
    pub labels: Vec<usize>,
    pub k: usize,
}

impl Classifier for Oracle {
    fn num_classes(&self) -> usize {
        self.k
    }

    fn predict_prefixes(&self, index: usize, _: &Tensor, sizes: &[usize], _: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
        let mut p = vec![0.0; self.k];
        p[self.labels[index]] = 1.0;
        Ok(vec![p; sizes.len()])
    }
}

/// Picks a uniformly random class; a test stub.
pub struct Uniform {
    pub k: usize,
}

impl Classifier for Uniform {
    fn num_classes(&self) -> usize {
        self.k
    }

    fn predict_prefixes(&self, _: usize, _: &Tensor, sizes: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
        let mut p = vec![0.0; self.k];
        p[rng.random_range(0..self.k)] = 1.0;
        Ok(vec![p; sizes.len()])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub samples: usize,
    pub top1: f64,
    pub per_class_top1: Vec<f64>,
    /// `(correct, total)` per class.
    pub counts: Vec<(usize, usize)>,
}

impl Metrics {
    fn from_hits(k: usize, samples: usize, hits: &[(usize, bool)]) -> Self {
        let mut counts = vec![(0usize, 0usize); k];
        for &(label, hit) in hits {
            counts[label].1 += 1;
            counts[label].0 += hit as usize;
        }
        let correct: usize = counts.iter().map(|c| c.0).sum();
        Self {
            samples,
            top1: correct as f64 / hits.len() as f64,
            per_class_top1: counts
                .iter()
                .map(|&(c, n)| if n == 0 { 0.0 } else { c as f64 / n as f64 })
                .collect(),
            counts,
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().map(|c| c.1).sum()
    }
}

/// One `Metrics` per entry of `sizes`, all from the same per-image draw chains.
pub fn evaluate_sweep(model: &dyn Classifier, set: &LabeledSet, sizes: &[usize], seed: u64) -> Result<Vec<Metrics>> {
    if set.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty set"));
    }
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::invalid("sample counts must be >= 1"));
    }
    let k = model.num_classes();
    if let Some(r) = set.records.iter().find(|r| r.label >= k) {
        return Err(Error::invalid(format!("label {} outside {k} classes", r.label)));
    }
    let preds: Vec<Vec<usize>> = (0..set.len())
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[EVAL_STREAM, i as u64]));
            let probs = model.predict_prefixes(i, &set.images[i], sizes, &mut rng)?;
            Ok(probs.iter().map(|p| argmax(p)).collect())
        })
        .collect::<Result<_>>()?;
    Ok(sizes
        .iter()
        .enumerate()
        .map(|(j, &s)| {
            let hits: Vec<(usize, bool)> = set
                .records
                .iter()
                .zip(&preds)
                .map(|(r, p)| (r.label, p[j] == r.label))
                .collect();
            Metrics::from_hits(k, s, &hits)
        })
        .collect())
}

pub fn evaluate(model: &dyn Classifier, set: &LabeledSet, samples: usize, seed: u64) -> Result<Metrics> {
    Ok(evaluate_sweep(model, set, &[samples], seed)?.remove(0))
}

/// `top1(vanilla) - top1(orbit)` for one model.
pub fn robustness_gap(vanilla: &Metrics, orbit: &Metrics) -> f64 {
    vanilla.top1 - orbit.top1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affine::AffineComponents;
    use crate::databench::glyph::ImageRecord;
    use crate::verify::oracle::binomial_halfwidth;

    fn blank_set(n: usize, k: usize) -> LabeledSet {
        LabeledSet {
            images: vec![Tensor::zeros(&[1, 2, 2]); n],
            records: (0..n)
                .map(|i| ImageRecord {
                    label: i % k,
                    seed: i as u64,
                    source: None,
                    components: AffineComponents::identity(),
                })
                .collect(),
        }
    }

    #[test]
    fn oracle_is_perfect() {
        let set = blank_set(50, 5);
        let m = evaluate(&Oracle { labels: set.labels(), k: 5 }, &set, 1, 0).unwrap();
        assert_eq!(m.top1, 1.0);
        assert!(m.per_class_top1.iter().all(|&v| v == 1.0));
        assert_eq!(m.total(), 50);
    }

    #[test]
    fn uniform_stub_hits_chance() {
        let set = blank_set(1000, 10);
        let m = evaluate(&Uniform { k: 10 }, &set, 1, 4).unwrap();
        assert!((m.top1 - 0.1).abs() <= 0.03);
        assert!((m.top1 - 0.1).abs() <= binomial_halfwidth(0.1, 1000, 3.0));
    }

    #[test]
    fn deterministic_and_sweep_consistent() {
        let set = blank_set(200, 4);
        let u = Uniform { k: 4 };
        let a = evaluate_sweep(&u, &set, &[1, 2, 4], 7).unwrap();
        let b = evaluate_sweep(&u, &set, &[1, 2, 4], 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert_eq!(evaluate(&u, &set, 1, 7).unwrap().top1, a[0].top1);
    }

    #[test]
    fn rejects_empty_and_bad_labels() {
        let u = Uniform { k: 2 };
        assert!(evaluate(&u, &LabeledSet::default(), 1, 0).is_err());
        assert!(evaluate(&u, &blank_set(4, 3), 1, 0).is_err());
        assert!(evaluate(&u, &blank_set(4, 2), 0, 0).is_err());
    }

    #[test]
    fn gap_sign() {
        let set = blank_set(10, 2);
        let m = evaluate(&Oracle { labels: set.labels(), k: 2 }, &set, 1, 0).unwrap();
        assert_eq!(robustness_gap(&m, &m), 0.0);
    }
}
