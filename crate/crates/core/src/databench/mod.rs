//! Synthetic glyph benchmark: data generation, orbit test sets, evaluation.

pub mod eval;
pub mod glyph;
pub mod io;
pub mod orbit;

pub use eval::{evaluate, evaluate_sweep, robustness_gap, Classifier, Metrics};
pub use glyph::{generate_dataset, Dataset, GlyphDatasetSpec, ImageRecord, LabeledSet};
pub use io::{load_dataset, save_dataset, MetricsRow};
pub use orbit::{build_orbit_testset, build_sheared_orbit_testset, OrbitSpec, Pairing};
