//! On-disk dataset layout and metric reports.
//!
//! A dataset directory holds `dataset.json` plus `train.cxt`, `val.cxt` and
//! `test.cxt`, each one stacked `[N, C, H, W]` tensor.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::eval::Metrics;
use super::glyph::{Dataset, GlyphDatasetSpec, ImageRecord, LabeledSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_FORMAT: &str = "canonix-dataset-1";
pub const INDEX_FILE: &str = "dataset.json";
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub spec: GlyphDatasetSpec,
    pub seed: u64,
    pub train: Vec<ImageRecord>,
    pub val: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
}

fn write_split(path: &Path, set: &LabeledSet) -> Result<()> {
    let stacked = if set.is_empty() {
        Tensor::zeros(&[0])
    } else {
        Tensor::stack(&set.images)?
    };
    fs::write(path, stacked.to_cxt1_bytes())?;
    Ok(())
}

fn read_split(path: &Path, records: Vec<ImageRecord>) -> Result<LabeledSet> {
    let t = Tensor::read_cxt1(fs::File::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?)?;
    let n = if t.rank() <= 1 { 0 } else { t.shape()[0] };
    if n != records.len() {
        return Err(Error::Format(format!(
            "{}: {n} images but manifest lists {}",
            path.display(),
            records.len()
        )));
    }
    Ok(LabeledSet {
        images: (0..n).map(|i| t.select(i)).collect(),
        records,
    })
}

pub fn save_dataset(dir: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        spec: data.spec.clone(),
        seed: data.seed,
        train: data.train.records.clone(),
        val: data.val.records.clone(),
        test: data.test.records.clone(),
    };
    fs::write(dir.join(INDEX_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    for (name, set) in SPLITS.iter().zip([&data.train, &data.val, &data.test]) {
        write_split(&dir.join(format!("{name}.cxt")), set)?;
    }
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(INDEX_FILE))
        .map_err(|e| Error::Format(format!("{}: {e}", dir.join(INDEX_FILE).display())))?;
    let m: DatasetManifest = serde_json::from_str(&text)?;
    if m.format != DATASET_FORMAT {
        return Err(Error::Format(format!("unknown dataset format {:?}", m.format)));
    }
    Ok(Dataset {
        train: read_split(&dir.join("train.cxt"), m.train)?,
        val: read_split(&dir.join("val.cxt"), m.val)?,
        test: read_split(&dir.join("test.cxt"), m.test)?,
        spec: m.spec,
        seed: m.seed,
    })
}

/// One evaluated (model, test set) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub model: String,
    pub testset: String,
    pub metrics: Metrics,
}

/// `model,testset,samples,top1,correct,total,class_0..class_{K-1}`.
pub fn metrics_csv(rows: &[MetricsRow]) -> Result<String> {
    let k = rows.iter().map(|r| r.metrics.counts.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["model", "testset", "samples", "top1", "correct", "total"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..k).map(|c| format!("class_{c}")));
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let m = &r.metrics;
        let correct: usize = m.counts.iter().map(|c| c.0).sum();
        let mut rec = vec![
            r.model.clone(),
            r.testset.clone(),
            m.samples.to_string(),
            format!("{:.6}", m.top1),
            correct.to_string(),
            m.total().to_string(),
        ];
        rec.extend((0..k).map(|c| m.per_class_top1.get(c).map(|v| format!("{v:.6}")).unwrap_or_default()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Format(e.to_string()))?).map_err(|e| Error::Format(e.to_string()))
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// Text table with one row per model and one column per test set, in order
/// of first appearance. Columns after the first also show the relative change
/// from the first column.
pub fn summary_table(rows: &[MetricsRow]) -> String {
    let mut models: Vec<&str> = Vec::new();
    let mut sets: Vec<&str> = Vec::new();
    for r in rows {
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
        if !sets.contains(&r.testset.as_str()) {
            sets.push(&r.testset);
        }
    }
    let lookup = |m: &str, s: &str| {
        rows.iter()
            .rev()
            .find(|r| r.model == m && r.testset == s)
            .map(|r| r.metrics.top1 * 100.0)
    };
    let mut table: Vec<Vec<String>> = vec![std::iter::once("model".to_string())
        .chain(sets.iter().map(|s| s.to_string()))
        .collect()];
    for m in &models {
        let base = lookup(m, sets[0]);
        let mut line = vec![m.to_string()];
        for (j, s) in sets.iter().enumerate() {
            line.push(match (lookup(m, s), base) {
                (None, _) => "-".into(),
                (Some(v), Some(b)) if j > 0 && b > 0.0 => format!("{v:.1} ({:+.1}%)", (v - b) / b * 100.0),
                (Some(v), _) => format!("{v:.1}"),
            });
        }
        table.push(line);
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| table.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in table.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (v, w))| if c == 0 { format!("{v:<w$}") } else { format!("{v:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        if i == 0 {
            let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::databench::glyph::generate_dataset;

    fn small() -> Dataset {
        let spec = GlyphDatasetSpec {
            num_classes: 3,
            train_per_class: 4,
            test_per_class: 2,
            image_size: 16,
            ..GlyphDatasetSpec::default()
        };
        generate_dataset(&spec, 5).unwrap()
    }

    #[test]
    fn dataset_round_trip() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &d).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), d);
    }

    #[test]
    fn same_seed_same_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        save_dataset(a.path(), &small()).unwrap();
        save_dataset(b.path(), &small()).unwrap();
        for f in [INDEX_FILE, "train.cxt", "val.cxt", "test.cxt"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn truncated_split_is_rejected() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &d).unwrap();
        write_split(&dir.path().join("test.cxt"), &d.test.subset(&[0])).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }

    fn row(model: &str, set: &str, top1: f64) -> MetricsRow {
        MetricsRow {
            model: model.into(),
            testset: set.into(),
            metrics: Metrics {
                samples: 1,
                top1,
                per_class_top1: vec![top1, top1],
                counts: vec![(1, 2), (1, 2)],
            },
        }
    }

    #[test]
    fn csv_and_table_shapes() {
        let rows = vec![row("vanilla", "test", 0.8), row("vanilla", "orbit", 0.4), row("ours", "test", 0.9)];
        let csv = metrics_csv(&rows).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("model,testset,samples,top1,correct,total,class_0,class_1\n"));
        let t = summary_table(&rows);
        assert!(t.contains("40.0 (-50.0%)"), "{t}");
        assert!(t.lines().last().unwrap().ends_with('-'));
    }
}
