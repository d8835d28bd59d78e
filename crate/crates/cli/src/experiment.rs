//! Training stages, evaluation passes and the ablation grid.
//!
//! A training output directory looks like
//!
//! ```text
//! out/
//!   config.json        resolved experiment config
//!   baseline/          plain classifier checkpoint (+ epochs.csv)
//!   model/             canonicalizer checkpoint (+ epochs.csv)
//!   ablation/<name>/   one checkpoint per toggled variant (--ablate only)
//! ```
//!
//! Each stage directory is saved after every epoch, so an interrupted run
//! continues from its last finished epoch.

use std::fs;
use std::path::{Path, PathBuf};

use canonix::databench::io::{metrics_csv, summary_table};
use canonix::databench::{
    build_orbit_testset, build_sheared_orbit_testset, evaluate_sweep, Dataset, LabeledSet, Metrics, MetricsRow,
};
use canonix::pipeline::checkpoint::MANIFEST_FILE;
use canonix::pipeline::{derive_seed, AblationFlags, Checkpoint, EpochLog, Model, TrainConfig};
use canonix::{Error, Result};

use crate::config::ExperimentConfig;

const BASELINE_STREAM: u64 = 0x6261_7365;
const MODEL_STREAM: u64 = 0x6d6f_6465;

/// What to do with an existing stage directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Existing {
    /// Refuse to touch it.
    Fail,
    /// Continue or reuse it.
    Resume,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunControl {
    /// Abort after this many epochs have run in this invocation.
    pub stop_after_epochs: Option<usize>,
}

/// Messages are reported through `log`; the stage loop itself is silent.
pub struct Runner<'a> {
    pub existing: Existing,
    pub control: RunControl,
    epochs_run: usize,
    log: Box<dyn FnMut(&str) + 'a>,
}

impl<'a> Runner<'a> {
    pub fn new(existing: Existing, control: RunControl, log: impl FnMut(&str) + 'a) -> Self {
        Self {
            existing,
            control,
            epochs_run: 0,
            log: Box::new(log),
        }
    }

    fn say(&mut self, msg: &str) {
        (self.log)(msg)
    }

    /// Trains `init` under `cfg` in `dir`, or picks up where a previous run
    /// of the same stage stopped.
    pub fn stage(&mut self, name: &str, dir: &Path, init: impl FnOnce() -> Result<Model>, cfg: &TrainConfig, data: &Dataset) -> Result<Model> {
        let (mut model, state) = if dir.join(MANIFEST_FILE).exists() {
            if self.existing == Existing::Fail {
                return Err(Error::Config(format!(
                    "{} already holds a checkpoint; pass --resume to continue it or choose another --out",
                    dir.display()
                )));
            }
            let ck = Checkpoint::load(dir)?;
            if ck.train.as_ref() != Some(cfg) {
                return Err(Error::Config(format!(
                    "{} was trained with a different configuration",
                    dir.display()
                )));
            }
            let state = ck
                .state
                .ok_or_else(|| Error::Format(format!("{} has no optimizer state", dir.display())))?;
            if state.epochs_done >= cfg.epochs {
                self.say(&format!("{name}: complete, reusing {}", dir.display()));
                return Ok(ck.model);
            }
            self.say(&format!("{name}: resuming after epoch {}", state.epochs_done));
            (ck.model, Some(state))
        } else {
            (init()?, None)
        };
        let train_set = data.train.examples();
        let val_set = data.val.examples();
        let limit = self.control.stop_after_epochs;
        let mut ran = self.epochs_run;
        let started = std::time::Instant::now();
        let log = &mut self.log;
        let result = canonix::pipeline::train(&mut model, &train_set, &val_set, cfg, state, |m, s| {
            Checkpoint {
                model: m.clone(),
                train: Some(cfg.clone()),
                state: Some(s.clone()),
            }
            .save(dir)?;
            fs::write(dir.join("epochs.csv"), epochs_csv(&s.epochs)?)?;
            let e = s.epochs.last().expect("epoch just finished");
            log(&format!(
                "{name}: epoch {}/{} loss {:.4} nll {:.4} align {:.4} val {}",
                e.epoch + 1,
                cfg.epochs,
                e.total,
                e.nll,
                e.align,
                e.val_top1.map_or("-".into(), |v| format!("{v:.3}"))
            ));
            ran += 1;
            if limit.is_some_and(|l| ran >= l) && s.epochs_done < cfg.epochs {
                return Err(Error::Io(std::io::Error::new(
                    std::io::ErrorKind::Interrupted,
                    format!("stopped after {ran} epochs as requested; rerun with --resume to continue"),
                )));
            }
            Ok(())
        });
        self.epochs_run = ran;
        let secs = read_train_seconds(dir).unwrap_or(0.0) + started.elapsed().as_secs_f64();
        fs::write(dir.join(TIMING_FILE), format!("{secs:.3}\n"))?;
        result?;
        self.say(&format!("{name}: trained in {secs:.1}s"));
        Ok(model)
    }
}

/// Wall-clock training seconds summed over every invocation of a stage.
pub const TIMING_FILE: &str = "train_seconds.txt";

pub fn read_train_seconds(dir: &Path) -> Option<f64> {
    fs::read_to_string(dir.join(TIMING_FILE))
        .ok()
        .and_then(|t| t.trim().parse().ok())
}

fn epochs_csv(epochs: &[EpochLog]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Format(format!("csv: {e}"));
    w.write_record(["epoch", "lr", "nll", "align", "kl", "total", "val_top1"]).map_err(err)?;
    for e in epochs {
        w.write_record([
            e.epoch.to_string(),
            format!("{:e}", e.lr),
            format!("{:.6}", e.nll),
            format!("{:.6}", e.align),
            format!("{:.6}", e.kl),
            format!("{:.6}", e.total),
            e.val_top1.map_or(String::new(), |v| format!("{v:.6}")),
        ])
        .map_err(err)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Format(e.to_string()))?).map_err(|e| Error::Format(e.to_string()))
}

/// Checks that a dataset can feed the configured model.
pub fn check_data(cfg: &ExperimentConfig, data: &Dataset) -> Result<()> {
    if data.spec.num_classes != cfg.model.num_classes || data.spec.image_size != cfg.model.tokenizer.image_size {
        return Err(Error::Config(format!(
            "dataset has {} classes at {}px but the model expects {} classes at {}px",
            data.spec.num_classes, data.spec.image_size, cfg.model.num_classes, cfg.model.tokenizer.image_size
        )));
    }
    Ok(())
}

pub fn baseline_model(cfg: &ExperimentConfig) -> Result<Model> {
    let mut mc = cfg.model.clone();
    mc.localizer = None;
    Model::new(mc, derive_seed(cfg.seed, &[BASELINE_STREAM]))
}

/// A canonicalizer with `flags`, sharing the baseline's tokenizer and classifier.
pub fn canonicalizer_model(cfg: &ExperimentConfig, flags: &AblationFlags, baseline: &Model) -> Result<Model> {
    if cfg.model.localizer.is_none() {
        return Err(Error::Config("model.localizer must be set to train a canonicalizer".into()));
    }
    let mut m = Model::new(cfg.model.clone().with_flags(flags), derive_seed(cfg.seed, &[MODEL_STREAM]))?;
    m.params.copy_prefix_from(&baseline.params, "tok.");
    m.params.copy_prefix_from(&baseline.params, "cls.");
    Ok(m)
}

pub struct TrainedPair {
    pub baseline: Model,
    pub model: Model,
}

/// Baseline classifier, then the canonicalizer initialised from it.
pub fn train_pair(runner: &mut Runner, cfg: &ExperimentConfig, data: &Dataset, out: &Path) -> Result<TrainedPair> {
    check_data(cfg, data)?;
    let baseline = runner.stage("baseline", &out.join("baseline"), || baseline_model(cfg), &cfg.baseline, data)?;
    let model = runner.stage(
        "model",
        &out.join("model"),
        || canonicalizer_model(cfg, &cfg.train.flags, &baseline),
        &cfg.train,
        data,
    )?;
    Ok(TrainedPair { baseline, model })
}

/// Named evaluation surfaces.
pub struct TestSets {
    pub sets: Vec<(String, LabeledSet)>,
}

impl TestSets {
    pub fn build(cfg: &ExperimentConfig, data: &Dataset, orbit: bool, sheared: bool) -> Result<Self> {
        let mut sets = vec![("test".to_string(), data.test.clone())];
        if orbit {
            sets.push(("orbit".into(), build_orbit_testset(&data.test, &cfg.orbit)?));
        }
        if sheared {
            sets.push((
                "sheared_orbit".into(),
                build_sheared_orbit_testset(&data.test, &cfg.orbit, cfg.eval.seed)?,
            ));
        }
        Ok(Self { sets })
    }
}

/// Sample counts to evaluate: the reported count plus any sweep entries.
pub fn sample_sizes(samples: usize, sweep: &[usize]) -> Vec<usize> {
    let mut v: Vec<usize> = sweep.iter().copied().chain([samples]).collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// Metrics at `samples` per set, plus the whole sweep as `(set, metrics)` rows.
pub fn evaluate_model(
    name: &str,
    model: &Model,
    sets: &TestSets,
    samples: usize,
    sweep: &[usize],
    seed: u64,
) -> Result<(Vec<MetricsRow>, Vec<(String, Metrics)>)> {
    let sizes = sample_sizes(samples, sweep);
    let mut rows = Vec::new();
    let mut swept = Vec::new();
    for (set_name, set) in &sets.sets {
        let all = evaluate_sweep(model, set, &sizes, seed)?;
        for m in all {
            if m.samples == samples {
                rows.push(MetricsRow {
                    model: name.to_string(),
                    testset: set_name.clone(),
                    metrics: m.clone(),
                });
            }
            if sweep.contains(&m.samples) {
                swept.push((set_name.clone(), m));
            }
        }
    }
    Ok((rows, swept))
}

/// `model,testset,samples,top1,correct,total`, one row per sample count.
pub fn sweep_csv(model: &str, rows: &[(String, Metrics)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Format(format!("csv: {e}"));
    w.write_record(["model", "testset", "samples", "top1", "correct", "total"]).map_err(err)?;
    for (set, m) in rows {
        let correct: usize = m.counts.iter().map(|c| c.0).sum();
        w.write_record([
            model.to_string(),
            set.clone(),
            m.samples.to_string(),
            format!("{:.6}", m.top1),
            correct.to_string(),
            m.total().to_string(),
        ])
        .map_err(err)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Format(e.to_string()))?).map_err(|e| Error::Format(e.to_string()))
}

pub const FLAG_NAMES: [&str; 5] = ["decomposed_heads", "probabilistic", "use_align", "use_kl", "conv_localizer"];

fn flag_mut<'f>(flags: &'f mut AblationFlags, name: &str) -> &'f mut bool {
    match name {
        "decomposed_heads" => &mut flags.decomposed_heads,
        "probabilistic" => &mut flags.probabilistic,
        "use_align" => &mut flags.use_align,
        "use_kl" => &mut flags.use_kl,
        "conv_localizer" => &mut flags.conv_localizer,
        other => unreachable!("unknown flag {other}"),
    }
}

/// `(variant name, toggled flag, flags)`; the first entry is the full method.
pub fn ablation_grid(base: &AblationFlags) -> Vec<(String, Option<&'static str>, AblationFlags)> {
    let mut grid = vec![("full".to_string(), None, *base)];
    for name in FLAG_NAMES {
        let mut f = *base;
        let v = flag_mut(&mut f, name);
        *v = !*v;
        let value = *v;
        grid.push((format!("{name}={value}"), Some(name), f));
    }
    grid
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub flag: Option<String>,
    pub test_top1: f64,
    pub orbit_top1: f64,
}

/// Drops are measured from the `full` row; the vanilla row is the plain classifier.
pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    let full = rows
        .iter()
        .find(|r| r.variant == "full")
        .ok_or_else(|| Error::InvalidArgument("ablation rows need a full variant".into()))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Format(format!("csv: {e}"));
    w.write_record(["variant", "flag", "test_top1", "orbit_top1", "test_drop", "orbit_drop"])
        .map_err(err)?;
    for r in rows {
        w.write_record([
            r.variant.clone(),
            r.flag.clone().unwrap_or_default(),
            format!("{:.6}", r.test_top1),
            format!("{:.6}", r.orbit_top1),
            format!("{:.6}", full.test_top1 - r.test_top1),
            format!("{:.6}", full.orbit_top1 - r.orbit_top1),
        ])
        .map_err(err)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Format(e.to_string()))?).map_err(|e| Error::Format(e.to_string()))
}

pub struct Reports {
    pub files: Vec<PathBuf>,
}

fn write(out: &Path, name: &str, text: &str, files: &mut Vec<PathBuf>) -> Result<()> {
    let p = out.join(name);
    fs::write(&p, text)?;
    files.push(p);
    Ok(())
}

/// Trains the baseline, the full method and one variant per toggle, then
/// evaluates all of them on the test and orbit sets.
pub fn run_ablation(runner: &mut Runner, cfg: &ExperimentConfig, data: &Dataset, out: &Path) -> Result<Reports> {
    check_data(cfg, data)?;
    let sets = TestSets::build(cfg, data, true, false)?;
    let baseline = runner.stage("baseline", &out.join("baseline"), || baseline_model(cfg), &cfg.baseline, data)?;
    let mut metrics = Vec::new();
    let mut table = Vec::new();
    let mut files = Vec::new();

    let (rows, _) = evaluate_model("vanilla", &baseline, &sets, cfg.eval.samples, &[], cfg.eval.seed)?;
    table.push(ablation_row("vanilla", None, &rows));
    metrics.extend(rows);

    for (name, flag, flags) in ablation_grid(&cfg.train.flags) {
        let mut tc = cfg.train.clone();
        tc.flags = flags;
        if flags.use_kl && !cfg.train.flags.use_kl && tc.loss.lambda_kl == 0.0 {
            tc.loss.lambda_kl = cfg.ablation.kl_weight;
        }
        let dir = if flag.is_none() {
            out.join("model")
        } else {
            out.join("ablation").join(&name)
        };
        let model = runner.stage(&name, &dir, || canonicalizer_model(cfg, &flags, &baseline), &tc, data)?;
        let sweep: &[usize] = if flag.is_none() { &cfg.eval.sweep } else { &[] };
        let (rows, swept) = evaluate_model(&name, &model, &sets, cfg.eval.samples, sweep, cfg.eval.seed)?;
        runner.say(&format!(
            "{name}: test {:.3} orbit {:.3}",
            rows[0].metrics.top1, rows[1].metrics.top1
        ));
        if flag.is_none() {
            write(out, "sweep.csv", &sweep_csv(&name, &swept)?, &mut files)?;
        }
        table.push(ablation_row(&name, flag, &rows));
        metrics.extend(rows);
    }
    write(out, "ablation.csv", &ablation_csv(&table)?, &mut files)?;
    write(out, "metrics.csv", &metrics_csv(&metrics)?, &mut files)?;
    write(out, "summary.txt", &summary_table(&metrics), &mut files)?;
    Ok(Reports { files })
}

fn ablation_row(variant: &str, flag: Option<&str>, rows: &[MetricsRow]) -> AblationRow {
    let top1 = |set: &str| rows.iter().find(|r| r.testset == set).map_or(f64::NAN, |r| r.metrics.top1);
    AblationRow {
        variant: variant.to_string(),
        flag: flag.map(str::to_string),
        test_top1: top1("test"),
        orbit_top1: top1("orbit"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_flips_one_flag_each() {
        let base = AblationFlags::default();
        let grid = ablation_grid(&base);
        assert_eq!(grid.len(), 6);
        assert_eq!(grid[0].2, base);
        for (name, flag, f) in &grid[1..] {
            let mut diff = 0;
            for n in FLAG_NAMES {
                let (mut a, mut b) = (base, *f);
                diff += (*flag_mut(&mut a, n) != *flag_mut(&mut b, n)) as usize;
            }
            assert_eq!(diff, 1, "{name}");
            assert!(name.starts_with(flag.unwrap()));
        }
        assert!(grid.iter().any(|g| g.0 == "decomposed_heads=false"));
        assert!(grid.iter().any(|g| g.0 == "use_kl=true"));
    }

    #[test]
    fn sizes_merge_sweep_and_samples() {
        assert_eq!(sample_sizes(8, &[1, 2, 4, 8, 16]), vec![1, 2, 4, 8, 16]);
        assert_eq!(sample_sizes(3, &[]), vec![3]);
    }

    #[test]
    fn ablation_drops_are_relative_to_full() {
        let rows = vec![
            AblationRow {
                variant: "full".into(),
                flag: None,
                test_top1: 0.9,
                orbit_top1: 0.8,
            },
            AblationRow {
                variant: "use_align=false".into(),
                flag: Some("use_align".into()),
                test_top1: 0.85,
                orbit_top1: 0.5,
            },
        ];
        let csv = ablation_csv(&rows).unwrap();
        let last = csv.lines().last().unwrap();
        assert_eq!(last, "use_align=false,use_align,0.850000,0.500000,0.050000,0.300000");
    }
}
