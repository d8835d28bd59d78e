//! Command implementations behind the `canonix` binary.

use std::fs;
use std::path::{Path, PathBuf};

use canonix::databench::io::{metrics_csv, summary_table};
use canonix::databench::{generate_dataset, load_dataset, save_dataset, Pairing};
use canonix::image_io::{read_pnm, write_pnm};
use canonix::pipeline::checkpoint::config_hash;
use canonix::pipeline::{derive_seed, Checkpoint, Model};
use canonix::verify::selfcheck::{self, SelfcheckOptions, SuiteReport};
use canonix::{Error, Result};

use crate::config::ExperimentConfig;
use crate::experiment::{self, Existing, RunControl, Runner, TestSets};
use crate::manifest::{OutputLock, RunManifest};

/// Where the experiment config comes from.
#[derive(Debug, Clone, Default)]
pub struct ConfigSource {
    pub path: Option<PathBuf>,
    pub preset: Option<String>,
    pub seed: Option<u64>,
}

impl ConfigSource {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let cfg = match (&self.path, &self.preset) {
            (Some(_), Some(_)) => return Err(Error::Config("pass either --config or --preset, not both".into())),
            (Some(p), None) => ExperimentConfig::load(p)?,
            (None, Some(name)) => ExperimentConfig::preset(name)?,
            (None, None) => ExperimentConfig::benchmark(),
        };
        let cfg = match self.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn rel(out: &Path, p: &Path) -> String {
    p.strip_prefix(out).unwrap_or(p).display().to_string()
}

pub fn gen_data(src: &ConfigSource, out: &Path, argv: Vec<String>) -> Result<()> {
    let cfg = src.resolve()?;
    let _lock = OutputLock::acquire(out)?;
    let mut run = RunManifest::start(argv, config_hash(&cfg.data)?, cfg.seed);
    let data = generate_dataset(&cfg.data, cfg.seed)?;
    save_dataset(out, &data)?;
    for f in ["dataset.json", "train.cxt", "val.cxt", "test.cxt"] {
        run.output(f);
    }
    eprintln!(
        "wrote {} train / {} val / {} test images to {}",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        out.display()
    );
    run.finish(out)
}

pub struct TrainArgs<'a> {
    pub data: &'a Path,
    pub out: &'a Path,
    pub ablate: bool,
    pub resume: bool,
    pub control: RunControl,
}

pub fn train(src: &ConfigSource, a: TrainArgs, argv: Vec<String>) -> Result<()> {
    let cfg = src.resolve()?;
    let data = load_dataset(a.data)?;
    experiment::check_data(&cfg, &data)?;
    let _lock = OutputLock::acquire(a.out)?;
    let config_path = a.out.join("config.json");
    let text = cfg.to_json()?;
    if config_path.exists() && fs::read_to_string(&config_path)? != text {
        if !a.resume {
            return Err(Error::Config(format!(
                "{} holds a run with a different config; choose another --out",
                a.out.display()
            )));
        }
    }
    fs::write(&config_path, &text)?;
    let mut run = RunManifest::start(argv, cfg.hash()?, cfg.seed);
    run.output("config.json");
    let existing = if a.resume { Existing::Resume } else { Existing::Fail };
    let mut runner = Runner::new(existing, a.control, |m| eprintln!("{m}"));
    if a.ablate {
        let reports = experiment::run_ablation(&mut runner, &cfg, &data, a.out)?;
        for f in &reports.files {
            run.output(rel(a.out, f));
        }
        run.output("baseline");
        run.output("model");
        for (name, flag, _) in experiment::ablation_grid(&cfg.train.flags) {
            if flag.is_some() {
                run.output(format!("ablation/{name}"));
            }
        }
        eprint!("{}", fs::read_to_string(a.out.join("summary.txt"))?);
    } else {
        experiment::train_pair(&mut runner, &cfg, &data, a.out)?;
        run.output("baseline");
        run.output("model");
    }
    run.finish(a.out)
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub data: &'a Path,
    pub out: &'a Path,
    pub orbit: bool,
    pub sheared_orbit: bool,
    pub samples: Option<usize>,
    pub sweep: Option<Vec<usize>>,
    pub pairing: Option<Pairing>,
}

pub fn eval(src: &ConfigSource, a: EvalArgs, argv: Vec<String>) -> Result<()> {
    let mut cfg = src.resolve()?;
    if let Some(p) = a.pairing {
        cfg.orbit.pairing = p;
    }
    let samples = a.samples.unwrap_or(cfg.eval.samples);
    if samples == 0 {
        return Err(Error::Config("--samples must be >= 1".into()));
    }
    if let Some(s) = &a.sweep {
        if s.is_empty() || s.contains(&0) {
            return Err(Error::Config("--sweep-samples entries must be >= 1".into()));
        }
    }
    let model = Checkpoint::load(a.checkpoint)?.model;
    let data = load_dataset(a.data)?;
    if data.spec.num_classes != model.config.num_classes || data.spec.image_size != model.config.tokenizer.image_size {
        return Err(Error::Config(format!(
            "dataset ({} classes, {}px) does not match the checkpoint ({} classes, {}px)",
            data.spec.num_classes, data.spec.image_size, model.config.num_classes, model.config.tokenizer.image_size
        )));
    }
    let _lock = OutputLock::acquire(a.out)?;
    let mut run = RunManifest::start(argv, cfg.hash()?, cfg.eval.seed);
    let sets = TestSets::build(&cfg, &data, a.orbit, a.sheared_orbit)?;
    let name = a
        .checkpoint
        .file_name()
        .map_or("model".to_string(), |n| n.to_string_lossy().into_owned());
    let sweep = a.sweep.clone().unwrap_or_default();
    let (rows, swept) = experiment::evaluate_model(&name, &model, &sets, samples, &sweep, cfg.eval.seed)?;
    fs::write(a.out.join("metrics.csv"), metrics_csv(&rows)?)?;
    let table = summary_table(&rows);
    fs::write(a.out.join("summary.txt"), &table)?;
    run.output("metrics.csv");
    run.output("summary.txt");
    if a.sweep.is_some() {
        fs::write(a.out.join("sweep.csv"), experiment::sweep_csv(&name, &swept)?)?;
        run.output("sweep.csv");
    }
    print!("{table}");
    run.finish(a.out)
}

/// Writes an untrained checkpoint for the configured canonicalizer.
pub fn init(src: &ConfigSource, out: &Path, argv: Vec<String>) -> Result<()> {
    let cfg = src.resolve()?;
    let _lock = OutputLock::acquire(out)?;
    let mut run = RunManifest::start(argv, cfg.hash()?, cfg.seed);
    let model = Model::new(
        cfg.model.clone().with_flags(&cfg.train.flags),
        derive_seed(cfg.seed, &[0x696e_6974]),
    )?;
    Checkpoint::bare(model).save(out)?;
    run.output("checkpoint.json");
    run.output("model.cxa");
    run.finish(out)
}

pub fn canonicalize(checkpoint: &Path, images: &[PathBuf], out: &Path, argv: Vec<String>) -> Result<()> {
    if images.is_empty() {
        return Err(Error::Config("no input images given".into()));
    }
    let model = Checkpoint::load(checkpoint)?.model;
    if model.localizer().is_none() {
        return Err(Error::Config(format!("{} has no localizer", checkpoint.display())));
    }
    let _lock = OutputLock::acquire(out)?;
    let mut run = RunManifest::start(argv, config_hash(&model.config)?, 0);
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Format(format!("csv: {e}"));
    w.write_record([
        "input", "output", "theta", "sx", "sy", "hx", "hy", "m00", "m01", "m02", "m10", "m11", "m12",
    ])
    .map_err(csv_err)?;
    let mut used = std::collections::HashSet::new();
    for path in images {
        let image = read_pnm(path)?;
        model
            .validate_image(&image)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let canon = model.canonicalize(&image)?;
        let stem = path.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
        let ext = if image.shape()[0] == 1 { "pgm" } else { "ppm" };
        let mut file = format!("{stem}.canonical.{ext}");
        let mut k = 1;
        while !used.insert(file.clone()) {
            file = format!("{stem}-{k}.canonical.{ext}");
            k += 1;
        }
        write_pnm(out.join(&file), &canon.image)?;
        run.output(file.clone());
        let comps = match &canon.components {
            Some(c) => vec![
                c.theta.to_string(),
                c.log_sx.exp().to_string(),
                c.log_sy.exp().to_string(),
                c.hx.to_string(),
                c.hy.to_string(),
            ],
            None => vec![String::new(); 5],
        };
        let m = canon.matrix.to_rows();
        let mut rec = vec![path.display().to_string(), file];
        rec.extend(comps);
        rec.extend(m.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let report = String::from_utf8(w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
        .map_err(|e| Error::Format(e.to_string()))?;
    fs::write(out.join("components.csv"), &report)?;
    run.output("components.csv");
    print!("{report}");
    run.finish(out)
}

pub fn selfcheck(seed: u64, suites: &[String], inject_tanh_fault: bool) -> Result<Vec<SuiteReport>> {
    let opts = SelfcheckOptions { seed, inject_tanh_fault };
    if suites.is_empty() {
        return Ok(selfcheck::run_all(&opts));
    }
    suites
        .iter()
        .map(|s| {
            selfcheck::run_suite(s, &opts).ok_or_else(|| {
                Error::Config(format!("unknown suite {s:?}; expected one of {}", selfcheck::SUITES.join(", ")))
            })
        })
        .collect()
}

pub fn show_config(src: &ConfigSource) -> Result<String> {
    src.resolve()?.to_json()
}

/// Exit status for an error: 1 for bad input, 2 for failures while running.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Format(_) | Error::Json(_) => 1,
        _ => 2,
    }
}
