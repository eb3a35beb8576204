//! End-to-end operations on a [`RunConfig`]: generating synthetic corpora,
//! loading data, training with checkpoints and a loss log, and evaluation.
//!
//! Run directory layout:
//!
//! ```text
//! <output_dir>/config.toml     resolved configuration
//! <output_dir>/loss_log.csv
//! <output_dir>/latest.ckpt     most recent checkpoint
//! <output_dir>/step_<n>.ckpt   periodic checkpoints
//! <output_dir>/diverged.ckpt   state before a non-finite loss, if any
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;

use crate::config::{ClassifierChoice, RunConfig};
use crate::data::annotated::split_records;
use crate::data::synthetic::ORACLE_FILE;
use crate::data::{load_annotated_folder, make_synthetic, ImageRecord, Split, SyntheticOracle};
use crate::eval::{
    default_targets, emit_grid, mask_probe, param_report, train_eval_classifier, translation_error, Classifier,
    ClassifierInfo, CnnConfig, EvalReport,
};
use crate::label::LabelKind;
use crate::rng::substream;
use crate::train::log::step_of;
use crate::train::{Checkpoint, LossLog, StepOutcome, Trainer};
use crate::{Error, Result};

pub const LOG_FILE: &str = "loss_log.csv";
pub const LATEST_CKPT: &str = "latest.ckpt";
pub const DIVERGED_CKPT: &str = "diverged.ckpt";
pub const RESOLVED_CONFIG: &str = "config.toml";

/// Writes every dataset that has a synthetic recipe. Returns
/// `(name, root, image count)` per corpus written.
pub fn generate_synthetic(cfg: &RunConfig) -> Result<Vec<(String, PathBuf, usize)>> {
    let mut written = Vec::new();
    for d in &cfg.datasets {
        if let Some(spec) = cfg.synthetic_spec(d)? {
            let corpus = make_synthetic(&spec)?;
            let root = cfg.dataset_root(d);
            corpus.write(&root)?;
            written.push((d.name.clone(), root, corpus.train.len() + corpus.test.len()));
        }
    }
    if written.is_empty() {
        return Err(Error::Config("no dataset has a [datasets.synthetic] recipe".into()));
    }
    Ok(written)
}

/// Train and test records per dataset, in universe order.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub train: Vec<Vec<ImageRecord>>,
    pub test: Vec<Vec<ImageRecord>>,
}

/// Loads every dataset from disk and splits off `holdout` records with a
/// stream derived from the run seed.
pub fn load_data(cfg: &RunConfig) -> Result<LoadedData> {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    let universe = cfg.universe()?;
    for (i, d) in cfg.datasets.iter().enumerate() {
        let mut rng = substream(cfg.train.seed, "split", i as u64);
        let (tr, te) = load_annotated_folder(
            &cfg.dataset_root(d),
            universe.dataset(i),
            &cfg.preprocess(d)?,
            Split::Holdout(d.holdout),
            &mut rng,
        )?;
        train.push(tr);
        test.push(te);
    }
    Ok(LoadedData { train, test })
}

/// Same split as [`load_data`] applied to in-memory records.
pub fn split_in_memory(cfg: &RunConfig, dataset: usize, records: Vec<ImageRecord>) -> Result<(Vec<ImageRecord>, Vec<ImageRecord>)> {
    let mut rng = substream(cfg.train.seed, "split", dataset as u64);
    split_records(records, Split::Holdout(cfg.datasets[dataset].holdout), &mut rng)
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Continue from this checkpoint (must match the configuration).
    pub resume: Option<PathBuf>,
    /// Stop after this many total steps even if the schedule is longer.
    pub max_steps: Option<u64>,
    /// Called after every step.
    pub progress: Option<&'a mut dyn FnMut(&StepOutcome)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub total_steps: u64,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step_{step:08}.ckpt"))
}

/// Trains `data.train` under `cfg`, writing the run directory. Resuming
/// truncates the log to the checkpoint's step and appends from there, so an
/// interrupted run leaves the same log as an uninterrupted one.
pub fn train(cfg: &RunConfig, data: &LoadedData, mut opts: TrainOptions<'_>) -> Result<TrainSummary> {
    let dir = cfg.output_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let setup = cfg.train_setup()?;
    let log_path = dir.join(LOG_FILE);

    let (mut trainer, log_file) = match &opts.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let trainer = Trainer::resume(setup, data.train.clone(), &ckpt)?;
            let old = fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?;
            let keep: Vec<&str> = old
                .lines()
                .enumerate()
                .filter(|(i, l)| *i == 0 || step_of(l).is_some_and(|s| s <= ckpt.step))
                .map(|(_, l)| l)
                .collect();
            let mut text = keep.join("\n");
            text.push('\n');
            fs::write(&log_path, text).map_err(|e| Error::io(&log_path, e))?;
            let f = fs::OpenOptions::new().append(true).open(&log_path).map_err(|e| Error::io(&log_path, e))?;
            (trainer, LossLog::append(BufWriter::new(f)))
        }
        None => {
            let trainer = Trainer::new(setup, data.train.clone())?;
            let f = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
            let log = LossLog::create(BufWriter::new(f)).map_err(|e| Error::io(&log_path, e))?;
            (trainer, log)
        }
    };
    let resolved = dir.join(RESOLVED_CONFIG);
    fs::write(&resolved, cfg.to_toml()).map_err(|e| Error::io(&resolved, e))?;

    let mut log = log_file;
    let total = trainer.schedule().total_steps;
    let until = opts.max_steps.map_or(total, |m| m.min(total));
    let every = cfg.train.checkpoint_every;
    let result = trainer.run(until, |t, o| {
        log.record(o).map_err(|e| Error::io(&log_path, e))?;
        if let Some(p) = opts.progress.as_mut() {
            p(o);
        }
        if every > 0 && o.step % every == 0 {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            let ck = t.checkpoint();
            ck.save(&checkpoint_path(&dir, o.step))?;
            ck.save(&dir.join(LATEST_CKPT))?;
        }
        Ok(())
    });
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    if let Err(e) = result {
        if matches!(e, Error::NonFinite { .. }) {
            trainer.checkpoint().save(&dir.join(DIVERGED_CKPT))?;
        }
        return Err(e);
    }
    let latest = dir.join(LATEST_CKPT);
    trainer.checkpoint().save(&latest)?;
    Ok(TrainSummary { steps: trainer.step(), total_steps: total, checkpoint: latest, log: log_path })
}

/// The judge for dataset `i`, plus its description.
pub fn build_classifier(cfg: &RunConfig, data: &LoadedData, i: usize) -> Result<(Box<dyn Classifier>, ClassifierInfo)> {
    let d = &cfg.datasets[i];
    let universe = cfg.universe()?;
    match cfg.eval.classifier {
        ClassifierChoice::Oracle => {
            let path = cfg.dataset_root(d).join(ORACLE_FILE);
            if !path.exists() {
                return Err(Error::Eval(format!(
                    "{} not found; real datasets need eval.classifier = \"cnn\"",
                    path.display()
                )));
            }
            let oracle = SyntheticOracle::load(&path)?;
            let info = ClassifierInfo { kind: "oracle".into(), accuracy: None, trusted: true };
            Ok((Box::new(oracle), info))
        }
        ClassifierChoice::Cnn => {
            let cnn = CnnConfig { epochs: cfg.eval.cnn_epochs, seed: cfg.train.seed, ..CnnConfig::default() };
            let (clf, acc) = train_eval_classifier(&data.train[i], &data.test[i], universe.dataset(i), &cnn)?;
            let trusted = acc.is_finite() && acc >= cfg.eval.accuracy_floor;
            let info = ClassifierInfo { kind: "cnn".into(), accuracy: acc.is_finite().then_some(acc), trusted };
            Ok((Box::new(clf), info))
        }
    }
}

/// Scores a checkpoint on the held-out data and writes `report.json`,
/// `report.md`, one grid per dataset and, with several datasets, the mask
/// probe grid into `out_dir`.
pub fn evaluate(cfg: &RunConfig, data: &LoadedData, ckpt: &Checkpoint, out_dir: &Path) -> Result<EvalReport> {
    if ckpt.config_hash != cfg.hash() {
        return Err(Error::Checkpoint(format!(
            "checkpoint was written by configuration {} but this configuration is {}",
            ckpt.config_hash,
            cfg.hash()
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let universe = cfg.universe()?;
    let generator = ckpt.generator()?;
    let params = param_report(&ckpt.generator_spec, &ckpt.discriminator_spec, cfg.eval.reference_params);

    let mut classifiers = Vec::new();
    let mut infos = Vec::new();
    for i in 0..universe.n() {
        let (c, info) = build_classifier(cfg, data, i)?;
        classifiers.push(c);
        infos.push(info);
    }
    let mut translations = Vec::new();
    for i in 0..universe.n() {
        if data.test[i].is_empty() {
            continue;
        }
        let targets = default_targets(&universe, i);
        translations.push(translation_error(&generator, &universe, i, &data.test[i], &targets, classifiers[i].as_ref())?);

        let shown: Vec<(Array3<f64>, _)> = data.test[i]
            .iter()
            .take(cfg.eval.grid_inputs.max(1))
            .map(|r| Ok((r.pixels.clone(), universe.encode_unified(&r.label, i)?)))
            .collect::<Result<_>>()?;
        let grid_targets = if cfg.eval.targets.is_empty() { targets } else { cfg.eval.targets.clone() };
        let name = universe.dataset(i).name();
        emit_grid(&generator, &universe, &shown, &grid_targets, &out_dir.join(format!("grid_{name}.png")))?;
    }

    let probe = match universe.datasets().iter().position(|d| d.kind() == LabelKind::Categorical) {
        Some(b) if universe.n() >= 2 => {
            let a = (0..universe.n()).find(|&j| j != b).expect("two datasets");
            let source = if data.test[a].is_empty() { &data.train[a] } else { &data.test[a] };
            let inputs: Vec<Array3<f64>> = source.iter().map(|r| r.pixels.clone()).collect();
            let grid = out_dir.join("mask_probe.png");
            Some(mask_probe(&generator, &universe, &inputs, b, a, classifiers[b].as_ref(), Some((&grid, cfg.eval.grid_inputs)))?)
        }
        _ => None,
    };

    let classifier = ClassifierInfo {
        kind: infos[0].kind.clone(),
        accuracy: infos.iter().filter_map(|i| i.accuracy).reduce(f64::min),
        trusted: infos.iter().all(|i| i.trusted),
    };
    let report = EvalReport {
        config_hash: cfg.hash(),
        step: ckpt.step,
        params,
        classifier,
        translations,
        mask_probe: probe,
    };
    write_file(&out_dir.join("report.json"), report.to_json().as_bytes())?;
    write_file(&out_dir.join("report.md"), report.to_markdown().as_bytes())?;
    Ok(report)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}
