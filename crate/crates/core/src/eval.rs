//! Multi-run evaluation protocol: train freshly initialized models on a
//! small training set, test on real held-out data, report mean and spread.

use std::path::Path;

use gencond_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::condense::{synthesize_set, CondensedModel};
use crate::data::{LabeledDataset, SyntheticSet};
use crate::error::{Error, Result};
use crate::nn::{Arch, Classifier};
use crate::train::{accuracy, train_classifier, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub runs: usize,
    pub epochs: usize,
    pub arch: String,
    /// Channel width of ConvNet evaluation models.
    pub width: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed_base: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            runs: 20,
            epochs: 300,
            arch: "convnet3".into(),
            width: 128,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 256,
            seed_base: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 || self.epochs == 0 || self.batch_size == 0 || self.width == 0 {
            return Err(Error::Config("eval runs, epochs, batch_size and width must be >= 1".into()));
        }
        self.arch.parse::<Arch>()?;
        Ok(())
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            momentum: self.momentum,
            batch_size: self.batch_size,
        }
    }
}

/// Trains one model from scratch and returns its test accuracy.
pub trait RunTrainer {
    fn train_and_test(&self, seed: u64, images: &Tensor, labels: &[usize], test: &LabeledDataset) -> Result<f64>;
}

/// The standard trainer: fresh zoo model, SGD with momentum, linear decay.
#[derive(Clone, Debug)]
pub struct SgdTrainer {
    pub arch: Arch,
    pub width: usize,
    pub train: TrainConfig,
}

impl SgdTrainer {
    pub fn from_config(cfg: &EvalConfig) -> Result<Self> {
        Ok(Self {
            arch: cfg.arch.parse()?,
            width: cfg.width,
            train: cfg.train(),
        })
    }
}

impl RunTrainer for SgdTrainer {
    fn train_and_test(&self, seed: u64, images: &Tensor, labels: &[usize], test: &LabeledDataset) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Classifier::new(self.arch, test.image_shape(), test.num_classes, self.width, &mut rng)?;
        train_classifier(&mut model, images, labels, &self.train, &mut rng)?;
        accuracy(&model, &test.images, &test.labels)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub method: String,
    pub ipc: usize,
    pub arch: String,
    /// Test accuracy per run, in seed order.
    pub per_run_acc: Vec<f64>,
    pub seeds: Vec<u64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub config: EvalConfig,
}

/// Mean and population standard deviation, computed over the sorted values
/// so that the result does not depend on run order.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn check_compatible(set: &SyntheticSet, test: &LabeledDataset) -> Result<()> {
    if set.num_classes != test.num_classes {
        return Err(Error::Argument(format!(
            "training set has {} classes, test set {}",
            set.num_classes, test.num_classes
        )));
    }
    if set.images.shape()[1..] != test.images.shape()[1..] {
        return Err(Error::Shape(format!(
            "training images {:?} vs test images {:?}",
            &set.images.shape()[1..],
            &test.images.shape()[1..]
        )));
    }
    let mut seen = vec![false; set.num_classes];
    for &y in &set.labels {
        seen[y] = true;
    }
    if let Some(c) = seen.iter().position(|s| !s) {
        return Err(Error::Argument(format!("class {c} has no training images")));
    }
    Ok(())
}

/// Runs one training per seed with `trainer`.
pub fn evaluate_seeds(
    trainer: &dyn RunTrainer,
    set: &SyntheticSet,
    test: &LabeledDataset,
    cfg: &EvalConfig,
    seeds: &[u64],
) -> Result<EvalReport> {
    check_compatible(set, test)?;
    let mut accs = Vec::with_capacity(seeds.len());
    for (r, &seed) in seeds.iter().enumerate() {
        let acc = trainer.train_and_test(seed, &set.images, &set.labels, test)?;
        log::debug!("run {r} seed {seed}: accuracy {acc:.4}");
        accs.push(acc);
    }
    let (mean, std) = mean_std(&accs);
    Ok(EvalReport {
        dataset: test.name.clone(),
        method: String::new(),
        ipc: set.ipc,
        arch: cfg.arch.clone(),
        per_run_acc: accs,
        seeds: seeds.to_vec(),
        mean,
        std,
        config: cfg.clone(),
    })
}

pub fn evaluate_with(
    trainer: &dyn RunTrainer,
    set: &SyntheticSet,
    test: &LabeledDataset,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    let seeds: Vec<u64> = (0..cfg.runs as u64).map(|r| cfg.seed_base + r).collect();
    evaluate_seeds(trainer, set, test, cfg, &seeds)
}

/// The standard protocol with the configured architecture.
pub fn evaluate(set: &SyntheticSet, test: &LabeledDataset, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    evaluate_with(&SgdTrainer::from_config(cfg)?, set, test, cfg)
}

/// One evaluation per architecture on the same synthesized set.
pub fn cross_arch_eval(
    model: &CondensedModel,
    test: &LabeledDataset,
    archs: &[String],
    ipc: usize,
    cfg: &EvalConfig,
) -> Result<Vec<EvalReport>> {
    if archs.is_empty() {
        return Err(Error::Argument("no architectures given".into()));
    }
    for a in archs {
        a.parse::<Arch>()?;
    }
    let set = synthesize_set(model, ipc)?;
    archs
        .iter()
        .map(|a| {
            let cfg = EvalConfig {
                arch: a.clone(),
                ..cfg.clone()
            };
            let mut report = evaluate(&set, test, &cfg)?;
            report.method = "condensed".into();
            Ok(report)
        })
        .collect()
}

/// One row of the summary table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub method: String,
    pub ipc: usize,
    pub arch: String,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
    pub epochs: usize,
    pub run_id: String,
}

impl ResultRow {
    pub fn from_report(report: &EvalReport, run_id: impl Into<String>) -> Self {
        Self {
            dataset: report.dataset.clone(),
            method: report.method.clone(),
            ipc: report.ipc,
            arch: report.arch.clone(),
            mean: report.mean,
            std: report.std,
            runs: report.per_run_acc.len(),
            epochs: report.config.epochs,
            run_id: run_id.into(),
        }
    }
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    r.deserialize()
        .map(|row| {
            row.map_err(|e| Error::Load {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Sorts rows by `(dataset, ipc, method)`, keeping duplicates in input order.
pub fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| (&a.dataset, a.ipc, &a.method).cmp(&(&b.dataset, b.ipc, &b.method)));
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[0.5, 0.7]);
        assert!((m - 0.6).abs() < 1e-15);
        assert!((s - 0.1).abs() < 1e-15);
        assert_eq!(mean_std(&[0.42]), (0.42, 0.0));
    }
}
