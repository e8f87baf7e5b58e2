//! Cross-validation, confusion matrices, latency measurement and reports.

use std::fs;
use std::ops::{Add, AddAssign};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::GazeClassifier;
use crate::cnn::{self, Architecture, Network, Sample, TrainConfig};
use crate::corpus::{mix, GazeClass, LabeledDataset, LabeledFrame};
use crate::error::{Error, Result};
use crate::frame::EyeFrame;
use crate::matchers::{LbpMatcher, PupilMatcher, WholeImageMatcher};
use crate::preprocess::to_grayscale;

/// Counts indexed `[predicted][actual]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 4]; 4],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, predicted: GazeClass, actual: GazeClass) {
        self.counts[predicted.index()][actual.index()] += 1;
    }

    pub fn get(&self, predicted: GazeClass, actual: GazeClass) -> u64 {
        self.counts[predicted.index()][actual.index()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..4).map(|i| self.counts[i][i]).sum()
    }

    pub fn actual_totals(&self) -> [u64; 4] {
        std::array::from_fn(|a| (0..4).map(|p| self.counts[p][a]).sum())
    }

    pub fn accuracy(&self) -> Result<f64> {
        match self.total() {
            0 => Err(Error::InvalidParameter("accuracy of an empty confusion matrix".into())),
            n => Ok(self.trace() as f64 / n as f64),
        }
    }

    /// Column percentages in hundredths of a percent, rounded so each
    /// non-empty column sums to exactly 100.00. Leftover hundredths go to
    /// the cells with the largest rounding remainders, earlier rows first
    /// on ties. Empty columns stay zero.
    pub fn normalized_hundredths(&self) -> [[u32; 4]; 4] {
        let totals = self.actual_totals();
        let mut out = [[0u32; 4]; 4];
        for a in 0..4 {
            let n = totals[a] as u128;
            if n == 0 {
                continue;
            }
            let mut rems = [(0u128, 0usize); 4];
            let mut assigned = 0u32;
            for p in 0..4 {
                let scaled = self.counts[p][a] as u128 * 10_000;
                out[p][a] = (scaled / n) as u32;
                assigned += out[p][a];
                rems[p] = (scaled % n, p);
            }
            rems.sort_by(|x, y| y.0.cmp(&x.0).then(x.1.cmp(&y.1)));
            for &(_, p) in rems.iter().take((10_000 - assigned) as usize) {
                out[p][a] += 1;
            }
        }
        out
    }

    /// Column percentages rounded to two decimals.
    pub fn normalized(&self) -> [[f64; 4]; 4] {
        self.normalized_hundredths().map(|row| row.map(|h| h as f64 / 100.0))
    }
}

impl AddAssign for ConfusionMatrix {
    fn add_assign(&mut self, rhs: Self) {
        for p in 0..4 {
            for a in 0..4 {
                self.counts[p][a] += rhs.counts[p][a];
            }
        }
    }
}

impl Add for ConfusionMatrix {
    type Output = ConfusionMatrix;

    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

impl std::iter::Sum for ConfusionMatrix {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Classifies every frame and tallies the results.
pub fn confusion_of(classifier: &dyn GazeClassifier, items: &[&LabeledFrame]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new();
    for item in items {
        cm.record(classifier.classify(&item.frame)?.class, item.class);
    }
    Ok(cm)
}

/// Splits item indices into `k` stratified validation folds.
///
/// Each class is shuffled with its own seeded stream and dealt round-robin,
/// continuing where the previous class stopped, so folds differ by at most
/// one item per class and at most one item overall.
pub fn stratified_folds(labels: &[GazeClass], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 || labels.len() < k {
        return Err(Error::InvalidParameter(format!(
            "cannot make {k} folds from {} items",
            labels.len()
        )));
    }
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for class in GazeClass::ALL {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, class.index() as u64)));
        for i in idx {
            folds[next % k].push(i);
            next += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// A trained model plus how long fitting took, in iterations.
#[derive(Debug, Clone)]
pub struct Fitted<M> {
    pub model: M,
    pub iterations: usize,
}

/// Builds a classifier from labelled frames.
pub trait Trainer: Sync {
    type Model: GazeClassifier;

    fn fit(&self, items: &[&LabeledFrame], seed: u64) -> Result<Fitted<Self::Model>>;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub iterations: usize,
    pub train_seconds: f64,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossValidation {
    pub folds: Vec<FoldResult>,
    pub confusion: ConfusionMatrix,
}

impl CrossValidation {
    pub fn accuracy(&self) -> Result<f64> {
        self.confusion.accuracy()
    }
}

/// k-fold cross-validation; `k = 1` means a single stratified 80/20 holdout.
/// Folds are trained in parallel and reported in fold order.
pub fn crossvalidate<T: Trainer>(dataset: &LabeledDataset, k: usize, seed: u64, trainer: &T) -> Result<CrossValidation> {
    let labels: Vec<GazeClass> = dataset.items.iter().map(|i| i.class).collect();
    let folds = if k == 1 {
        stratified_folds(&labels, 5, seed)?.into_iter().take(1).collect()
    } else {
        stratified_folds(&labels, k, seed)?
    };
    let results: Vec<Result<FoldResult>> = folds
        .par_iter()
        .enumerate()
        .map(|(f, held_out)| {
            let mut is_test = vec![false; dataset.len()];
            for &i in held_out {
                is_test[i] = true;
            }
            let train: Vec<&LabeledFrame> = dataset.items.iter().enumerate().filter(|(i, _)| !is_test[*i]).map(|(_, x)| x).collect();
            let test: Vec<&LabeledFrame> = held_out.iter().map(|&i| &dataset.items[i]).collect();
            let start = Instant::now();
            let fitted = trainer.fit(&train, mix(seed, 1000 + f as u64))?;
            let train_seconds = start.elapsed().as_secs_f64();
            Ok(FoldResult {
                fold: f,
                train_size: train.len(),
                test_size: test.len(),
                iterations: fitted.iterations,
                train_seconds,
                confusion: confusion_of(&fitted.model, &test)?,
            })
        })
        .collect();
    let folds = results.into_iter().collect::<Result<Vec<_>>>()?;
    let confusion = folds.iter().map(|f| f.confusion).sum();
    Ok(CrossValidation { folds, confusion })
}

/// Trains the CNN from a seeded uniform initialization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CnnTrainer {
    pub arch: Architecture,
    pub config: TrainConfig,
    /// Initial weights are drawn from `[-init_scale, init_scale]`.
    pub init_scale: f64,
}

impl Default for CnnTrainer {
    fn default() -> Self {
        CnnTrainer {
            arch: Architecture::standard(),
            config: TrainConfig::default(),
            init_scale: 0.1,
        }
    }
}

impl CnnTrainer {
    pub fn fit_with_history(&self, items: &[&LabeledFrame], seed: u64) -> Result<(Network, cnn::TrainHistory)> {
        let samples: Vec<Sample> = items
            .par_iter()
            .map(|i| Sample::from_frame(&i.frame, i.class, &self.arch))
            .collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let mut net = Network::random(self.arch, seed, self.init_scale)?;
        let history = cnn::train(&mut net, &refs, &self.config);
        Ok((net, history))
    }
}

impl Trainer for CnnTrainer {
    type Model = Network;

    fn fit(&self, items: &[&LabeledFrame], seed: u64) -> Result<Fitted<Network>> {
        let (model, history) = self.fit_with_history(items, seed)?;
        Ok(Fitted {
            model,
            iterations: history.records.len(),
        })
    }
}

/// Picks one uniformly random frame per class from the training items.
fn random_templates(items: &[&LabeledFrame], seed: u64) -> Result<[EyeFrame; 4]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |class: GazeClass| {
        let pool: Vec<&&LabeledFrame> = items.iter().filter(|i| i.class == class).collect();
        pool.choose(&mut rng)
            .map(|i| i.frame.clone())
            .ok_or(Error::EmptyClass(class))
    };
    Ok([
        pick(GazeClass::Right)?,
        pick(GazeClass::Forward)?,
        pick(GazeClass::Left)?,
        pick(GazeClass::Closed)?,
    ])
}

/// Whole-image templates: one random training frame per class.
#[derive(Debug, Clone, Copy, Default)]
pub struct WholeTemplateTrainer;

impl Trainer for WholeTemplateTrainer {
    type Model = WholeImageMatcher;

    fn fit(&self, items: &[&LabeledFrame], seed: u64) -> Result<Fitted<WholeImageMatcher>> {
        let t = random_templates(items, seed)?;
        Ok(Fitted {
            model: WholeImageMatcher::new(t.each_ref().map(to_grayscale))?,
            iterations: 0,
        })
    }
}

/// LBP templates: one random training frame per class.
#[derive(Debug, Clone, Copy, Default)]
pub struct LbpTrainer;

impl Trainer for LbpTrainer {
    type Model = LbpMatcher;

    fn fit(&self, items: &[&LabeledFrame], seed: u64) -> Result<Fitted<LbpMatcher>> {
        let t = random_templates(items, seed)?;
        Ok(Fitted {
            model: LbpMatcher::new(t.each_ref().map(to_grayscale))?,
            iterations: 0,
        })
    }
}

/// Pupil patch cut from one random Forward training frame.
#[derive(Debug, Clone, Copy, Default)]
pub struct PupilTrainer;

impl Trainer for PupilTrainer {
    type Model = PupilMatcher;

    fn fit(&self, items: &[&LabeledFrame], seed: u64) -> Result<Fitted<PupilMatcher>> {
        let t = random_templates(items, seed)?;
        Ok(Fitted {
            model: PupilMatcher::from_forward_frame(&to_grayscale(&t[GazeClass::Forward.index()]))?,
            iterations: 0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub samples: usize,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub mean_ms: f64,
    pub fps: f64,
}

fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// Times `classify` (preprocessing included) on the calling thread.
///
/// Frames are visited round-robin until `samples` timings are collected,
/// after `warmup` untimed calls.
pub fn bench_latency(classifier: &dyn GazeClassifier, frames: &[EyeFrame], samples: usize, warmup: usize) -> Result<LatencyStats> {
    if frames.is_empty() || samples == 0 {
        return Err(Error::InvalidParameter("latency benchmark needs frames and samples".into()));
    }
    for f in frames.iter().cycle().take(warmup) {
        std::hint::black_box(classifier.classify(f)?);
    }
    let mut times = Vec::with_capacity(samples);
    for f in frames.iter().cycle().take(samples) {
        let start = Instant::now();
        std::hint::black_box(classifier.classify(std::hint::black_box(f))?);
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(latency_from_ms(times))
}

/// Summarizes per-frame timings in milliseconds.
pub fn latency_from_ms(mut times: Vec<f64>) -> LatencyStats {
    times.sort_by(f64::total_cmp);
    let mean_ms = times.iter().sum::<f64>() / times.len() as f64;
    LatencyStats {
        samples: times.len(),
        median_ms: nearest_rank(&times, 0.5),
        p95_ms: nearest_rank(&times, 0.95),
        mean_ms,
        fps: 1e3 / mean_ms,
    }
}

/// Worst-case training time in seconds: every item visited in every iteration.
pub fn estimate_training_seconds(items: usize, iterations: usize, ms_per_item_iteration: f64) -> f64 {
    items as f64 * iterations as f64 * ms_per_item_iteration / 1e3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub user: String,
    pub accuracy: f64,
    /// Counts, rows predicted and columns actual.
    pub confusion: ConfusionMatrix,
    /// Column percentages, same orientation, two decimals.
    pub normalized: [[f64; 4]; 4],
    pub fold_accuracies: Vec<f64>,
    pub latency: Option<LatencyStats>,
    pub training_seconds: f64,
}

impl MetricsReport {
    pub fn from_cv(user: impl Into<String>, cv: &CrossValidation, latency: Option<LatencyStats>) -> Result<Self> {
        Ok(MetricsReport {
            user: user.into(),
            accuracy: cv.accuracy()?,
            confusion: cv.confusion,
            normalized: cv.confusion.normalized(),
            fold_accuracies: cv.folds.iter().map(|f| f.confusion.accuracy()).collect::<Result<_>>()?,
            latency,
            training_seconds: cv.folds.iter().map(|f| f.train_seconds).sum(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl ReportFormat {
    fn extension(self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
        }
    }
}

/// Writes `report_<user>_<timestamp>.<ext>` into `dir` for each format.
/// The CSV holds the normalized confusion matrix: a header and one row per
/// predicted class.
pub fn emit_report(report: &MetricsReport, dir: &Path, timestamp: &str, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for &format in formats {
        let path = dir.join(format!("report_{}_{}.{}", report.user, timestamp, format.extension()));
        match format {
            ReportFormat::Json => {
                let text = serde_json::to_string_pretty(report)?;
                fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            }
            ReportFormat::Csv => {
                let mut w = csv::Writer::from_path(&path)?;
                let mut header = vec!["predicted".to_string()];
                header.extend(GazeClass::ALL.iter().map(|c| c.to_string()));
                w.write_record(&header)?;
                for (class, row) in GazeClass::ALL.iter().zip(report.normalized) {
                    let mut rec = vec![class.to_string()];
                    rec.extend(row.iter().map(|v| format!("{v:.2}")));
                    w.write_record(&rec)?;
                }
                w.flush().map_err(|e| Error::io(&path, e))?;
            }
        }
        written.push(path);
    }
    Ok(written)
}

pub fn load_report(path: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
