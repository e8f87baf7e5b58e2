//! Implementations behind each subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gazechair_core::calibration::{calibrate, CalibConfig, CalibrationOutcome, DatasetSource, FrameSource, SimUser, SourcedFrame};
use gazechair_core::classifier::{ClassifierKind, GazeClassifier};
use gazechair_core::cnn::{Network, TrainHistory};
use gazechair_core::corpus::{generate_user_corpus, load_corpus, load_user_corpus, save_corpus, user_id_for_seed, GazeClass, LabeledDataset, LabeledFrame, Scenario};
use gazechair_core::evaluation::{
    bench_latency, confusion_of, crossvalidate, emit_report, CnnTrainer, CrossValidation, LatencyStats, LbpTrainer, MetricsReport,
    PupilTrainer, ReportFormat, Trainer, WholeTemplateTrainer,
};
use gazechair_core::matchers::{LbpMatcher, PupilMatcher, WholeImageMatcher};
use gazechair_core::preprocess::to_grayscale;
use gazechair_core::session::{decode_png_b64, load_classifier, parse_script, telemetry_jsonl, ClassifierSpec, SessionConfig, SimSession};
use serde::{Deserialize, Serialize};

/// Writes `users` synthetic users numbered from `seed + 1`.
pub fn synth_gen(users: usize, frames_per_class: usize, out: &Path, seed: u64) -> Result<()> {
    for i in 0..users {
        let ds = generate_user_corpus(seed.wrapping_add(i as u64 + 1), frames_per_class);
        save_corpus(&ds, out).with_context(|| format!("writing user {}", ds.user_id))?;
        println!("{}: {} frames", ds.user_id, ds.len());
    }
    Ok(())
}

/// A corpus root holding user directories, or a single user directory.
pub fn load_users(dir: &Path) -> Result<Vec<LabeledDataset>> {
    if !dir.is_dir() {
        bail!("corpus directory {} does not exist", dir.display());
    }
    let single = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .any(|e| Scenario::from_dir_name(&e.file_name().to_string_lossy()).is_some());
    let users = if single { vec![load_user_corpus(dir)?] } else { load_corpus(dir)? };
    let users: Vec<LabeledDataset> = users.into_iter().filter(|u| !u.is_empty()).collect();
    if users.is_empty() {
        bail!("corpus directory {} holds no frames", dir.display());
    }
    Ok(users)
}

/// Training options read from `--config`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub cnn: CnnTrainer,
    pub seed: u64,
}

impl TrainSettings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
            }
        }
    }
}

pub fn history_path(model: &Path) -> PathBuf {
    model.with_extension("history.json")
}

fn write_history(model: &Path, history: &TrainHistory) -> Result<()> {
    let path = history_path(model);
    fs::write(&path, serde_json::to_string_pretty(history)?).with_context(|| format!("writing {}", path.display()))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p)?;
    }
    Ok(())
}

fn all_items(users: &[LabeledDataset]) -> Vec<&LabeledFrame> {
    users.iter().flat_map(|u| &u.items).collect()
}

fn train_cnn(items: &[&LabeledFrame], settings: &TrainSettings, out: &Path) -> Result<Network> {
    let (net, history) = settings.cnn.fit_with_history(items, settings.seed)?;
    ensure_parent(out)?;
    net.save(out)?;
    write_history(out, &history)?;
    let last = history.records.last();
    println!(
        "trained on {} frames: {} iterations, stop {:?}, train error {:.4}",
        items.len(),
        history.records.len(),
        history.stop,
        last.map_or(f64::NAN, |r| r.train_error)
    );
    Ok(net)
}

pub fn train(corpus: &Path, out: &Path, config: Option<&Path>, kind: ClassifierKind) -> Result<()> {
    let users = load_users(corpus)?;
    let settings = TrainSettings::load(config)?;
    let items = all_items(&users);
    match kind {
        ClassifierKind::Cnn => {
            train_cnn(&items, &settings, out)?;
        }
        ClassifierKind::WholeTemplate => WholeTemplateTrainer.fit(&items, settings.seed)?.model.save(out)?,
        ClassifierKind::Lbp => LbpTrainer.fit(&items, settings.seed)?.model.save(out)?,
        ClassifierKind::PupilTemplate => PupilTrainer.fit(&items, settings.seed)?.model.save(out)?,
    }
    Ok(())
}

fn load_model(kind: ClassifierKind, path: &Path) -> Result<std::sync::Arc<dyn GazeClassifier>> {
    load_classifier(&ClassifierSpec {
        kind,
        path: path.to_path_buf(),
    })
    .with_context(|| format!("loading {} model from {}", kind_name(kind), path.display()))
}

pub fn kind_name(kind: ClassifierKind) -> &'static str {
    match kind {
        ClassifierKind::Cnn => "cnn",
        ClassifierKind::WholeTemplate => "whole_template",
        ClassifierKind::PupilTemplate => "pupil_template",
        ClassifierKind::Lbp => "lbp",
    }
}

pub struct EvalOptions<'a> {
    pub corpus: &'a Path,
    pub model: Option<&'a Path>,
    pub kind: ClassifierKind,
    pub cv: usize,
    pub report: &'a Path,
    pub config: Option<&'a Path>,
    pub latency_samples: usize,
}

fn run_cv(kind: ClassifierKind, ds: &LabeledDataset, k: usize, settings: &TrainSettings) -> Result<CrossValidation> {
    Ok(match kind {
        ClassifierKind::Cnn => crossvalidate(ds, k, settings.seed, &settings.cnn)?,
        ClassifierKind::WholeTemplate => crossvalidate(ds, k, settings.seed, &WholeTemplateTrainer)?,
        ClassifierKind::Lbp => crossvalidate(ds, k, settings.seed, &LbpTrainer)?,
        ClassifierKind::PupilTemplate => crossvalidate(ds, k, settings.seed, &PupilTrainer)?,
    })
}

/// Cross-validates every user (or scores a fixed model when `cv` is 0) and
/// writes one report per user plus a pooled `all` report.
pub fn eval(opts: &EvalOptions) -> Result<Vec<MetricsReport>> {
    let users = load_users(opts.corpus)?;
    let mut settings = TrainSettings::load(opts.config)?;
    let model = opts.model.map(|p| load_model(opts.kind, p)).transpose()?;
    if opts.kind == ClassifierKind::Cnn {
        if let Some(p) = opts.model {
            settings.cnn.arch = Network::load(p)?.arch;
        }
    }
    let latency = match (&model, opts.latency_samples) {
        (Some(m), n) if n > 0 => {
            let frames: Vec<_> = users[0].items.iter().map(|i| i.frame.clone()).collect();
            Some(bench_latency(m.as_ref(), &frames, n, n.min(50))?)
        }
        _ => None,
    };
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ").to_string();
    let mut reports = Vec::new();
    let mut pooled_folds = Vec::new();
    for ds in &users {
        let cv = if opts.cv == 0 {
            let m = model.as_ref().context("--cv 0 scores a fixed model; pass --model")?;
            let items: Vec<&LabeledFrame> = ds.items.iter().collect();
            let confusion = confusion_of(m.as_ref(), &items)?;
            CrossValidation {
                folds: vec![gazechair_core::evaluation::FoldResult {
                    fold: 0,
                    train_size: 0,
                    test_size: items.len(),
                    iterations: 0,
                    train_seconds: 0.0,
                    confusion,
                }],
                confusion,
            }
        } else {
            run_cv(opts.kind, ds, opts.cv, &settings)?
        };
        let report = MetricsReport::from_cv(ds.user_id.clone(), &cv, latency)?;
        emit_report(&report, opts.report, &stamp, &[ReportFormat::Json, ReportFormat::Csv])?;
        println!(
            "{}: accuracy {:.4} over {} folds",
            ds.user_id,
            report.accuracy,
            cv.folds.len()
        );
        pooled_folds.extend(cv.folds);
        reports.push(report);
    }
    let pooled = CrossValidation {
        confusion: pooled_folds.iter().map(|f| f.confusion).sum(),
        folds: pooled_folds,
    };
    let all = MetricsReport::from_cv("all", &pooled, latency)?;
    emit_report(&all, opts.report, &stamp, &[ReportFormat::Json, ReportFormat::Csv])?;
    println!("all: accuracy {:.4}", all.accuracy);
    reports.push(all);
    Ok(reports)
}

pub fn bench(model: &Path, kind: ClassifierKind, samples: usize, warmup: usize, out: Option<&Path>) -> Result<LatencyStats> {
    let m = load_model(kind, model)?;
    let frames: Vec<_> = generate_user_corpus(1, 25).items.into_iter().map(|i| i.frame).collect();
    let stats = bench_latency(m.as_ref(), &frames, samples, warmup)?;
    let text = serde_json::to_string_pretty(&stats)?;
    println!("{text}");
    if let Some(p) = out {
        ensure_parent(p)?;
        fs::write(p, text)?;
    }
    Ok(stats)
}

pub fn simulate(config: &Path, script: &Path, out: &Path) -> Result<usize> {
    let text = fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let base = config.parent().unwrap_or(Path::new("."));
    let cfg = SessionConfig::from_json(&text)?.resolve_paths(base);
    let world = cfg.load_world(Path::new(""))?;
    let envelopes = parse_script(&fs::read_to_string(script).with_context(|| format!("reading {}", script.display()))?)?;
    let mut session = SimSession::from_config(cfg)?;
    let records = session.run_script(&envelopes, &world)?;
    ensure_parent(out)?;
    fs::write(out, telemetry_jsonl(&records)?)?;
    Ok(records.len())
}

/// Pulls frames from a running service's synthetic frame endpoint.
pub struct ServiceSource {
    client: reqwest::blocking::Client,
    base: String,
    user_seed: u64,
}

impl ServiceSource {
    pub fn new(base: &str, user_seed: u64) -> Self {
        ServiceSource {
            client: reqwest::blocking::Client::new(),
            base: base.trim_end_matches('/').to_string(),
            user_seed,
        }
    }

    fn fetch(&self, scenario: Scenario, class: GazeClass, seed: u64) -> Result<SourcedFrame> {
        #[derive(Deserialize)]
        struct Pair {
            left: String,
        }
        let pair: Pair = self
            .client
            .get(format!("{}/frames/synth", self.base))
            .query(&[
                ("left", class.to_string()),
                ("right", class.to_string()),
                ("seed", seed.to_string()),
                ("user_seed", self.user_seed.to_string()),
                ("scenario", scenario.dir_name()),
            ])
            .send()?
            .error_for_status()?
            .json()?;
        Ok(SourcedFrame {
            frame: decode_png_b64(&pair.left)?,
            tag: None,
        })
    }
}

impl FrameSource for ServiceSource {
    fn acquire_round(&mut self, scenario: Scenario, class: GazeClass, round: usize, count: usize) -> gazechair_core::Result<Vec<SourcedFrame>> {
        (0..count)
            .map(|i| {
                let seed = gazechair_core::corpus::mix(gazechair_core::corpus::mix(class.index() as u64, round as u64), i as u64);
                self.fetch(scenario, class, seed)
                    .map_err(|e| gazechair_core::Error::Calibration(format!("frame service: {e:#}")))
            })
            .collect()
    }
}

pub enum CalibSource<'a> {
    Synthetic(SimUser),
    Dir(&'a Path),
    Service { url: &'a str, user_seed: u64 },
}

pub struct CalibOptions<'a> {
    pub source: CalibSource<'a>,
    pub out: &'a Path,
    pub session_dir: Option<&'a Path>,
    pub calib_config: Option<&'a Path>,
    pub train_config: Option<&'a Path>,
}

/// Runs calibration, saves the session, then trains and scores the CNN on
/// the held-out frames.
pub fn calibrate_cmd(opts: &CalibOptions) -> Result<CalibrationOutcome> {
    let config: CalibConfig = match opts.calib_config {
        None => CalibConfig::default(),
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
    };
    let (mut source, user_id): (Box<dyn FrameSource>, String) = match &opts.source {
        CalibSource::Synthetic(u) => (Box::new(*u), user_id_for_seed(u.user_seed)),
        CalibSource::Dir(d) => {
            let ds = load_user_corpus(d).with_context(|| format!("loading {}", d.display()))?;
            let id = ds.user_id.clone();
            (Box::new(DatasetSource::new(&ds)), id)
        }
        CalibSource::Service { url, user_seed } => (Box::new(ServiceSource::new(url, *user_seed)), user_id_for_seed(*user_seed)),
    };
    let outcome = calibrate(source.as_mut(), &user_id, &config)?;
    let session_dir = opts
        .session_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| opts.out.with_extension("session"));
    outcome.save(&session_dir)?;
    for s in &outcome.manifest.scenarios {
        let v = s.vetting.last().expect("accepted scenarios have a vetting record");
        println!(
            "{}: accepted at {:.3} after {} vetting rounds, {} acquisitions",
            s.scenario.dir_name(),
            v.score.accuracy,
            s.vetting.len(),
            s.acquisitions
        );
    }
    let settings = TrainSettings::load(opts.train_config)?;
    let train_items: Vec<&LabeledFrame> = outcome.train.items.iter().collect();
    let net = train_cnn(&train_items, &settings, opts.out)?;
    let test_items: Vec<&LabeledFrame> = outcome.test.items.iter().collect();
    let cm = confusion_of(&net, &test_items)?;
    println!("held-out accuracy {:.4} on {} frames", cm.accuracy()?, test_items.len());
    Ok(outcome)
}

/// Template artifacts straight from chosen frames, for tests and demos.
pub fn save_templates(kind: ClassifierKind, frames: [&gazechair_core::EyeFrame; 4], dir: &Path) -> Result<()> {
    match kind {
        ClassifierKind::WholeTemplate => WholeImageMatcher::from_frames(frames)?.save(dir)?,
        ClassifierKind::Lbp => LbpMatcher::new(frames.map(to_grayscale))?.save(dir)?,
        ClassifierKind::PupilTemplate => PupilMatcher::from_forward_frame(&to_grayscale(frames[1]))?.save(dir)?,
        ClassifierKind::Cnn => bail!("a CNN is trained, not built from templates"),
    }
    Ok(())
}
