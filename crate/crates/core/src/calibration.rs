//! Per-user calibration: acquisition, template vetting, blink cleaning and
//! the train/test split that feeds the CNN.
//!
//! For every scenario the user is asked for each class in three separate
//! rounds of 200 frames, interleaved across classes, giving 600 frames per
//! class. One random frame per class becomes that class's whole-image
//! template, and the templates must classify the pooled frames with at
//! least 80% accuracy. Classes below the threshold get a fresh random
//! template; after three reselections the scenario is acquired again. An
//! accepted scenario is cleaned by keeping the 500 frames per class that
//! correlate best with their own template, and those split 400/100.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{jittered_params, mix, save_corpus, synth_eye, EyeProfile, GazeClass, LabeledDataset, LabeledFrame, Scenario};
use crate::error::{Error, Result};
use crate::frame::{EyeFrame, EyeSide, GrayImage};
use crate::matchers::WholeImageMatcher;
use crate::preprocess::{hist_equalize, to_grayscale};

/// What a frame really shows, when the source knows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameTag {
    /// The requested class.
    Clean,
    /// Eyes shut while an open class was requested.
    Blink,
    /// The user was still holding the previously requested class.
    Lag,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourcedFrame {
    pub frame: EyeFrame,
    /// `None` for sources without ground truth, such as recorded files.
    pub tag: Option<FrameTag>,
}

/// Supplies frames while the user is asked to hold `class`.
pub trait FrameSource {
    /// Returns exactly `count` frames for one acquisition round, or
    /// [`Error::SourceExhausted`].
    fn acquire_round(&mut self, scenario: Scenario, class: GazeClass, round: usize, count: usize) -> Result<Vec<SourcedFrame>>;
}

/// A synthetic user with configurable blinking and reaction lag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimUser {
    pub user_seed: u64,
    /// Probability that a frame of an open class shows closed eyes.
    pub blink_rate: f64,
    /// Frames at the start of each round that still show the class asked
    /// for previously (the class before `class` in canonical order).
    pub lag_frames: usize,
    pub noise_sigma: (f64, f64),
    /// When set, every open class is rendered looking this way instead.
    pub fixed_gaze: Option<GazeClass>,
}

impl Default for SimUser {
    fn default() -> Self {
        SimUser {
            user_seed: 1,
            blink_rate: 0.0,
            lag_frames: 0,
            noise_sigma: (2.0, 4.0),
            fixed_gaze: None,
        }
    }
}

impl SimUser {
    pub fn new(user_seed: u64) -> Self {
        SimUser {
            user_seed,
            ..Default::default()
        }
    }
}

fn previous_class(class: GazeClass) -> GazeClass {
    GazeClass::ALL[(class.index() + 3) % 4]
}

impl FrameSource for SimUser {
    fn acquire_round(&mut self, scenario: Scenario, class: GazeClass, round: usize, count: usize) -> Result<Vec<SourcedFrame>> {
        if !(0.0..=1.0).contains(&self.blink_rate) {
            return Err(Error::InvalidParameter("blink_rate must lie in [0, 1]".into()));
        }
        let profile = EyeProfile::for_user(self.user_seed);
        let scen_idx = Scenario::ALL.iter().position(|s| *s == scenario).unwrap_or(0) as u64;
        let stream = mix(mix(self.user_seed, 0xCA11B), mix(scen_idx, mix(class.index() as u64, round as u64)));
        (0..count)
            .into_par_iter()
            .map(|i| {
                let seed = mix(stream, i as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let blink = class.is_open() && rng.random::<f64>() < self.blink_rate;
                let (shown, tag) = if i < self.lag_frames {
                    (previous_class(class), FrameTag::Lag)
                } else if blink {
                    (GazeClass::Closed, FrameTag::Blink)
                } else {
                    (class, FrameTag::Clean)
                };
                let shown = match (self.fixed_gaze, shown.is_open()) {
                    (Some(g), true) => g,
                    _ => shown,
                };
                let params = jittered_params(shown, scenario, profile, self.noise_sigma, seed);
                Ok(SourcedFrame {
                    frame: synth_eye(&params)?.with_side(EyeSide::Left),
                    tag: Some(tag),
                })
            })
            .collect()
    }
}

/// Serves recorded frames of one user, in order, without ground truth.
#[derive(Debug, Clone)]
pub struct DatasetSource {
    pools: Vec<((Scenario, GazeClass), Vec<EyeFrame>)>,
    cursor: Vec<usize>,
}

impl DatasetSource {
    pub fn new(dataset: &LabeledDataset) -> Self {
        let mut pools: Vec<((Scenario, GazeClass), Vec<EyeFrame>)> = Vec::new();
        for item in &dataset.items {
            let key = (item.scenario, item.class);
            match pools.iter_mut().find(|(k, _)| *k == key) {
                Some((_, v)) => v.push(item.frame.clone()),
                None => pools.push((key, vec![item.frame.clone()])),
            }
        }
        let cursor = vec![0; pools.len()];
        DatasetSource { pools, cursor }
    }
}

impl FrameSource for DatasetSource {
    fn acquire_round(&mut self, scenario: Scenario, class: GazeClass, _round: usize, count: usize) -> Result<Vec<SourcedFrame>> {
        let Some(i) = self.pools.iter().position(|(k, _)| *k == (scenario, class)) else {
            return Err(Error::SourceExhausted { got: 0, wanted: count });
        };
        let pool = &self.pools[i].1;
        let start = self.cursor[i];
        if pool.len() - start < count {
            return Err(Error::SourceExhausted {
                got: pool.len() - start,
                wanted: count,
            });
        }
        self.cursor[i] += count;
        Ok(pool[start..start + count]
            .iter()
            .map(|f| SourcedFrame { frame: f.clone(), tag: None })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibConfig {
    pub rounds: usize,
    pub frames_per_round: usize,
    /// Frames per class kept after cleaning.
    pub keep: usize,
    /// Of the kept frames, how many per class go to training.
    pub train_per_class: usize,
    pub threshold: f64,
    pub max_reselections: usize,
    /// Extra acquisitions of a scenario before calibration gives up.
    pub max_reacquisitions: usize,
    pub scenarios: Vec<Scenario>,
    pub seed: u64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        CalibConfig {
            rounds: 3,
            frames_per_round: 200,
            keep: 500,
            train_per_class: 400,
            threshold: 0.80,
            max_reselections: 3,
            max_reacquisitions: 2,
            scenarios: Scenario::ALL.to_vec(),
            seed: 0,
        }
    }
}

impl CalibConfig {
    pub fn per_class(&self) -> usize {
        self.rounds * self.frames_per_round
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        if self.rounds == 0 || self.frames_per_round == 0 {
            return bad("acquisition needs at least one non-empty round");
        }
        if self.keep == 0 || self.keep > self.per_class() {
            return bad("keep must lie in 1..=rounds*frames_per_round");
        }
        if self.train_per_class > self.keep {
            return bad("train_per_class cannot exceed keep");
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad("threshold must lie in [0, 1]");
        }
        if self.scenarios.is_empty() {
            return bad("at least one scenario is required");
        }
        Ok(())
    }
}

/// Frames acquired for one scenario, per class in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct Acquisition {
    pub scenario: Scenario,
    pub frames: [Vec<SourcedFrame>; 4],
    /// Start offset of each round within a class's frames.
    pub round_starts: Vec<usize>,
}

/// Runs `config.rounds` rounds, each asking for every class in turn.
pub fn acquire(source: &mut dyn FrameSource, scenario: Scenario, config: &CalibConfig, attempt: usize) -> Result<Acquisition> {
    let mut frames: [Vec<SourcedFrame>; 4] = Default::default();
    let mut round_starts = Vec::with_capacity(config.rounds);
    for r in 0..config.rounds {
        round_starts.push(r * config.frames_per_round);
        for class in GazeClass::ALL {
            let round = attempt * config.rounds + r;
            let got = source.acquire_round(scenario, class, round, config.frames_per_round)?;
            if got.len() != config.frames_per_round {
                return Err(Error::SourceExhausted {
                    got: got.len(),
                    wanted: config.frames_per_round,
                });
            }
            frames[class.index()].extend(got);
        }
    }
    Ok(Acquisition {
        scenario,
        frames,
        round_starts,
    })
}

/// Uniform random index into a non-empty set of `len` frames.
pub fn select_template(len: usize, rng: &mut impl Rng) -> Result<usize> {
    if len == 0 {
        return Err(Error::Calibration("cannot pick a template from no frames".into()));
    }
    Ok(rng.random_range(0..len))
}

/// Grayscale and equalized views of an acquisition, computed once.
struct Prepared {
    gray: [Vec<GrayImage>; 4],
    equalized: [Vec<GrayImage>; 4],
}

impl Prepared {
    fn new(acq: &Acquisition) -> Self {
        let gray: [Vec<GrayImage>; 4] = std::array::from_fn(|c| acq.frames[c].par_iter().map(|f| to_grayscale(&f.frame)).collect());
        let equalized = std::array::from_fn(|c| gray[c].par_iter().map(hist_equalize).collect());
        Prepared { gray, equalized }
    }

    fn matcher(&self, templates: [usize; 4]) -> Result<WholeImageMatcher> {
        WholeImageMatcher::new(std::array::from_fn(|c| self.gray[c][templates[c]].clone()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    ReselectTemplate,
    Reacquire,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VetScore {
    pub accuracy: f64,
    pub class_accuracy: [f64; 4],
}

/// Accept at or above the threshold; otherwise reselect until the
/// reselection budget is spent, then reacquire.
pub fn decide(accuracy: f64, threshold: f64, reselections_done: usize, max_reselections: usize) -> Verdict {
    if accuracy >= threshold {
        Verdict::Accept
    } else if reselections_done < max_reselections {
        Verdict::ReselectTemplate
    } else {
        Verdict::Reacquire
    }
}

/// Classifies every frame against the templates and scores each class by
/// the fraction of its own frames labelled correctly.
pub fn vet(frames: &[Vec<GrayImage>; 4], matcher: &WholeImageMatcher) -> Result<VetScore> {
    let mut correct = [0usize; 4];
    let mut total = 0;
    for class in GazeClass::ALL {
        let own = &frames[class.index()];
        correct[class.index()] = own
            .par_iter()
            .map(|g| matcher.classify_gray(g).map(|m| usize::from(m.class == class)))
            .sum::<Result<usize>>()?;
        total += own.len();
    }
    if total == 0 {
        return Err(Error::Calibration("nothing to vet".into()));
    }
    Ok(VetScore {
        accuracy: correct.iter().sum::<usize>() as f64 / total as f64,
        class_accuracy: std::array::from_fn(|c| {
            let n = frames[c].len();
            if n == 0 { 0.0 } else { correct[c] as f64 / n as f64 }
        }),
    })
}

fn vet_prepared(p: &Prepared, matcher: &WholeImageMatcher) -> Result<VetScore> {
    vet(&p.gray, matcher)
}

/// Indices of the `keep` frames scoring highest against `template`, in
/// descending score order, earlier frames first on equal scores.
pub fn clean(equalized: &[GrayImage], template: &GrayImage, keep: usize) -> Result<Vec<usize>> {
    if equalized.len() < keep {
        return Err(Error::Calibration(format!("cleaning needs {keep} frames, got {}", equalized.len())));
    }
    let t = hist_equalize(template);
    let scores = equalized
        .par_iter()
        .map(|e| crate::matchers::correlate_at(&t, e, 0, 0))
        .collect::<Result<Vec<u64>>>()?;
    let mut order: Vec<usize> = (0..equalized.len()).collect();
    order.sort_by(|&a, &b| scores[b].cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(keep);
    Ok(order)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VetRecord {
    pub acquisition: usize,
    pub templates: [usize; 4],
    pub score: VetScore,
    pub verdict: Verdict,
}

/// The accepted outcome for one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSession {
    pub scenario: Scenario,
    pub acquisitions: usize,
    /// Frames per class in the final acquisition.
    pub acquired: [usize; 4],
    pub vetting: Vec<VetRecord>,
    /// Template index per class into the final acquisition.
    pub templates: [usize; 4],
    pub round_starts: Vec<usize>,
    /// Kept indices per class into the final acquisition, best first.
    pub retained: [Vec<usize>; 4],
    /// Kept frames per class, parallel to `retained`.
    pub frames: [Vec<SourcedFrame>; 4],
}

impl ScenarioSession {
    /// Ground-truth tags of the kept frames that are not clean.
    pub fn contaminated(&self) -> usize {
        self.frames.iter().flatten().filter(|f| matches!(f.tag, Some(t) if t != FrameTag::Clean)).count()
    }
}

/// Acquire, vet and clean one scenario.
pub fn calibrate_scenario(source: &mut dyn FrameSource, scenario: Scenario, config: &CalibConfig) -> Result<ScenarioSession> {
    config.validate()?;
    let scen_idx = Scenario::ALL.iter().position(|s| *s == scenario).unwrap_or(0) as u64;
    let mut vetting = Vec::new();
    for attempt in 0..=config.max_reacquisitions {
        let acq = acquire(source, scenario, config, attempt)?;
        let prepared = Prepared::new(&acq);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(config.seed, scen_idx), attempt as u64));
        let mut templates = [0usize; 4];
        for c in 0..4 {
            templates[c] = select_template(acq.frames[c].len(), &mut rng)?;
        }
        let mut reselections = 0;
        loop {
            let score = vet_prepared(&prepared, &prepared.matcher(templates)?)?;
            let verdict = decide(score.accuracy, config.threshold, reselections, config.max_reselections);
            vetting.push(VetRecord {
                acquisition: attempt,
                templates,
                score,
                verdict,
            });
            match verdict {
                Verdict::Accept => {
                    let mut retained: [Vec<usize>; 4] = Default::default();
                    for c in 0..4 {
                        retained[c] = clean(&prepared.equalized[c], &prepared.gray[c][templates[c]], config.keep)?;
                    }
                    let acquired = std::array::from_fn(|c| acq.frames[c].len());
                    let mut frames = acq.frames;
                    let kept: [Vec<SourcedFrame>; 4] = std::array::from_fn(|c| {
                        let mut slots: Vec<Option<SourcedFrame>> = std::mem::take(&mut frames[c]).into_iter().map(Some).collect();
                        retained[c].iter().map(|&i| slots[i].take().expect("indices are distinct")).collect()
                    });
                    return Ok(ScenarioSession {
                        scenario,
                        acquisitions: attempt + 1,
                        acquired,
                        vetting,
                        templates,
                        round_starts: acq.round_starts,
                        retained,
                        frames: kept,
                    });
                }
                Verdict::ReselectTemplate => {
                    reselections += 1;
                    for c in 0..4 {
                        if score.class_accuracy[c] < config.threshold {
                            templates[c] = select_template(acq.frames[c].len(), &mut rng)?;
                        }
                    }
                }
                Verdict::Reacquire => break,
            }
        }
    }
    Err(Error::Calibration(format!(
        "scenario {} failed vetting after {} acquisitions",
        scenario.dir_name(),
        config.max_reacquisitions + 1
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRecord {
    pub scenario: Scenario,
    pub acquisitions: usize,
    pub acquired: [usize; 4],
    pub vetting: Vec<VetRecord>,
    pub templates: [usize; 4],
    pub round_starts: Vec<usize>,
    pub retained: [Vec<usize>; 4],
    /// Per class, indices into the final acquisition sent to training.
    pub train: [Vec<usize>; 4],
    pub test: [Vec<usize>; 4],
}

/// Everything needed to audit or reproduce a calibration run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionManifest {
    pub user_id: String,
    pub config: CalibConfig,
    pub scenarios: Vec<ScenarioRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOutcome {
    pub manifest: SessionManifest,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

/// Splits each scenario's kept frames per class into train and test, seeded.
/// Every configured scenario must be present exactly once.
pub fn finalize(user_id: &str, sessions: &[ScenarioSession], config: &CalibConfig) -> Result<CalibrationOutcome> {
    for s in &config.scenarios {
        if sessions.iter().filter(|x| x.scenario == *s).count() != 1 {
            return Err(Error::Calibration(format!("scenario {} is missing or repeated", s.dir_name())));
        }
    }
    if sessions.len() != config.scenarios.len() {
        return Err(Error::Calibration("session holds unconfigured scenarios".into()));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut records = Vec::new();
    for (si, s) in sessions.iter().enumerate() {
        let mut tr: [Vec<usize>; 4] = Default::default();
        let mut te: [Vec<usize>; 4] = Default::default();
        for class in GazeClass::ALL {
            let c = class.index();
            if s.frames[c].len() != config.keep || s.retained[c].len() != config.keep {
                return Err(Error::Calibration(format!(
                    "scenario {} class {class} holds {} frames, expected {}",
                    s.scenario.dir_name(),
                    s.frames[c].len(),
                    config.keep
                )));
            }
            let mut order: Vec<usize> = (0..config.keep).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(mix(config.seed, 0x5911), (si * 4 + c) as u64)));
            for (k, &j) in order.iter().enumerate() {
                let item = LabeledFrame {
                    frame: s.frames[c][j].frame.clone(),
                    class,
                    scenario: s.scenario,
                };
                if k < config.train_per_class {
                    train.push(item);
                    tr[c].push(s.retained[c][j]);
                } else {
                    test.push(item);
                    te[c].push(s.retained[c][j]);
                }
            }
        }
        records.push(ScenarioRecord {
            scenario: s.scenario,
            acquisitions: s.acquisitions,
            acquired: s.acquired,
            vetting: s.vetting.clone(),
            templates: s.templates,
            round_starts: s.round_starts.clone(),
            retained: s.retained.clone(),
            train: tr,
            test: te,
        });
    }
    Ok(CalibrationOutcome {
        manifest: SessionManifest {
            user_id: user_id.to_string(),
            config: config.clone(),
            scenarios: records,
        },
        train: LabeledDataset::new(user_id, train).reindexed(),
        test: LabeledDataset::new(user_id, test).reindexed(),
    })
}

/// Runs every configured scenario against `source` and splits the result.
pub fn calibrate(source: &mut dyn FrameSource, user_id: &str, config: &CalibConfig) -> Result<CalibrationOutcome> {
    config.validate()?;
    let sessions = config
        .scenarios
        .iter()
        .map(|&s| calibrate_scenario(source, s, config))
        .collect::<Result<Vec<_>>>()?;
    finalize(user_id, &sessions, config)
}

impl CalibrationOutcome {
    /// Writes `train/` and `test/` corpora plus `session.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        save_corpus(&self.train, &dir.join("train"))?;
        save_corpus(&self.test, &dir.join("test"))?;
        let path = dir.join("session.json");
        fs::write(&path, serde_json::to_string_pretty(&self.manifest)?).map_err(|e| Error::io(&path, e))
    }
}
