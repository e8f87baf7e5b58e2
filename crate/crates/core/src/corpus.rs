//! Labelled eye-image datasets, their directory layout, and the synthetic
//! eye renderer that stands in for recorded user data.
//!
//! On disk a corpus is `<root>/<user>/<scenario>/<class>/frame_<NNNN>.png`
//! where `<scenario>` is e.g. `indoor_nominal` and `<class>` one of
//! `right`, `forward`, `left`, `closed`. `NNNN` is the frame's position in
//! the user's dataset, so a save/load cycle preserves item order.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{EyeFrame, EyeSide};

/// The four gaze labels, in canonical order.
///
/// The declaration order is the tie-break order everywhere a classifier has
/// to choose between equal scores, and the axis order of confusion matrices.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum GazeClass {
    #[serde(alias = "right")]
    Right,
    #[serde(alias = "forward")]
    Forward,
    #[serde(alias = "left")]
    Left,
    #[serde(alias = "closed")]
    Closed,
}

impl GazeClass {
    pub const ALL: [GazeClass; 4] = [
        GazeClass::Right,
        GazeClass::Forward,
        GazeClass::Left,
        GazeClass::Closed,
    ];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<GazeClass> {
        Self::ALL.get(i).copied()
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            GazeClass::Right => "right",
            GazeClass::Forward => "forward",
            GazeClass::Left => "left",
            GazeClass::Closed => "closed",
        }
    }

    pub fn from_dir_name(name: &str) -> Option<GazeClass> {
        Self::ALL.into_iter().find(|c| c.dir_name() == name)
    }

    pub fn is_open(self) -> bool {
        self != GazeClass::Closed
    }

    /// Swaps left and right.
    pub fn mirrored(self) -> GazeClass {
        match self {
            GazeClass::Right => GazeClass::Left,
            GazeClass::Left => GazeClass::Right,
            other => other,
        }
    }
}

impl fmt::Display for GazeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl std::str::FromStr for GazeClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GazeClass::from_dir_name(&s.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidParameter(format!("unknown gaze class `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lighting {
    Indoor,
    Outdoor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlassesOffset {
    Nominal,
    Shifted,
}

/// One acquisition condition: a lighting level and a headset position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Scenario {
    pub lighting: Lighting,
    pub glasses: GlassesOffset,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::new(Lighting::Indoor, GlassesOffset::Nominal),
        Scenario::new(Lighting::Indoor, GlassesOffset::Shifted),
        Scenario::new(Lighting::Outdoor, GlassesOffset::Nominal),
        Scenario::new(Lighting::Outdoor, GlassesOffset::Shifted),
    ];

    pub const fn new(lighting: Lighting, glasses: GlassesOffset) -> Self {
        Scenario { lighting, glasses }
    }

    pub fn dir_name(&self) -> String {
        let l = match self.lighting {
            Lighting::Indoor => "indoor",
            Lighting::Outdoor => "outdoor",
        };
        let g = match self.glasses {
            GlassesOffset::Nominal => "nominal",
            GlassesOffset::Shifted => "shifted",
        };
        format!("{l}_{g}")
    }

    pub fn from_dir_name(name: &str) -> Option<Scenario> {
        Self::ALL.into_iter().find(|s| s.dir_name() == name)
    }

    /// Ambient brightness band for this scenario.
    pub fn brightness_range(&self) -> (f64, f64) {
        match self.lighting {
            Lighting::Indoor => (120.0, 150.0),
            Lighting::Outdoor => (170.0, 210.0),
        }
    }

    /// Vertical eye displacement band (fraction of frame height).
    pub fn vertical_offset_range(&self) -> (f64, f64) {
        match self.glasses {
            GlassesOffset::Nominal => (-0.03, 0.03),
            GlassesOffset::Shifted => (0.06, 0.10),
        }
    }
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario::ALL[0]
    }
}

/// User-specific eye geometry and tone. Fractions are of frame width
/// (`sclera_rx`) or height (the rest).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EyeProfile {
    pub sclera_rx: f64,
    pub sclera_ry: f64,
    pub iris_r: f64,
    /// Pupil radius as a fraction of the iris radius.
    pub pupil_ratio: f64,
    pub iris_tone: f64,
    pub skin_tone: [f64; 3],
}

impl Default for EyeProfile {
    fn default() -> Self {
        EyeProfile {
            sclera_rx: 0.43,
            sclera_ry: 0.34,
            iris_r: 0.29,
            pupil_ratio: 0.45,
            iris_tone: 0.38,
            skin_tone: [0.85, 0.72, 0.62],
        }
    }
}

impl EyeProfile {
    pub fn for_user(user_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(user_seed, 0x5EED_0F11));
        let skin = rng.random_range(0.78..0.92);
        EyeProfile {
            sclera_rx: rng.random_range(0.40..0.46),
            sclera_ry: rng.random_range(0.30..0.38),
            iris_r: rng.random_range(0.26..0.32),
            pupil_ratio: rng.random_range(0.40..0.50),
            iris_tone: rng.random_range(0.30..0.45),
            skin_tone: [skin, skin * 0.85, skin * 0.74],
        }
    }
}

/// Everything needed to render one synthetic eye.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub class: GazeClass,
    /// Horizontal pupil displacement, fraction of frame width, +x to the right.
    pub pupil_offset_frac: f64,
    pub eyelid_closure_frac: f64,
    pub brightness: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Vertical eye displacement, fraction of frame height.
    pub vertical_offset_frac: f64,
    pub width: u32,
    pub height: u32,
    pub profile: EyeProfile,
}

pub const SYNTH_WIDTH: u32 = 96;
pub const SYNTH_HEIGHT: u32 = 64;

impl SynthParams {
    /// Nominal, noise-free parameters for `class`.
    pub fn nominal(class: GazeClass) -> Self {
        let (offset, closure) = match class {
            GazeClass::Right => (0.27, 0.0),
            GazeClass::Forward => (0.0, 0.0),
            GazeClass::Left => (-0.27, 0.0),
            GazeClass::Closed => (0.0, 1.0),
        };
        SynthParams {
            class,
            pupil_offset_frac: offset,
            eyelid_closure_frac: closure,
            brightness: 135.0,
            noise_sigma: 0.0,
            seed: 0,
            vertical_offset_frac: 0.0,
            width: SYNTH_WIDTH,
            height: SYNTH_HEIGHT,
            profile: EyeProfile::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidParameter(msg.to_string()));
        if !(-0.4..=0.4).contains(&self.pupil_offset_frac) {
            return bad("pupil_offset_frac must lie in [-0.4, 0.4]");
        }
        if !(0.0..=1.0).contains(&self.eyelid_closure_frac) {
            return bad("eyelid_closure_frac must lie in [0, 1]");
        }
        if !(0.0..=255.0).contains(&self.brightness) {
            return bad("brightness must lie in [0, 255]");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative");
        }
        if self.width < 3 || self.height < 3 {
            return bad("frames must be at least 3x3");
        }
        match self.class {
            GazeClass::Closed if self.eyelid_closure_frac < 0.85 => {
                bad("closed eyes need eyelid_closure_frac >= 0.85")
            }
            GazeClass::Forward if self.pupil_offset_frac.abs() > 0.08 => {
                bad("forward gaze needs |pupil_offset_frac| <= 0.08")
            }
            GazeClass::Right if self.pupil_offset_frac < 0.2 => {
                bad("right gaze needs pupil_offset_frac >= 0.2")
            }
            GazeClass::Left if self.pupil_offset_frac > -0.2 => {
                bad("left gaze needs pupil_offset_frac <= -0.2")
            }
            _ => Ok(()),
        }
    }

    fn eye_center(&self) -> (f64, f64) {
        let w = self.width as f64;
        let h = self.height as f64;
        (w / 2.0, h / 2.0 + self.vertical_offset_frac * h)
    }

    /// Ground-truth pupil centre in continuous pixel coordinates.
    pub fn pupil_center(&self) -> (f64, f64) {
        let (cx, cy) = self.eye_center();
        (cx + self.pupil_offset_frac * self.width as f64, cy)
    }

    pub fn pupil_radius(&self) -> f64 {
        self.profile.iris_r * self.profile.pupil_ratio * self.height as f64
    }
}

/// Renders a synthetic eye: skin, a sclera ellipse, an iris disc with a
/// darker concentric pupil, an eyelid band from the top covering
/// `eyelid_closure_frac` of the eye height, and additive Gaussian noise.
pub fn synth_eye(params: &SynthParams) -> Result<EyeFrame> {
    params.validate()?;
    let w = params.width as usize;
    let h = params.height as usize;
    let p = &params.profile;
    let b = params.brightness;
    let (cx, cy) = params.eye_center();
    let rx = p.sclera_rx * w as f64;
    let ry = p.sclera_ry * h as f64;
    let (px, py) = params.pupil_center();
    let iris_r = p.iris_r * h as f64;
    let pupil_r = params.pupil_radius();
    let closure = params.eyelid_closure_frac;
    let lid_edge = (cy - ry) + closure * 2.0 * ry;
    let closed_shape = closure >= 0.85;

    let skin = p.skin_tone.map(|t| t * b);
    let lid = skin.map(|v| v * 0.92);
    let crease = skin.map(|v| v * 0.78);
    let sclera = [0.6 * b + 62.0, 0.6 * b + 60.0, 0.6 * b + 57.0];
    let iris = [p.iris_tone * b * 0.95, p.iris_tone * b, p.iris_tone * b * 1.05];
    let pupil = [0.08 * b + 4.0; 3];
    let lash = [0.22 * b; 3];

    let mut noise_rng = ChaCha8Rng::seed_from_u64(mix(params.seed, 0xA11CE));
    let noise = if params.noise_sigma > 0.0 {
        Some(Normal::new(0.0, params.noise_sigma).expect("sigma validated"))
    } else {
        None
    };

    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        let fy = y as f64 + 0.5;
        for x in 0..w {
            let fx = x as f64 + 0.5;
            let e = ((fx - cx) / rx).powi(2) + ((fy - cy) / ry).powi(2);
            let color = if e <= 1.0 {
                if closed_shape && e >= 0.72 && fy > cy {
                    lash
                } else if fy < lid_edge {
                    lid
                } else if !closed_shape && fy < lid_edge + 1.5 && closure > 0.0 {
                    lash
                } else {
                    let d2 = (fx - px).powi(2) + (fy - py).powi(2);
                    if d2 <= pupil_r * pupil_r {
                        pupil
                    } else if d2 <= iris_r * iris_r {
                        iris
                    } else {
                        sclera
                    }
                }
            } else if (1.15..=1.45).contains(&e) && fy < cy {
                crease
            } else {
                skin
            };
            for c in color {
                let v = match &noise {
                    Some(n) => c + n.sample(&mut noise_rng),
                    None => c,
                };
                data.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    EyeFrame::from_rgb(params.width, params.height, data)
}

/// Knobs for [`generate_user_corpus_with`].
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusOptions {
    pub scenarios: Vec<Scenario>,
    pub noise_sigma: (f64, f64),
    pub width: u32,
    pub height: u32,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        CorpusOptions {
            scenarios: vec![
                Scenario::new(Lighting::Indoor, GlassesOffset::Nominal),
                Scenario::new(Lighting::Outdoor, GlassesOffset::Nominal),
            ],
            noise_sigma: (2.0, 4.0),
            width: SYNTH_WIDTH,
            height: SYNTH_HEIGHT,
        }
    }
}

impl CorpusOptions {
    pub fn single_scenario(scenario: Scenario) -> Self {
        CorpusOptions {
            scenarios: vec![scenario],
            ..Default::default()
        }
    }
}

/// Draws per-frame parameters from the class-consistent jitter ranges.
pub fn jittered_params(
    class: GazeClass,
    scenario: Scenario,
    profile: EyeProfile,
    noise_sigma: (f64, f64),
    seed: u64,
) -> SynthParams {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x7177E4));
    let (offset, closure) = match class {
        GazeClass::Right => (rng.random_range(0.22..=0.32), rng.random_range(0.0..=0.2)),
        GazeClass::Forward => (rng.random_range(-0.05..=0.05), rng.random_range(0.0..=0.2)),
        GazeClass::Left => (rng.random_range(-0.32..=-0.22), rng.random_range(0.0..=0.2)),
        GazeClass::Closed => (rng.random_range(-0.3..=0.3), rng.random_range(0.9..=1.0)),
    };
    let (b_lo, b_hi) = scenario.brightness_range();
    let (v_lo, v_hi) = scenario.vertical_offset_range();
    let noise = if noise_sigma.1 > noise_sigma.0 {
        rng.random_range(noise_sigma.0..=noise_sigma.1)
    } else {
        noise_sigma.0
    };
    SynthParams {
        class,
        pupil_offset_frac: offset,
        eyelid_closure_frac: closure,
        brightness: rng.random_range(b_lo..=b_hi),
        noise_sigma: noise,
        seed,
        vertical_offset_frac: rng.random_range(v_lo..=v_hi),
        width: SYNTH_WIDTH,
        height: SYNTH_HEIGHT,
        profile,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFrame {
    pub frame: EyeFrame,
    pub class: GazeClass,
    pub scenario: Scenario,
}

/// A user's labelled frames. Immutable once built; share freely.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledDataset {
    pub user_id: String,
    pub items: Vec<LabeledFrame>,
}

impl LabeledDataset {
    pub fn new(user_id: impl Into<String>, items: Vec<LabeledFrame>) -> Self {
        LabeledDataset {
            user_id: user_id.into(),
            items,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn class_counts(&self) -> [usize; 4] {
        let mut counts = [0; 4];
        for item in &self.items {
            counts[item.class.index()] += 1;
        }
        counts
    }

    /// Distinct scenarios present, sorted.
    pub fn scenario_tags(&self) -> Vec<Scenario> {
        let mut tags: Vec<Scenario> = self.items.iter().map(|i| i.scenario).collect();
        tags.sort();
        tags.dedup();
        tags
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            user_id: self.user_id.clone(),
            items: indices.iter().map(|&i| self.items[i].clone()).collect(),
        }
    }

    /// Rewrites `frame_index` to each item's position.
    pub fn reindexed(mut self) -> Self {
        for (i, item) in self.items.iter_mut().enumerate() {
            item.frame.frame_index = i as u64;
        }
        self
    }
}

pub fn user_id_for_seed(user_seed: u64) -> String {
    format!("user{user_seed:02}")
}

/// `frames_per_class` frames per class for one synthetic user, alternating
/// between an indoor and an outdoor brightness band.
pub fn generate_user_corpus(user_seed: u64, frames_per_class: usize) -> LabeledDataset {
    generate_user_corpus_with(user_seed, frames_per_class, &CorpusOptions::default())
}

pub fn generate_user_corpus_with(
    user_seed: u64,
    frames_per_class: usize,
    options: &CorpusOptions,
) -> LabeledDataset {
    let profile = EyeProfile::for_user(user_seed);
    let n_scen = options.scenarios.len().max(1);
    let mut items = Vec::with_capacity(frames_per_class * 4);
    for (si, &scenario) in options.scenarios.iter().enumerate() {
        for class in GazeClass::ALL {
            for i in (si..frames_per_class).step_by(n_scen) {
                let seed = mix(mix(user_seed, class.index() as u64 + 1), i as u64);
                let mut params =
                    jittered_params(class, scenario, profile, options.noise_sigma, seed);
                params.width = options.width;
                params.height = options.height;
                let frame = synth_eye(&params).expect("jittered parameters are valid");
                items.push(LabeledFrame {
                    frame: frame.with_side(EyeSide::Left),
                    class,
                    scenario,
                });
            }
        }
    }
    LabeledDataset::new(user_id_for_seed(user_seed), items).reindexed()
}

/// Stratified split. Per class, the test share is
/// `floor((1 - train_frac) * n)`, raised to one when `n >= 2`; a class with a
/// single item goes entirely to train. Relative item order is preserved.
pub fn split(
    dataset: &LabeledDataset,
    train_frac: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "train_frac must lie in (0, 1), got {train_frac}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for class in GazeClass::ALL {
        let mut idx: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.items[i].class == class)
            .collect();
        if idx.is_empty() {
            return Err(Error::EmptyClass(class));
        }
        idx.shuffle(&mut rng);
        let n = idx.len();
        let test = if n >= 2 {
            // The epsilon keeps 0.2 * 4000 from flooring to 799.
            let t = ((1.0 - train_frac) * n as f64 + 1e-9).floor() as usize;
            t.clamp(1, n - 1)
        } else {
            0
        };
        test_idx.extend_from_slice(&idx[..test]);
        train_idx.extend_from_slice(&idx[test..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((dataset.subset(&train_idx), dataset.subset(&test_idx)))
}

pub fn save_corpus(dataset: &LabeledDataset, root: &Path) -> Result<()> {
    let user_dir = root.join(&dataset.user_id);
    for (i, item) in dataset.items.iter().enumerate() {
        let dir = user_dir
            .join(item.scenario.dir_name())
            .join(item.class.dir_name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        item.frame.save_png(&dir.join(format!("frame_{i:04}.png")))?;
    }
    Ok(())
}

/// Loads every user directory under `root`, sorted by name. An empty
/// directory yields no datasets.
pub fn load_corpus(root: &Path) -> Result<Vec<LabeledDataset>> {
    let mut users = Vec::new();
    for dir in sorted_subdirs(root)? {
        users.push(load_user_corpus(&dir)?);
    }
    Ok(users)
}

pub fn load_user_corpus(user_dir: &Path) -> Result<LabeledDataset> {
    let user_id = user_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut indexed = Vec::new();
    for scen_dir in sorted_subdirs(user_dir)? {
        let name = scen_dir.file_name().unwrap_or_default().to_string_lossy();
        let scenario =
            Scenario::from_dir_name(&name).ok_or_else(|| Error::UnknownScenario(scen_dir.clone()))?;
        for class_dir in sorted_subdirs(&scen_dir)? {
            let name = class_dir.file_name().unwrap_or_default().to_string_lossy();
            let class = GazeClass::from_dir_name(&name)
                .ok_or_else(|| Error::UnknownClass(class_dir.clone()))?;
            let entries = fs::read_dir(&class_dir).map_err(|e| Error::io(&class_dir, e))?;
            for entry in entries {
                let path = entry.map_err(|e| Error::io(&class_dir, e))?.path();
                let Some(index) = frame_number(&path) else {
                    continue;
                };
                let frame = EyeFrame::load_png(&path)?.with_index(index);
                indexed.push(LabeledFrame {
                    frame,
                    class,
                    scenario,
                });
            }
        }
    }
    indexed.sort_by_key(|item| item.frame.frame_index);
    Ok(LabeledDataset::new(user_id, indexed))
}

fn frame_number(path: &Path) -> Option<u64> {
    if path.extension()? != "png" {
        return None;
    }
    path.file_stem()?
        .to_str()?
        .strip_prefix("frame_")?
        .parse()
        .ok()
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// SplitMix64 finaliser over two words; derives independent stream seeds.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
