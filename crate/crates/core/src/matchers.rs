//! Correlation-based gaze estimators.
//!
//! * [`WholeImageMatcher`] scores an equalized frame against one stored
//!   template per class with a single full-overlap correlation each.
//! * [`PupilMatcher`] slides a pupil patch over the frame and maps the best
//!   location to a class by horizontal thirds.
//! * [`LbpMatcher`] is the whole-image scheme applied to LBP code images.
//!
//! Whole-image and LBP scores are the raw correlation
//! `R(x, y) = sum T(x', y') * S(x + x', y + y')`. Pupil localization uses
//! zero-mean normalized correlation instead, since a raw product peaks on
//! bright sclera rather than on the dark pupil.

use std::fs;
use std::path::Path;

use crate::classifier::{argmax_first, ClassifierKind, GazeClassifier, Prediction};
use crate::corpus::GazeClass;
use crate::error::{Error, Result};
use crate::frame::{EyeFrame, GrayImage};
use crate::preprocess::{hist_equalize, to_grayscale};

/// Raw correlation of `t` placed with its top-left corner at `(x, y)` in `s`.
pub fn correlate_at(t: &GrayImage, s: &GrayImage, x: u32, y: u32) -> Result<u64> {
    let (tw, th) = t.dimensions();
    let (sw, sh) = s.dimensions();
    if x as u64 + tw as u64 > sw as u64 || y as u64 + th as u64 > sh as u64 {
        return Err(Error::OutOfBounds {
            x,
            y,
            tw,
            th,
            sw,
            sh,
        });
    }
    let t_raw = t.as_raw();
    let s_raw = s.as_raw();
    let mut sum = 0u64;
    for ty in 0..th as usize {
        let t_row = &t_raw[ty * tw as usize..(ty + 1) * tw as usize];
        let s_start = (y as usize + ty) * sw as usize + x as usize;
        let s_row = &s_raw[s_start..s_start + tw as usize];
        sum += t_row
            .iter()
            .zip(s_row)
            .map(|(&a, &b)| a as u64 * b as u64)
            .sum::<u64>();
    }
    Ok(sum)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMatch {
    pub class: GazeClass,
    pub score: f64,
    pub scores: [f64; 4],
}

fn best_of(scores: [f64; 4]) -> ClassMatch {
    let i = argmax_first(&scores);
    ClassMatch {
        class: GazeClass::ALL[i],
        score: scores[i],
        scores,
    }
}

fn same_size(templates: &[GrayImage; 4]) -> Result<()> {
    let dims = templates[0].dimensions();
    if templates.iter().any(|t| t.dimensions() != dims) {
        return Err(Error::SizeMismatch(
            "all class templates must share one resolution".into(),
        ));
    }
    Ok(())
}

fn check_frame(expected: (u32, u32), frame: &GrayImage) -> Result<()> {
    if frame.dimensions() != expected {
        return Err(Error::SizeMismatch(format!(
            "frame is {}x{}, templates are {}x{}",
            frame.width(),
            frame.height(),
            expected.0,
            expected.1
        )));
    }
    Ok(())
}

fn save_class_pngs(images: &[GrayImage; 4], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (class, img) in GazeClass::ALL.iter().zip(images) {
        img.save_png(&dir.join(format!("{}.png", class.dir_name())))?;
    }
    Ok(())
}

fn load_class_pngs(dir: &Path) -> Result<[GrayImage; 4]> {
    let load = |c: GazeClass| GrayImage::load_png(&dir.join(format!("{}.png", c.dir_name())));
    Ok([
        load(GazeClass::Right)?,
        load(GazeClass::Forward)?,
        load(GazeClass::Left)?,
        load(GazeClass::Closed)?,
    ])
}

/// One grayscale template per class; equalized at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct WholeImageMatcher {
    sources: [GrayImage; 4],
    equalized: [GrayImage; 4],
}

impl WholeImageMatcher {
    pub fn new(templates: [GrayImage; 4]) -> Result<Self> {
        same_size(&templates)?;
        let equalized = templates.clone().map(|t| hist_equalize(&t));
        Ok(WholeImageMatcher {
            sources: templates,
            equalized,
        })
    }

    pub fn from_frames(frames: [&EyeFrame; 4]) -> Result<Self> {
        Self::new(frames.map(to_grayscale))
    }

    pub fn resolution(&self) -> (u32, u32) {
        self.sources[0].dimensions()
    }

    pub fn template(&self, class: GazeClass) -> &GrayImage {
        &self.sources[class.index()]
    }

    /// Correlation of an already-equalized frame with one class template.
    pub fn score_equalized(&self, class: GazeClass, equalized: &GrayImage) -> Result<u64> {
        check_frame(self.resolution(), equalized)?;
        correlate_at(&self.equalized[class.index()], equalized, 0, 0)
    }

    pub fn classify_gray(&self, frame: &GrayImage) -> Result<ClassMatch> {
        check_frame(self.resolution(), frame)?;
        let eq = hist_equalize(frame);
        let mut scores = [0.0; 4];
        for (s, t) in scores.iter_mut().zip(&self.equalized) {
            *s = correlate_at(t, &eq, 0, 0)? as f64;
        }
        Ok(best_of(scores))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_class_pngs(&self.sources, dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::new(load_class_pngs(dir)?)
    }
}

impl GazeClassifier for WholeImageMatcher {
    fn classify(&self, frame: &EyeFrame) -> Result<Prediction> {
        Ok(Prediction::certain(self.classify_gray(&to_grayscale(frame))?.class))
    }

    fn kind(&self) -> ClassifierKind {
        ClassifierKind::WholeTemplate
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PupilMatch {
    pub x: u32,
    pub y: u32,
    pub score: f64,
}

/// Exhaustive zero-mean normalized correlation search. Windows (or a
/// patch) with zero variance score 0. Scores within [`SCORE_TIE`] of each
/// other are ties, which go to the smallest `y`, then the smallest `x`.
pub const SCORE_TIE: f64 = 1e-9;

pub fn locate_pupil(patch: &GrayImage, frame: &GrayImage) -> Result<PupilMatch> {
    let (pw, ph) = patch.dimensions();
    let (fw, fh) = frame.dimensions();
    if pw >= fw || ph >= fh {
        return Err(Error::SizeMismatch(format!(
            "pupil patch {pw}x{ph} must be strictly smaller than the {fw}x{fh} frame"
        )));
    }
    let n = (pw * ph) as f64;
    let t_mean = patch.as_raw().iter().map(|&v| v as f64).sum::<f64>() / n;
    let t_zero: Vec<f64> = patch.as_raw().iter().map(|&v| v as f64 - t_mean).collect();
    let t_norm2: f64 = t_zero.iter().map(|v| v * v).sum();

    // Integral images of intensity and squared intensity, (fw+1)x(fh+1).
    let iw = fw as usize + 1;
    let mut sum = vec![0u64; iw * (fh as usize + 1)];
    let mut sq = vec![0u64; iw * (fh as usize + 1)];
    for y in 0..fh as usize {
        let mut row_s = 0u64;
        let mut row_q = 0u64;
        for x in 0..fw as usize {
            let v = frame.get(x as u32, y as u32) as u64;
            row_s += v;
            row_q += v * v;
            sum[(y + 1) * iw + x + 1] = sum[y * iw + x + 1] + row_s;
            sq[(y + 1) * iw + x + 1] = sq[y * iw + x + 1] + row_q;
        }
    }
    let rect = |tab: &[u64], x: usize, y: usize| {
        let (x2, y2) = (x + pw as usize, y + ph as usize);
        (tab[y2 * iw + x2] + tab[y * iw + x]) - (tab[y * iw + x2] + tab[y2 * iw + x])
    };

    let raw = frame.as_raw();
    let mut best = PupilMatch {
        x: 0,
        y: 0,
        score: f64::NEG_INFINITY,
    };
    for y in 0..=(fh - ph) as usize {
        for x in 0..=(fw - pw) as usize {
            let s1 = rect(&sum, x, y) as i128;
            let s2 = rect(&sq, x, y) as i128;
            // n * sum((s - mean)^2), exact in integers.
            let n_var = (pw * ph) as i128 * s2 - s1 * s1;
            let score = if n_var <= 0 || t_norm2 <= 0.0 {
                0.0
            } else {
                let mut cross = 0.0;
                for ty in 0..ph as usize {
                    let t_row = &t_zero[ty * pw as usize..(ty + 1) * pw as usize];
                    let start = (y + ty) * fw as usize + x;
                    let s_row = &raw[start..start + pw as usize];
                    cross += t_row
                        .iter()
                        .zip(s_row)
                        .map(|(&a, &b)| a * b as f64)
                        .sum::<f64>();
                }
                cross / (n_var as f64 / n * t_norm2).sqrt()
            };
            if score > best.score + SCORE_TIE {
                best = PupilMatch {
                    x: x as u32,
                    y: y as u32,
                    score,
                };
            }
        }
    }
    Ok(best)
}

/// Maps a pupil location to a class: scores under `min_score` are Closed,
/// otherwise the patch centre's horizontal third of the frame decides.
/// Thirds are in image coordinates; `mirror` swaps Left and Right.
pub fn pupil_class(
    location: &PupilMatch,
    patch_width: u32,
    frame_width: u32,
    min_score: f64,
    mirror: bool,
) -> GazeClass {
    if !(location.score >= min_score) {
        return GazeClass::Closed;
    }
    let center = location.x as f64 + patch_width as f64 / 2.0;
    let third = frame_width as f64 / 3.0;
    let class = if center < third {
        GazeClass::Left
    } else if center > 2.0 * third {
        GazeClass::Right
    } else {
        GazeClass::Forward
    };
    if mirror {
        class.mirrored()
    } else {
        class
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PupilMatcher {
    pub patch: GrayImage,
    pub min_score: f64,
    pub mirror: bool,
}

impl PupilMatcher {
    pub const DEFAULT_MIN_SCORE: f64 = 0.5;

    pub fn new(patch: GrayImage) -> Self {
        PupilMatcher {
            patch,
            min_score: Self::DEFAULT_MIN_SCORE,
            mirror: false,
        }
    }

    /// Cuts a square patch around the dark pupil blob of a forward-gaze frame.
    pub fn from_forward_frame(frame: &GrayImage) -> Result<Self> {
        let raw = frame.as_raw();
        let min = *raw.iter().min().expect("non-empty image") as f64;
        let mut sorted = raw.to_vec();
        sorted.sort_unstable();
        let median = sorted[sorted.len() / 2] as f64;
        let cut = min + 0.25 * (median - min);
        let (mut sx, mut sy, mut count) = (0.0, 0.0, 0usize);
        for y in 0..frame.height() {
            for x in 0..frame.width() {
                if (frame.get(x, y) as f64) <= cut {
                    sx += x as f64 + 0.5;
                    sy += y as f64 + 0.5;
                    count += 1;
                }
            }
        }
        let radius = (count as f64 / std::f64::consts::PI).sqrt();
        let half = (radius * 1.6).round().max(2.0) as i64;
        let side = (2 * half + 1) as u32;
        if side >= frame.width() || side >= frame.height() {
            return Err(Error::Classifier(
                "pupil blob too large to cut a patch from this frame".into(),
            ));
        }
        let (cx, cy) = (sx / count as f64, sy / count as f64);
        let x0 = (cx.floor() as i64 - half).clamp(0, (frame.width() - side) as i64) as u32;
        let y0 = (cy.floor() as i64 - half).clamp(0, (frame.height() - side) as i64) as u32;
        Ok(Self::new(frame.crop(x0, y0, side, side)?))
    }

    pub fn locate(&self, frame: &GrayImage) -> Result<PupilMatch> {
        locate_pupil(&self.patch, frame)
    }

    pub fn classify_gray(&self, frame: &GrayImage) -> Result<(GazeClass, PupilMatch)> {
        let m = self.locate(frame)?;
        let class = pupil_class(
            &m,
            self.patch.width(),
            frame.width(),
            self.min_score,
            self.mirror,
        );
        Ok((class, m))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.patch.save_png(&dir.join("pupil.png"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self::new(GrayImage::load_png(&dir.join("pupil.png"))?))
    }
}

impl GazeClassifier for PupilMatcher {
    fn classify(&self, frame: &EyeFrame) -> Result<Prediction> {
        Ok(Prediction::certain(self.classify_gray(&to_grayscale(frame))?.0))
    }

    fn kind(&self) -> ClassifierKind {
        ClassifierKind::PupilTemplate
    }
}

/// 8-neighbour local binary pattern. Neighbours are read clockwise from the
/// top-left, most significant bit first; a neighbour contributes 1 when it is
/// at least as bright as the centre. The output loses the one-pixel border.
pub fn lbp_transform(img: &GrayImage) -> Result<GrayImage> {
    let (w, h) = img.dimensions();
    if w < 3 || h < 3 {
        return Err(Error::InvalidDimensions {
            width: w,
            height: h,
            reason: "LBP needs at least 3x3 pixels",
        });
    }
    const OFFSETS: [(i32, i32); 8] = [
        (-1, -1),
        (0, -1),
        (1, -1),
        (1, 0),
        (1, 1),
        (0, 1),
        (-1, 1),
        (-1, 0),
    ];
    GrayImage::from_fn(w - 2, h - 2, |x, y| {
        let (cx, cy) = (x as i32 + 1, y as i32 + 1);
        let center = img.get(cx as u32, cy as u32);
        OFFSETS.iter().fold(0u8, |code, &(dx, dy)| {
            let n = img.get((cx + dx) as u32, (cy + dy) as u32);
            (code << 1) | (n >= center) as u8
        })
    })
}

/// Whole-image matching on LBP code images. No equalization: the codes are
/// already invariant to monotonic intensity changes.
#[derive(Debug, Clone, PartialEq)]
pub struct LbpMatcher {
    sources: [GrayImage; 4],
    codes: [GrayImage; 4],
}

impl LbpMatcher {
    pub fn new(templates: [GrayImage; 4]) -> Result<Self> {
        same_size(&templates)?;
        let mut codes = Vec::with_capacity(4);
        for t in &templates {
            codes.push(lbp_transform(t)?);
        }
        Ok(LbpMatcher {
            sources: templates,
            codes: codes.try_into().expect("four templates"),
        })
    }

    pub fn from_frames(frames: [&EyeFrame; 4]) -> Result<Self> {
        Self::new(frames.map(to_grayscale))
    }

    pub fn classify_gray(&self, frame: &GrayImage) -> Result<ClassMatch> {
        check_frame(self.sources[0].dimensions(), frame)?;
        let codes = lbp_transform(frame)?;
        let mut scores = [0.0; 4];
        for (s, t) in scores.iter_mut().zip(&self.codes) {
            *s = correlate_at(t, &codes, 0, 0)? as f64;
        }
        Ok(best_of(scores))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_class_pngs(&self.sources, dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::new(load_class_pngs(dir)?)
    }
}

impl GazeClassifier for LbpMatcher {
    fn classify(&self, frame: &EyeFrame) -> Result<Prediction> {
        Ok(Prediction::certain(self.classify_gray(&to_grayscale(frame))?.class))
    }

    fn kind(&self) -> ClassifierKind {
        ClassifierKind::Lbp
    }
}
