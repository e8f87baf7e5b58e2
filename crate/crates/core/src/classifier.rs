//! The common interface the control loop and the evaluation harness use to
//! talk to any of the four gaze estimators.

use serde::{Deserialize, Serialize};

use crate::corpus::GazeClass;
use crate::error::Result;
use crate::frame::EyeFrame;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: GazeClass,
    pub probs: [f64; 4],
}

impl Prediction {
    /// A hard decision with all probability mass on `class`.
    pub fn certain(class: GazeClass) -> Self {
        let mut probs = [0.0; 4];
        probs[class.index()] = 1.0;
        Prediction { class, probs }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Cnn,
    WholeTemplate,
    PupilTemplate,
    Lbp,
}

pub trait GazeClassifier: Send + Sync {
    fn classify(&self, frame: &EyeFrame) -> Result<Prediction>;

    fn kind(&self) -> ClassifierKind;
}

impl<C: GazeClassifier + ?Sized> GazeClassifier for Box<C> {
    fn classify(&self, frame: &EyeFrame) -> Result<Prediction> {
        (**self).classify(frame)
    }

    fn kind(&self) -> ClassifierKind {
        (**self).kind()
    }
}

impl<C: GazeClassifier + ?Sized> GazeClassifier for std::sync::Arc<C> {
    fn classify(&self, frame: &EyeFrame) -> Result<Prediction> {
        (**self).classify(frame)
    }

    fn kind(&self) -> ClassifierKind {
        (**self).kind()
    }
}

/// Index of the largest score; the earliest index wins ties.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}
