//! The simulation session behind both the headless replay and the web
//! service.
//!
//! Clients send [`Envelope`]s. Each envelope advances the chair by one tick
//! per message unless it is a reset, and yields one [`Telemetry`] record per
//! tick. `repeat` applies a message several times in a row. `at` names the
//! tick the message belongs to; ticks skipped to reach it replay the most
//! recent message (the user keeps looking the same way), or an empty gaze
//! before any message has arrived. Both transports go through
//! [`SimSession::apply`], so the same envelopes produce the same telemetry
//! regardless of how they were delivered.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierKind, GazeClassifier, Prediction};
use crate::cnn::Network;
use crate::control::{ControlConfig, Controller, Pose, Telemetry};
use crate::corpus::{jittered_params, mix, synth_eye, EyeProfile, GazeClass, Scenario};
use crate::error::{Error, Result};
use crate::frame::{EyeFrame, EyeSide};
use crate::matchers::{LbpMatcher, PupilMatcher, WholeImageMatcher};
use crate::safety::{safety_check, SensorArray, World2D};

/// Upper bound on ticks one envelope may generate.
pub const MAX_TICKS_PER_MESSAGE: u64 = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InputMessage {
    /// Already-classified gaze; `null` means that eye was not seen.
    Gaze {
        left: Option<GazeClass>,
        right: Option<GazeClass>,
    },
    /// Base64-encoded PNG eye images run through the session classifier.
    Frames { left: String, right: String },
    /// Frames rendered by the synthetic generator, then classified.
    Synth { left: GazeClass, right: GazeClass },
    /// Back to the start pose, disengaged, with an empty vote. Takes no tick.
    Reset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repeat: Option<u64>,
    #[serde(flatten)]
    pub message: InputMessage,
}

impl Envelope {
    pub fn new(message: InputMessage) -> Self {
        Envelope {
            at: None,
            repeat: None,
            message,
        }
    }

    pub fn gaze(left: GazeClass, right: GazeClass) -> Self {
        Self::new(InputMessage::Gaze {
            left: Some(left),
            right: Some(right),
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Parses a JSON-lines script; blank lines are skipped.
pub fn parse_script(text: &str) -> Result<Vec<Envelope>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            Envelope::parse(l).map_err(|e| Error::InvalidParameter(format!("script line {}: {e}", i + 1)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub kind: ClassifierKind,
    /// Model JSON for the CNN, template directory for the matchers.
    pub path: PathBuf,
}

/// Loads a classifier artifact from disk.
pub fn load_classifier(spec: &ClassifierSpec) -> Result<Arc<dyn GazeClassifier>> {
    let p = spec.path.as_path();
    Ok(match spec.kind {
        ClassifierKind::Cnn => Arc::new(Network::load(p)?),
        ClassifierKind::WholeTemplate => Arc::new(WholeImageMatcher::load(p)?),
        ClassifierKind::PupilTemplate => Arc::new(PupilMatcher::load(p)?),
        ClassifierKind::Lbp => Arc::new(LbpMatcher::load(p)?),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    #[default]
    ClassEvents,
    FrameStream,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    /// World JSON for headless runs; the service uses its shared world.
    pub world: Option<PathBuf>,
    pub classifier: Option<ClassifierSpec>,
    pub control: ControlConfig,
    /// What the client intends to send. Both message kinds are accepted.
    pub input_mode: InputMode,
    pub start: Pose,
    pub engaged: bool,
    /// Seeds the frames rendered for `synth` messages.
    pub seed: u64,
    /// Eye appearance used for `synth` messages.
    pub user_seed: u64,
    pub scenario: Scenario,
    pub sensors: SensorArray,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            world: None,
            classifier: None,
            control: ControlConfig::default(),
            input_mode: InputMode::default(),
            start: Pose::default(),
            engaged: false,
            seed: 0,
            user_seed: 1,
            scenario: Scenario::default(),
            sensors: SensorArray::default(),
        }
    }
}

impl SessionConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: SessionConfig = serde_json::from_str(text)?;
        c.control.validate()?;
        c.sensors.validate()?;
        Ok(c)
    }

    /// Loads the configured world, or an empty one. Relative paths resolve
    /// against `base`.
    pub fn load_world(&self, base: &Path) -> Result<World2D> {
        match &self.world {
            None => Ok(World2D::default()),
            Some(p) => {
                let path = base.join(p);
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                World2D::from_json(&text)
            }
        }
    }

    pub fn resolve_paths(mut self, base: &Path) -> Self {
        if let Some(w) = &self.world {
            self.world = Some(base.join(w));
        }
        if let Some(c) = &mut self.classifier {
            c.path = base.join(&c.path);
        }
        self
    }
}

/// One synthetic eye frame of `class` for the given eye appearance.
pub fn synth_frame(user_seed: u64, scenario: Scenario, class: GazeClass, seed: u64, side: EyeSide) -> Result<EyeFrame> {
    let params = jittered_params(class, scenario, EyeProfile::for_user(user_seed), (2.0, 4.0), seed);
    Ok(synth_eye(&params)?.with_side(side))
}

pub fn decode_png_b64(text: &str) -> Result<EyeFrame> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(text.trim())
        .map_err(|e| Error::InvalidParameter(format!("bad base64 frame: {e}")))?;
    EyeFrame::from_png_bytes(&bytes)
}

pub fn encode_png_b64(frame: &EyeFrame) -> Result<String> {
    Ok(base64::engine::general_purpose::STANDARD.encode(frame.to_png_bytes()?))
}

pub struct SimSession {
    config: SessionConfig,
    classifier: Option<Arc<dyn GazeClassifier>>,
    controller: Controller,
    /// Ticks taken before the latest reset; keeps tick numbers increasing.
    offset: u64,
    last: Option<InputMessage>,
}

impl std::fmt::Debug for SimSession {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimSession")
            .field("tick", &self.tick())
            .field("state", self.controller.state())
            .finish_non_exhaustive()
    }
}

impl SimSession {
    pub fn new(config: SessionConfig, classifier: Option<Arc<dyn GazeClassifier>>) -> Result<Self> {
        config.sensors.validate()?;
        let controller = Self::fresh_controller(&config)?;
        Ok(SimSession {
            config,
            classifier,
            controller,
            offset: 0,
            last: None,
        })
    }

    /// Builds a session, loading the configured classifier if any.
    pub fn from_config(config: SessionConfig) -> Result<Self> {
        let classifier = config.classifier.as_ref().map(load_classifier).transpose()?;
        Self::new(config, classifier)
    }

    fn fresh_controller(config: &SessionConfig) -> Result<Controller> {
        let mut c = Controller::new(config.control, config.start)?;
        c.set_engaged(config.engaged);
        Ok(c)
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    /// Number of the next tick.
    pub fn tick(&self) -> u64 {
        self.offset + self.controller.tick_count()
    }

    pub fn controller(&self) -> &Controller {
        &self.controller
    }

    /// Handles one envelope. On error nothing has changed.
    pub fn apply(&mut self, env: &Envelope, world: &World2D) -> Result<Vec<Telemetry>> {
        let repeat = env.repeat.unwrap_or(1);
        let gap = match env.at {
            Some(t) if t < self.tick() => {
                return Err(Error::InvalidParameter(format!("tick {t} is in the past (next is {})", self.tick())));
            }
            Some(t) => t - self.tick(),
            None => 0,
        };
        let steps = if matches!(env.message, InputMessage::Reset) { 0 } else { repeat };
        if gap.saturating_add(steps) > MAX_TICKS_PER_MESSAGE {
            return Err(Error::InvalidParameter(format!("message spans more than {MAX_TICKS_PER_MESSAGE} ticks")));
        }
        let frames = self.decode(&env.message)?;
        let idle = InputMessage::Gaze { left: None, right: None };
        let held = self.last.clone().unwrap_or(idle);
        let held_frames = self.decode(&held)?;
        let mut out = Vec::with_capacity((gap + steps) as usize);
        for _ in 0..gap {
            out.push(self.step(&held, held_frames.as_ref(), world)?);
        }
        if let InputMessage::Reset = env.message {
            self.offset += self.controller.tick_count();
            self.controller = Self::fresh_controller(&self.config)?;
            self.last = None;
            return Ok(out);
        }
        for _ in 0..repeat {
            out.push(self.step(&env.message, frames.as_ref(), world)?);
        }
        self.last = Some(env.message.clone());
        Ok(out)
    }

    /// Replays a whole script.
    pub fn run_script(&mut self, script: &[Envelope], world: &World2D) -> Result<Vec<Telemetry>> {
        let mut out = Vec::new();
        for env in script {
            out.extend(self.apply(env, world)?);
        }
        Ok(out)
    }

    fn classifier(&self) -> Result<&dyn GazeClassifier> {
        self.classifier
            .as_deref()
            .ok_or_else(|| Error::Classifier("this session has no classifier; send gaze messages".into()))
    }

    /// Decoded images for frame messages, so bad input fails before any tick.
    fn decode(&self, msg: &InputMessage) -> Result<Option<(EyeFrame, EyeFrame)>> {
        match msg {
            InputMessage::Frames { left, right } => {
                self.classifier()?;
                Ok(Some((decode_png_b64(left)?, decode_png_b64(right)?)))
            }
            InputMessage::Synth { .. } => {
                self.classifier()?;
                Ok(None)
            }
            _ => Ok(None),
        }
    }

    fn step(&mut self, msg: &InputMessage, frames: Option<&(EyeFrame, EyeFrame)>, world: &World2D) -> Result<Telemetry> {
        let safety = safety_check(&self.config.sensors, world, &self.controller.state().pose);
        let mut t = match msg {
            InputMessage::Gaze { left, right } => {
                let l = left.map(Prediction::certain);
                let r = right.map(Prediction::certain);
                self.controller.tick_predictions(l.as_ref(), r.as_ref(), &safety)
            }
            InputMessage::Frames { .. } => {
                let (l, r) = frames.expect("frames were decoded");
                let c = self.classifier.clone().expect("classifier was checked");
                self.controller.tick_frames(l, r, c.as_ref(), &safety)
            }
            InputMessage::Synth { left, right } => {
                let tick = self.tick();
                let cfg = &self.config;
                let l = synth_frame(cfg.user_seed, cfg.scenario, *left, mix(cfg.seed, 2 * tick), EyeSide::Left)?;
                let r = synth_frame(cfg.user_seed, cfg.scenario, *right, mix(cfg.seed, 2 * tick + 1), EyeSide::Right)?;
                let c = self.classifier.clone().expect("classifier was checked");
                self.controller.tick_frames(&l, &r, c.as_ref(), &safety)
            }
            InputMessage::Reset => unreachable!("resets take no tick"),
        };
        t.tick += self.offset;
        Ok(t)
    }
}

/// Serializes telemetry as one JSON object per line.
pub fn telemetry_jsonl(records: &[Telemetry]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{Command, Fused};
    use crate::safety::Obstacle;
    use GazeClass::*;

    fn engaged() -> SimSession {
        SimSession::new(
            SessionConfig {
                engaged: true,
                ..SessionConfig::default()
            },
            None,
        )
        .unwrap()
    }

    #[test]
    fn ten_forward_events_drive_forward() {
        let mut s = engaged();
        let world = World2D::default();
        let t = s.apply(&Envelope { repeat: Some(10), ..Envelope::gaze(Forward, Forward) }, &world).unwrap();
        assert_eq!(t.len(), 10);
        assert!(t[..9].iter().all(|r| r.command == Command::Stop));
        assert_eq!(t[9].command, Command::Forward);
        assert_eq!(t[9].tick, 9);
    }

    #[test]
    fn empty_script_gives_no_ticks_and_idle_gives_stop() {
        let mut s = engaged();
        assert!(s.run_script(&[], &World2D::default()).unwrap().is_empty());
        let t = s
            .apply(&Envelope { at: Some(5), ..Envelope::new(InputMessage::Reset) }, &World2D::default())
            .unwrap();
        assert_eq!(t.len(), 5);
        assert!(t.iter().all(|r| r.command == Command::Stop && r.fused == Fused::Disagree));
    }

    #[test]
    fn gaps_hold_the_last_message() {
        let mut s = engaged();
        let world = World2D::default();
        s.apply(&Envelope::gaze(Left, Left), &world).unwrap();
        let t = s.apply(&Envelope { at: Some(12), ..Envelope::gaze(Right, Right) }, &world).unwrap();
        assert_eq!(t.len(), 12);
        assert!(t[..11].iter().all(|r| r.fused == Fused::Agreed(Left)));
        assert_eq!(t[8].command, Command::Left);
        assert_eq!(t[11].fused, Fused::Agreed(Right));
        assert!(s.apply(&Envelope { at: Some(3), ..Envelope::gaze(Right, Right) }, &world).is_err());
    }

    #[test]
    fn reset_keeps_ticks_increasing() {
        let mut s = engaged();
        let world = World2D::default();
        s.apply(&Envelope { repeat: Some(30), ..Envelope::gaze(Forward, Forward) }, &world).unwrap();
        assert!(s.controller().state().pose.x > 0.0);
        assert!(s.apply(&Envelope::new(InputMessage::Reset), &world).unwrap().is_empty());
        assert_eq!(s.controller().state().pose, Pose::default());
        let t = s.apply(&Envelope::gaze(Forward, Forward), &world).unwrap();
        assert_eq!(t[0].tick, 30);
    }

    #[test]
    fn obstacle_ahead_forces_emergency_stop() {
        let mut s = engaged();
        let world = World2D::new(vec![Obstacle::circle([2.2, 0.0], 0.3)]).unwrap();
        let t = s.apply(&Envelope { repeat: Some(120), ..Envelope::gaze(Forward, Forward) }, &world).unwrap();
        let first = t.iter().position(|r| r.emergency_stop).expect("reaches the obstacle");
        assert_eq!(t[first].command, Command::Stop);
        assert!(t[first..].iter().all(|r| r.command == Command::Stop));
        assert!(t.last().unwrap().pose.x < 2.2 - 0.3);
    }

    #[test]
    fn frames_need_a_classifier_and_valid_png() {
        let mut s = engaged();
        let world = World2D::default();
        let err = s.apply(&Envelope::new(InputMessage::Synth { left: Right, right: Right }), &world);
        assert!(matches!(err, Err(Error::Classifier(_))));
        assert_eq!(s.tick(), 0);
        let f = synth_frame(1, Scenario::default(), Right, 0, EyeSide::Left).unwrap();
        let good = encode_png_b64(&f).unwrap();
        assert_eq!(decode_png_b64(&good).unwrap().as_raw(), f.as_raw());
        assert!(decode_png_b64("***").is_err());
    }

    #[test]
    fn envelope_json_shape() {
        let e = Envelope::parse(r#"{"type":"gaze","left":"Forward","right":null,"repeat":3}"#).unwrap();
        assert_eq!(e.repeat, Some(3));
        assert_eq!(e.message, InputMessage::Gaze { left: Some(Forward), right: None });
        assert!(Envelope::parse(r#"{"type":"warp"}"#).is_err());
        assert!(Envelope::parse("not json").is_err());
        let script = parse_script("{\"type\":\"reset\"}\n\n{\"type\":\"gaze\",\"left\":\"Left\",\"right\":\"Left\"}\n").unwrap();
        assert_eq!(script.len(), 2);
        assert!(parse_script("{\"type\":\"gaze\"}\n{").is_err());
    }

    #[test]
    fn replay_is_deterministic() {
        let world = World2D::new(vec![Obstacle::circle([3.0, 0.5], 0.4)]).unwrap();
        let script = parse_script(
            "{\"type\":\"gaze\",\"left\":\"Closed\",\"right\":\"Forward\",\"repeat\":15}\n\
             {\"type\":\"gaze\",\"left\":\"Forward\",\"right\":\"Forward\",\"repeat\":60}\n\
             {\"type\":\"gaze\",\"left\":\"Left\",\"right\":\"Left\",\"at\":100}\n",
        )
        .unwrap();
        let run = || telemetry_jsonl(&SimSession::new(SessionConfig::default(), None).unwrap().run_script(&script, &world).unwrap()).unwrap();
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a.lines().count(), 101);
    }
}
