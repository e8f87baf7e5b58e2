//! The per-frame decision loop that turns two eye classifications into a
//! chair command.
//!
//! Each tick the controller
//!
//! 1. feeds the raw per-eye classes to the wink detector, which toggles
//!    engagement after a sustained left-eye wink;
//! 2. fuses the two classes (agreement or disagreement);
//! 3. applies, in order of precedence, the emergency stop, the engagement
//!    gate and the windowed majority vote;
//! 4. integrates the chair pose for one tick.
//!
//! A vote happens once per full window; between votes the last voted
//! command is held. Any stop condition clears the window and the held
//! command, so motion only resumes after a complete fresh window.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::classifier::{GazeClassifier, Prediction};
use crate::corpus::GazeClass;
use crate::error::{Error, Result};
use crate::frame::EyeFrame;
pub use crate::safety::Pose;
use crate::safety::{SafetyReport, MAX_CHAIR_SPEED};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Command {
    Stop,
    Forward,
    Left,
    Right,
}

impl Command {
    pub const ALL: [Command; 4] = [Command::Stop, Command::Forward, Command::Left, Command::Right];
}

impl From<GazeClass> for Command {
    fn from(class: GazeClass) -> Self {
        match class {
            GazeClass::Right => Command::Right,
            GazeClass::Forward => Command::Forward,
            GazeClass::Left => Command::Left,
            GazeClass::Closed => Command::Stop,
        }
    }
}

/// Outcome of comparing the two eyes for one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Fused {
    Agreed(GazeClass),
    Disagree,
}

impl Fused {
    /// All five values: the four agreements in class order, then disagreement.
    pub const ALL: [Fused; 5] = [
        Fused::Agreed(GazeClass::Right),
        Fused::Agreed(GazeClass::Forward),
        Fused::Agreed(GazeClass::Left),
        Fused::Agreed(GazeClass::Closed),
        Fused::Disagree,
    ];
}

impl fmt::Display for Fused {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fused::Agreed(c) => write!(f, "{c}"),
            Fused::Disagree => f.write_str("Disagree"),
        }
    }
}

impl FromStr for Fused {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("disagree") {
            Ok(Fused::Disagree)
        } else {
            s.parse().map(Fused::Agreed)
        }
    }
}

impl Serialize for Fused {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Fused {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn fuse(left: GazeClass, right: GazeClass) -> Fused {
    if left == right {
        Fused::Agreed(left)
    } else {
        Fused::Disagree
    }
}

/// Majority vote over a window: a class needs at least `majority` agreeing
/// frames, otherwise the chair stops.
pub fn aggregate(window: &[Fused], majority: usize) -> Command {
    let mut counts = [0usize; GazeClass::COUNT];
    for f in window {
        if let Fused::Agreed(c) = f {
            counts[c.index()] += 1;
        }
    }
    GazeClass::ALL
        .into_iter()
        .find(|c| counts[c.index()] >= majority)
        .map_or(Command::Stop, Command::from)
}

/// Toggles engagement on a sustained left-eye wink.
///
/// A wink frame has the left eye closed and the right eye open. A toggle
/// fires when `frames` wink frames arrive in a row; the detector then stays
/// disarmed until a non-wink frame ends the wink. Any non-wink frame,
/// including a blink with both eyes closed, restarts the count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WinkDetector {
    frames: usize,
    run: usize,
    armed: bool,
}

impl WinkDetector {
    pub fn new(frames: usize) -> Result<Self> {
        if frames == 0 {
            return Err(Error::InvalidParameter("wink length must be at least one frame".into()));
        }
        Ok(WinkDetector {
            frames,
            run: 0,
            armed: true,
        })
    }

    /// Feeds one frame; `None` marks an eye the classifier failed on.
    pub fn push(&mut self, left: Option<GazeClass>, right: Option<GazeClass>) -> bool {
        let wink = left == Some(GazeClass::Closed) && matches!(right, Some(c) if c != GazeClass::Closed);
        if !wink {
            self.run = 0;
            self.armed = true;
            return false;
        }
        self.run += 1;
        if self.armed && self.run >= self.frames {
            self.armed = false;
            return true;
        }
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServoPositions {
    pub servo_a: f64,
    pub servo_b: f64,
}

/// Servo angles in degrees for each command. Servo A drives forward
/// motion, servo B steering; 90 is neutral on both.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServoTable {
    pub stop: ServoPositions,
    pub forward: ServoPositions,
    pub left: ServoPositions,
    pub right: ServoPositions,
}

impl Default for ServoTable {
    fn default() -> Self {
        let at = |servo_a, servo_b| ServoPositions { servo_a, servo_b };
        ServoTable {
            stop: at(90.0, 90.0),
            forward: at(120.0, 90.0),
            left: at(90.0, 60.0),
            right: at(90.0, 120.0),
        }
    }
}

impl ServoTable {
    pub fn position(&self, cmd: Command) -> ServoPositions {
        match cmd {
            Command::Stop => self.stop,
            Command::Forward => self.forward,
            Command::Left => self.left,
            Command::Right => self.right,
        }
    }

    pub fn command(&self, pos: ServoPositions) -> Option<Command> {
        Command::ALL.into_iter().find(|&c| self.position(c) == pos)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, a) in Command::ALL.iter().enumerate() {
            for b in &Command::ALL[i + 1..] {
                if self.position(*a) == self.position(*b) {
                    return Err(Error::InvalidParameter(format!(
                        "servo positions for {a:?} and {b:?} coincide"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlConfig {
    pub window: usize,
    pub majority: usize,
    pub wink_frames: usize,
    /// Forward speed, m/s.
    pub cruise_speed: f64,
    /// Turning rate in place, rad/s.
    pub turn_rate: f64,
    /// Control ticks per second.
    pub tick_rate: f64,
    pub servos: ServoTable,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            window: 10,
            majority: 6,
            wink_frames: 15,
            cruise_speed: 1.0,
            turn_rate: 0.6,
            tick_rate: 30.0,
            servos: ServoTable::default(),
        }
    }
}

impl ControlConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.window == 0 || self.majority == 0 || self.majority > self.window {
            return bad(format!(
                "majority {} must lie in 1..={} (the window)",
                self.majority, self.window
            ));
        }
        if self.wink_frames == 0 {
            return bad("wink length must be at least one frame".into());
        }
        if !(self.cruise_speed >= 0.0 && self.cruise_speed <= MAX_CHAIR_SPEED) {
            return bad(format!(
                "cruise speed {} outside 0..={MAX_CHAIR_SPEED} m/s",
                self.cruise_speed
            ));
        }
        if !(self.turn_rate >= 0.0) || !self.turn_rate.is_finite() {
            return bad("turn rate must be finite and non-negative".into());
        }
        if !(self.tick_rate > 0.0) || !self.tick_rate.is_finite() {
            return bad("tick rate must be positive".into());
        }
        self.servos.validate()
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.tick_rate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ChairState {
    pub pose: Pose,
    pub speed: f64,
    pub engaged: bool,
}

/// Integrates one command over `dt` seconds. The chair only drives forward
/// or turns in place; Left turns counter-clockwise.
pub fn step_kinematics(state: &ChairState, cmd: Command, dt: f64, config: &ControlConfig) -> Result<ChairState> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidParameter(format!("time step must be positive, got {dt}")));
    }
    let mut next = *state;
    next.speed = 0.0;
    match cmd {
        Command::Stop => {}
        Command::Forward => {
            let v = config.cruise_speed.clamp(0.0, MAX_CHAIR_SPEED);
            next.pose.x += v * dt * state.pose.heading.cos();
            next.pose.y += v * dt * state.pose.heading.sin();
            next.speed = v;
        }
        Command::Left => next.pose.heading += config.turn_rate * dt,
        Command::Right => next.pose.heading -= config.turn_rate * dt,
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EyeTelemetry {
    pub class: Option<GazeClass>,
    pub probs: Option<[f64; 4]>,
}

impl From<Option<&Prediction>> for EyeTelemetry {
    fn from(p: Option<&Prediction>) -> Self {
        EyeTelemetry {
            class: p.map(|p| p.class),
            probs: p.map(|p| p.probs),
        }
    }
}

/// One record per control tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub tick: u64,
    pub left: EyeTelemetry,
    pub right: EyeTelemetry,
    pub fused: Fused,
    pub command: Command,
    pub engaged: bool,
    pub min_distance_m: Option<f64>,
    pub pose: Pose,
    pub emergency_stop: bool,
}

#[derive(Debug, Clone)]
pub struct Controller {
    config: ControlConfig,
    wink: WinkDetector,
    window: Vec<Fused>,
    held: Command,
    state: ChairState,
    tick: u64,
}

impl Controller {
    pub fn new(config: ControlConfig, start: Pose) -> Result<Self> {
        config.validate()?;
        Ok(Controller {
            wink: WinkDetector::new(config.wink_frames)?,
            window: Vec::with_capacity(config.window),
            held: Command::Stop,
            state: ChairState {
                pose: start,
                ..ChairState::default()
            },
            tick: 0,
            config,
        })
    }

    pub fn config(&self) -> &ControlConfig {
        &self.config
    }

    pub fn state(&self) -> &ChairState {
        &self.state
    }

    pub fn tick_count(&self) -> u64 {
        self.tick
    }

    /// Flips engagement directly, as a completed wink would.
    pub fn set_engaged(&mut self, engaged: bool) {
        if self.state.engaged != engaged {
            self.state.engaged = engaged;
            self.reset_vote();
        }
    }

    fn reset_vote(&mut self) {
        self.window.clear();
        self.held = Command::Stop;
    }

    /// Advances one tick from per-eye predictions; `None` marks a failed
    /// classification, which counts as disagreement.
    pub fn tick_predictions(
        &mut self,
        left: Option<&Prediction>,
        right: Option<&Prediction>,
        safety: &SafetyReport,
    ) -> Telemetry {
        let lc = left.map(|p| p.class);
        let rc = right.map(|p| p.class);
        if self.wink.push(lc, rc) {
            self.state.engaged = !self.state.engaged;
            self.reset_vote();
        }
        let fused = match (lc, rc) {
            (Some(l), Some(r)) => fuse(l, r),
            _ => Fused::Disagree,
        };

        let command = if safety.is_stop() || !self.state.engaged {
            self.reset_vote();
            Command::Stop
        } else {
            self.window.push(fused);
            if self.window.len() >= self.config.window {
                self.held = aggregate(&self.window, self.config.majority);
                self.window.clear();
            }
            self.held
        };

        self.state = step_kinematics(&self.state, command, self.config.dt(), &self.config)
            .expect("validated tick rate gives a positive step");
        let record = Telemetry {
            tick: self.tick,
            left: left.into(),
            right: right.into(),
            fused,
            command,
            engaged: self.state.engaged,
            min_distance_m: safety.min_distance,
            pose: self.state.pose,
            emergency_stop: safety.is_stop(),
        };
        self.tick += 1;
        record
    }

    /// Classifies both frames (concurrently) and advances one tick.
    pub fn tick_frames(
        &mut self,
        left: &EyeFrame,
        right: &EyeFrame,
        classifier: &dyn GazeClassifier,
        safety: &SafetyReport,
    ) -> Telemetry {
        let (l, r) = rayon::join(|| classifier.classify(left), || classifier.classify(right));
        self.tick_predictions(l.as_ref().ok(), r.as_ref().ok(), safety)
    }
}
