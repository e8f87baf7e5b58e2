//! Ultrasonic ranging against a flat obstacle world.
//!
//! Each sensor is a 2D cone with a single nearest-hit return. Level sensors
//! see ordinary obstacles; downward-slanted sensors see only obstacles
//! flagged `low_profile`, standing in for objects lower than the chair
//! frame. Poses use a chair frame with `x` forward and `y` to the left,
//! headings counter-clockwise in radians.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SPEED_OF_SOUND: f64 = 340.0;

/// Top speed of the chair in m/s (20 km/h).
pub const MAX_CHAIR_SPEED: f64 = 5.56;

/// Distance to a reflector from the round-trip echo time.
pub fn echo_to_distance(travel_time: f64) -> Result<f64> {
    if !(travel_time >= 0.0) || !travel_time.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "echo travel time must be a finite non-negative number of seconds, got {travel_time}"
        )));
    }
    Ok(travel_time / 2.0 * SPEED_OF_SOUND)
}

/// Round-trip echo time for a reflector at `distance`.
pub fn distance_to_echo(distance: f64) -> f64 {
    2.0 * distance / SPEED_OF_SOUND
}

/// How far the chair travels while a reading is in flight.
pub fn error_bound(total_delay: f64, chair_speed: f64) -> Result<f64> {
    if !(total_delay >= 0.0 && chair_speed >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "delay and speed must be non-negative, got {total_delay} s and {chair_speed} m/s"
        )));
    }
    Ok(total_delay * chair_speed)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Pose { x, y, heading }
    }

    /// Maps a chair-frame point into the world.
    pub fn transform(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.heading.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pitch {
    Level,
    SlantedDown,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UltrasonicSensor {
    /// Chair-frame position, metres.
    pub mount: [f64; 2],
    pub yaw: f64,
    pub pitch: Pitch,
    pub beam_half_angle: f64,
    pub max_range: f64,
}

impl UltrasonicSensor {
    pub fn validate(&self) -> Result<()> {
        if !(self.beam_half_angle > 0.0 && self.beam_half_angle < PI / 2.0) {
            return Err(Error::InvalidParameter(format!(
                "beam half-angle must lie in (0, pi/2), got {}",
                self.beam_half_angle
            )));
        }
        if !(self.max_range > 0.0) || !self.max_range.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "max range must be positive, got {}",
                self.max_range
            )));
        }
        Ok(())
    }

    /// World-frame apex and boresight angle for a chair pose.
    pub fn placement(&self, pose: &Pose) -> ([f64; 2], f64) {
        (pose.transform(self.mount), pose.heading + self.yaw)
    }

    fn sees(&self, low_profile: bool) -> bool {
        match self.pitch {
            Pitch::Level => !low_profile,
            Pitch::SlantedDown => low_profile,
        }
    }
}

/// Forward edge of the chair frame, in the chair frame.
pub const FRAME_FRONT: f64 = 0.45;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorArray {
    pub sensors: Vec<UltrasonicSensor>,
    /// Readings at or below this distance trigger an emergency stop.
    pub stop_threshold: f64,
    /// Sensing plus processing latency, seconds.
    pub total_delay: f64,
}

impl Default for SensorArray {
    /// Three level sensors spanning 43 degrees and two slanted ones between them.
    ///
    /// Each beam is 43/3 degrees wide. The outer pair sits on the front
    /// frame turned out by one full beam width, so their inner edges meet
    /// the middle beam's edges in direction. The middle sensor is mounted
    /// 25 cm further back, which widens its footprint enough that the
    /// uncovered strips between footprints stay under 8 cm at 1 m.
    fn default() -> Self {
        let beam = (43.0f64 / 3.0).to_radians();
        let half = beam / 2.0;
        let level = |mount, yaw| UltrasonicSensor {
            mount,
            yaw,
            pitch: Pitch::Level,
            beam_half_angle: half,
            max_range: 4.0,
        };
        let slanted = |mount, yaw: f64| UltrasonicSensor {
            mount,
            yaw: yaw.to_radians(),
            pitch: Pitch::SlantedDown,
            beam_half_angle: half,
            max_range: 4.0,
        };
        SensorArray {
            sensors: vec![
                level([FRAME_FRONT, 0.11], beam),
                slanted([FRAME_FRONT, 0.055], 7.0),
                level([FRAME_FRONT - 0.25, 0.0], 0.0),
                slanted([FRAME_FRONT, -0.055], -7.0),
                level([FRAME_FRONT, -0.11], -beam),
            ],
            stop_threshold: 1.0,
            total_delay: 0.002,
        }
    }
}

impl SensorArray {
    pub const SENSOR_COUNT: usize = 5;

    pub fn validate(&self) -> Result<()> {
        if self.sensors.len() != Self::SENSOR_COUNT {
            return Err(Error::InvalidParameter(format!(
                "sensor array needs exactly {} sensors, got {}",
                Self::SENSOR_COUNT,
                self.sensors.len()
            )));
        }
        if !(self.stop_threshold > 0.0) {
            return Err(Error::InvalidParameter("stop threshold must be positive".into()));
        }
        if !(self.total_delay >= 0.0) {
            return Err(Error::InvalidParameter("total delay must be non-negative".into()));
        }
        self.sensors.iter().try_for_each(|s| s.validate())
    }

    /// Worst-case position error of a reading taken at `chair_speed`.
    pub fn reading_error(&self, chair_speed: f64) -> Result<f64> {
        error_bound(self.total_delay, chair_speed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Obstacle {
    Circle {
        center: [f64; 2],
        radius: f64,
        #[serde(default)]
        low_profile: bool,
    },
    Segment {
        endpoints: [[f64; 2]; 2],
        #[serde(default)]
        low_profile: bool,
    },
}

impl Obstacle {
    pub fn circle(center: [f64; 2], radius: f64) -> Self {
        Obstacle::Circle {
            center,
            radius,
            low_profile: false,
        }
    }

    pub fn segment(a: [f64; 2], b: [f64; 2]) -> Self {
        Obstacle::Segment {
            endpoints: [a, b],
            low_profile: false,
        }
    }

    pub fn low_profile(self) -> Self {
        match self {
            Obstacle::Circle { center, radius, .. } => Obstacle::Circle {
                center,
                radius,
                low_profile: true,
            },
            Obstacle::Segment { endpoints, .. } => Obstacle::Segment {
                endpoints,
                low_profile: true,
            },
        }
    }

    pub fn is_low_profile(&self) -> bool {
        match *self {
            Obstacle::Circle { low_profile, .. } | Obstacle::Segment { low_profile, .. } => low_profile,
        }
    }

    fn validate(&self) -> Result<()> {
        let finite = |p: &[f64; 2]| p[0].is_finite() && p[1].is_finite();
        match self {
            Obstacle::Circle { center, radius, .. } => {
                if !finite(center) || !(*radius > 0.0) || !radius.is_finite() {
                    return Err(Error::InvalidParameter(format!(
                        "circle obstacles need a finite centre and positive radius, got {center:?} r={radius}"
                    )));
                }
            }
            Obstacle::Segment { endpoints, .. } => {
                if !endpoints.iter().all(finite) {
                    return Err(Error::InvalidParameter(
                        "segment endpoints must be finite".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct World2D {
    pub obstacles: Vec<Obstacle>,
}

impl World2D {
    pub fn new(obstacles: Vec<Obstacle>) -> Result<Self> {
        let world = World2D { obstacles };
        world.validate()?;
        Ok(world)
    }

    pub fn validate(&self) -> Result<()> {
        self.obstacles.iter().try_for_each(Obstacle::validate)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let world: World2D = serde_json::from_str(text)?;
        world.validate()?;
        Ok(world)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EchoResult {
    /// Round-trip time in seconds.
    Echo(f64),
    Timeout,
}

impl EchoResult {
    pub fn distance(&self) -> Option<f64> {
        match *self {
            EchoResult::Echo(t) => Some(t / 2.0 * SPEED_OF_SOUND),
            EchoResult::Timeout => None,
        }
    }
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn cross(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

fn unit(angle: f64) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    [c, s]
}

/// Distance from the apex to the nearest point of a disc inside the cone.
fn cone_circle(apex: [f64; 2], bore: f64, half: f64, center: [f64; 2], radius: f64) -> Option<f64> {
    let c = sub(center, apex);
    let dist = dot(c, c).sqrt();
    if dist <= radius {
        return Some(0.0);
    }
    let axis = unit(bore);
    // Angle between the boresight and the centre direction.
    let off = cross(axis, c).atan2(dot(axis, c)).abs();
    if off <= half {
        return Some(dist - radius);
    }
    // The unconstrained nearest point is outside the cone, so the
    // constrained one lies on an edge ray.
    [bore - half, bore + half]
        .into_iter()
        .filter_map(|edge| {
            let e = unit(edge);
            let b = dot(c, e);
            let disc = b * b - (dist * dist - radius * radius);
            (b > 0.0 && disc >= 0.0).then(|| b - disc.sqrt())
        })
        .min_by(f64::total_cmp)
}

/// Distance from the apex to the nearest point of a segment inside the cone.
fn cone_segment(apex: [f64; 2], bore: f64, half: f64, a: [f64; 2], b: [f64; 2]) -> Option<f64> {
    let pa = sub(a, apex);
    let d = sub(b, a);
    // The cone is the intersection of two half-planes through the apex.
    let right = unit(bore - half);
    let left = unit(bore + half);
    let mut lo: f64 = 0.0;
    let mut hi: f64 = 1.0;
    for (edge, sign) in [(right, 1.0), (left, -1.0)] {
        // Inside means sign * cross(edge, p) >= 0.
        let f0 = sign * cross(edge, pa);
        let fd = sign * cross(edge, d);
        if fd.abs() < 1e-15 {
            if f0 < 0.0 {
                return None;
            }
        } else {
            let t = -f0 / fd;
            if fd > 0.0 {
                lo = lo.max(t);
            } else {
                hi = hi.min(t);
            }
        }
        if lo > hi {
            return None;
        }
    }
    let dd = dot(d, d);
    let t = if dd == 0.0 { lo } else { (-dot(pa, d) / dd).clamp(lo, hi) };
    let p = [pa[0] + t * d[0], pa[1] + t * d[1]];
    Some(dot(p, p).sqrt())
}

/// Nearest detectable obstacle inside the sensor's cone and range.
pub fn ping(world: &World2D, sensor: &UltrasonicSensor, pose: &Pose) -> EchoResult {
    let (apex, bore) = sensor.placement(pose);
    let half = sensor.beam_half_angle;
    let nearest = world
        .obstacles
        .iter()
        .filter(|o| sensor.sees(o.is_low_profile()))
        .filter_map(|o| match *o {
            Obstacle::Circle { center, radius, .. } => cone_circle(apex, bore, half, center, radius),
            Obstacle::Segment { endpoints, .. } => cone_segment(apex, bore, half, endpoints[0], endpoints[1]),
        })
        .min_by(f64::total_cmp);
    match nearest {
        Some(d) if d <= sensor.max_range => EchoResult::Echo(distance_to_echo(d)),
        _ => EchoResult::Timeout,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SafetyState {
    Clear,
    EmergencyStop(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyReport {
    pub state: SafetyState,
    /// Smallest distance any sensor reported, if any echoed.
    pub min_distance: Option<f64>,
    pub echoes: Vec<EchoResult>,
}

impl SafetyReport {
    pub fn is_stop(&self) -> bool {
        matches!(self.state, SafetyState::EmergencyStop(_))
    }
}

/// Pings every sensor and stops if the closest reading is within the threshold.
pub fn safety_check(array: &SensorArray, world: &World2D, pose: &Pose) -> SafetyReport {
    let echoes: Vec<EchoResult> = array.sensors.iter().map(|s| ping(world, s, pose)).collect();
    let min_distance = echoes
        .iter()
        .filter_map(EchoResult::distance)
        .min_by(f64::total_cmp);
    let state = match min_distance {
        Some(d) if d <= array.stop_threshold => SafetyState::EmergencyStop(d),
        _ => SafetyState::Clear,
    };
    SafetyReport {
        state,
        min_distance,
        echoes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn level_ahead() -> UltrasonicSensor {
        UltrasonicSensor {
            mount: [0.0, 0.0],
            yaw: 0.0,
            pitch: Pitch::Level,
            beam_half_angle: 10f64.to_radians(),
            max_range: 4.0,
        }
    }

    #[test]
    fn echo_fixtures() {
        assert!((echo_to_distance(0.010).unwrap() - 1.7).abs() < 1e-12);
        assert_eq!(echo_to_distance(0.0).unwrap(), 0.0);
        let t: f64 = 2.0 * 1.75 / 340.0;
        assert!((t - 0.010294).abs() < 1e-6);
        assert!((echo_to_distance(t).unwrap() - 1.75).abs() < 1e-12);
        assert!(echo_to_distance(-1e-3).is_err());
        assert!(echo_to_distance(f64::NAN).is_err());
    }

    #[test]
    fn error_bound_fixtures() {
        let e = error_bound(0.002, 5.56).unwrap();
        assert!((e - 0.01112).abs() < 1e-15);
        assert_eq!((e * 1000.0).round() / 1000.0, 0.011);
        assert_eq!(error_bound(0.0, 5.56).unwrap(), 0.0);
        assert!((error_bound(0.001, 5.56).unwrap() - 0.00556).abs() < 1e-15);
        assert!(error_bound(-0.001, 1.0).is_err());
    }

    #[test]
    fn dead_ahead_circle_echoes_ten_ms() {
        let world = World2D::new(vec![Obstacle::circle([2.0, 0.0], 0.3)]).unwrap();
        let echo = ping(&world, &level_ahead(), &Pose::default());
        let EchoResult::Echo(t) = echo else { panic!("expected echo") };
        assert!((t - 0.010).abs() < 1e-12);
        assert!((echo.distance().unwrap() - 1.7).abs() < 1e-12);
    }

    #[test]
    fn outside_cone_and_range_time_out() {
        let s = level_ahead();
        let side = World2D::new(vec![Obstacle::circle([1.0, 1.0], 0.1)]).unwrap();
        assert_eq!(ping(&side, &s, &Pose::default()), EchoResult::Timeout);
        let far = World2D::new(vec![Obstacle::circle([10.0, 0.0], 0.3)]).unwrap();
        assert_eq!(ping(&far, &s, &Pose::default()), EchoResult::Timeout);
        assert_eq!(ping(&World2D::default(), &s, &Pose::default()), EchoResult::Timeout);
    }

    #[test]
    fn circle_clipped_by_cone_edge() {
        // Centre 20 degrees off axis, radius large enough to reach into a 10 degree cone.
        let d = 2.0;
        let centre = [d * 20f64.to_radians().cos(), d * 20f64.to_radians().sin()];
        let world = World2D::new(vec![Obstacle::circle(centre, 0.5)]).unwrap();
        let got = ping(&world, &level_ahead(), &Pose::default()).distance().unwrap();
        // The nearest in-cone point lies on the upper edge ray.
        let e = unit(10f64.to_radians());
        let b = dot(centre, e);
        let expect = b - (b * b - (d * d - 0.25)).sqrt();
        assert!((got - expect).abs() < 1e-12);
        assert!(got > d - 0.5);
    }

    #[test]
    fn apex_inside_obstacle_reads_zero() {
        let world = World2D::new(vec![Obstacle::circle([0.0, 0.0], 0.5)]).unwrap();
        assert_eq!(ping(&world, &level_ahead(), &Pose::default()).distance(), Some(0.0));
    }

    #[test]
    fn segment_wall_ahead() {
        let wall = World2D::new(vec![Obstacle::segment([1.5, -3.0], [1.5, 3.0])]).unwrap();
        let d = ping(&wall, &level_ahead(), &Pose::default()).distance().unwrap();
        assert!((d - 1.5).abs() < 1e-12);
        // Rotated 45 degrees the nearest in-cone point sits on the lower edge ray.
        let pose = Pose::new(0.0, 0.0, 45f64.to_radians());
        let d = ping(&wall, &level_ahead(), &pose).distance().unwrap();
        assert!((d - 1.5 / 35f64.to_radians().cos()).abs() < 1e-12);
        // A wall behind the sensor is invisible.
        let behind = World2D::new(vec![Obstacle::segment([-1.0, -3.0], [-1.0, 3.0])]).unwrap();
        assert_eq!(ping(&behind, &level_ahead(), &Pose::default()), EchoResult::Timeout);
    }

    #[test]
    fn pitch_selects_obstacle_kind() {
        let low = World2D::new(vec![Obstacle::circle([1.0, 0.0], 0.1).low_profile()]).unwrap();
        let tall = World2D::new(vec![Obstacle::circle([1.0, 0.0], 0.1)]).unwrap();
        let level = level_ahead();
        let slanted = UltrasonicSensor {
            pitch: Pitch::SlantedDown,
            ..level
        };
        assert_eq!(ping(&low, &level, &Pose::default()), EchoResult::Timeout);
        assert!(ping(&low, &slanted, &Pose::default()).distance().is_some());
        assert!(ping(&tall, &level, &Pose::default()).distance().is_some());
        assert_eq!(ping(&tall, &slanted, &Pose::default()), EchoResult::Timeout);
    }

    #[test]
    fn safety_check_fixtures() {
        let array = SensorArray::default();
        // A thin post straight ahead, `d` metres from the middle sensor; the
        // outer beams pass beside it.
        let middle_x = array.sensors[2].mount[0];
        let at = |d: f64| World2D::new(vec![Obstacle::circle([middle_x + d + 0.05, 0.0], 0.05)]).unwrap();
        let r = safety_check(&array, &at(0.5), &Pose::default());
        assert_eq!(r.echoes.iter().filter(|e| e.distance().is_some()).count(), 1);
        let SafetyState::EmergencyStop(d) = r.state else { panic!("expected stop") };
        assert!((d - 0.5).abs() < 1e-12, "{d}");
        let r = safety_check(&array, &at(1.5), &Pose::default());
        assert_eq!(r.state, SafetyState::Clear);
        let r = safety_check(&array, &World2D::default(), &Pose::default());
        assert_eq!(r.state, SafetyState::Clear);
        assert_eq!(r.min_distance, None);
        assert_eq!(r.echoes.len(), 5);
    }

    #[test]
    fn threshold_is_inclusive() {
        let array = SensorArray::default();
        let mut middle = array.sensors[2];
        middle.mount = [0.0, 0.0];
        let array = SensorArray {
            sensors: vec![middle; 5],
            ..array
        };
        // A wall exactly one metre ahead of every sensor.
        let wall = World2D::new(vec![Obstacle::segment([1.0, -2.0], [1.0, 2.0])]).unwrap();
        let r = safety_check(&array, &wall, &Pose::default());
        assert_eq!(r.state, SafetyState::EmergencyStop(1.0));
    }

    fn footprint(s: &UltrasonicSensor, x: f64) -> (f64, f64) {
        let reach = x - s.mount[0];
        let a = s.mount[1] + reach * (s.yaw - s.beam_half_angle).tan();
        let b = s.mount[1] + reach * (s.yaw + s.beam_half_angle).tan();
        (a.min(b), a.max(b))
    }

    #[test]
    fn default_geometry_matches_coverage_figures() {
        let array = SensorArray::default();
        array.validate().unwrap();
        let level: Vec<&UltrasonicSensor> = array.sensors.iter().filter(|s| s.pitch == Pitch::Level).collect();
        assert_eq!(level.len(), 3);
        let total: f64 = level.iter().map(|s| 2.0 * s.beam_half_angle).sum();
        assert!((total.to_degrees() - 43.0).abs() < 1e-9);
        // Union of angular intervals also spans 43 degrees.
        let lo = level.iter().map(|s| s.yaw - s.beam_half_angle).fold(f64::INFINITY, f64::min);
        let hi = level.iter().map(|s| s.yaw + s.beam_half_angle).fold(f64::NEG_INFINITY, f64::max);
        assert!(((hi - lo).to_degrees() - 43.0).abs() < 1e-9);

        let x = FRAME_FRONT + 1.0;
        let mut spans: Vec<(f64, f64)> = level.iter().map(|s| footprint(s, x)).collect();
        spans.sort_by(|a, b| a.0.total_cmp(&b.0));
        let width = spans.last().unwrap().1 - spans[0].0;
        assert!(width >= 1.0, "band {width}");
        for w in spans.windows(2) {
            let gap = w[1].0 - w[0].1;
            assert!(gap <= 0.08, "gap {gap}");
        }
    }

    #[test]
    fn world_json_round_trip() {
        let world = World2D::new(vec![
            Obstacle::circle([1.0, 2.0], 0.25),
            Obstacle::segment([0.0, 0.0], [3.0, 0.5]).low_profile(),
        ])
        .unwrap();
        let text = world.to_json().unwrap();
        assert!(text.contains("\"type\":\"circle\""));
        assert_eq!(World2D::from_json(&text).unwrap(), world);
        let parsed = World2D::from_json(r#"{"obstacles":[{"type":"circle","center":[1,1],"radius":0.5}]}"#).unwrap();
        assert!(!parsed.obstacles[0].is_low_profile());
        assert!(World2D::from_json(r#"{"obstacles":[{"type":"circle","center":[1,1],"radius":0}]}"#).is_err());
    }

    /// Independent oracle: the hit interval of bearings is found analytically
    /// and the along-ray surface distance is minimized by golden-section search.
    fn circle_oracle(apex: [f64; 2], bore: f64, half: f64, center: [f64; 2], r: f64) -> Option<f64> {
        let c = sub(center, apex);
        let d = c[0].hypot(c[1]);
        if d <= r {
            return Some(0.0);
        }
        let phi = c[1].atan2(c[0]);
        let spread = (r / d).asin();
        let rel = |a: f64| (a - bore + PI).rem_euclid(2.0 * PI) - PI;
        let centre_rel = rel(phi);
        let lo = (centre_rel - spread).max(-half);
        let hi = (centre_rel + spread).min(half);
        if lo > hi {
            return None;
        }
        let along = |a: f64| {
            let b = d * (bore + a - phi).cos();
            let disc = (b * b - (d * d - r * r)).max(0.0);
            b - disc.sqrt()
        };
        let g = (5f64.sqrt() - 1.0) / 2.0;
        let (mut a, mut b) = (lo, hi);
        for _ in 0..200 {
            let x1 = b - g * (b - a);
            let x2 = a + g * (b - a);
            if along(x1) <= along(x2) {
                b = x2;
            } else {
                a = x1;
            }
        }
        Some(along(lo).min(along(hi)).min(along((a + b) / 2.0)))
    }

    proptest! {
        #[test]
        fn ping_matches_golden_section_oracle(
            cx in -5.0f64..5.0, cy in -5.0f64..5.0, r in 0.05f64..1.5,
            heading in -PI..PI, half_deg in 2.0f64..40.0,
        ) {
            let sensor = UltrasonicSensor { beam_half_angle: half_deg.to_radians(), max_range: 4.0, ..level_ahead() };
            let pose = Pose::new(0.3, -0.2, heading);
            let world = World2D::new(vec![Obstacle::circle([cx, cy], r)]).unwrap();
            let got = ping(&world, &sensor, &pose).distance();
            let (apex, bore) = sensor.placement(&pose);
            let oracle = circle_oracle(apex, bore, sensor.beam_half_angle, [cx, cy], r).filter(|&d| d <= 4.0);
            match (got, oracle) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b),
                (None, None) => {}
                // Grazing hits at exactly the range limit can fall either way.
                (a, b) => prop_assert!(a.or(b).map_or(false, |d| (d - 4.0).abs() < 1e-9 || d < 1e-12), "{:?} vs {:?}", a, b),
            }
            if let Some(d) = got {
                prop_assert!(d <= sensor.max_range);
            }
        }

        #[test]
        fn ping_segment_matches_sampling(
            ax in -4.0f64..4.0, ay in -4.0f64..4.0, bx in -4.0f64..4.0, by in -4.0f64..4.0,
            heading in -PI..PI,
        ) {
            let sensor = UltrasonicSensor { max_range: 100.0, ..level_ahead() };
            let pose = Pose::new(0.0, 0.0, heading);
            let world = World2D::new(vec![Obstacle::segment([ax, ay], [bx, by])]).unwrap();
            let got = ping(&world, &sensor, &pose).distance();
            let axis = unit(heading);
            let mut best: Option<f64> = None;
            let n = 20_000;
            for i in 0..=n {
                let t = i as f64 / n as f64;
                let p = [ax + t * (bx - ax), ay + t * (by - ay)];
                let len = p[0].hypot(p[1]);
                let inside = len == 0.0 || (dot(p, axis) / len).clamp(-1.0, 1.0).acos() <= sensor.beam_half_angle;
                if inside {
                    best = Some(best.map_or(len, |b: f64| b.min(len)));
                }
            }
            let step = ((bx - ax).hypot(by - ay)) / n as f64;
            match (got, best) {
                (Some(a), Some(b)) => prop_assert!(a <= b + 1e-9 && b - a <= step + 1e-9, "{} vs {}", a, b),
                (Some(a), None) => prop_assert!(step > 0.0 || a.is_finite()),
                (None, Some(_)) => prop_assert!(false, "sampling found a hit the ping missed"),
                (None, None) => {}
            }
        }

        #[test]
        fn removing_an_obstacle_never_triggers_a_stop(
            obs in prop::collection::vec((0.0f64..3.0, -1.5f64..1.5, 0.05f64..0.5, any::<bool>()), 1..6),
            drop in 0usize..6,
        ) {
            let array = SensorArray::default();
            let all: Vec<Obstacle> = obs
                .iter()
                .map(|&(x, y, r, low)| {
                    let o = Obstacle::circle([x + 0.5, y], r);
                    if low { o.low_profile() } else { o }
                })
                .collect();
            let full = safety_check(&array, &World2D::new(all.clone()).unwrap(), &Pose::default());
            let mut fewer = all;
            fewer.remove(drop % fewer.len());
            let partial = safety_check(&array, &World2D::new(fewer).unwrap(), &Pose::default());
            if full.state == SafetyState::Clear {
                prop_assert_eq!(partial.state, SafetyState::Clear);
            }
            if let (Some(a), Some(b)) = (full.min_distance, partial.min_distance) {
                prop_assert!(b >= a);
            }
        }

        #[test]
        fn echo_is_linear(t in 0.0f64..1.0, a in 0.0f64..10.0) {
            let lhs = echo_to_distance(a * t).unwrap();
            let rhs = a * echo_to_distance(t).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
        }
    }
}
