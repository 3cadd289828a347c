use std::f64::consts::{FRAC_PI_2, PI};
use std::sync::Arc;

use crate::autodiff::RngStream;

use super::{Action, EnvConfig, FailureReason, Observation, Task, TICK_SECONDS};

/// PWM duty levels per wheel.
pub const PWM_LEVELS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
pub const SENSOR_COUNT: usize = 8;

/// Wheel speed at full duty, cm/s.
const V_MAX: f64 = 30.0;
const WHEEL_BASE: f64 = 10.0;
const SENSOR_PITCH: f64 = 1.0;
/// Sensor bar distance ahead of the axle, cm.
const SENSOR_AHEAD: f64 = 5.0;
const LINE_HALF_WIDTH: f64 = 1.0;
/// 8 feet.
const STRAIGHT_GOAL: f64 = 243.84;
const MAX_DEVIATION: f64 = 30.0;
const HEADING_JITTER: f64 = 0.05;

/// Polyline in cm with cumulative arc length.
#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    points: Vec<(f64, f64)>,
    cumulative: Vec<f64>,
}

impl Track {
    pub fn new(points: Vec<(f64, f64)>) -> Self {
        let mut cumulative = vec![0.0];
        for w in points.windows(2) {
            let d = (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1);
            cumulative.push(cumulative.last().unwrap() + d);
        }
        Track { points, cumulative }
    }

    /// Guide ray along +x through the origin.
    pub fn straight_ray() -> Self {
        Track::new(vec![(-20.0, 0.0), (400.0, 0.0)])
    }

    /// Line-follow course: straight, 90° left bend, straight, 90° right
    /// bend, straight. Bends have radius 80 cm.
    pub fn course() -> Self {
        let mut pts = vec![(0.0, 0.0)];
        let mut pos = (0.0_f64, 0.0_f64);
        let mut heading = 0.0_f64;
        let straight = |pts: &mut Vec<(f64, f64)>, pos: &mut (f64, f64), h: f64, len: f64| {
            let n = (len / 2.0).ceil() as usize;
            let step = len / n as f64;
            for _ in 0..n {
                pos.0 += step * h.cos();
                pos.1 += step * h.sin();
                pts.push(*pos);
            }
        };
        let arc = |pts: &mut Vec<(f64, f64)>, pos: &mut (f64, f64), h: &mut f64, turn: f64| {
            let radius = 80.0;
            let n = (radius * turn.abs() / 2.0).ceil() as usize;
            let dtheta = turn / n as f64;
            let chord = 2.0 * radius * (dtheta.abs() / 2.0).sin();
            for _ in 0..n {
                let mid = *h + dtheta / 2.0;
                pos.0 += chord * mid.cos();
                pos.1 += chord * mid.sin();
                *h += dtheta;
                pts.push(*pos);
            }
        };
        straight(&mut pts, &mut pos, heading, 120.0);
        arc(&mut pts, &mut pos, &mut heading, FRAC_PI_2);
        straight(&mut pts, &mut pos, heading, 80.0);
        arc(&mut pts, &mut pos, &mut heading, -FRAC_PI_2);
        straight(&mut pts, &mut pos, heading, 120.0);
        Track::new(pts)
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    /// Distance from `p` to the polyline and the arc length of the closest point.
    pub fn closest(&self, p: (f64, f64)) -> (f64, f64) {
        let mut best = (f64::INFINITY, 0.0);
        for (i, w) in self.points.windows(2).enumerate() {
            let (a, b) = (w[0], w[1]);
            let (ux, uy) = (b.0 - a.0, b.1 - a.1);
            let len2 = ux * ux + uy * uy;
            let t = (((p.0 - a.0) * ux + (p.1 - a.1) * uy) / len2).clamp(0.0, 1.0);
            let (cx, cy) = (a.0 + t * ux, a.1 + t * uy);
            let d = (p.0 - cx).hypot(p.1 - cy);
            if d < best.0 {
                best = (d, self.cumulative[i] + t * len2.sqrt());
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CarState {
    pub task: Task,
    /// cm
    pub x: f64,
    pub y: f64,
    /// radians in (-π, π]
    pub heading: f64,
    pub gain_left: f64,
    pub gain_right: f64,
    pub track: Arc<Track>,
    /// PWM indices applied on the previous tick.
    pub prev_pwm: [usize; 2],
    /// Arc length of the closest track point.
    pub progress: f64,
    /// Distance from the track.
    pub deviation: f64,
    pub max_deviation: f64,
    pub steps: usize,
    pub done: bool,
}

impl CarState {
    /// Photodiode positions, leftmost (bit 0) first.
    pub fn sensor_points(&self) -> [(f64, f64); SENSOR_COUNT] {
        let (c, s) = (self.heading.cos(), self.heading.sin());
        let bar = (self.x + SENSOR_AHEAD * c, self.y + SENSOR_AHEAD * s);
        let mut pts = [(0.0, 0.0); SENSOR_COUNT];
        for (i, p) in pts.iter_mut().enumerate() {
            let lateral = SENSOR_PITCH * ((SENSOR_COUNT as f64 - 1.0) / 2.0 - i as f64);
            // left of the heading is (-sin, cos)
            *p = (bar.0 - lateral * s, bar.1 + lateral * c);
        }
        pts
    }

    pub fn sensor_bits(&self) -> [bool; SENSOR_COUNT] {
        self.sensor_points()
            .map(|p| self.track.closest(p).0 <= LINE_HALF_WIDTH)
    }

    pub fn sensor_string(&self) -> String {
        self.sensor_bits()
            .iter()
            .map(|&b| if b { '1' } else { '0' })
            .collect()
    }

    fn measure(&mut self) {
        let (d, s) = self.track.closest((self.x, self.y));
        self.deviation = d;
        self.progress = s;
        self.max_deviation = self.max_deviation.max(d);
    }
}

/// Centered on the line start with a small seeded heading error.
pub(super) fn reset(cfg: &EnvConfig, track: Arc<Track>, seed: u64) -> CarState {
    let mut rng = RngStream::new(seed);
    let mut s = CarState {
        task: cfg.task,
        x: 0.0,
        y: 0.0,
        heading: rng.uniform_range(-HEADING_JITTER, HEADING_JITTER),
        gain_left: cfg.gain_left,
        gain_right: cfg.gain_right,
        track,
        prev_pwm: [0, 0],
        progress: 0.0,
        deviation: 0.0,
        max_deviation: 0.0,
        steps: 0,
        done: false,
    };
    s.measure();
    s
}

fn normalize_angle(a: f64) -> f64 {
    let r = a.sin().atan2(a.cos());
    if r <= -PI {
        PI
    } else {
        r
    }
}

/// Differential-drive kinematics over one tick.
pub(crate) fn integrate(s: &mut CarState, pwm_left: f64, pwm_right: f64) {
    let vl = s.gain_left * pwm_left * V_MAX;
    let vr = s.gain_right * pwm_right * V_MAX;
    let v = 0.5 * (vl + vr);
    let omega = (vr - vl) / WHEEL_BASE;
    let mid = s.heading + 0.5 * omega * TICK_SECONDS;
    s.x += v * TICK_SECONDS * mid.cos();
    s.y += v * TICK_SECONDS * mid.sin();
    if omega != 0.0 {
        s.heading = normalize_angle(s.heading + omega * TICK_SECONDS);
    }
}

pub(super) fn step(
    cfg: &EnvConfig,
    s: &CarState,
    action: &Action,
) -> (CarState, bool, Option<FailureReason>) {
    let mut n = s.clone();
    let a = action.indices();
    integrate(&mut n, PWM_LEVELS[a[0]], PWM_LEVELS[a[1]]);
    n.prev_pwm = [a[0], a[1]];
    n.steps += 1;
    n.measure();

    let mut success = false;
    let mut failure = None;
    match n.task {
        Task::DriveStraight => {
            let lateral = n.y.abs();
            if lateral > MAX_DEVIATION {
                failure = Some(FailureReason::Irrecoverable);
            } else if n.x >= STRAIGHT_GOAL {
                success = true;
            }
        }
        Task::LineFollow => {
            if n.deviation > MAX_DEVIATION {
                failure = Some(FailureReason::Irrecoverable);
            } else if n.progress >= n.track.length() - 1.0 {
                success = true;
            }
        }
        _ => unreachable!("grid task on car step"),
    }
    if !success && failure.is_none() && n.steps >= cfg.budget {
        failure = Some(FailureReason::Timeout);
    }
    n.done = success || failure.is_some();
    (n, success, failure)
}

/// Eight sensor bits followed by the previous tick's PWM duty levels.
pub(super) fn encode(s: &CarState) -> Observation {
    let mut v: Vec<f64> = s
        .sensor_bits()
        .iter()
        .map(|&b| if b { 1.0 } else { 0.0 })
        .collect();
    v.push(PWM_LEVELS[s.prev_pwm[0]]);
    v.push(PWM_LEVELS[s.prev_pwm[1]]);
    Observation(v)
}
