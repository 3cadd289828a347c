//! Seeded simulators for the five tasks.
//!
//! Car tasks (`drive-straight`, `line-follow`) model a differential-drive
//! robot with an 8-photodiode line sensor and two discretized PWM channels.
//! Grid tasks (`grid-reach`, `grid-push`, `grid-pick-place`) model a top-down
//! arm on a cell grid with unit moves per axis. One `step` is one 0.2 s
//! control tick.

mod car;
mod grid;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

pub use car::{CarState, Track, PWM_LEVELS, SENSOR_COUNT};
pub use grid::{Cell, GridArmState};

use crate::config::Config;
use crate::error::{Error, Result};

/// Control period in seconds.
pub const TICK_SECONDS: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    DriveStraight,
    LineFollow,
    GridReach,
    GridPush,
    GridPickPlace,
}

impl Task {
    pub const ALL: [Task; 5] = [
        Task::DriveStraight,
        Task::LineFollow,
        Task::GridReach,
        Task::GridPush,
        Task::GridPickPlace,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::DriveStraight => "drive-straight",
            Task::LineFollow => "line-follow",
            Task::GridReach => "grid-reach",
            Task::GridPush => "grid-push",
            Task::GridPickPlace => "grid-pick-place",
        }
    }

    pub fn is_car(self) -> bool {
        matches!(self, Task::DriveStraight | Task::LineFollow)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvConfig {
    pub task: Task,
    pub grid_width: usize,
    pub grid_height: usize,
    pub gain_left: f64,
    pub gain_right: f64,
    pub budget: usize,
    pub push_distance: usize,
}

impl EnvConfig {
    /// Task defaults: 9×9 grids (15×9 for pushing, so the default 10-cell
    /// push fits), 200-step grid budget, 600-step car budget, gains 1.0/0.85.
    pub fn new(task: Task) -> Self {
        let (w, h) = match task {
            Task::GridPush => (15, 9),
            _ => (9, 9),
        };
        EnvConfig {
            task,
            grid_width: w,
            grid_height: h,
            gain_left: 1.0,
            gain_right: 0.85,
            budget: if task.is_car() { 600 } else { 200 },
            push_distance: 10,
        }
    }

    pub fn from_config(config: &Config) -> Result<Self> {
        let task: Task = config
            .string("task")?
            .ok_or_else(|| Error::Config("missing required key `task`".into()))?
            .parse()?;
        let mut env = EnvConfig::new(task);
        if let Some(w) = config.count("grid.width")? {
            env.grid_width = w;
        }
        if let Some(h) = config.count("grid.height")? {
            env.grid_height = h;
        }
        if let Some(g) = config.real("car.gain_left")? {
            env.gain_left = g;
        }
        if let Some(g) = config.real("car.gain_right")? {
            env.gain_right = g;
        }
        if let Some(b) = config.count("budget")? {
            env.budget = b;
        }
        if let Some(d) = config.count("push.distance")? {
            env.push_distance = d;
        }
        env.validate()?;
        Ok(env)
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::Config("budget must be positive".into()));
        }
        if self.task.is_car() {
            let ok = |g: f64| g.is_finite() && g > 0.0 && g <= 2.0;
            if !ok(self.gain_left) || !ok(self.gain_right) {
                return Err(Error::Config("car gains must lie in (0, 2]".into()));
            }
            return Ok(());
        }
        let (w, h) = (self.grid_width, self.grid_height);
        match self.task {
            Task::GridReach if w != h || w < 9 => Err(Error::Config(format!(
                "grid-reach needs a square grid of side >= 9, got {w}x{h}"
            ))),
            Task::GridPush if self.push_distance == 0 || w < self.push_distance + 4 || h < 6 => {
                Err(Error::Config(format!(
                    "grid-push with distance {} needs width >= {} and height >= 6, got {w}x{h}",
                    self.push_distance,
                    self.push_distance + 4
                )))
            }
            Task::GridPickPlace if w < 8 || h < 8 => Err(Error::Config(format!(
                "grid-pick-place needs at least 8x8, got {w}x{h}"
            ))),
            _ => Ok(()),
        }
    }

    /// Canonical identity string; datasets and checkpoints carry it.
    pub fn fingerprint(&self) -> String {
        if self.task.is_car() {
            format!(
                "{};gain_left={:?};gain_right={:?};budget={}",
                self.task, self.gain_left, self.gain_right, self.budget
            )
        } else {
            let mut s = format!(
                "{};grid={}x{};budget={}",
                self.task, self.grid_width, self.grid_height, self.budget
            );
            if self.task == Task::GridPush {
                s.push_str(&format!(";push={}", self.push_distance));
            }
            s
        }
    }

    pub fn action_space(&self) -> ActionSpace {
        match self.task {
            Task::DriveStraight | Task::LineFollow => {
                ActionSpace::new(vec![ActionDim::pwm("left"), ActionDim::pwm("right")])
            }
            Task::GridReach | Task::GridPush => {
                ActionSpace::new(vec![ActionDim::movement("dx"), ActionDim::movement("dy")])
            }
            Task::GridPickPlace => ActionSpace::new(vec![
                ActionDim::movement("dx"),
                ActionDim::movement("dy"),
                ActionDim::gripper(),
            ]),
        }
    }
}

/// One categorical action dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionDim {
    pub name: String,
    pub labels: Vec<String>,
    pub values: Vec<f64>,
}

impl ActionDim {
    fn movement(name: &str) -> Self {
        ActionDim {
            name: name.into(),
            labels: vec!["-1".into(), "0".into(), "+1".into()],
            values: vec![-1.0, 0.0, 1.0],
        }
    }

    fn gripper() -> Self {
        ActionDim {
            name: "grip".into(),
            labels: vec!["open".into(), "close".into()],
            values: vec![0.0, 1.0],
        }
    }

    fn pwm(name: &str) -> Self {
        ActionDim {
            name: name.into(),
            labels: PWM_LEVELS.iter().map(|l| format!("{l}")).collect(),
            values: PWM_LEVELS.to_vec(),
        }
    }

    pub fn size(&self) -> usize {
        self.values.len()
    }
}

/// Index of "hold" in a movement dimension.
pub const HOLD: usize = 1;
/// Gripper alphabet indices.
pub const GRIP_OPEN: usize = 0;
pub const GRIP_CLOSE: usize = 1;

/// Cartesian product of per-dimension alphabets.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionSpace {
    pub dims: Vec<ActionDim>,
}

impl ActionSpace {
    pub fn new(dims: Vec<ActionDim>) -> Self {
        ActionSpace { dims }
    }

    /// A space described only by alphabet sizes (labels are indices).
    pub fn from_sizes(sizes: &[usize]) -> Self {
        ActionSpace {
            dims: sizes
                .iter()
                .enumerate()
                .map(|(i, &n)| ActionDim {
                    name: format!("a{i}"),
                    labels: (0..n).map(|k| k.to_string()).collect(),
                    values: (0..n).map(|k| k as f64).collect(),
                })
                .collect(),
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.dims.iter().map(ActionDim::size).collect()
    }

    pub fn joint_size(&self) -> usize {
        self.dims.iter().map(ActionDim::size).product()
    }

    pub fn contains(&self, action: &Action) -> bool {
        action.0.len() == self.dims.len()
            && action.0.iter().zip(&self.dims).all(|(&a, d)| a < d.size())
    }

    pub fn check(&self, action: &Action) -> Result<()> {
        if self.contains(action) {
            Ok(())
        } else {
            Err(Error::contract(format!(
                "action {:?} outside alphabets {:?}",
                action.0,
                self.sizes()
            )))
        }
    }

    /// Position of `action` in [`enumerate`](Self::enumerate) order.
    pub fn joint_index(&self, action: &Action) -> usize {
        action
            .0
            .iter()
            .zip(&self.dims)
            .fold(0, |acc, (&a, d)| acc * d.size() + a)
    }

    /// All joint actions, lexicographic with dimension 0 most significant.
    pub fn enumerate(&self) -> Vec<Action> {
        let sizes = self.sizes();
        (0..self.joint_size())
            .map(|mut idx| {
                let mut v = vec![0; sizes.len()];
                for (slot, &n) in v.iter_mut().zip(&sizes).rev() {
                    *slot = idx % n;
                    idx /= n;
                }
                Action(v)
            })
            .collect()
    }

    pub fn label(&self, action: &Action) -> String {
        action
            .0
            .iter()
            .zip(&self.dims)
            .map(|(&a, d)| d.labels[a].as_str())
            .collect::<Vec<_>>()
            .join("|")
    }
}

pub fn enumerate_joint_actions(config: &EnvConfig) -> Vec<Action> {
    config.action_space().enumerate()
}

/// Alphabet indices, one per dimension.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Action(pub Vec<usize>);

impl Action {
    pub fn indices(&self) -> &[usize] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation(pub Vec<f64>);

impl Observation {
    pub fn features(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Exact-equality key.
    pub fn key(&self) -> Vec<u64> {
        self.0.iter().map(|x| x.to_bits()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FailureReason {
    Collision,
    Timeout,
    Irrecoverable,
}

impl FailureReason {
    pub fn name(self) -> &'static str {
        match self {
            FailureReason::Collision => "collision",
            FailureReason::Timeout => "timeout",
            FailureReason::Irrecoverable => "irrecoverable",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub terminated: bool,
    pub success: bool,
    pub failure: Option<FailureReason>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum EnvState {
    Grid(GridArmState),
    Car(CarState),
}

impl EnvState {
    pub fn steps(&self) -> usize {
        match self {
            EnvState::Grid(g) => g.steps,
            EnvState::Car(c) => c.steps,
        }
    }

    pub fn is_terminated(&self) -> bool {
        match self {
            EnvState::Grid(g) => g.done,
            EnvState::Car(c) => c.done,
        }
    }

    pub fn as_grid(&self) -> Option<&GridArmState> {
        match self {
            EnvState::Grid(g) => Some(g),
            EnvState::Car(_) => None,
        }
    }

    pub fn as_car(&self) -> Option<&CarState> {
        match self {
            EnvState::Car(c) => Some(c),
            EnvState::Grid(_) => None,
        }
    }
}

/// A configured task. Stepping is pure: it never mutates the input state.
#[derive(Clone, Debug)]
pub struct Environment {
    config: EnvConfig,
    space: ActionSpace,
    track: Option<Arc<Track>>,
}

impl Environment {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        let track = match config.task {
            Task::DriveStraight => Some(Arc::new(Track::straight_ray())),
            Task::LineFollow => Some(Arc::new(Track::course())),
            _ => None,
        };
        Ok(Environment {
            space: config.action_space(),
            config,
            track,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn action_space(&self) -> &ActionSpace {
        &self.space
    }

    pub fn observation_len(&self) -> usize {
        if self.config.task.is_car() {
            SENSOR_COUNT + 2
        } else {
            4 * self.config.grid_width * self.config.grid_height + 3
        }
    }

    pub fn reset(&self, seed: u64) -> (EnvState, Observation) {
        let state = match &self.track {
            Some(track) => EnvState::Car(car::reset(&self.config, track.clone(), seed)),
            None => EnvState::Grid(grid::reset(&self.config, seed)),
        };
        let obs = self.encode_observation(&state);
        (state, obs)
    }

    pub fn step(&self, state: &EnvState, action: &Action) -> Result<(EnvState, StepOutcome)> {
        self.space.check(action)?;
        if state.is_terminated() {
            return Err(Error::contract("step called on a terminated episode"));
        }
        let (next, success, failure) = match state {
            EnvState::Grid(g) => {
                let (n, s, f) = grid::step(&self.config, g, action);
                (EnvState::Grid(n), s, f)
            }
            EnvState::Car(c) => {
                let (n, s, f) = car::step(&self.config, c, action);
                (EnvState::Car(n), s, f)
            }
        };
        let outcome = StepOutcome {
            observation: self.encode_observation(&next),
            terminated: next.is_terminated(),
            success,
            failure,
        };
        Ok((next, outcome))
    }

    pub fn encode_observation(&self, state: &EnvState) -> Observation {
        match state {
            EnvState::Grid(g) => grid::encode(g),
            EnvState::Car(c) => car::encode(c),
        }
    }
}
