//! Scripted stochastic experts and demonstration datasets.
//!
//! Each expert is a small state machine with per-episode memory. At
//! designated decision points it branches between behavior modes; those
//! steps are flagged so evaluation can use them as probe states.

mod dataset;

use std::collections::VecDeque;

pub use dataset::{
    read_dataset, tabular_two_mode, write_dataset, Dataset, DemoStep, Demonstration,
    TABULAR_FINGERPRINT,
};

use crate::autodiff::RngStream;
use crate::config::Config;
use crate::envsim::{
    Action, Cell, EnvConfig, EnvState, Environment, GridArmState, Task, GRIP_CLOSE, GRIP_OPEN,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertConfig {
    /// Probability of the first mode at a two-way decision; the second mode
    /// gets the rest. First modes: reach detours right, push pushes the near
    /// end, car turns fast.
    pub mode_prob: f64,
    /// Pick-and-place: chance of carrying one cell past the target.
    pub overshoot: f64,
    /// Car: chance an episode corrects early rather than late.
    pub early_prob: f64,
    /// Chance a step is replaced by a uniformly random joint action.
    pub noise: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig {
            mode_prob: 0.5,
            overshoot: 0.3,
            early_prob: 0.5,
            noise: 0.0,
        }
    }
}

impl ExpertConfig {
    pub fn from_config(config: &Config) -> Result<Self> {
        let mut e = ExpertConfig::default();
        if let Some(p) = config.real("expert.mode_prob")? {
            e.mode_prob = p;
        }
        if let Some(p) = config.real("expert.overshoot")? {
            e.overshoot = p;
        }
        if let Some(p) = config.real("expert.early_prob")? {
            e.early_prob = p;
        }
        if let Some(p) = config.real("expert.noise")? {
            e.noise = p;
        }
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        for (key, p) in [
            ("expert.mode_prob", self.mode_prob),
            ("expert.overshoot", self.overshoot),
            ("expert.early_prob", self.early_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("`{key}` must lie in [0, 1], got {p}")));
            }
        }
        if !(0.0..0.5).contains(&self.noise) {
            return Err(Error::Config(format!(
                "`expert.noise` must lie in [0, 0.5), got {}",
                self.noise
            )));
        }
        Ok(())
    }
}

/// The expert's action distribution at one state.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertPolicy {
    pub choices: Vec<(Action, f64)>,
    /// Set when the script branches between modes here.
    pub decision: bool,
}

impl ExpertPolicy {
    fn single(action: Action) -> Self {
        ExpertPolicy {
            choices: vec![(action, 1.0)],
            decision: false,
        }
    }

    fn branch(first: Action, p: f64, second: Action) -> Self {
        let choices: Vec<_> = [(first, p), (second, 1.0 - p)]
            .into_iter()
            .filter(|(_, q)| *q > 0.0)
            .collect();
        ExpertPolicy {
            decision: choices.len() > 1,
            choices,
        }
    }

    /// Probability of `action`.
    pub fn prob(&self, action: &Action) -> f64 {
        self.choices
            .iter()
            .filter(|(a, _)| a == action)
            .map(|(_, p)| p)
            .sum()
    }
}

/// Car correction onset threshold on the sensor centroid offset.
const EARLY_THRESHOLD: f64 = 1.0;
const LATE_THRESHOLD: f64 = 3.0;
/// Offset at which a correction counts as finished.
const CENTERED: f64 = 0.5;

/// PWM level indices `(left, right)`.
const CAR_STRAIGHT: [usize; 2] = [3, 3];
const FAST_LEFT: [usize; 2] = [2, 4];
const SLOW_LEFT: [usize; 2] = [0, 1];
const FAST_RIGHT: [usize; 2] = [4, 2];
const SLOW_RIGHT: [usize; 2] = [1, 0];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Speed {
    Fast,
    Slow,
}

/// -1 turns left, +1 turns right.
fn turn(side: i32, speed: Speed) -> Action {
    let pwm = match (side < 0, speed) {
        (true, Speed::Fast) => FAST_LEFT,
        (true, Speed::Slow) => SLOW_LEFT,
        (false, Speed::Fast) => FAST_RIGHT,
        (false, Speed::Slow) => SLOW_RIGHT,
    };
    Action(pwm.to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PushPlan {
    Near,
    Far,
}

#[derive(Clone, Debug, PartialEq)]
enum Memory {
    Reach,
    Push {
        plan: Option<PushPlan>,
    },
    PickPlace {
        last_move: (i32, i32),
        overshoot: OvershootState,
    },
    Car {
        threshold: f64,
        correcting: Option<(i32, Speed)>,
        last_side: i32,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum OvershootState {
    Pending,
    Overshot,
    Settled,
}

/// One episode's expert. Build a fresh one per episode.
#[derive(Clone, Debug)]
pub struct Expert {
    config: ExpertConfig,
    env: EnvConfig,
    memory: Memory,
}

impl Expert {
    /// Car experts draw their correction style here, once per episode.
    pub fn new(env: &EnvConfig, config: &ExpertConfig, rng: &mut RngStream) -> Self {
        let memory = match env.task {
            Task::GridReach => Memory::Reach,
            Task::GridPush => Memory::Push { plan: None },
            Task::GridPickPlace => Memory::PickPlace {
                last_move: (1, 1),
                overshoot: OvershootState::Pending,
            },
            Task::DriveStraight | Task::LineFollow => Memory::Car {
                threshold: if rng.bernoulli(config.early_prob) {
                    EARLY_THRESHOLD
                } else {
                    LATE_THRESHOLD
                },
                correcting: None,
                last_side: 0,
            },
        };
        Expert {
            config: config.clone(),
            env: env.clone(),
            memory,
        }
    }

    /// Exact action distribution at `state`, noise included.
    pub fn policy(&self, state: &EnvState) -> Result<ExpertPolicy> {
        if state.is_terminated() {
            return Err(Error::contract("expert queried on a terminated episode"));
        }
        let scripted = self.scripted(state);
        if self.config.noise == 0.0 {
            return Ok(scripted);
        }
        let all = self.env.action_space().enumerate();
        let uniform = self.config.noise / all.len() as f64;
        let choices = all
            .into_iter()
            .map(|a| {
                let p = (1.0 - self.config.noise) * scripted.prob(&a) + uniform;
                (a, p)
            })
            .collect();
        Ok(ExpertPolicy {
            choices,
            decision: scripted.decision,
        })
    }

    /// Samples an action, updates episode memory and reports whether the
    /// step was a decision point.
    pub fn act(&mut self, state: &EnvState, rng: &mut RngStream) -> Result<(Action, bool)> {
        let policy = self.policy(state)?;
        let probs: Vec<f64> = policy.choices.iter().map(|(_, p)| *p).collect();
        let action = policy.choices[rng.categorical(&probs)].0.clone();
        self.observe(state, &action);
        Ok((action, policy.decision))
    }

    fn scripted(&self, state: &EnvState) -> ExpertPolicy {
        match (&self.memory, state) {
            (Memory::Reach, EnvState::Grid(g)) => reach_policy(g, self.config.mode_prob),
            (Memory::Push { plan }, EnvState::Grid(g)) => push_policy(g, *plan, self.config.mode_prob),
            (Memory::PickPlace { last_move, overshoot }, EnvState::Grid(g)) => {
                pick_place_policy(g, *last_move, *overshoot, self.config.overshoot)
            }
            (
                Memory::Car {
                    threshold,
                    correcting,
                    last_side,
                },
                EnvState::Car(c),
            ) => car_policy(
                &c.sensor_bits(),
                *threshold,
                *correcting,
                *last_side,
                self.config.mode_prob,
            ),
            _ => unreachable!("expert built for a different task family"),
        }
    }

    fn observe(&mut self, state: &EnvState, action: &Action) {
        let a = action.indices();
        match (&mut self.memory, state) {
            (Memory::Reach, _) => {}
            (Memory::Push { plan }, EnvState::Grid(g)) => {
                if plan.is_none() && g.push_displacement() == 0 {
                    if let Some(pen) = g.object {
                        if g.effector == pen.offset(-1, 0) {
                            match (a[0], a[1]) {
                                (2, 1) => *plan = Some(PushPlan::Near),
                                (1, 2) => *plan = Some(PushPlan::Far),
                                _ => {}
                            }
                        }
                    }
                }
            }
            (Memory::PickPlace { last_move, overshoot }, EnvState::Grid(g)) => {
                let mv = (a[0] as i32 - 1, a[1] as i32 - 1);
                if g.carried && g.effector == g.target && *overshoot == OvershootState::Pending {
                    *overshoot = if mv != (0, 0) {
                        OvershootState::Overshot
                    } else {
                        OvershootState::Settled
                    };
                }
                if mv != (0, 0) {
                    *last_move = mv;
                }
            }
            (
                Memory::Car {
                    correcting,
                    last_side,
                    ..
                },
                EnvState::Car(c),
            ) => {
                if let Some(e) = centroid_offset(&c.sensor_bits()) {
                    if e != 0.0 {
                        *last_side = e.signum() as i32;
                    }
                }
                let pwm = [a[0], a[1]];
                *correcting = match pwm {
                    FAST_LEFT => Some((-1, Speed::Fast)),
                    SLOW_LEFT => Some((-1, Speed::Slow)),
                    FAST_RIGHT => Some((1, Speed::Fast)),
                    SLOW_RIGHT => Some((1, Speed::Slow)),
                    _ => None,
                };
            }
            _ => unreachable!("expert built for a different task family"),
        }
    }
}

/// Convenience wrapper: one expert action at `state`.
pub fn expert_action(expert: &mut Expert, state: &EnvState, rng: &mut RngStream) -> Result<Action> {
    expert.act(state, rng).map(|(a, _)| a)
}

fn movement(dx: i32, dy: i32) -> [usize; 2] {
    [(dx + 1) as usize, (dy + 1) as usize]
}

const MOVES: [(i32, i32); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// 8-connected step distances to `goal`, `None` for blocked or unreachable.
pub(crate) fn distance_field(
    g: &GridArmState,
    goal: Cell,
    blocked: impl Fn(Cell) -> bool,
) -> Vec<Option<u32>> {
    let (w, h) = (g.width as i32, g.height as i32);
    let idx = |c: Cell| (c.row * w + c.col) as usize;
    let mut dist = vec![None; (w * h) as usize];
    if blocked(goal) {
        return dist;
    }
    dist[idx(goal)] = Some(0);
    let mut queue = VecDeque::from([goal]);
    while let Some(c) = queue.pop_front() {
        let d = dist[idx(c)].unwrap();
        for &(dx, dy) in &MOVES {
            let n = c.offset(dx, dy);
            if g.in_bounds(n) && !blocked(n) && dist[idx(n)].is_none() {
                dist[idx(n)] = Some(d + 1);
                queue.push_back(n);
            }
        }
    }
    dist
}

/// Moves that strictly descend the distance field, filtered to those ending
/// closest (squared Euclidean) to the goal.
fn best_moves(g: &GridArmState, goal: Cell, dist: &[Option<u32>]) -> Vec<(i32, i32)> {
    let w = g.width as i32;
    let here = g.effector;
    let Some(d0) = dist[(here.row * w + here.col) as usize] else {
        return vec![];
    };
    let mut best: Vec<((i32, i32), i32)> = vec![];
    for &(dx, dy) in &MOVES {
        let n = here.offset(dx, dy);
        if !g.in_bounds(n) {
            continue;
        }
        if dist[(n.row * w + n.col) as usize] == Some(d0.wrapping_sub(1)) {
            let e = (goal.col - n.col).pow(2) + (goal.row - n.row).pow(2);
            best.push(((dx, dy), e));
        }
    }
    let Some(min) = best.iter().map(|(_, e)| *e).min() else {
        return vec![];
    };
    best.into_iter()
        .filter(|(_, e)| *e == min)
        .map(|(m, _)| m)
        .collect()
}

/// Greedy descent toward `goal`; ties between equally good moves become a
/// two-way decision.
fn descend(
    g: &GridArmState,
    goal: Cell,
    blocked: impl Fn(Cell) -> bool,
    mode_prob: f64,
) -> ExpertPolicy {
    let dist = distance_field(g, goal, blocked);
    let moves = best_moves(g, goal, &dist);
    match moves.as_slice() {
        [] => ExpertPolicy::single(Action(movement(0, 0).to_vec())),
        [m] => ExpertPolicy::single(Action(movement(m.0, m.1).to_vec())),
        [a, b] => {
            // the larger dx first, so the rightward detour is the first mode
            let (first, second) = if a.0 >= b.0 { (a, b) } else { (b, a) };
            ExpertPolicy::branch(
                Action(movement(first.0, first.1).to_vec()),
                mode_prob,
                Action(movement(second.0, second.1).to_vec()),
            )
        }
        many => {
            let p = 1.0 / many.len() as f64;
            ExpertPolicy {
                choices: many
                    .iter()
                    .map(|m| (Action(movement(m.0, m.1).to_vec()), p))
                    .collect(),
                decision: true,
            }
        }
    }
}

fn reach_policy(g: &GridArmState, mode_prob: f64) -> ExpertPolicy {
    descend(g, g.target, |c| g.is_obstacle(c), mode_prob)
}

fn push_policy(g: &GridArmState, plan: Option<PushPlan>, mode_prob: f64) -> ExpertPolicy {
    let pen = g.object.expect("push task always has a pen");
    let pen_cells = g.object_cells();
    let blocked = |c: Cell| g.is_obstacle(c) || pen_cells.contains(&c);
    let push = Action(movement(1, 0).to_vec());
    let near = pen.offset(-1, 0);
    let far = pen.offset(-1, 1);
    match plan {
        None if g.effector == near && g.push_displacement() == 0 => {
            ExpertPolicy::branch(push, mode_prob, Action(movement(0, 1).to_vec()))
        }
        None | Some(PushPlan::Near) if g.effector == near => ExpertPolicy::single(push),
        Some(PushPlan::Far) if g.effector == far => ExpertPolicy::single(push),
        Some(PushPlan::Far) => descend(g, far, blocked, 1.0),
        _ => descend(g, near, blocked, 1.0),
    }
}

fn pick_place_policy(
    g: &GridArmState,
    last_move: (i32, i32),
    overshoot: OvershootState,
    overshoot_prob: f64,
) -> ExpertPolicy {
    let object = g.object.expect("pick-and-place always has an object");
    let toward = |goal: Cell| {
        (
            (goal.col - g.effector.col).signum(),
            (goal.row - g.effector.row).signum(),
        )
    };
    let act = |(dx, dy): (i32, i32), grip: usize| {
        let m = movement(dx, dy);
        Action(vec![m[0], m[1], grip])
    };
    if !g.carried {
        return if g.effector == object {
            ExpertPolicy::single(act((0, 0), GRIP_CLOSE))
        } else {
            ExpertPolicy::single(act(toward(object), GRIP_OPEN))
        };
    }
    if g.effector != g.target {
        return ExpertPolicy::single(act(toward(g.target), GRIP_CLOSE));
    }
    let past = g.effector.offset(last_move.0, last_move.1);
    if overshoot == OvershootState::Pending && g.in_bounds(past) {
        ExpertPolicy::branch(
            act((0, 0), GRIP_OPEN),
            1.0 - overshoot_prob,
            act(last_move, GRIP_CLOSE),
        )
    } else {
        ExpertPolicy::single(act((0, 0), GRIP_OPEN))
    }
}

/// Mean lit index minus the bar center; negative means the line is to the left.
pub(crate) fn centroid_offset(bits: &[bool]) -> Option<f64> {
    let lit: Vec<usize> = (0..bits.len()).filter(|&i| bits[i]).collect();
    if lit.is_empty() {
        return None;
    }
    let mean = lit.iter().sum::<usize>() as f64 / lit.len() as f64;
    Some(mean - (bits.len() as f64 - 1.0) / 2.0)
}

fn car_policy(
    bits: &[bool],
    threshold: f64,
    correcting: Option<(i32, Speed)>,
    last_side: i32,
    fast_prob: f64,
) -> ExpertPolicy {
    let straight = Action(CAR_STRAIGHT.to_vec());
    let Some(e) = centroid_offset(bits) else {
        // line lost: keep turning the way it was last seen
        return match (correcting, last_side) {
            (Some((side, speed)), _) => ExpertPolicy::single(turn(side, speed)),
            (None, 0) => ExpertPolicy::single(straight),
            (None, side) => ExpertPolicy::single(turn(side, Speed::Fast)),
        };
    };
    let side = e.signum() as i32;
    match correcting {
        Some(_) if e.abs() <= CENTERED => ExpertPolicy::single(straight),
        Some((_, speed)) => ExpertPolicy::single(turn(side, speed)),
        None if e.abs() >= threshold => {
            ExpertPolicy::branch(turn(side, Speed::Fast), fast_prob, turn(side, Speed::Slow))
        }
        None => ExpertPolicy::single(straight),
    }
}

/// One expert rollout from `env.reset(seed)`, driven by `RngStream::new(seed)`.
pub fn generate_episode(
    env: &Environment,
    config: &ExpertConfig,
    seed: u64,
) -> Result<Demonstration> {
    let mut rng = RngStream::new(seed);
    let mut expert = Expert::new(env.config(), config, &mut rng);
    let (mut state, mut obs) = env.reset(seed);
    let mut steps = Vec::new();
    loop {
        let (action, probe) = expert.act(&state, &mut rng)?;
        let (next, outcome) = env.step(&state, &action)?;
        steps.push(DemoStep {
            observation: obs,
            action,
            probe,
        });
        state = next;
        obs = outcome.observation;
        if outcome.terminated {
            return Ok(Demonstration {
                episode_id: seed,
                steps,
                success: outcome.success,
            });
        }
    }
}

/// `n_episodes` successful demonstrations. Attempt `k` uses seed `seed + k`
/// for both the reset and the expert; failed attempts are skipped.
pub fn generate_dataset(
    env_config: &EnvConfig,
    config: &ExpertConfig,
    n_episodes: usize,
    seed: u64,
) -> Result<Dataset> {
    if n_episodes == 0 {
        return Err(Error::contract("at least one episode is required"));
    }
    config.validate()?;
    let env = Environment::new(env_config.clone())?;
    let attempts = 100 * n_episodes;
    let mut demos = Vec::with_capacity(n_episodes);
    for k in 0..attempts as u64 {
        let demo = generate_episode(&env, config, seed.wrapping_add(k))?;
        if demo.success {
            demos.push(demo);
            if demos.len() == n_episodes {
                return Ok(Dataset::new(
                    env_config.fingerprint(),
                    env.observation_len(),
                    env_config.action_space().sizes(),
                    demos,
                ));
            }
        }
    }
    Err(Error::Generation {
        wanted: n_episodes,
        attempts,
    })
}
