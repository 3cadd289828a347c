use super::{Action, EnvConfig, FailureReason, Observation, Task, GRIP_CLOSE, GRIP_OPEN};
use crate::autodiff::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub col: i32,
    pub row: i32,
}

impl Cell {
    pub const fn new(col: i32, row: i32) -> Self {
        Cell { col, row }
    }

    pub fn offset(self, dx: i32, dy: i32) -> Cell {
        Cell::new(self.col + dx, self.row + dy)
    }
}

/// Top-down arm state. Rows grow downward, so `dy = +1` is DOWN.
///
/// For `grid-push` the object is a pen two cells long: `object` is its upper
/// end and the cell below it is the lower end.
#[derive(Clone, Debug, PartialEq)]
pub struct GridArmState {
    pub task: Task,
    pub width: usize,
    pub height: usize,
    pub effector: Cell,
    pub object: Option<Cell>,
    pub object_origin: Option<Cell>,
    pub carried: bool,
    /// Pen knocked flat (pushing only); terminal.
    pub horizontal: bool,
    pub obstacles: Vec<Cell>,
    pub target: Cell,
    pub steps: usize,
    pub done: bool,
}

impl GridArmState {
    pub fn in_bounds(&self, c: Cell) -> bool {
        c.col >= 0 && c.row >= 0 && (c.col as usize) < self.width && (c.row as usize) < self.height
    }

    pub fn clamp(&self, c: Cell) -> Cell {
        Cell::new(
            c.col.clamp(0, self.width as i32 - 1),
            c.row.clamp(0, self.height as i32 - 1),
        )
    }

    pub fn is_obstacle(&self, c: Cell) -> bool {
        self.obstacles.contains(&c)
    }

    /// Cells covered by the object (both pen cells when pushing).
    pub fn object_cells(&self) -> Vec<Cell> {
        match (self.task, self.object) {
            (_, None) => vec![],
            (Task::GridPush, Some(o)) => vec![o, o.offset(0, 1)],
            (_, Some(o)) => vec![o],
        }
    }

    /// Columns the pen has travelled.
    pub fn push_displacement(&self) -> i32 {
        match (self.object, self.object_origin) {
            (Some(o), Some(start)) => o.col - start.col,
            _ => 0,
        }
    }
}

/// Movement alphabet `[-1, 0, +1]`.
pub(crate) fn delta(index: usize) -> i32 {
    index as i32 - 1
}

pub(super) fn reset(cfg: &EnvConfig, seed: u64) -> GridArmState {
    let (w, h) = (cfg.grid_width as i32, cfg.grid_height as i32);
    let mut rng = RngStream::new(seed);
    let variant = rng.below(2) as i32;
    let mut state = GridArmState {
        task: cfg.task,
        width: cfg.grid_width,
        height: cfg.grid_height,
        effector: Cell::new(0, 0),
        object: None,
        object_origin: None,
        carried: false,
        horizontal: false,
        obstacles: vec![],
        target: Cell::new(w - 2, h - 2),
        steps: 0,
        done: false,
    };
    match cfg.task {
        Task::GridReach => {
            // a square block in the middle third blocks the diagonal; the
            // effector starts on the diagonal above-left of it
            let a = w / 3;
            for row in a..w - a {
                for col in a..w - a {
                    state.obstacles.push(Cell::new(col, row));
                }
            }
            state.effector = Cell::new(a - 3 + variant, a - 3 + variant);
        }
        Task::GridPush => {
            let pen = Cell::new(2, h / 2 - 1);
            state.object = Some(pen);
            state.object_origin = Some(pen);
            state.target = Cell::new(pen.col + cfg.push_distance as i32, pen.row);
            state.effector = Cell::new(variant, 0);
        }
        Task::GridPickPlace => {
            let object = if variant == 0 {
                Cell::new(w / 3, h / 4)
            } else {
                Cell::new(w / 4, h / 3)
            };
            state.object = Some(object);
            state.object_origin = Some(object);
            state.target = Cell::new(w - 3, h - 3);
        }
        Task::DriveStraight | Task::LineFollow => unreachable!("car task on grid reset"),
    }
    state
}

pub(super) fn step(
    cfg: &EnvConfig,
    s: &GridArmState,
    action: &Action,
) -> (GridArmState, bool, Option<FailureReason>) {
    let mut n = s.clone();
    n.steps += 1;
    let a = action.indices();
    let (dx, dy) = (delta(a[0]), delta(a[1]));
    let dest = n.clamp(n.effector.offset(dx, dy));

    let mut success = false;
    let mut failure = None;

    if n.is_obstacle(dest) {
        failure = Some(FailureReason::Collision);
    } else if n.task == Task::GridPush && dest != n.effector && n.object_cells().contains(&dest) {
        if (dx, dy) == (1, 0) {
            let moved = n.object.map(|o| o.offset(1, 0));
            let pen_fits = moved.is_some_and(|o| {
                [o, o.offset(0, 1)]
                    .iter()
                    .all(|&c| n.in_bounds(c) && !n.is_obstacle(c))
            });
            if pen_fits {
                n.object = moved;
                n.effector = dest;
            }
        } else {
            n.horizontal = true;
            failure = Some(FailureReason::Irrecoverable);
        }
    } else {
        n.effector = dest;
    }

    if failure.is_none() {
        if n.carried {
            n.object = Some(n.effector);
        }
        match n.task {
            Task::GridReach => success = n.effector == n.target,
            Task::GridPush => success = n.push_displacement() >= cfg.push_distance as i32,
            Task::GridPickPlace => {
                let grip = a[2];
                if grip == GRIP_CLOSE && !n.carried && n.object == Some(n.effector) {
                    n.carried = true;
                } else if grip == GRIP_OPEN && n.carried {
                    n.carried = false;
                    if n.effector == n.target {
                        success = true;
                    } else {
                        failure = Some(FailureReason::Irrecoverable);
                    }
                }
            }
            Task::DriveStraight | Task::LineFollow => unreachable!(),
        }
    }

    if failure.is_none() && !success && n.steps >= cfg.budget {
        failure = Some(FailureReason::Timeout);
    }
    n.done = success || failure.is_some();
    (n, success, failure)
}

/// Planes (effector, object, obstacles, target) row-major, then the carried
/// flag and the effector position scaled to `[0, 1]`.
pub(super) fn encode(s: &GridArmState) -> Observation {
    let plane = s.width * s.height;
    let mut v = vec![0.0; 4 * plane + 3];
    let idx = |c: Cell| c.row as usize * s.width + c.col as usize;
    v[idx(s.effector)] = 1.0;
    for c in s.object_cells() {
        if s.in_bounds(c) {
            v[plane + idx(c)] = 1.0;
        }
    }
    for &c in &s.obstacles {
        v[2 * plane + idx(c)] = 1.0;
    }
    v[3 * plane + idx(s.target)] = 1.0;
    v[4 * plane] = if s.carried { 1.0 } else { 0.0 };
    v[4 * plane + 1] = s.effector.col as f64 / (s.width - 1) as f64;
    v[4 * plane + 2] = s.effector.row as f64 / (s.height - 1) as f64;
    Observation(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::{EnvState, Environment, HOLD};

    const RIGHT: usize = 2;
    const DOWN: usize = 2;
    const LEFT: usize = 0;
    const UP: usize = 0;

    fn env(task: Task) -> Environment {
        Environment::new(EnvConfig::new(task)).unwrap()
    }

    fn grid(s: &EnvState) -> &GridArmState {
        s.as_grid().unwrap()
    }

    #[test]
    fn reach_layout() {
        let e = env(Task::GridReach);
        for seed in 0..20 {
            let (s, _) = e.reset(seed);
            let g = grid(&s);
            assert!(g.effector.col <= 2 && g.effector.row <= 2, "top-left start");
            assert_eq!(g.target, Cell::new(7, 7));
            assert!(g.is_obstacle(Cell::new(4, 4)));
            let blocks_diagonal = (0..9).any(|i| g.is_obstacle(Cell::new(i, i)));
            assert!(blocks_diagonal);
        }
    }

    #[test]
    fn reset_is_deterministic() {
        for task in [Task::GridReach, Task::GridPush, Task::GridPickPlace] {
            let e = env(task);
            assert_eq!(e.reset(11).1, e.reset(11).1);
        }
    }

    #[test]
    fn reach_observation_length() {
        let e = env(Task::GridReach);
        let (_, obs) = e.reset(0);
        assert_eq!(obs.len(), 4 * 81 + 1 + 2);
        assert_eq!(e.observation_len(), 327);
    }

    #[test]
    fn diagonal_into_obstacle_corner_collides() {
        let e = env(Task::GridReach);
        let (mut s, _) = e.reset(0);
        if let EnvState::Grid(g) = &mut s {
            g.effector = Cell::new(2, 2);
        }
        let (n, out) = e.step(&s, &Action(vec![RIGHT, DOWN])).unwrap();
        assert_eq!(out.failure, Some(FailureReason::Collision));
        assert!(out.terminated && !out.success);
        assert_eq!(grid(&n).effector, Cell::new(2, 2));
        // both expert modes are safe
        for a in [[RIGHT, HOLD], [HOLD, DOWN]] {
            let (_, out) = e.step(&s, &Action(a.to_vec())).unwrap();
            assert!(!out.terminated);
        }
    }

    #[test]
    fn hold_action_is_identity() {
        for task in [Task::GridReach, Task::GridPush, Task::GridPickPlace] {
            let e = env(task);
            let (s, obs) = e.reset(3);
            let mut a = vec![HOLD, HOLD];
            if task == Task::GridPickPlace {
                a.push(GRIP_OPEN);
            }
            let (n, out) = e.step(&s, &Action(a)).unwrap();
            assert_eq!(out.observation, obs);
            assert!(!out.terminated);
            assert_eq!(n.steps(), 1);
        }
    }

    #[test]
    fn moves_clamp_at_walls() {
        let e = env(Task::GridReach);
        let (s, _) = (0..8)
            .map(|seed| e.reset(seed))
            .find(|(s, _)| grid(s).effector == Cell::new(0, 0))
            .unwrap();
        let start = grid(&s).effector;
        let (n, _) = e.step(&s, &Action(vec![LEFT, UP])).unwrap();
        assert_eq!(grid(&n).effector, start);
    }

    #[test]
    fn budget_times_out() {
        let mut cfg = EnvConfig::new(Task::GridReach);
        cfg.budget = 3;
        let e = Environment::new(cfg).unwrap();
        let (mut s, _) = e.reset(0);
        let mut last = None;
        for _ in 0..3 {
            let (n, out) = e.step(&s, &Action(vec![HOLD, HOLD])).unwrap();
            s = n;
            last = Some(out);
        }
        assert_eq!(last.unwrap().failure, Some(FailureReason::Timeout));
        assert!(e.step(&s, &Action(vec![HOLD, HOLD])).is_err());
    }

    #[test]
    fn reach_success_on_target() {
        let e = env(Task::GridReach);
        let (mut s, _) = e.reset(0);
        if let EnvState::Grid(g) = &mut s {
            g.effector = Cell::new(6, 6);
        }
        let (_, out) = e.step(&s, &Action(vec![RIGHT, DOWN])).unwrap();
        assert!(out.success && out.terminated && out.failure.is_none());
    }

    fn at(e: &Environment, seed: u64, effector: Cell) -> EnvState {
        let (mut s, _) = e.reset(seed);
        if let EnvState::Grid(g) = &mut s {
            g.effector = effector;
        }
        s
    }

    #[test]
    fn push_forward_moves_pen() {
        let e = env(Task::GridPush);
        let s = at(&e, 0, Cell::new(1, 3));
        assert_eq!(grid(&s).object, Some(Cell::new(2, 3)));
        let (n, out) = e.step(&s, &Action(vec![RIGHT, HOLD])).unwrap();
        assert!(!out.terminated);
        assert_eq!(grid(&n).object, Some(Cell::new(3, 3)));
        assert_eq!(grid(&n).effector, Cell::new(2, 3));
        assert_eq!(grid(&n).push_displacement(), 1);
        // pushing the lower end also moves the whole pen
        let s = at(&e, 0, Cell::new(1, 4));
        let (n, _) = e.step(&s, &Action(vec![RIGHT, HOLD])).unwrap();
        assert_eq!(grid(&n).object, Some(Cell::new(3, 3)));
    }

    #[test]
    fn push_sideways_is_irrecoverable() {
        let e = env(Task::GridPush);
        let s = at(&e, 0, Cell::new(1, 3));
        let (n, out) = e.step(&s, &Action(vec![RIGHT, DOWN])).unwrap();
        assert_eq!(out.failure, Some(FailureReason::Irrecoverable));
        assert!(grid(&n).horizontal);
        let s = at(&e, 0, Cell::new(2, 2));
        let (_, out) = e.step(&s, &Action(vec![HOLD, DOWN])).unwrap();
        assert_eq!(out.failure, Some(FailureReason::Irrecoverable));
    }

    #[test]
    fn push_success_after_distance() {
        let mut cfg = EnvConfig::new(Task::GridPush);
        cfg.push_distance = 3;
        let e = Environment::new(cfg).unwrap();
        let mut s = at(&e, 0, Cell::new(1, 3));
        for i in 0..3 {
            let (n, out) = e.step(&s, &Action(vec![RIGHT, HOLD])).unwrap();
            assert_eq!(out.success, i == 2);
            s = n;
        }
    }

    #[test]
    fn pick_and_place_cycle() {
        let e = env(Task::GridPickPlace);
        let (s, _) = e.reset(0);
        let object = grid(&s).object.unwrap();
        let target = grid(&s).target;
        let mut s = at(&e, 0, object);
        // closing away from the object does nothing; on it, grabs
        let (n, _) = e.step(&s, &Action(vec![HOLD, HOLD, GRIP_CLOSE])).unwrap();
        assert!(grid(&n).carried);
        s = n;
        if let EnvState::Grid(g) = &mut s {
            g.effector = target.offset(-1, -1);
            g.object = Some(g.effector);
        }
        let (n, out) = e.step(&s, &Action(vec![RIGHT, DOWN, GRIP_CLOSE])).unwrap();
        assert!(!out.terminated);
        assert_eq!(grid(&n).object, Some(target));
        let (_, out) = e.step(&n, &Action(vec![HOLD, HOLD, GRIP_OPEN])).unwrap();
        assert!(out.success);
        // moving off the target while opening drops it short
        let (_, out) = e.step(&n, &Action(vec![RIGHT, HOLD, GRIP_OPEN])).unwrap();
        assert_eq!(out.failure, Some(FailureReason::Irrecoverable));
    }
}
