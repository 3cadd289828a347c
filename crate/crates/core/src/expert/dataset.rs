//! Demonstration datasets and their text format.
//!
//! ```text
//! #fingerprint=grid-reach;grid=9x9;budget=200
//! #obs_len=327 act_dims=3,3
//! 17	0	0,0,1,...	2,2
//! 17	1	0,0,0,...	2,1	probe
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::envsim::{Action, Cell, EnvConfig, Environment, Observation, Task, HOLD};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DemoStep {
    pub observation: Observation,
    pub action: Action,
    /// Expert decision point.
    pub probe: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Demonstration {
    /// Also the seed that reproduces the episode.
    pub episode_id: u64,
    pub steps: Vec<DemoStep>,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub fingerprint: String,
    pub obs_len: usize,
    pub act_dims: Vec<usize>,
    pub demonstrations: Vec<Demonstration>,
}

impl Dataset {
    pub fn new(
        fingerprint: String,
        obs_len: usize,
        act_dims: Vec<usize>,
        demonstrations: Vec<Demonstration>,
    ) -> Self {
        Dataset {
            fingerprint,
            obs_len,
            act_dims,
            demonstrations,
        }
    }

    pub fn len(&self) -> usize {
        self.demonstrations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demonstrations.is_empty()
    }

    pub fn step_count(&self) -> usize {
        self.demonstrations.iter().map(|d| d.steps.len()).sum()
    }

    /// All steps in episode order.
    pub fn steps(&self) -> impl Iterator<Item = &DemoStep> {
        self.demonstrations.iter().flat_map(|d| d.steps.iter())
    }

    pub fn check_fingerprint(&self, expected: &str) -> Result<()> {
        if self.fingerprint == expected {
            Ok(())
        } else {
            Err(Error::Compatibility {
                expected: expected.to_string(),
                found: self.fingerprint.clone(),
            })
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let dims: Vec<String> = self.act_dims.iter().map(|d| d.to_string()).collect();
        writeln!(out, "#fingerprint={}", self.fingerprint).unwrap();
        writeln!(out, "#obs_len={} act_dims={}", self.obs_len, dims.join(",")).unwrap();
        for demo in &self.demonstrations {
            for (t, step) in demo.steps.iter().enumerate() {
                let obs: Vec<String> = step.observation.0.iter().map(|x| format!("{x}")).collect();
                let act: Vec<String> = step.action.0.iter().map(|a| a.to_string()).collect();
                write!(out, "{}\t{}\t{}\t{}", demo.episode_id, t, obs.join(","), act.join(",")).unwrap();
                if step.probe {
                    out.push_str("\tprobe");
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Dataset> {
        let mut fingerprint = None;
        let mut shape = None;
        let mut demos: Vec<Demonstration> = Vec::new();
        let lines: Vec<&str> = text.split('\n').collect();
        // a file ending in a newline yields one empty trailing piece
        let count = if text.ends_with('\n') {
            lines.len() - 1
        } else {
            lines.len()
        };
        for (i, line) in lines[..count].iter().enumerate() {
            let lineno = i + 1;
            let bad = |message: String| Error::Parse {
                line: lineno,
                message,
            };
            if let Some(fp) = line.strip_prefix("#fingerprint=") {
                fingerprint = Some(fp.to_string());
                continue;
            }
            if let Some(rest) = line.strip_prefix("#obs_len=") {
                let (n, dims) = rest
                    .split_once(" act_dims=")
                    .ok_or_else(|| bad("expected `#obs_len=<n> act_dims=<list>`".into()))?;
                let n: usize = n.parse().map_err(|_| bad(format!("bad obs_len `{n}`")))?;
                let dims = parse_list::<usize>(dims).ok_or_else(|| bad(format!("bad act_dims `{dims}`")))?;
                shape = Some((n, dims));
                continue;
            }
            let (obs_len, act_dims) = shape
                .as_ref()
                .ok_or_else(|| bad("data line before the `#obs_len` header".into()))?;
            let fields: Vec<&str> = line.split('\t').collect();
            let probe = match fields.len() {
                4 => false,
                5 if fields[4] == "probe" => true,
                _ => return Err(bad(format!("expected 4 tab-separated fields, found {}", fields.len()))),
            };
            let episode: u64 = fields[0]
                .parse()
                .map_err(|_| bad(format!("bad episode id `{}`", fields[0])))?;
            let t: usize = fields[1]
                .parse()
                .map_err(|_| bad(format!("bad step index `{}`", fields[1])))?;
            let obs = parse_list::<f64>(fields[2]).ok_or_else(|| bad("bad observation".into()))?;
            if obs.len() != *obs_len || obs.iter().any(|x| !x.is_finite()) {
                return Err(bad(format!("observation has {} finite values, want {obs_len}", obs.len())));
            }
            let act = parse_list::<usize>(fields[3]).ok_or_else(|| bad("bad action".into()))?;
            if act.len() != act_dims.len() || act.iter().zip(act_dims).any(|(a, n)| a >= n) {
                return Err(bad(format!("action {act:?} outside alphabets {act_dims:?}")));
            }
            let step = DemoStep {
                observation: Observation(obs),
                action: Action(act),
                probe,
            };
            match demos.last_mut() {
                Some(d) if d.episode_id == episode && d.steps.len() == t => d.steps.push(step),
                _ if t == 0 => demos.push(Demonstration {
                    episode_id: episode,
                    steps: vec![step],
                    success: true,
                }),
                _ => return Err(bad(format!("step {t} of episode {episode} is out of order"))),
            }
        }
        let fingerprint = fingerprint.ok_or(Error::Parse {
            line: 1,
            message: "missing `#fingerprint` header".into(),
        })?;
        let (obs_len, act_dims) = shape.ok_or(Error::Parse {
            line: 2,
            message: "missing `#obs_len` header".into(),
        })?;
        Ok(Dataset::new(fingerprint, obs_len, act_dims, demos))
    }
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Option<Vec<T>> {
    if s.is_empty() {
        return None;
    }
    s.split(',').map(|v| v.parse().ok()).collect()
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, dataset.to_text()).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Dataset::from_text(&text)
}

/// Single-observation dataset with two equally likely joint actions,
/// `(+1, 0)` and `(0, +1)`, recorded at the reach decision cell. Episodes
/// alternate modes so the empirical split is exactly even.
pub fn tabular_two_mode(episodes: usize) -> Dataset {
    let env = Environment::new(EnvConfig::new(Task::GridReach)).expect("default reach config");
    let (state, _) = env.reset(0);
    let mut g = state.as_grid().expect("grid task").clone();
    g.effector = Cell::new(2, 2);
    let obs = env.encode_observation(&crate::envsim::EnvState::Grid(g));
    let modes = [Action(vec![2, HOLD]), Action(vec![HOLD, 2])];
    let demos = (0..episodes)
        .map(|k| Demonstration {
            episode_id: k as u64,
            steps: vec![DemoStep {
                observation: obs.clone(),
                action: modes[k % 2].clone(),
                probe: true,
            }],
            success: true,
        })
        .collect();
    Dataset::new(TABULAR_FINGERPRINT.to_string(), obs.len(), vec![3, 3], demos)
}

pub const TABULAR_FINGERPRINT: &str = "tabular-two-mode";
