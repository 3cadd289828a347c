use std::collections::HashMap;

use rayon::prelude::*;

use super::probe::{mode_coverage, probe_distribution, ProbeSpec};
use crate::autodiff::RngStream;
use crate::config::Config;
use crate::envsim::{EnvConfig, Environment, FailureReason, Task, TICK_SECONDS};
use crate::error::{Error, Result};
use crate::heads::PolicyModel;

const PROBE_STREAM: u64 = 0x9e37_79b9_0000_0000;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub trials: usize,
    pub seed: u64,
    pub probe_samples: usize,
    pub threshold: f64,
}

impl EvalConfig {
    /// 15 trials on grid tasks, 10 on the car.
    pub fn for_task(task: Task) -> Self {
        EvalConfig {
            trials: if task.is_car() { 10 } else { 15 },
            seed: 0,
            probe_samples: 1000,
            threshold: 0.1,
        }
    }

    pub fn from_config(task: Task, config: &Config) -> Result<Self> {
        let mut c = EvalConfig::for_task(task);
        if let Some(v) = config.count("trials")? {
            c.trials = v;
        }
        if let Some(v) = config.count("seed")? {
            c.seed = v as u64;
        }
        if let Some(v) = config.count("probe.samples")? {
            c.probe_samples = v;
        }
        if let Some(v) = config.real("probe.threshold")? {
            c.threshold = v;
        }
        if c.trials == 0 {
            return Err(Error::Config("trials must be positive".into()));
        }
        if c.probe_samples < 1000 {
            return Err(Error::Config("probe.samples must be at least 1000".into()));
        }
        if !(c.threshold > 0.0 && c.threshold < 1.0) {
            return Err(Error::Config("probe.threshold must lie in (0, 1)".into()));
        }
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub head: String,
    pub fingerprint: String,
    pub seed: u64,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Over successful trials only.
    pub mean_steps: Option<f64>,
    /// `mean_steps × 0.2`.
    pub mean_duration_s: Option<f64>,
    pub collisions: usize,
    pub timeouts: usize,
    pub irrecoverable: usize,
    /// Rollout steps whose observation matched a probe.
    pub probe_visits: usize,
    /// Fraction of those steps whose action fell outside the expert support.
    pub invalid_joint_rate: f64,
    pub probe_tv: Vec<f64>,
    /// Mean coverage over probes whose smallest expert mode exceeds the
    /// threshold; `None` when no probe qualifies.
    pub mode_coverage: Option<f64>,
}

impl EvalReport {
    pub const HEADER: &'static str = "head,fingerprint,seed,trials,successes,success_rate,mean_steps,mean_duration_s,collisions,timeouts,irrecoverable,probe_visits,invalid_joint_rate,probes,mean_tv,max_tv,mode_coverage";

    pub fn mean_tv(&self) -> Option<f64> {
        (!self.probe_tv.is_empty()).then(|| self.probe_tv.iter().sum::<f64>() / self.probe_tv.len() as f64)
    }

    pub fn max_tv(&self) -> Option<f64> {
        self.probe_tv.iter().copied().reduce(f64::max)
    }

    pub fn csv_fields(&self) -> Vec<String> {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.head.clone(),
            self.fingerprint.clone(),
            self.seed.to_string(),
            self.trials.to_string(),
            self.successes.to_string(),
            self.success_rate.to_string(),
            cell(self.mean_steps),
            cell(self.mean_duration_s),
            self.collisions.to_string(),
            self.timeouts.to_string(),
            self.irrecoverable.to_string(),
            self.probe_visits.to_string(),
            self.invalid_joint_rate.to_string(),
            self.probe_tv.len().to_string(),
            cell(self.mean_tv()),
            cell(self.max_tv()),
            cell(self.mode_coverage),
        ]
    }

    /// Header plus one row per report.
    pub fn reports_to_csv(reports: &[EvalReport]) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::HEADER.split(',')).expect("in-memory write");
        for r in reports {
            w.write_record(r.csv_fields()).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }

    pub fn to_csv(&self) -> String {
        Self::reports_to_csv(std::slice::from_ref(self))
    }
}

#[derive(Default)]
struct Trial {
    success: bool,
    steps: usize,
    failure: Option<FailureReason>,
    probe_visits: usize,
    invalid: usize,
}

fn rollout(
    model: &PolicyModel,
    env: &Environment,
    probes: &[ProbeSpec],
    lookup: &HashMap<Vec<u64>, usize>,
    seed: u64,
) -> Result<Trial> {
    let mut rng = RngStream::new(seed);
    let (mut state, mut obs) = env.reset(seed);
    let mut trial = Trial::default();
    loop {
        let action = model.sample_action(&obs, &mut rng)?;
        if let Some(&p) = lookup.get(&obs.key()) {
            trial.probe_visits += 1;
            if !probes[p].in_support(&action) {
                trial.invalid += 1;
            }
        }
        let (next, outcome) = env.step(&state, &action)?;
        state = next;
        obs = outcome.observation;
        if outcome.terminated {
            trial.success = outcome.success;
            trial.steps = state.steps();
            trial.failure = outcome.failure;
            return Ok(trial);
        }
    }
}

/// `config.trials` rollouts (trial `i` seeded `seed + i`) plus probe
/// diagnostics. Rollouts run in parallel; results are identical to a serial
/// run.
pub fn evaluate(model: &PolicyModel, env_config: &EnvConfig, probes: &[ProbeSpec], config: &EvalConfig) -> Result<EvalReport> {
    let fingerprint = env_config.fingerprint();
    if model.spec.fingerprint != fingerprint {
        return Err(Error::Compatibility {
            expected: fingerprint,
            found: model.spec.fingerprint.clone(),
        });
    }
    if config.trials == 0 {
        return Err(Error::contract("at least one trial is required"));
    }
    let env = Environment::new(env_config.clone())?;
    let lookup: HashMap<Vec<u64>, usize> = probes
        .iter()
        .enumerate()
        .map(|(i, p)| (p.observation.key(), i))
        .collect();
    let trials = (0..config.trials as u64)
        .into_par_iter()
        .map(|i| rollout(model, &env, probes, &lookup, config.seed.wrapping_add(i)))
        .collect::<Result<Vec<Trial>>>()?;

    let successes = trials.iter().filter(|t| t.success).count();
    let success_steps: usize = trials.iter().filter(|t| t.success).map(|t| t.steps).sum();
    let mean_steps = (successes > 0).then(|| success_steps as f64 / successes as f64);
    let count = |r: FailureReason| trials.iter().filter(|t| t.failure == Some(r)).count();
    let probe_visits: usize = trials.iter().map(|t| t.probe_visits).sum();
    let invalid: usize = trials.iter().map(|t| t.invalid).sum();

    let dists = probes
        .par_iter()
        .enumerate()
        .map(|(j, p)| {
            let mut rng = RngStream::derive(config.seed, PROBE_STREAM + j as u64);
            probe_distribution(model, p, config.probe_samples, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut covered = Vec::new();
    for ((empirical, _), p) in dists.iter().zip(probes) {
        if p.min_mode_prob() > config.threshold {
            covered.push(mode_coverage(empirical, p, config.threshold)?);
        }
    }

    Ok(EvalReport {
        head: model.kind().to_string(),
        fingerprint,
        seed: config.seed,
        trials: config.trials,
        successes,
        success_rate: successes as f64 / config.trials as f64,
        mean_steps,
        mean_duration_s: mean_steps.map(|s| s * TICK_SECONDS),
        collisions: count(FailureReason::Collision),
        timeouts: count(FailureReason::Timeout),
        irrecoverable: count(FailureReason::Irrecoverable),
        probe_visits,
        invalid_joint_rate: if probe_visits > 0 {
            invalid as f64 / probe_visits as f64
        } else {
            0.0
        },
        probe_tv: dists.iter().map(|(_, tv)| *tv).collect(),
        mode_coverage: (!covered.is_empty()).then(|| covered.iter().sum::<f64>() / covered.len() as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::envsim::HOLD;
    use crate::expert::ExpertConfig;
    use crate::heads::{HeadKind, ModelSpec};
    use crate::train::collect_probes;

    /// Independent head whose logits ignore the observation and pin HOLD.
    fn stationary(env: &EnvConfig) -> PolicyModel {
        let obs_len = Environment::new(env.clone()).unwrap().observation_len();
        let mut spec = ModelSpec::for_env(HeadKind::Independent, env, obs_len);
        spec.head_hidden = 0;
        let mut m = PolicyModel::new(spec, &mut RngStream::new(0)).unwrap();
        for head in &mut m.heads {
            let layer = &mut head.layers[0];
            let n = layer.bias.len();
            layer.weight = Tensor::zeros(layer.weight.shape());
            let bias = (0..n).map(|k| if k == HOLD { 50.0 } else { -50.0 }).collect();
            layer.bias = Tensor::new(vec![n], bias).unwrap();
        }
        m
    }

    #[test]
    fn stationary_policy_always_times_out() {
        let env = EnvConfig::new(Task::GridReach);
        let cfg = EvalConfig::for_task(Task::GridReach);
        assert_eq!(cfg.trials, 15);
        let r = evaluate(&stationary(&env), &env, &[], &cfg).unwrap();
        assert_eq!(r.success_rate, 0.0);
        assert_eq!(r.timeouts, 15);
        assert_eq!(r.mean_steps, None);
    }

    #[test]
    fn reports_are_deterministic_and_bounded() {
        let env = EnvConfig::new(Task::GridReach);
        let probes = collect_probes(&env, &ExpertConfig::default(), 10, 0).unwrap();
        let obs_len = Environment::new(env.clone()).unwrap().observation_len();
        let m = PolicyModel::new(ModelSpec::for_env(HeadKind::Autoregressive, &env, obs_len), &mut RngStream::new(4)).unwrap();
        let cfg = EvalConfig { trials: 6, ..EvalConfig::for_task(Task::GridReach) };
        let a = evaluate(&m, &env, &probes, &cfg).unwrap();
        let b = evaluate(&m, &env, &probes, &cfg).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert!((0.0..=1.0).contains(&a.invalid_joint_rate));
        assert!(a.probe_tv.iter().all(|tv| (0.0..=1.0).contains(tv)));
        let text = a.to_csv();
        let mut rows = csv::Reader::from_reader(text.as_bytes());
        assert_eq!(rows.headers().unwrap().len(), rows.records().next().unwrap().unwrap().len());
    }

    #[test]
    fn wrong_environment_is_rejected() {
        let m = stationary(&EnvConfig::new(Task::GridReach));
        let other = EnvConfig::new(Task::GridPush);
        assert!(matches!(
            evaluate(&m, &other, &[], &EvalConfig::for_task(Task::GridPush)),
            Err(Error::Compatibility { .. })
        ));
    }
}
