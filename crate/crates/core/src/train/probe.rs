use std::collections::HashMap;

use crate::autodiff::RngStream;
use crate::envsim::{Action, ActionSpace, EnvConfig, Environment, Observation};
use crate::error::{Error, Result};
use crate::expert::{Dataset, Expert, ExpertConfig};
use crate::heads::PolicyModel;

/// A decision-point observation and the expert's action distribution there.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSpec {
    pub observation: Observation,
    pub act_dims: Vec<usize>,
    /// Probabilities over `ActionSpace::enumerate` order.
    pub reference: Vec<f64>,
    /// Joint indices with nonzero reference probability.
    pub support: Vec<usize>,
}

impl ProbeSpec {
    pub fn new(observation: Observation, act_dims: &[usize], reference: Vec<f64>) -> Result<Self> {
        let space = ActionSpace::from_sizes(act_dims);
        if reference.len() != space.joint_size() {
            return Err(Error::contract(format!(
                "reference has {} entries, joint space has {}",
                reference.len(),
                space.joint_size()
            )));
        }
        let total: f64 = reference.iter().sum();
        if reference.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::contract("reference is not a probability distribution"));
        }
        let support = (0..reference.len()).filter(|&i| reference[i] > 0.0).collect();
        Ok(ProbeSpec {
            observation,
            act_dims: act_dims.to_vec(),
            reference,
            support,
        })
    }

    pub fn space(&self) -> ActionSpace {
        ActionSpace::from_sizes(&self.act_dims)
    }

    pub fn in_support(&self, action: &Action) -> bool {
        self.reference[self.space().joint_index(action)] > 0.0
    }

    pub fn min_mode_prob(&self) -> f64 {
        self.support.iter().map(|&i| self.reference[i]).fold(f64::INFINITY, f64::min)
    }

    pub fn off_support_mass(&self, empirical: &[f64]) -> f64 {
        (0..empirical.len())
            .filter(|&i| self.reference[i] == 0.0)
            .map(|i| empirical[i])
            .sum()
    }
}

/// Accumulates distributions keyed by exact observation, in first-seen order.
#[derive(Default)]
struct Tally {
    index: HashMap<Vec<u64>, usize>,
    entries: Vec<(Observation, Vec<f64>)>,
}

impl Tally {
    fn add(&mut self, obs: &Observation, joint: usize, weights: impl IntoIterator<Item = (usize, f64)>) {
        let slot = *self.index.entry(obs.key()).or_insert_with(|| {
            self.entries.push((obs.clone(), vec![0.0; joint]));
            self.entries.len() - 1
        });
        for (i, w) in weights {
            self.entries[slot].1[i] += w;
        }
    }

    fn into_probes(self, act_dims: &[usize], keep: impl Fn(&Observation) -> bool) -> Result<Vec<ProbeSpec>> {
        self.entries
            .into_iter()
            .filter(|(o, _)| keep(o))
            .map(|(obs, counts)| {
                let total: f64 = counts.iter().sum();
                let mut p: Vec<f64> = counts.iter().map(|c| c / total).collect();
                // renormalize away rounding drift from the division
                let s: f64 = p.iter().sum();
                p.iter_mut().for_each(|x| *x /= s);
                ProbeSpec::new(obs, act_dims, p)
            })
            .collect()
    }
}

/// Probes from the `probe`-tagged steps of a dataset; references are action
/// frequencies at each distinct observation.
pub fn probes_from_dataset(dataset: &Dataset) -> Result<Vec<ProbeSpec>> {
    let space = ActionSpace::from_sizes(&dataset.act_dims);
    let mut tally = Tally::default();
    for step in dataset.steps().filter(|s| s.probe) {
        tally.add(&step.observation, space.joint_size(), [(space.joint_index(&step.action), 1.0)]);
    }
    tally.into_probes(&dataset.act_dims, |_| true)
}

/// Probes from `episodes` expert rollouts (episode `k` seeded `seed + k`).
///
/// The reference at a decision-point observation is the expert's exact
/// policy averaged over every visit to that observation, decision or not,
/// so hidden expert state (such as the car's correction threshold) is
/// marginalized out.
pub fn collect_probes(env_config: &EnvConfig, expert: &ExpertConfig, episodes: usize, seed: u64) -> Result<Vec<ProbeSpec>> {
    expert.validate()?;
    let env = Environment::new(env_config.clone())?;
    let space = env.action_space().clone();
    let mut tally = Tally::default();
    let mut decisions = std::collections::HashSet::new();
    for k in 0..episodes as u64 {
        let mut rng = RngStream::derive(seed, k);
        let mut agent = Expert::new(env_config, expert, &mut rng);
        let (mut state, mut obs) = env.reset(seed.wrapping_add(k));
        while !state.is_terminated() {
            let policy = agent.policy(&state)?;
            if policy.decision {
                decisions.insert(obs.key());
            }
            tally.add(
                &obs,
                space.joint_size(),
                policy.choices.iter().map(|(a, p)| (space.joint_index(a), *p)),
            );
            let (action, _) = agent.act(&state, &mut rng)?;
            let (next, outcome) = env.step(&state, &action)?;
            state = next;
            obs = outcome.observation;
        }
    }
    tally.into_probes(&space.sizes(), |o| decisions.contains(&o.key()))
}

/// `½ Σ |p − q|`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::contract(format!("distributions over {} and {} outcomes", p.len(), q.len())));
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Empirical distribution of `n_samples` model actions at the probe, and its
/// TV distance to the reference.
pub fn probe_distribution(
    model: &PolicyModel,
    probe: &ProbeSpec,
    n_samples: usize,
    rng: &mut RngStream,
) -> Result<(Vec<f64>, f64)> {
    if n_samples < 1000 {
        return Err(Error::contract(format!("probe needs at least 1000 samples, got {n_samples}")));
    }
    if model.spec.act_dims != probe.act_dims {
        return Err(Error::contract("probe and model disagree on the action space"));
    }
    let space = probe.space();
    let mut counts = vec![0usize; space.joint_size()];
    for a in model.sample_actions(&probe.observation, n_samples, rng)? {
        counts[space.joint_index(&a)] += 1;
    }
    let empirical: Vec<f64> = counts.iter().map(|&c| c as f64 / n_samples as f64).collect();
    let tv = tv_distance(&empirical, &probe.reference)?;
    Ok((empirical, tv))
}

/// Fraction of expert modes receiving at least `threshold` empirical mass.
pub fn mode_coverage(empirical: &[f64], probe: &ProbeSpec, threshold: f64) -> Result<f64> {
    if !(threshold > 0.0 && threshold < probe.min_mode_prob()) {
        return Err(Error::contract(format!(
            "threshold {threshold} must lie in (0, {})",
            probe.min_mode_prob()
        )));
    }
    if empirical.len() != probe.reference.len() {
        return Err(Error::contract("empirical distribution has the wrong length"));
    }
    let hit = probe.support.iter().filter(|&&i| empirical[i] >= threshold).count();
    Ok(hit as f64 / probe.support.len() as f64)
}
