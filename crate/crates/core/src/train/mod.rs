//! Training loops, rollout evaluation and stochasticity diagnostics.

mod eval;
mod probe;

pub use eval::{evaluate, EvalConfig, EvalReport};
pub use probe::{
    collect_probes, mode_coverage, probe_distribution, probes_from_dataset, tv_distance, ProbeSpec,
};

use crate::autodiff::{adam_step, AdamConfig, AdamState, Graph, RngStream, Tensor};
use crate::config::Config;
use crate::envsim::Task;
use crate::expert::{Dataset, DemoStep};
use crate::heads::{build_gan, build_loss, Batch, HeadKind, LossReport, ModelSpec, PolicyModel};
use crate::error::{Error, Result};

// stream salts, so init, batching and loss noise never share draws
const INIT_STREAM: u64 = 0;
const BATCH_STREAM: u64 = 0x5eed_0001;
const NOISE_STREAM: u64 = 0x5eed_0002;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub head: HeadKind,
    pub steps: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    /// Variational KL weight after warm-up.
    pub beta: f64,
    /// Fraction of the budget over which β ramps linearly from 0.
    pub beta_warmup: f64,
    /// Variational gumbel-softmax temperature.
    pub tau: f64,
    /// Hard one-hot forward samples for the variational and GAN heads; see
    /// [`ModelSpec`].
    pub straight_through: bool,
    /// GAN relaxation temperature, annealed linearly over training.
    pub tau_start: f64,
    pub tau_end: f64,
    /// Discriminator updates per generator update.
    pub gan_ratio: usize,
    pub latent: usize,
    pub noise_dim: usize,
    pub trunk_hidden: usize,
    /// `None` picks 16 for car datasets and 64 otherwise.
    pub trunk_features: Option<usize>,
    pub head_hidden: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// The GAN defaults to Adam with `lr = 2e-4, β1 = 0.5`; at `1e-3` the
    /// generator chases the discriminator and never conditions on the
    /// observation.
    pub fn new(head: HeadKind) -> Self {
        let adam = if head == HeadKind::Gan {
            AdamConfig {
                lr: 2e-4,
                beta1: 0.5,
                ..AdamConfig::default()
            }
        } else {
            AdamConfig::default()
        };
        TrainConfig {
            head,
            steps: 10_000,
            batch: 32,
            adam,
            beta: 1.0,
            beta_warmup: 0.2,
            tau: 0.5,
            straight_through: true,
            tau_start: 1.0,
            tau_end: 0.3,
            gan_ratio: 1,
            latent: 8,
            noise_dim: 8,
            trunk_hidden: 128,
            trunk_features: None,
            head_hidden: 64,
            seed: 0,
        }
    }

    /// Reads `head` (required) and any training keys present.
    pub fn from_config(config: &Config) -> Result<Self> {
        let head: HeadKind = config
            .string("head")?
            .ok_or_else(|| Error::Config("missing required key `head`".into()))?
            .parse()?;
        let mut c = TrainConfig::new(head);
        macro_rules! read {
            ($field:expr, $key:literal, $getter:ident) => {
                if let Some(v) = config.$getter($key)? {
                    $field = v;
                }
            };
        }
        read!(c.steps, "steps", count);
        read!(c.batch, "batch", count);
        read!(c.adam.lr, "lr", real);
        read!(c.adam.beta1, "adam.beta1", real);
        read!(c.adam.beta2, "adam.beta2", real);
        read!(c.adam.epsilon, "adam.epsilon", real);
        read!(c.beta, "beta", real);
        read!(c.beta_warmup, "beta.warmup", real);
        read!(c.tau, "tau", real);
        read!(c.straight_through, "straight_through", boolean);
        read!(c.tau_start, "tau.start", real);
        read!(c.tau_end, "tau.end", real);
        read!(c.gan_ratio, "gan.ratio", count);
        read!(c.latent, "latent", count);
        read!(c.noise_dim, "noise_dim", count);
        read!(c.trunk_hidden, "trunk.hidden", count);
        if let Some(v) = config.count("trunk.features")? {
            c.trunk_features = Some(v);
        }
        read!(c.head_hidden, "head.hidden", count);
        if let Some(s) = config.count("seed")? {
            c.seed = s as u64;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.steps == 0 || self.batch == 0 {
            return fail("steps and batch must be positive".into());
        }
        if self.gan_ratio == 0 {
            return fail("gan.ratio must be at least 1".into());
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.lr.is_finite()) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.epsilon > 0.0) {
            return fail(format!("invalid Adam settings {a:?}"));
        }
        if !(0.0..=1.0).contains(&self.beta_warmup) || !(self.beta >= 0.0) {
            return fail("beta must be >= 0 and beta.warmup in [0, 1]".into());
        }
        if !(self.tau > 0.0 && self.tau_start > 0.0 && self.tau_end > 0.0) {
            return fail("temperatures must be positive".into());
        }
        if self.trunk_hidden == 0 || self.trunk_features == Some(0) {
            return fail("trunk sizes must be positive".into());
        }
        Ok(())
    }

    pub fn model_spec(&self, fingerprint: &str, obs_len: usize, act_dims: &[usize]) -> ModelSpec {
        let mut spec = ModelSpec::new(self.head, fingerprint, obs_len, act_dims);
        let is_car = fingerprint
            .split(';')
            .next()
            .and_then(|t| t.parse::<Task>().ok())
            .is_some_and(Task::is_car);
        let features = self.trunk_features.unwrap_or(if is_car { 16 } else { 64 });
        spec.trunk = vec![obs_len, self.trunk_hidden, features];
        spec.head_hidden = self.head_hidden;
        spec.latent = self.latent;
        spec.tau = self.tau;
        spec.beta = self.beta;
        spec.straight_through = self.straight_through;
        spec.noise_dim = self.noise_dim;
        spec
    }

    /// Effective KL weight at `step`.
    pub fn beta_at(&self, step: usize) -> f64 {
        let ramp = self.beta_warmup * self.steps as f64;
        if ramp <= 0.0 {
            self.beta
        } else {
            self.beta * (step as f64 / ramp).min(1.0)
        }
    }

    /// GAN relaxation temperature at `step`.
    pub fn tau_at(&self, step: usize) -> f64 {
        let frac = if self.steps > 1 {
            step as f64 / (self.steps - 1) as f64
        } else {
            1.0
        };
        self.tau_start + (self.tau_end - self.tau_start) * frac
    }
}

/// Per-step loss components.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<(usize, LossReport)>,
}

impl TrainingLog {
    pub const HEADER: &'static str = "step,total,cross_entropy,kl,generator,discriminator";

    pub fn last(&self) -> Option<&LossReport> {
        self.rows.last().map(|(_, r)| r)
    }

    /// Mean total over the last `n` rows.
    pub fn tail_mean(&self, n: usize) -> Option<f64> {
        let tail = &self.rows[self.rows.len().saturating_sub(n)..];
        (!tail.is_empty()).then(|| tail.iter().map(|(_, r)| r.total).sum::<f64>() / tail.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::HEADER.split(',')).expect("in-memory write");
        for (step, r) in &self.rows {
            w.write_record([
                step.to_string(),
                r.total.to_string(),
                cell(r.cross_entropy),
                cell(r.kl),
                cell(r.generator),
                cell(r.discriminator),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii")
    }
}

fn sample_batch(steps: &[&DemoStep], size: usize, rng: &mut RngStream) -> Result<Batch> {
    let picks: Vec<&DemoStep> = (0..size).map(|_| steps[rng.below(steps.len())]).collect();
    let pairs: Vec<_> = picks.iter().map(|s| (&s.observation, &s.action)).collect();
    Batch::new(&pairs)
}

fn diverged(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numeric { .. } => Error::TrainingDiverged { step },
        other => other,
    }
}

/// Adam update of the parameters at `indices` (into `params()` order).
fn update(
    model: &mut PolicyModel,
    indices: &[usize],
    grads: Vec<Tensor>,
    state: &mut AdamState,
    step: usize,
) -> Result<()> {
    let mut all = model.params_mut();
    let mut chosen: Vec<&mut Tensor> = Vec::with_capacity(indices.len());
    // indices ascend, so drain in order
    let mut it = all.drain(..).enumerate();
    for &want in indices {
        for (i, p) in it.by_ref() {
            if i == want {
                chosen.push(p);
                break;
            }
        }
    }
    adam_step(&mut chosen, &grads, state)?;
    if chosen.iter().any(|p| !p.all_finite()) {
        return Err(Error::TrainingDiverged { step });
    }
    Ok(())
}

/// Fits a fresh model of `config.head` to `dataset` with Adam.
///
/// The GAN alternates `gan_ratio` discriminator updates (trunk and
/// discriminator) with one generator update (generator only); each update
/// draws its own batch. One logged step is one such round.
pub fn train(dataset: &Dataset, expected_fingerprint: &str, config: &TrainConfig) -> Result<(PolicyModel, TrainingLog)> {
    dataset.check_fingerprint(expected_fingerprint)?;
    config.validate()?;
    let steps: Vec<&DemoStep> = dataset.steps().collect();
    if steps.is_empty() {
        return Err(Error::contract("dataset has no steps"));
    }
    let spec = config.model_spec(&dataset.fingerprint, dataset.obs_len, &dataset.act_dims);
    let mut model = PolicyModel::new(spec, &mut RngStream::derive(config.seed, INIT_STREAM))?;
    let mut batch_rng = RngStream::derive(config.seed, BATCH_STREAM);
    let mut noise_rng = RngStream::derive(config.seed, NOISE_STREAM);
    let mut log = TrainingLog::default();
    let groups = model.param_groups();
    let everything: Vec<usize> = (0..groups.last().map_or(0, |g| g.end)).collect();

    if config.head != HeadKind::Gan {
        let mut adam = AdamState::new(config.adam, model.params());
        for step in 0..config.steps {
            let batch = sample_batch(&steps, config.batch, &mut batch_rng)?;
            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let (loss, report) = build_loss(&mut g, &model, &bound, &batch, &mut noise_rng, config.beta_at(step))
                .map_err(diverged(step))?;
            let grads = g.backward(loss)?;
            let grads = bound.ids().into_iter().map(|id| grads.wrt(&g, id)).collect();
            update(&mut model, &everything, grads, &mut adam, step)?;
            log.rows.push((step, report));
        }
        return Ok((model, log));
    }

    let disc: Vec<usize> = groups[0].clone().chain(groups[2].clone()).collect();
    let gen: Vec<usize> = groups[1].clone().collect();
    let params = model.params();
    let mut adam_d = AdamState::new(config.adam, disc.iter().map(|&i| params[i]));
    let mut adam_g = AdamState::new(config.adam, gen.iter().map(|&i| params[i]));
    for step in 0..config.steps {
        let tau = config.tau_at(step);
        let mut d_report = LossReport::default();
        for _ in 0..config.gan_ratio {
            let batch = sample_batch(&steps, config.batch, &mut batch_rng)?;
            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let losses = build_gan(&mut g, &model, &bound, &batch, &mut noise_rng, tau).map_err(diverged(step))?;
            let grads = g.backward(losses.discriminator)?;
            let ids = bound.ids();
            let grads = disc.iter().map(|&i| grads.wrt(&g, ids[i])).collect();
            update(&mut model, &disc, grads, &mut adam_d, step)?;
            d_report = losses.discriminator_report;
        }
        let batch = sample_batch(&steps, config.batch, &mut batch_rng)?;
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let losses = build_gan(&mut g, &model, &bound, &batch, &mut noise_rng, tau).map_err(diverged(step))?;
        let grads = g.backward(losses.generator)?;
        let ids = bound.ids();
        let grads = gen.iter().map(|&i| grads.wrt(&g, ids[i])).collect();
        update(&mut model, &gen, grads, &mut adam_g, step)?;
        let g_loss = losses.generator_report.total;
        log.rows.push((
            step,
            LossReport {
                total: d_report.total + g_loss,
                generator: Some(g_loss),
                discriminator: Some(d_report.total),
                value: d_report.value,
                ..LossReport::default()
            },
        ));
    }
    Ok((model, log))
}

/// Loss of `model` over every step of `dataset` in one batch, with the
/// variational KL at full weight and the GAN relaxed at its final
/// temperature `gan_tau`.
pub fn dataset_loss(model: &PolicyModel, dataset: &Dataset, seed: u64, gan_tau: f64) -> Result<LossReport> {
    let pairs: Vec<_> = dataset.steps().map(|s| (&s.observation, &s.action)).collect();
    let batch = Batch::new(&pairs)?;
    let mut rng = RngStream::new(seed);
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    if model.kind() == HeadKind::Gan {
        let l = build_gan(&mut g, model, &bound, &batch, &mut rng, gan_tau)?;
        return Ok(LossReport {
            total: l.discriminator_report.total + l.generator_report.total,
            generator: Some(l.generator_report.total),
            discriminator: Some(l.discriminator_report.total),
            value: l.discriminator_report.value,
            ..LossReport::default()
        });
    }
    Ok(build_loss(&mut g, model, &bound, &batch, &mut rng, model.spec.beta)?.1)
}
