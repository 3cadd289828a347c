//! Policy heads over a shared observation trunk.
//!
//! | head           | models                          | sampling                         |
//! |----------------|---------------------------------|----------------------------------|
//! | independent    | `Π_i p(a_i \| o)`               | each dimension on its own        |
//! | autoregressive | `Π_i p(a_i \| a_<i, o)`         | dimensions in declared order     |
//! | gan            | generator `G(f, z)` vs `D(f, a)`| argmax of `G(f, z)`, `z ~ N(0,I)`|
//! | variational    | decoder `p(a \| o, z)`, `z ∈ K` | `z` uniform, then each dimension |

mod checkpoint;
mod losses;

use std::fmt;
use std::str::FromStr;

pub use checkpoint::{read_model, write_model, CHECKPOINT_VERSION};
pub use losses::{
    autoregressive_loss, gan_step_losses, gumbel_softmax_sample, independent_loss,
    kl_categorical_uniform, variational_loss, GanLosses, LossGraph, LossReport,
};
pub(crate) use losses::{build_gan, build_loss};

use crate::autodiff::{mlp_init, softmax, Graph, Mlp, MlpVars, NodeId, RngStream, Tensor};
use crate::envsim::{Action, EnvConfig, Observation};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadKind {
    Independent,
    Autoregressive,
    Gan,
    Variational,
}

impl HeadKind {
    pub const ALL: [HeadKind; 4] = [
        HeadKind::Independent,
        HeadKind::Autoregressive,
        HeadKind::Gan,
        HeadKind::Variational,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Independent => "independent",
            HeadKind::Autoregressive => "autoregressive",
            HeadKind::Gan => "gan",
            HeadKind::Variational => "variational",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HeadKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown head `{s}` (expected independent, autoregressive, gan or variational)"
                ))
            })
    }
}

/// Everything needed to rebuild a model's architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub kind: HeadKind,
    pub fingerprint: String,
    pub obs_len: usize,
    pub act_dims: Vec<usize>,
    /// Trunk layer sizes, observation length first, feature length last.
    pub trunk: Vec<usize>,
    /// Hidden width of each head network; 0 makes every head one linear map.
    pub head_hidden: usize,
    /// Variational latent categories.
    pub latent: usize,
    /// Variational gumbel-softmax temperature.
    pub tau: f64,
    /// Variational KL weight after warm-up.
    pub beta: f64,
    /// Training feeds hard one-hot samples forward (variational latents, GAN
    /// fakes) and takes gradients through the gumbel-softmax relaxation.
    pub straight_through: bool,
    /// GAN generator noise length.
    pub noise_dim: usize,
}

impl ModelSpec {
    /// Defaults: trunk `obs → 128 → 64`, 64-wide heads, `K = 8`, `τ = 0.5`,
    /// `β = 1`, 8 noise inputs.
    pub fn new(kind: HeadKind, fingerprint: &str, obs_len: usize, act_dims: &[usize]) -> Self {
        ModelSpec {
            kind,
            fingerprint: fingerprint.to_string(),
            obs_len,
            act_dims: act_dims.to_vec(),
            trunk: vec![obs_len, 128, 64],
            head_hidden: 64,
            latent: 8,
            tau: 0.5,
            beta: 1.0,
            straight_through: true,
            noise_dim: 8,
        }
    }

    /// Car tasks use a 16-wide feature vector.
    pub fn for_env(kind: HeadKind, env: &EnvConfig, obs_len: usize) -> Self {
        let mut spec = ModelSpec::new(kind, &env.fingerprint(), obs_len, &env.action_space().sizes());
        if env.task.is_car() {
            spec.trunk = vec![obs_len, 128, 16];
        }
        spec
    }

    pub fn features(&self) -> usize {
        *self.trunk.last().expect("trunk has sizes")
    }

    pub fn joint_width(&self) -> usize {
        self.act_dims.iter().sum()
    }

    fn head_sizes(&self, input: usize, output: usize) -> Vec<usize> {
        if self.head_hidden == 0 {
            vec![input, output]
        } else {
            vec![input, self.head_hidden, output]
        }
    }

    /// Layer sizes of every head network, in parameter order.
    pub fn head_layouts(&self) -> Vec<Vec<usize>> {
        let f = self.features();
        let total = self.joint_width();
        match self.kind {
            HeadKind::Independent => self.act_dims.iter().map(|&n| self.head_sizes(f, n)).collect(),
            HeadKind::Autoregressive => {
                let mut prefix = 0;
                self.act_dims
                    .iter()
                    .map(|&n| {
                        let s = self.head_sizes(f + prefix, n);
                        prefix += n;
                        s
                    })
                    .collect()
            }
            HeadKind::Gan => vec![
                self.head_sizes(f + self.noise_dim, total),
                self.head_sizes(f + total, 1),
            ],
            HeadKind::Variational => vec![
                self.head_sizes(f + total, self.latent),
                self.head_sizes(f + self.latent, total),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArchitecture(m));
        if self.act_dims.is_empty() || self.act_dims.contains(&0) {
            return bad(format!("action alphabets must be nonempty, got {:?}", self.act_dims));
        }
        if self.trunk.len() < 2 || self.trunk[0] != self.obs_len {
            return bad(format!(
                "trunk {:?} must start at the observation length {}",
                self.trunk, self.obs_len
            ));
        }
        if self.kind == HeadKind::Variational && (self.latent == 0 || !(self.tau > 0.0) || !(self.beta >= 0.0)) {
            return bad(format!(
                "variational head needs latent > 0, tau > 0 and beta >= 0 (got {}, {}, {})",
                self.latent, self.tau, self.beta
            ));
        }
        if self.kind == HeadKind::Gan && self.noise_dim == 0 {
            return bad("gan head needs noise_dim > 0".into());
        }
        Ok(())
    }
}

/// Trunk plus one head parameterization.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyModel {
    pub spec: ModelSpec,
    pub trunk: Mlp,
    /// Independent / autoregressive: one network per dimension.
    /// GAN: `[generator, discriminator]`. Variational: `[encoder, decoder]`.
    pub heads: Vec<Mlp>,
}

/// Graph handles for a bound model.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub trunk: MlpVars,
    pub heads: Vec<MlpVars>,
}

impl BoundModel {
    pub fn ids(&self) -> Vec<NodeId> {
        let mut ids: Vec<NodeId> = self.trunk.ids().collect();
        for h in &self.heads {
            ids.extend(h.ids());
        }
        ids
    }
}

impl PolicyModel {
    pub fn new(spec: ModelSpec, rng: &mut RngStream) -> Result<Self> {
        spec.validate()?;
        let trunk = mlp_init(&spec.trunk, rng)?;
        let heads = spec
            .head_layouts()
            .iter()
            .map(|sizes| mlp_init(sizes, rng))
            .collect::<Result<_>>()?;
        Ok(PolicyModel { spec, trunk, heads })
    }

    pub fn kind(&self) -> HeadKind {
        self.spec.kind
    }

    /// Parameter tensors: trunk first, then heads, weight before bias.
    pub fn params(&self) -> Vec<&Tensor> {
        self.trunk
            .tensors()
            .chain(self.heads.iter().flat_map(Mlp::tensors))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.trunk
            .tensors_mut()
            .chain(self.heads.iter_mut().flat_map(Mlp::tensors_mut))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Index ranges into [`params`](Self::params): trunk, then each head.
    pub fn param_groups(&self) -> Vec<std::ops::Range<usize>> {
        let mut groups = Vec::new();
        let mut start = 0;
        for n in std::iter::once(&self.trunk)
            .chain(&self.heads)
            .map(|m| 2 * m.layers.len())
        {
            groups.push(start..start + n);
            start += n;
        }
        groups
    }

    pub fn bind(&self, graph: &mut Graph) -> BoundModel {
        BoundModel {
            trunk: self.trunk.bind(graph),
            heads: self.heads.iter().map(|h| h.bind(graph)).collect(),
        }
    }

    /// Rebinds from leaves already placed in [`params`](Self::params) order.
    pub fn bind_ids(&self, ids: &[NodeId]) -> Result<BoundModel> {
        let groups = self.param_groups();
        if ids.len() != groups.last().map_or(0, |g| g.end) {
            return Err(Error::contract(format!(
                "expected {} parameter ids, got {}",
                groups.last().map_or(0, |g| g.end),
                ids.len()
            )));
        }
        let mut mlps = groups
            .into_iter()
            .map(|r| MlpVars::from_ids(&ids[r]))
            .collect::<Result<Vec<_>>>()?;
        let heads = mlps.split_off(1);
        Ok(BoundModel {
            trunk: mlps.pop().expect("trunk group"),
            heads,
        })
    }

    fn check_obs(&self, obs: &[f64]) -> Result<()> {
        if obs.len() != self.spec.obs_len {
            return Err(Error::contract(format!(
                "observation has {} features, model expects {}",
                obs.len(),
                self.spec.obs_len
            )));
        }
        Ok(())
    }

    /// Trunk features of one observation.
    pub fn features(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.check_obs(obs)?;
        let x = Tensor::matrix(1, obs.len(), obs.to_vec())?;
        Ok(self.trunk.forward(&x)?.into_data())
    }

    fn run(mlp: &Mlp, input: Vec<f64>) -> Vec<f64> {
        let x = Tensor::matrix(1, input.len(), input).expect("row vector");
        mlp.forward(&x).expect("sizes fixed at construction").into_data()
    }

    fn one_hot_prefix(&self, prefix: &[usize]) -> Vec<f64> {
        let mut v = Vec::new();
        for (&a, &n) in prefix.iter().zip(&self.spec.act_dims) {
            v.extend((0..n).map(|k| if k == a { 1.0 } else { 0.0 }));
        }
        v
    }

    /// Split a `[Σ|A_i|]` vector into per-dimension probability vectors.
    fn split_softmax(&self, logits: &[f64]) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        let mut off = 0;
        for &n in &self.spec.act_dims {
            out.push(softmax(&logits[off..off + n]));
            off += n;
        }
        out
    }

    /// Distribution of dimension `i` given trunk features and, for the
    /// autoregressive head, the earlier dimensions.
    pub fn conditional(&self, features: &[f64], prefix: &[usize]) -> Result<Vec<f64>> {
        let i = prefix.len();
        if i >= self.spec.act_dims.len() {
            return Err(Error::contract("prefix covers every dimension"));
        }
        match self.spec.kind {
            HeadKind::Independent => Ok(softmax(&Self::run(&self.heads[i], features.to_vec()))),
            HeadKind::Autoregressive => {
                let mut input = features.to_vec();
                input.extend(self.one_hot_prefix(prefix));
                Ok(softmax(&Self::run(&self.heads[i], input)))
            }
            _ => Err(Error::contract(format!(
                "{} head has no per-dimension conditionals",
                self.spec.kind
            ))),
        }
    }

    /// Decoder distributions per dimension for latent category `k`.
    pub fn decoder_dists(&self, features: &[f64], k: usize) -> Vec<Vec<f64>> {
        let mut input = features.to_vec();
        input.extend((0..self.spec.latent).map(|j| if j == k { 1.0 } else { 0.0 }));
        self.split_softmax(&Self::run(&self.heads[1], input))
    }

    /// Generator logits for one noise vector.
    pub fn generator_logits(&self, features: &[f64], z: &[f64]) -> Vec<f64> {
        let mut input = features.to_vec();
        input.extend_from_slice(z);
        Self::run(&self.heads[0], input)
    }

    /// Discriminator probability that `action` is an expert action.
    pub fn discriminator_prob(&self, features: &[f64], action_encoding: &[f64]) -> f64 {
        let mut input = features.to_vec();
        input.extend_from_slice(action_encoding);
        crate::autodiff::sigmoid(Self::run(&self.heads[1], input)[0])
    }

    fn argmax_dims(&self, logits: &[f64]) -> Action {
        let mut a = Vec::new();
        let mut off = 0;
        for &n in &self.spec.act_dims {
            let slice = &logits[off..off + n];
            let best = (0..n)
                .max_by(|&x, &y| slice[x].total_cmp(&slice[y]).then(y.cmp(&x)))
                .expect("nonempty alphabet");
            a.push(best);
            off += n;
        }
        Action(a)
    }

    fn sample_from(&self, features: &[f64], rng: &mut RngStream) -> Action {
        let dims = self.spec.act_dims.len();
        match self.spec.kind {
            HeadKind::Independent | HeadKind::Autoregressive => {
                let mut prefix = Vec::with_capacity(dims);
                for _ in 0..dims {
                    let p = self.conditional(features, &prefix).expect("prefix shorter than dims");
                    prefix.push(rng.categorical(&p));
                }
                Action(prefix)
            }
            HeadKind::Gan => {
                let z: Vec<f64> = (0..self.spec.noise_dim).map(|_| rng.normal()).collect();
                self.argmax_dims(&self.generator_logits(features, &z))
            }
            HeadKind::Variational => {
                let k = rng.below(self.spec.latent);
                Action(
                    self.decoder_dists(features, k)
                        .iter()
                        .map(|p| rng.categorical(p))
                        .collect(),
                )
            }
        }
    }

    /// One action for `obs`.
    pub fn sample_action(&self, obs: &Observation, rng: &mut RngStream) -> Result<Action> {
        let f = self.features(&obs.0)?;
        Ok(self.sample_from(&f, rng))
    }

    /// `n` independent actions for one observation, sharing the trunk pass.
    pub fn sample_actions(&self, obs: &Observation, n: usize, rng: &mut RngStream) -> Result<Vec<Action>> {
        let f = self.features(&obs.0)?;
        match self.spec.kind {
            HeadKind::Variational => {
                let dists: Vec<_> = (0..self.spec.latent).map(|k| self.decoder_dists(&f, k)).collect();
                Ok((0..n)
                    .map(|_| {
                        let d = &dists[rng.below(self.spec.latent)];
                        Action(d.iter().map(|p| rng.categorical(p)).collect())
                    })
                    .collect())
            }
            HeadKind::Independent => {
                let dists: Vec<_> = (0..self.spec.act_dims.len())
                    .map(|i| self.conditional(&f, &vec![0; i]))
                    .collect::<Result<_>>()?;
                Ok((0..n)
                    .map(|_| Action(dists.iter().map(|p| rng.categorical(p)).collect()))
                    .collect())
            }
            _ => Ok((0..n).map(|_| self.sample_from(&f, rng)).collect()),
        }
    }

    /// Exact joint distribution over `enumerate()` order, where tractable
    /// (every head except the GAN).
    pub fn joint_distribution(&self, obs: &Observation) -> Result<Option<Vec<f64>>> {
        let f = self.features(&obs.0)?;
        let space = crate::envsim::ActionSpace::from_sizes(&self.spec.act_dims);
        let joint = space.enumerate();
        let probs = match self.spec.kind {
            HeadKind::Gan => return Ok(None),
            HeadKind::Independent | HeadKind::Autoregressive => joint
                .iter()
                .map(|a| {
                    let mut p = 1.0;
                    for i in 0..a.0.len() {
                        p *= self.conditional(&f, &a.0[..i])?[a.0[i]];
                    }
                    Ok(p)
                })
                .collect::<Result<Vec<_>>>()?,
            HeadKind::Variational => {
                let dists: Vec<_> = (0..self.spec.latent).map(|k| self.decoder_dists(&f, k)).collect();
                joint
                    .iter()
                    .map(|a| {
                        dists
                            .iter()
                            .map(|d| a.0.iter().enumerate().map(|(i, &v)| d[i][v]).product::<f64>())
                            .sum::<f64>()
                            / self.spec.latent as f64
                    })
                    .collect()
            }
        };
        Ok(Some(probs))
    }
}

/// Trunk features for an observation (free-function form).
pub fn trunk_forward(model: &PolicyModel, obs: &Observation) -> Result<Vec<f64>> {
    model.features(&obs.0)
}

/// One-hot rows for the first `upto` dimensions of each action.
pub(crate) fn one_hot_rows(actions: &[Action], dims: &[usize], upto: usize) -> Tensor {
    let width: usize = dims[..upto].iter().sum();
    let mut data = Vec::with_capacity(actions.len() * width);
    for a in actions {
        for (i, &n) in dims[..upto].iter().enumerate() {
            data.extend((0..n).map(|k| if k == a.0[i] { 1.0 } else { 0.0 }));
        }
    }
    Tensor::matrix(actions.len(), width, data).expect("sized above")
}

/// Observations and actions stacked for one loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub observations: Tensor,
    pub actions: Vec<Action>,
}

impl Batch {
    pub fn new(pairs: &[(&Observation, &Action)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let rows: Vec<&[f64]> = pairs.iter().map(|(o, _)| o.0.as_slice()).collect();
        Ok(Batch {
            observations: Tensor::from_rows(&rows)?,
            actions: pairs.iter().map(|(_, a)| (*a).clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub(crate) fn check(&self, spec: &ModelSpec) -> Result<()> {
        if self.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        if self.observations.cols() != spec.obs_len {
            return Err(Error::contract(format!(
                "batch observations have {} features, model expects {}",
                self.observations.cols(),
                spec.obs_len
            )));
        }
        for a in &self.actions {
            if a.0.len() != spec.act_dims.len() || a.0.iter().zip(&spec.act_dims).any(|(v, n)| v >= n) {
                return Err(Error::contract(format!(
                    "action {:?} outside alphabets {:?}",
                    a.0, spec.act_dims
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expert::tabular_two_mode;

    fn model(kind: HeadKind, seed: u64) -> PolicyModel {
        let spec = ModelSpec::new(kind, "t", 6, &[3, 3]);
        PolicyModel::new(spec, &mut RngStream::new(seed)).unwrap()
    }

    #[test]
    fn car_trunk_shape() {
        let mut spec = ModelSpec::new(HeadKind::Independent, "car", 8, &[5, 5]);
        spec.trunk = vec![8, 128, 16];
        let m = PolicyModel::new(spec, &mut RngStream::new(7)).unwrap();
        let f = m.features(&[0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(f.len(), 16);
    }

    #[test]
    fn trunk_is_pure_and_checks_length() {
        let m = model(HeadKind::Autoregressive, 3);
        let zero = Observation(vec![0.0; 6]);
        let a = trunk_forward(&m, &zero).unwrap();
        assert_eq!(a, trunk_forward(&m, &zero).unwrap());
        // zero input with zero biases propagates to zero features
        assert!(a.iter().all(|&x| x == 0.0));
        assert!(matches!(m.features(&[0.0; 5]), Err(Error::Contract(_))));
    }

    #[test]
    fn autoregressive_layer_inputs() {
        let m = model(HeadKind::Autoregressive, 1);
        let f = m.spec.features();
        assert_eq!(m.heads[0].inputs(), f);
        assert_eq!(m.heads[1].inputs(), f + 3);
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let obs = Observation(vec![0.5, 0.0, 1.0, 0.0, 0.2, 0.0]);
        for kind in HeadKind::ALL {
            let m = model(kind, 9);
            let a = m.sample_action(&obs, &mut RngStream::new(4)).unwrap();
            let b = m.sample_action(&obs, &mut RngStream::new(4)).unwrap();
            assert_eq!(a, b, "{kind}");
        }
    }

    #[test]
    fn distributions_are_normalized() {
        let obs = Observation(vec![0.3, -1.0, 2.0, 0.0, 0.0, 1.0]);
        for kind in [HeadKind::Independent, HeadKind::Autoregressive, HeadKind::Variational] {
            let m = model(kind, 2);
            let joint = m.joint_distribution(&obs).unwrap().unwrap();
            assert_eq!(joint.len(), 9);
            assert!((joint.iter().sum::<f64>() - 1.0).abs() < 1e-12, "{kind}");
        }
        assert!(model(HeadKind::Gan, 2).joint_distribution(&obs).unwrap().is_none());
    }

    #[test]
    fn param_groups_cover_params() {
        for kind in HeadKind::ALL {
            let m = model(kind, 0);
            let groups = m.param_groups();
            assert_eq!(groups.last().unwrap().end, m.params().len());
            let mut g = Graph::new();
            let ids: Vec<_> = m.params().into_iter().map(|p| g.leaf(p.clone())).collect();
            let b = m.bind_ids(&ids).unwrap();
            assert_eq!(b.ids(), ids);
        }
    }

    #[test]
    fn head_names_round_trip() {
        for kind in HeadKind::ALL {
            assert_eq!(kind.name().parse::<HeadKind>().unwrap(), kind);
        }
        assert!("gmm".parse::<HeadKind>().is_err());
    }

    #[test]
    fn batch_rejects_bad_actions() {
        let d = tabular_two_mode(2);
        let spec = ModelSpec::new(HeadKind::Independent, &d.fingerprint, d.obs_len, &[3, 3]);
        let s = d.steps().next().unwrap();
        let bad = Action(vec![3, 0]);
        let b = Batch::new(&[(&s.observation, &bad)]).unwrap();
        assert!(b.check(&spec).is_err());
        assert!(Batch::new(&[]).is_err());
    }
}
