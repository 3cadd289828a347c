use super::{one_hot_rows, Batch, BoundModel, HeadKind, PolicyModel};
use crate::autodiff::{softmax, Graph, NodeId, RngStream, Tensor};
use crate::error::{Error, Result};

/// Loss components of one evaluation. Components a head does not use are
/// `None`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub cross_entropy: Option<f64>,
    pub kl: Option<f64>,
    pub generator: Option<f64>,
    pub discriminator: Option<f64>,
    /// GAN minimax value `V(G, D)`, the negated discriminator loss.
    pub value: Option<f64>,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.cross_entropy, self.kl, self.generator, self.discriminator, self.value]
            .iter()
            .flatten()
            .chain(std::iter::once(&self.total))
            .all(|x| x.is_finite())
    }
}

/// A loss built on its own graph, ready for a backward pass.
pub struct LossGraph {
    pub graph: Graph,
    pub bound: BoundModel,
    pub total: NodeId,
    pub report: LossReport,
}

fn sum_nodes(g: &mut Graph, nodes: &[NodeId]) -> Result<NodeId> {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = g.add(acc, n)?;
    }
    Ok(acc)
}

/// Σ_i CE over column blocks of `logits`, one block per action dimension.
fn blockwise_ce(g: &mut Graph, logits: NodeId, batch: &Batch, dims: &[usize]) -> Result<NodeId> {
    let mut terms = Vec::with_capacity(dims.len());
    let mut off = 0;
    for (i, &n) in dims.iter().enumerate() {
        let block = g.slice(logits, off, off + n)?;
        let targets: Vec<usize> = batch.actions.iter().map(|a| a.0[i]).collect();
        terms.push(g.cross_entropy(block, &targets)?);
        off += n;
    }
    sum_nodes(g, &terms)
}

fn gumbel_matrix(rows: usize, cols: usize, rng: &mut RngStream) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gumbel()).collect();
    Tensor::matrix(rows, cols, data).expect("sized above")
}

/// Gumbel-softmax sample of each row of `logits` at temperature `tau`. With
/// `hard`, the forward value is the one-hot argmax while gradients still
/// flow through the relaxation (straight-through).
fn relaxed_sample(g: &mut Graph, logits: NodeId, tau: f64, hard: bool, rng: &mut RngStream) -> Result<NodeId> {
    let (rows, cols) = (g.value(logits).rows(), g.value(logits).cols());
    let noise = g.constant(gumbel_matrix(rows, cols, rng));
    let perturbed = g.add(logits, noise)?;
    let tempered = g.scale(perturbed, 1.0 / tau);
    let soft = g.softmax(tempered);
    if !hard {
        return Ok(soft);
    }
    let relaxed = g.value(soft);
    let mut shift = relaxed.map(|x| -x);
    for r in 0..rows {
        let row = relaxed.row(r);
        let j = (0..cols).max_by(|&x, &y| row[x].total_cmp(&row[y])).expect("nonempty row");
        shift.data_mut()[r * cols + j] += 1.0;
    }
    let shift = g.constant(shift);
    g.add(soft, shift)
}

/// Builds the loss of an independent, autoregressive or variational head.
/// `beta` is the effective KL weight (ignored by the first two).
pub(crate) fn build_loss(
    g: &mut Graph,
    model: &PolicyModel,
    bound: &BoundModel,
    batch: &Batch,
    rng: &mut RngStream,
    beta: f64,
) -> Result<(NodeId, LossReport)> {
    batch.check(&model.spec)?;
    let dims = &model.spec.act_dims;
    let x = g.constant(batch.observations.clone());
    let f = bound.trunk.forward(g, x)?;
    let (total, report) = match model.spec.kind {
        HeadKind::Independent | HeadKind::Autoregressive => {
            let ar = model.spec.kind == HeadKind::Autoregressive;
            let mut terms = Vec::with_capacity(dims.len());
            for (i, head) in bound.heads.iter().enumerate() {
                let input = if ar && i > 0 {
                    // teacher forcing: condition on the recorded actions
                    let prev = g.constant(one_hot_rows(&batch.actions, dims, i));
                    g.concat(&[f, prev])?
                } else {
                    f
                };
                let logits = head.forward(g, input)?;
                let targets: Vec<usize> = batch.actions.iter().map(|a| a.0[i]).collect();
                terms.push(g.cross_entropy(logits, &targets)?);
            }
            let total = sum_nodes(g, &terms)?;
            let ce = g.value(total).item();
            (
                total,
                LossReport {
                    total: ce,
                    cross_entropy: Some(ce),
                    ..LossReport::default()
                },
            )
        }
        HeadKind::Variational => {
            let b = batch.len();
            let k = model.spec.latent;
            let tau = model.spec.tau;
            let actions = g.constant(one_hot_rows(&batch.actions, dims, dims.len()));
            let enc_in = g.concat(&[f, actions])?;
            let q_logits = bound.heads[0].forward(g, enc_in)?;
            let z = relaxed_sample(g, q_logits, tau, model.spec.straight_through, rng)?;
            let dec_in = g.concat(&[f, z])?;
            let logits = bound.heads[1].forward(g, dec_in)?;
            let ce = blockwise_ce(g, logits, batch, dims)?;

            let q = g.softmax(q_logits);
            let log_q = g.log_softmax(q_logits);
            let ln_k = g.constant(Tensor::filled(&[b, k], (k as f64).ln()));
            let ratio = g.add(log_q, ln_k)?;
            let terms = g.mul(q, ratio)?;
            let kl_sum = g.sum(terms);
            let kl = g.scale(kl_sum, 1.0 / b as f64);
            let weighted = g.scale(kl, beta);
            let total = g.add(ce, weighted)?;
            (
                total,
                LossReport {
                    total: g.value(total).item(),
                    cross_entropy: Some(g.value(ce).item()),
                    kl: Some(g.value(kl).item()),
                    ..LossReport::default()
                },
            )
        }
        HeadKind::Gan => return Err(Error::contract("gan heads train through build_gan")),
    };
    if !report.is_finite() {
        return Err(Error::Numeric {
            location: format!("{} loss", model.spec.kind),
        });
    }
    Ok((total, report))
}

/// Both GAN objectives on one graph, sharing the noise draw.
pub struct GanLosses {
    pub discriminator: NodeId,
    pub generator: NodeId,
    pub discriminator_report: LossReport,
    pub generator_report: LossReport,
}

/// Discriminator loss `mean softplus(-D_real) + mean softplus(D_fake)` and
/// non-saturating generator loss `mean softplus(-D_fake)`, with `D_*` the
/// discriminator logits. These equal `-log σ` / `-log(1-σ)` of the scores
/// without ever forming `σ`. Fakes are gumbel-softmax relaxed at `tau`.
pub(crate) fn build_gan(
    g: &mut Graph,
    model: &PolicyModel,
    bound: &BoundModel,
    batch: &Batch,
    rng: &mut RngStream,
    tau: f64,
) -> Result<GanLosses> {
    if model.spec.kind != HeadKind::Gan {
        return Err(Error::contract("build_gan needs a gan head"));
    }
    if !(tau > 0.0) {
        return Err(Error::contract(format!("temperature must be positive, got {tau}")));
    }
    batch.check(&model.spec)?;
    let dims = &model.spec.act_dims;
    let b = batch.len();
    let x = g.constant(batch.observations.clone());
    let f = bound.trunk.forward(g, x)?;

    let z_data = (0..b * model.spec.noise_dim).map(|_| rng.normal()).collect();
    let z = g.constant(Tensor::matrix(b, model.spec.noise_dim, z_data)?);
    let gen_in = g.concat(&[f, z])?;
    let gen_logits = bound.heads[0].forward(g, gen_in)?;
    let mut blocks = Vec::with_capacity(dims.len());
    let mut off = 0;
    for &n in dims {
        let block = g.slice(gen_logits, off, off + n)?;
        blocks.push(relaxed_sample(g, block, tau, model.spec.straight_through, rng)?);
        off += n;
    }
    let fake = g.concat(&blocks)?;
    let real = g.constant(one_hot_rows(&batch.actions, dims, dims.len()));

    let real_in = g.concat(&[f, real])?;
    let fake_in = g.concat(&[f, fake])?;
    let s_real = bound.heads[1].forward(g, real_in)?;
    let s_fake = bound.heads[1].forward(g, fake_in)?;
    for s in [s_real, s_fake] {
        if !g.value(s).all_finite() {
            return Err(Error::Numeric {
                location: "discriminator score".into(),
            });
        }
    }

    let neg_real = g.scale(s_real, -1.0);
    let real_term = g.softplus(neg_real);
    let real_mean = g.mean(real_term);
    let fake_term = g.softplus(s_fake);
    let fake_mean = g.mean(fake_term);
    let d_loss = g.add(real_mean, fake_mean)?;

    let neg_fake = g.scale(s_fake, -1.0);
    let gen_term = g.softplus(neg_fake);
    let g_loss = g.mean(gen_term);

    let d = g.value(d_loss).item();
    let gl = g.value(g_loss).item();
    Ok(GanLosses {
        discriminator: d_loss,
        generator: g_loss,
        discriminator_report: LossReport {
            total: d,
            discriminator: Some(d),
            value: Some(-d),
            ..LossReport::default()
        },
        generator_report: LossReport {
            total: gl,
            generator: Some(gl),
            ..LossReport::default()
        },
    })
}

fn evaluate(model: &PolicyModel, batch: &Batch, rng: &mut RngStream, beta: f64) -> Result<LossReport> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    build_loss(&mut g, model, &bound, batch, rng, beta).map(|(_, r)| r)
}

fn factored_loss(model: &PolicyModel, batch: &Batch, kind: HeadKind) -> Result<LossReport> {
    if model.spec.kind != kind {
        // N = 1 makes both factorizations one network on the trunk features
        let same_layout = model.spec.act_dims.len() == 1
            && matches!(model.spec.kind, HeadKind::Independent | HeadKind::Autoregressive);
        if !same_layout {
            return Err(Error::contract(format!(
                "{kind} loss on a {} model",
                model.spec.kind
            )));
        }
    }
    let mut as_kind = model.clone();
    as_kind.spec.kind = kind;
    evaluate(&as_kind, batch, &mut RngStream::new(0), 0.0)
}

/// Mean over the batch of `Σ_i CE(logits_i(f), a_i)`.
pub fn independent_loss(model: &PolicyModel, batch: &Batch) -> Result<LossReport> {
    factored_loss(model, batch, HeadKind::Independent)
}

/// Mean over the batch of `Σ_i CE(logits_i(f, onehot(a_<i)), a_i)` with the
/// recorded actions as conditioning (teacher forcing).
pub fn autoregressive_loss(model: &PolicyModel, batch: &Batch) -> Result<LossReport> {
    factored_loss(model, batch, HeadKind::Autoregressive)
}

/// Reconstruction cross-entropy plus `β · KL(q(z | o, a) ‖ uniform)`, with
/// `z` drawn by gumbel-softmax from `rng` and `β` taken from the model spec.
pub fn variational_loss(model: &PolicyModel, batch: &Batch, rng: &mut RngStream) -> Result<LossReport> {
    if model.spec.kind != HeadKind::Variational {
        return Err(Error::contract("variational loss needs a variational head"));
    }
    evaluate(model, batch, rng, model.spec.beta)
}

/// `(discriminator, generator)` reports for one shared noise draw.
pub fn gan_step_losses(
    model: &PolicyModel,
    batch: &Batch,
    rng: &mut RngStream,
    tau: f64,
) -> Result<(LossReport, LossReport)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let l = build_gan(&mut g, model, &bound, batch, rng, tau)?;
    Ok((l.discriminator_report, l.generator_report))
}

/// `softmax((logits + g) / τ)` with `g` i.i.d. standard Gumbel.
pub fn gumbel_softmax_sample(logits: &[f64], tau: f64, rng: &mut RngStream) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::contract(format!("temperature must be positive, got {tau}")));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::contract("logits must be finite"));
    }
    let perturbed: Vec<f64> = logits.iter().map(|&l| (l + rng.gumbel()) / tau).collect();
    Ok(softmax(&perturbed))
}

/// `KL(q ‖ uniform) = Σ_k q_k ln(q_k K)`, with `0 ln 0 = 0`.
pub fn kl_categorical_uniform(q: &[f64]) -> Result<f64> {
    let total: f64 = q.iter().sum();
    if q.is_empty() || q.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!("not a probability vector: {q:?}")));
    }
    let k = q.len() as f64;
    Ok(q.iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * (p * k).ln())
        .sum::<f64>()
        .max(0.0))
}
