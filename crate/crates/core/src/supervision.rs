//! Deep supervision: the auxiliary-loss weight schedule, combined losses
//! with their backward seeding, and the vanishing-gradient probe.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::graph::{backward, forward_single, ForwardPass, Graph, Layer, LossSeeds, NodeParams, NodeSpec, ParamGroup, ParamStore};
use crate::ops::{self, Mode, PoolKind};
use crate::tensor::{Real, Shape, Tensor};
use crate::trainer::{init_params, BodyInit, InitSpec, Sgd};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    /// `alpha0 * (1 - t/N)`.
    #[default]
    Linear,
    /// `a_t = a_{t-1} * (1 - t/N)` starting from `a_0 = alpha0`.
    Recursive,
}

/// Weight of the auxiliary loss as a function of completed epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaSchedule {
    pub alpha0: f64,
    /// Total epochs `N`; the weight reaches zero at `t = N`.
    pub epochs: usize,
    #[serde(default)]
    pub mode: AlphaMode,
}

impl AlphaSchedule {
    pub fn new(alpha0: f64, epochs: usize) -> Result<Self> {
        Self::with_mode(alpha0, epochs, AlphaMode::Linear)
    }

    pub fn with_mode(alpha0: f64, epochs: usize, mode: AlphaMode) -> Result<Self> {
        if !(alpha0 > 0.0 && alpha0.is_finite()) {
            return Err(Error::Domain(format!("alpha0 must be positive, got {alpha0}")));
        }
        if epochs == 0 {
            return Err(Error::Domain("schedule needs at least one epoch".into()));
        }
        Ok(AlphaSchedule {
            alpha0,
            epochs,
            mode,
        })
    }

    pub fn alpha_at(&self, t: usize) -> Result<f64> {
        let n = self.epochs;
        if t > n {
            return Err(Error::Domain(format!("t = {t} outside 0..={n}")));
        }
        let decay = |s: usize| (n - s) as f64 / n as f64;
        Ok(match self.mode {
            AlphaMode::Linear => self.alpha0 * decay(t),
            AlphaMode::Recursive => (1..=t).fold(self.alpha0, |a, s| a * decay(s)),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub main: f64,
    pub branch: f64,
    pub alpha: f64,
    pub total: f64,
}

pub fn combined_loss(main: f64, branch: f64, alpha: f64) -> LossBreakdown {
    LossBreakdown {
        main,
        branch,
        alpha,
        total: main + alpha * branch,
    }
}

/// Batch-mean cross-entropy of softmax rows `probs` of shape `(n, K, 1, 1)`.
pub fn mean_cross_entropy<T: Real>(probs: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let k = probs.shape().c;
    if labels.len() != probs.shape().n {
        return Err(Error::dim(format!(
            "{} labels for a batch of {}",
            labels.len(),
            probs.shape().n
        )));
    }
    let mut sum = 0.0;
    for (row, &label) in probs.data().chunks(k).zip(labels) {
        sum += ops::cross_entropy(row, label)?.as_f64();
    }
    Ok(sum / labels.len() as f64)
}

/// Logits feeding the softmax loss of `group`.
pub fn logits<'a, T: Real>(graph: &Graph, pass: &'a ForwardPass<T>, group: ParamGroup) -> Option<&'a Tensor<T>> {
    let id = graph.loss_node(group)?;
    let i = graph.position(id)?;
    Some(&pass.values()[graph.edges(i)[0]])
}

/// Forward pass, both losses and a backward pass seeded `{main: 1,
/// branch: alpha}`. Gradient slots are zeroed first. A graph without an
/// auxiliary loss reports a branch loss of 0.
pub fn loss_and_backward<T: Real>(
    graph: &Graph,
    params: &mut ParamStore<T>,
    x: &Tensor<T>,
    labels: &[usize],
    alpha: f64,
    mode: Mode,
    seed: u64,
) -> Result<(LossBreakdown, ForwardPass<T>)> {
    let main = graph
        .loss_node(ParamGroup::Main)
        .ok_or_else(|| Error::Structure("graph has no main softmax loss".into()))?
        .to_string();
    let branch = graph.loss_node(ParamGroup::Branch).map(str::to_string);
    let pass = forward_single(graph, params, x, mode, seed)?;
    let probs = |id: &str| pass.value(graph, id).expect("loss node exists");
    let classes = probs(&main).shape().c;
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Index { label, classes });
    }
    let l0 = mean_cross_entropy(probs(&main), labels)?;
    let ls = match &branch {
        Some(b) => mean_cross_entropy(probs(b), labels)?,
        None => 0.0,
    };
    let mut seeds = LossSeeds::from([(main, 1.0)]);
    if let Some(b) = branch {
        seeds.insert(b, alpha);
    }
    params.zero_grads();
    backward(graph, params, &pass, labels, &seeds)?;
    Ok((combined_loss(l0, ls, alpha), pass))
}

/// [`loss_and_backward`] in training mode with `alpha = sched.alpha_at(t)`.
pub fn network_loss<T: Real>(
    graph: &Graph,
    params: &mut ParamStore<T>,
    x: &Tensor<T>,
    labels: &[usize],
    sched: &AlphaSchedule,
    t: usize,
    seed: u64,
) -> Result<(LossBreakdown, ForwardPass<T>)> {
    let alpha = sched.alpha_at(t)?;
    loss_and_backward(graph, params, x, labels, alpha, Mode::Train, seed)
}

/// A plain stack of `depth` 3x3 pad-1 convolutions of constant `width`,
/// each followed by ReLU, with a 3x3 stride-2 max pool after every third
/// layer while the map is at least 3 wide, then a 1x1 classifier, global
/// average pooling and a softmax loss.
pub fn build_probe_stack(depth: usize, width: usize, classes: usize, [c, h, w]: [usize; 3]) -> Result<Graph> {
    if depth == 0 || width == 0 || classes < 2 {
        return Err(Error::Config(format!(
            "probe stack needs depth, width >= 1 and classes >= 2 (got {depth}, {width}, {classes})"
        )));
    }
    let mut g = Graph::new();
    g.add_node(NodeSpec::input("data", c, h, w))?;
    let mut prev = "data".to_string();
    for l in 1..=depth {
        let conv = format!("conv{l}");
        let relu = format!("relu{l}");
        g.add_node(NodeSpec::conv(&conv, &prev, width, 3, 1, 1).in_group(ParamGroup::Main))?;
        g.add_node(NodeSpec::unary(&relu, Layer::Relu, &conv))?;
        prev = relu;
        let s = g.shape_of(&prev).expect("just added");
        if l % 3 == 0 && l < depth && s.h >= 3 && s.w >= 3 {
            let pool = format!("pool{}", l / 3);
            g.add_node(NodeSpec::pool(&pool, &prev, PoolKind::Max, 3, 2, 0))?;
            prev = pool;
        }
    }
    g.add_node(NodeSpec::conv("classifier", &prev, classes, 1, 1, 0).in_group(ParamGroup::Main))?;
    g.add_node(NodeSpec::unary("gap", Layer::Gap, "classifier"))?;
    g.add_node(NodeSpec::unary("loss", Layer::SoftmaxLoss, "gap").in_group(ParamGroup::Main))?;
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGradient {
    pub layer: String,
    pub mean_abs_grad: f64,
    pub below_threshold: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientProbeReport {
    pub epochs: usize,
    pub threshold: f64,
    pub seed: u64,
    /// Hidden convolutions, shallow to deep.
    pub layers: Vec<LayerGradient>,
    /// Mean over the shallower half of `layers`.
    pub shallow_mean: f64,
    /// Mean over the deeper half of `layers`.
    pub deep_mean: f64,
    /// First layer below the threshold, scanning shallow to deep.
    pub recommended: Option<String>,
}

impl GradientProbeReport {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for l in &self.layers {
            w.serialize(l)?;
        }
        w.into_inner()
            .map_err(|e| Error::Domain(format!("csv buffer: {e}")))
    }
}

/// Index of the first mean strictly below `threshold`.
pub fn recommend(means: &[f64], threshold: f64) -> Option<usize> {
    means.iter().position(|&m| m < threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeOptions {
    pub epochs: usize,
    pub threshold: f64,
    pub batch: usize,
    pub seed: u64,
    /// SGD learning rate between batches. Zero measures the gradients of
    /// the initial weights only.
    pub lr: f64,
    pub momentum: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            epochs: 10,
            threshold: 1e-7,
            batch: 16,
            seed: 0,
            lr: 0.01,
            momentum: 0.9,
        }
    }
}

/// Averages `|dL/dW|` per hidden convolution over every batch of `epochs`
/// shuffled passes through `data`. Weights start from Gaussian(0, 0.01)
/// with zero biases and take one momentum SGD step per batch after its
/// gradients are recorded.
pub fn gradient_probe(graph: &Graph, data: &Dataset, opts: ProbeOptions) -> Result<GradientProbeReport> {
    if !(10..=50).contains(&opts.epochs) {
        return Err(Error::Domain(format!(
            "probe epochs must lie in 10..=50, got {}",
            opts.epochs
        )));
    }
    if !(opts.lr >= 0.0 && opts.lr.is_finite()) || !(0.0..1.0).contains(&opts.momentum) {
        return Err(Error::Domain(format!(
            "probe lr {} must be non-negative and momentum {} in [0, 1)",
            opts.lr, opts.momentum
        )));
    }
    if opts.batch == 0 || data.is_empty() {
        return Err(Error::Domain("probe needs a nonempty dataset and batch".into()));
    }
    if graph.nodes().iter().any(|n| n.group == Some(ParamGroup::Branch)) || graph.outputs().len() != 1 {
        return Err(Error::Structure("probe graph must have a single loss and no auxiliary branch".into()));
    }
    let init = InitSpec {
        body: BodyInit::Gaussian { std: 0.01 },
        output_std: 0.01,
    };
    let mut params: ParamStore<f64> = init_params(graph, &init, opts.seed)?;
    let mut sgd = Sgd::new(&params);
    let hidden: Vec<String> = graph
        .nodes()
        .iter()
        .enumerate()
        .filter(|(i, n)| matches!(n.layer, Layer::Conv { .. }) && !crate::trainer::is_output_conv(graph, *i))
        .map(|(_, n)| n.id.clone())
        .collect();
    let dims = data.dims();
    let expected = graph
        .input_shape()
        .ok_or_else(|| Error::Structure("probe graph has no input".into()))?;
    if [expected.c, expected.h, expected.w] != dims {
        return Err(Error::Config(format!(
            "dataset samples are {}x{}x{} but the probe expects {expected}",
            dims[0], dims[1], dims[2]
        )));
    }

    let mut sums = vec![0f64; hidden.len()];
    let mut batches = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(opts.batch) {
            let mut values = Vec::with_capacity(chunk.len() * data.sample_len());
            for &i in chunk {
                values.extend(data.sample(i).iter().map(|&v| v as f64));
            }
            let x = Tensor::from_vec(Shape::new(chunk.len(), dims[0], dims[1], dims[2]), values)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| data.label(i)).collect();
            loss_and_backward(graph, &mut params, &x, &labels, 0.0, Mode::Infer, opts.seed)?;
            for (s, id) in sums.iter_mut().zip(&hidden) {
                let Some(NodeParams::Conv { weight, .. }) = params.get(id) else {
                    unreachable!("hidden layers are convolutions");
                };
                let g = weight.grad().unwrap_or(&[]);
                *s += g.iter().map(|v| v.abs()).sum::<f64>() / g.len() as f64;
            }
            batches += 1;
            if opts.lr > 0.0 {
                sgd.step(&mut params, opts.lr, opts.momentum, 0.0);
            }
        }
    }
    let layers: Vec<LayerGradient> = hidden
        .into_iter()
        .zip(sums)
        .map(|(layer, s)| {
            let mean_abs_grad = s / batches as f64;
            LayerGradient {
                layer,
                mean_abs_grad,
                below_threshold: mean_abs_grad < opts.threshold,
            }
        })
        .collect();
    let means: Vec<f64> = layers.iter().map(|l| l.mean_abs_grad).collect();
    let half = means.len() / 2;
    let avg = |s: &[f64]| if s.is_empty() { 0.0 } else { s.iter().sum::<f64>() / s.len() as f64 };
    Ok(GradientProbeReport {
        epochs: opts.epochs,
        threshold: opts.threshold,
        seed: opts.seed,
        shallow_mean: avg(&means[..half]),
        deep_mean: avg(&means[means.len() - half..]),
        recommended: recommend(&means, opts.threshold).map(|i| layers[i].layer.clone()),
        layers,
    })
}
