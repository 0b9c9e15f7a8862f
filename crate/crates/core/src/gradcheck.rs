//! Central-difference gradient checks for every primitive and for a whole
//! network, always in `f64`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archs::{build_res_squ_cnds, ArchConfig};
use crate::error::{Error, Result};
use crate::graph::{backward, forward, Graph, LossSeeds, ParamGroup, ParamStore};
use crate::ops::{self, Mode, PoolKind};
use crate::supervision::mean_cross_entropy;
use crate::tensor::{Shape, Tensor};
use crate::trainer::{init_params, InitSpec};

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// A differentiable operation with an explicit backward pass.
pub trait GradOp {
    fn name(&self) -> String;
    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>>;
    /// Gradient with respect to every input, given `upstream = dL/dy`.
    fn backward(&self, inputs: &[Tensor<f64>], upstream: &Tensor<f64>) -> Result<Vec<Tensor<f64>>>;
}

pub struct Conv {
    pub stride: usize,
    pub pad: usize,
}

impl GradOp for Conv {
    fn name(&self) -> String {
        format!("conv(stride {}, pad {})", self.stride, self.pad)
    }
    fn forward(&self, x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        ops::conv2d(&x[0], &x[1], x[2].data(), self.stride, self.pad)
    }
    fn backward(&self, x: &[Tensor<f64>], dy: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let g = ops::conv2d_backward(&x[0], &x[1], dy, self.stride, self.pad)?;
        Ok(vec![g.input, g.weight, Tensor::from_vec(x[2].shape(), g.bias)?])
    }
}

pub struct Pool {
    pub kind: PoolKind,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl GradOp for Pool {
    fn name(&self) -> String {
        let kind = match self.kind {
            PoolKind::Max => "max_pool",
            PoolKind::Avg => "avg_pool",
        };
        format!("{kind}({}x{}, stride {}, pad {})", self.kernel, self.kernel, self.stride, self.pad)
    }
    fn forward(&self, x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        Ok(ops::pool2d(&x[0], self.kind, self.kernel, self.stride, self.pad)?.output)
    }
    fn backward(&self, x: &[Tensor<f64>], dy: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let fwd = ops::pool2d(&x[0], self.kind, self.kernel, self.stride, self.pad)?;
        let g = ops::pool2d_backward(x[0].shape(), &fwd.argmax, dy, self.kind, self.kernel, self.stride, self.pad)?;
        Ok(vec![g])
    }
}

pub struct Gap;

impl GradOp for Gap {
    fn name(&self) -> String {
        "global_avg_pool".into()
    }
    fn forward(&self, x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        Ok(ops::global_avg_pool(&x[0]))
    }
    fn backward(&self, x: &[Tensor<f64>], dy: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        Ok(vec![ops::global_avg_pool_backward(x[0].shape(), dy)])
    }
}

pub struct Relu;

impl GradOp for Relu {
    fn name(&self) -> String {
        "relu".into()
    }
    fn forward(&self, x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        Ok(ops::relu(&x[0]))
    }
    fn backward(&self, x: &[Tensor<f64>], dy: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        Ok(vec![ops::relu_backward(&x[0], dy)?])
    }
}

/// Dropout with a fixed mask (fixed `seed`).
pub struct Dropout {
    pub rate: f64,
    pub seed: u64,
}

impl GradOp for Dropout {
    fn name(&self) -> String {
        format!("dropout({})", self.rate)
    }
    fn forward(&self, x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        Ok(ops::dropout(&x[0], self.rate, Mode::Train, self.seed, 0)?.0)
    }
    fn backward(&self, x: &[Tensor<f64>], dy: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let mask = ops::dropout_mask(x[0].len(), self.rate, self.seed, 0)?;
        Ok(vec![ops::dropout_backward(&mask, dy)])
    }
}

pub struct Concat;

impl GradOp for Concat {
    fn name(&self) -> String {
        "concat".into()
    }
    fn forward(&self, x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        ops::concat_channels(&x[0], &x[1])
    }
    fn backward(&self, x: &[Tensor<f64>], dy: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        ops::concat_backward(dy, &[x[0].shape().c, x[1].shape().c])
    }
}

pub struct Add;

impl GradOp for Add {
    fn name(&self) -> String {
        "add".into()
    }
    fn forward(&self, x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        ops::add_elementwise(&x[0], &x[1])
    }
    fn backward(&self, _: &[Tensor<f64>], dy: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        Ok(vec![dy.clone(), dy.clone()])
    }
}

pub struct Scale;

impl GradOp for Scale {
    fn name(&self) -> String {
        "scale".into()
    }
    fn forward(&self, x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        ops::scale_channels(&x[0], x[1].data(), x[2].data())
    }
    fn backward(&self, x: &[Tensor<f64>], dy: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let g = ops::scale_channels_backward(&x[0], x[1].data(), dy)?;
        Ok(vec![
            g.input,
            Tensor::from_vec(x[1].shape(), g.gamma)?,
            Tensor::from_vec(x[2].shape(), g.beta)?,
        ])
    }
}

/// Batch-mean softmax cross-entropy of logits `(n, K, 1, 1)`.
pub struct SoftmaxLoss {
    pub labels: Vec<usize>,
}

impl GradOp for SoftmaxLoss {
    fn name(&self) -> String {
        "softmax_cross_entropy".into()
    }
    fn forward(&self, x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        let loss = mean_cross_entropy(&ops::softmax_rows(&x[0])?, &self.labels)?;
        Tensor::from_vec(Shape::vector(1), vec![loss])
    }
    fn backward(&self, x: &[Tensor<f64>], dy: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let probs = ops::softmax_rows(&x[0])?;
        let k = probs.shape().c;
        let scale = dy.data()[0] / self.labels.len() as f64;
        let mut g = Vec::with_capacity(probs.len());
        for (row, &label) in probs.data().chunks(k).zip(&self.labels) {
            g.extend(ops::softmax_xent_grad(row, label)?.into_iter().map(|v| v * scale));
        }
        Ok(vec![Tensor::from_vec(probs.shape(), g)?])
    }
}

/// Wraps an op and flips the sign of its backward pass; a check of the
/// wrapped op must fail.
pub struct Negated<O>(pub O);

impl<O: GradOp> GradOp for Negated<O> {
    fn name(&self) -> String {
        format!("{} [negated backward]", self.0.name())
    }
    fn forward(&self, x: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        self.0.forward(x)
    }
    fn backward(&self, x: &[Tensor<f64>], dy: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        Ok(self
            .0
            .backward(x, dy)?
            .into_iter()
            .map(|g| Tensor::from_fn(g.shape(), |i| -g.data()[i]))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub checked: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Compares `op.backward` against central differences of
/// `L = sum(r * op.forward(inputs))` for a fixed random `r`, over every
/// element of every input.
pub fn check_op(op: &dyn GradOp, inputs: &[Tensor<f64>], eps: f64, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = op.forward(inputs)?;
    let r = random_tensor(&mut rng, y.shape());
    let analytic = op.backward(inputs, &r)?;
    if analytic.len() != inputs.len() {
        return Err(Error::Structure(format!("{}: backward returned {} gradients", op.name(), analytic.len())));
    }
    let loss = |xs: &[Tensor<f64>]| -> Result<f64> {
        let y = op.forward(xs)?;
        Ok(y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
    };
    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..xs[k].len() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + eps;
            let up = loss(&xs)?;
            xs[k].data_mut()[i] = orig - eps;
            let down = loss(&xs)?;
            xs[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(rel_err(grad.data()[i], numeric));
        }
    }
    Ok(worst)
}

/// One gradient-check case: an op and its inputs.
pub struct Case {
    pub op: Box<dyn GradOp>,
    pub inputs: Vec<Tensor<f64>>,
}

/// Every primitive on small random inputs. Max-pool inputs are distinct
/// and well separated so that no perturbation changes the chosen element,
/// and ReLU inputs avoid a neighbourhood of zero.
pub fn primitive_cases(seed: u64, inject_fault: bool) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand = |s: Shape| random_tensor(&mut rng, s);
    let separated = |s: Shape, seed: u64| {
        let mut perm: Vec<usize> = (0..s.len()).collect();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..perm.len()).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        Tensor::from_fn(s, |i| perm[i] as f64 * 0.1 - 1.0)
    };
    let away_from_zero = |t: Tensor<f64>| Tensor::from_fn(t.shape(), |i| {
        let v = t.data()[i];
        v + 0.1 * v.signum()
    });
    let x = Shape::new(2, 3, 5, 5);
    let conv = |stride, pad| -> Box<dyn GradOp> {
        if inject_fault {
            Box::new(Negated(Conv { stride, pad }))
        } else {
            Box::new(Conv { stride, pad })
        }
    };
    vec![
        Case {
            op: conv(1, 1),
            inputs: vec![rand(x), rand(Shape::new(4, 3, 3, 3)), rand(Shape::vector(4))],
        },
        Case {
            op: conv(2, 0),
            inputs: vec![rand(x), rand(Shape::new(2, 3, 3, 3)), rand(Shape::vector(2))],
        },
        Case {
            op: conv(1, 0),
            inputs: vec![rand(x), rand(Shape::new(3, 3, 1, 1)), rand(Shape::vector(3))],
        },
        Case {
            op: Box::new(Pool { kind: PoolKind::Max, kernel: 3, stride: 2, pad: 0 }),
            inputs: vec![separated(x, seed ^ 1)],
        },
        Case {
            op: Box::new(Pool { kind: PoolKind::Max, kernel: 3, stride: 2, pad: 1 }),
            inputs: vec![separated(x, seed ^ 2)],
        },
        Case {
            op: Box::new(Pool { kind: PoolKind::Avg, kernel: 3, stride: 2, pad: 1 }),
            inputs: vec![rand(x)],
        },
        Case {
            op: Box::new(Gap),
            inputs: vec![rand(x)],
        },
        Case {
            op: Box::new(Relu),
            inputs: vec![away_from_zero(rand(x))],
        },
        Case {
            op: Box::new(Dropout { rate: 0.5, seed }),
            inputs: vec![rand(x)],
        },
        Case {
            op: Box::new(Concat),
            inputs: vec![rand(x), rand(Shape::new(2, 2, 5, 5))],
        },
        Case {
            op: Box::new(Add),
            inputs: vec![rand(x), rand(x)],
        },
        Case {
            op: Box::new(Scale),
            inputs: vec![rand(x), rand(Shape::vector(3)), rand(Shape::vector(3))],
        },
        Case {
            op: Box::new(SoftmaxLoss { labels: vec![1, 4] }),
            inputs: vec![rand(Shape::new(2, 5, 1, 1))],
        },
    ]
}

/// Relative error of every parameter gradient of `L0 + alpha * Ls` against
/// central differences, with dropout masks held fixed by `seed`.
///
/// Each parameter is differenced at every step in `steps` and scored by the
/// closest estimate: a large step can straddle a ReLU or max-pool kink and
/// a small one drowns gradients near 1e-8 in round-off, while a wrong
/// analytic gradient disagrees at every step.
pub fn check_network(
    graph: &Graph,
    params: &ParamStore<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    alpha: f64,
    seed: u64,
    steps: &[f64],
) -> Result<f64> {
    if steps.is_empty() {
        return Err(Error::Domain("no finite-difference steps".into()));
    }
    let main = graph
        .loss_node(ParamGroup::Main)
        .ok_or_else(|| Error::Structure("graph has no main loss".into()))?
        .to_string();
    let mut seeds = LossSeeds::from([(main.clone(), 1.0)]);
    let branch = graph.loss_node(ParamGroup::Branch).map(str::to_string);
    if let Some(b) = &branch {
        seeds.insert(b.clone(), alpha);
    }
    let inputs = BTreeMap::from([(
        graph.input_ids().next().ok_or_else(|| Error::Structure("no input".into()))?.to_string(),
        x.clone(),
    )]);
    let loss = |p: &ParamStore<f64>| -> Result<f64> {
        let pass = forward(graph, p, &inputs, Mode::Train, seed)?;
        let mut total = 0.0;
        for (id, w) in &seeds {
            total += w * mean_cross_entropy(pass.value(graph, id).expect("loss exists"), labels)?;
        }
        Ok(total)
    };
    let mut p = params.clone();
    p.zero_grads();
    let pass = forward(graph, &p, &inputs, Mode::Train, seed)?;
    backward(graph, &mut p, &pass, labels, &seeds)?;
    let analytic = p.flat_grads();
    let mut worst: f64 = 0.0;
    for (k, &a) in analytic.iter().enumerate() {
        let orig = *p.flat_value_mut(k).expect("index in range");
        let mut best = f64::INFINITY;
        for &eps in steps {
            *p.flat_value_mut(k).unwrap() = orig + eps;
            let up = loss(&p)?;
            *p.flat_value_mut(k).unwrap() = orig - eps;
            let down = loss(&p)?;
            *p.flat_value_mut(k).unwrap() = orig;
            best = best.min(rel_err(a, (up - down) / (2.0 * eps)));
        }
        worst = worst.max(best);
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Whole-network tolerance; primitives use `min(1e-4, tolerance)`.
    pub tolerance: f64,
    pub inject_fault: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 0,
            tolerance: 1e-3,
            inject_fault: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn offenders(&self) -> Vec<&CheckResult> {
        self.results.iter().filter(|r| !r.passed()).collect()
    }
}

/// Step for primitive checks.
pub const EPS: f64 = 1e-6;
/// Steps for the whole-network check.
pub const NETWORK_STEPS: [f64; 2] = [1e-4, 1e-6];

/// Graph, parameters, input batch and labels.
pub type Setup = (Graph, ParamStore<f64>, Tensor<f64>, Vec<usize>);

/// The miniature network used by the whole-network check: 8x8 input,
/// two classes and fire dims (2, 4, 4).
pub fn miniature_setup(seed: u64) -> Result<Setup> {
    let graph = build_res_squ_cnds(&ArchConfig::miniature())?;
    // Unit-scale output layers keep gradients well above finite-difference
    // round-off.
    let init = InitSpec {
        output_std: 1.0,
        ..InitSpec::default()
    };
    let mut params: ParamStore<f64> = init_params(&graph, &init, seed)?;
    // Nonzero biases and affine terms so that every gradient path is live.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (_, p) in params.iter_mut() {
        for (name, t) in p.tensors_mut() {
            if name != "weight" {
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v += rng.random_range(-0.1..0.1));
            }
        }
    }
    let x = random_tensor(&mut rng, Shape::new(2, 3, 8, 8));
    Ok((graph, params, x, vec![0, 1]))
}

pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let prim_tol = opts.tolerance.min(1e-4);
    let mut results = Vec::new();
    for (i, case) in primitive_cases(opts.seed, opts.inject_fault).into_iter().enumerate() {
        let err = check_op(case.op.as_ref(), &case.inputs, EPS, opts.seed.wrapping_add(i as u64))?;
        results.push(CheckResult {
            name: case.op.name(),
            max_rel_err: err,
            tolerance: prim_tol,
            checked: case.inputs.iter().map(Tensor::len).sum(),
        });
    }
    let (graph, params, x, labels) = miniature_setup(opts.seed)?;
    let err = check_network(&graph, &params, &x, &labels, 0.3, opts.seed, &NETWORK_STEPS)?;
    results.push(CheckResult {
        name: "network(miniature)".into(),
        max_rel_err: err,
        tolerance: opts.tolerance,
        checked: params.len(),
    });
    Ok(GradcheckReport { results })
}
