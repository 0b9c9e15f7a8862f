//! Initialization, preprocessing, SGD, the training loop, top-k
//! evaluation and checkpoints.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::datasets::{compute_channel_means, Dataset};
use crate::error::{Error, Result};
use crate::files;
use crate::graph::{forward_single, Graph, Layer, NodeParams, ParamGroup, ParamStore};
use crate::ops::Mode;
use crate::supervision::{logits, loss_and_backward, AlphaMode, AlphaSchedule};
use crate::tensor::{Precision, Real, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BodyInit {
    /// Uniform in `±sqrt(3 / fan_in)`.
    XavierUniform,
    Gaussian { std: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub body: BodyInit,
    /// Standard deviation of the K-way output convolutions.
    pub output_std: f64,
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec {
            body: BodyInit::XavierUniform,
            output_std: 0.01,
        }
    }
}

/// True for a convolution feeding global average pooling into a softmax loss.
pub fn is_output_conv(graph: &Graph, i: usize) -> bool {
    let nodes = graph.nodes();
    if !matches!(nodes[i].layer, Layer::Conv { .. }) {
        return false;
    }
    match graph.consumers(i).as_slice() {
        [gap] if matches!(nodes[*gap].layer, Layer::Gap) => graph
            .consumers(*gap)
            .iter()
            .any(|&l| matches!(nodes[l].layer, Layer::SoftmaxLoss)),
        _ => false,
    }
}

/// Seeded parameters. Each learnable node draws from its own ChaCha stream
/// (the node index), so adding a node never perturbs the others.
pub fn init_params<T: Real>(graph: &Graph, spec: &InitSpec, seed: u64) -> Result<ParamStore<T>> {
    let positive = |s: f64, what: &str| {
        if s > 0.0 && s.is_finite() {
            Ok(s)
        } else {
            Err(Error::Domain(format!("{what} std must be positive, got {s}")))
        }
    };
    positive(spec.output_std, "output")?;
    if let BodyInit::Gaussian { std } = spec.body {
        positive(std, "body")?;
    }
    let mut store = ParamStore::<T>::zeros(graph);
    for (i, node) in graph.nodes().iter().enumerate() {
        let Some(p) = store.get_mut(&node.id) else {
            continue;
        };
        match p {
            NodeParams::Scale { gamma, .. } => gamma.data_mut().fill(T::one()),
            NodeParams::Conv { weight, .. } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                let s = weight.shape();
                let fan_in = s.c * s.h * s.w;
                let body = if is_output_conv(graph, i) {
                    BodyInit::Gaussian {
                        std: spec.output_std,
                    }
                } else {
                    spec.body
                };
                let draw: Box<dyn FnMut() -> f64> = match body {
                    BodyInit::XavierUniform => {
                        let b = (3.0 / fan_in as f64).sqrt();
                        let u = Uniform::new_inclusive(-b, b)
                            .map_err(|e| Error::Domain(e.to_string()))?;
                        Box::new(move || u.sample(&mut rng))
                    }
                    BodyInit::Gaussian { std } => {
                        let n = Normal::new(0.0, std).map_err(|e| Error::Domain(e.to_string()))?;
                        Box::new(move || n.sample(&mut rng))
                    }
                };
                let mut draw = draw;
                weight.data_mut().iter_mut().for_each(|w| *w = T::of(draw()));
            }
        }
    }
    Ok(store)
}

/// Random-crop geometry: square `input` maps are cropped to `output`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSpec {
    pub input: usize,
    pub output: usize,
    /// Horizontal reflection with probability 0.5 in training mode.
    pub mirror: bool,
}

impl Default for CropSpec {
    fn default() -> Self {
        CropSpec {
            input: 256,
            output: 227,
            mirror: true,
        }
    }
}

/// Per-channel mean subtraction, a global multiplier, and optional crop
/// and mirror.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    pub means: Vec<f64>,
    /// Applied after mean subtraction.
    #[serde(default = "unit")]
    pub scale: f64,
    pub crop: Option<CropSpec>,
}

fn unit() -> f64 {
    1.0
}

impl Preprocess {
    /// Output `[c, h, w]` for samples of `dims`.
    pub fn output_dims(&self, [c, h, w]: [usize; 3]) -> [usize; 3] {
        match self.crop {
            Some(cs) => [c, cs.output, cs.output],
            None => [c, h, w],
        }
    }

    /// Transforms one CHW sample. `seed` fixes the crop origin and mirror
    /// decision in training mode; inference takes the centre crop.
    pub fn apply<T: Real>(&self, sample: &[f32], [c, h, w]: [usize; 3], mode: Mode, seed: u64) -> Result<Tensor<T>> {
        if sample.len() != c * h * w {
            return Err(Error::dim(format!("{} values for a {c}x{h}x{w} sample", sample.len())));
        }
        if self.means.len() != c {
            return Err(Error::dim(format!("{} channel means for {c} channels", self.means.len())));
        }
        let (oy, ox, out_h, out_w, mirror) = match self.crop {
            None => (0, 0, h, w, false),
            Some(cs) => {
                if h != cs.input || w != cs.input || cs.output > cs.input {
                    return Err(Error::dim(format!(
                        "crop {}->{} needs {0}x{0} input, got {h}x{w}",
                        cs.input, cs.output
                    )));
                }
                let slack = cs.input - cs.output;
                match mode {
                    Mode::Infer => (slack / 2, slack / 2, cs.output, cs.output, false),
                    Mode::Train => {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        let oy = rng.random_range(0..=slack);
                        let ox = rng.random_range(0..=slack);
                        let flip = cs.mirror && rng.random_bool(0.5);
                        (oy, ox, cs.output, cs.output, flip)
                    }
                }
            }
        };
        let shape = Shape::new(1, c, out_h, out_w);
        let mut out = Vec::with_capacity(shape.len());
        for (ch, &m) in self.means.iter().enumerate() {
            for y in 0..out_h {
                let row = &sample[ch * h * w + (oy + y) * w + ox..][..out_w];
                let px = |x: usize| T::of((row[x] as f64 - m) * self.scale);
                if mirror {
                    out.extend((0..out_w).rev().map(px));
                } else {
                    out.extend((0..out_w).map(px));
                }
            }
        }
        Tensor::from_vec(shape, out)
    }

    /// Stacks `indices` of `data` into one batch with its labels.
    pub fn batch<T: Real>(&self, data: &Dataset, indices: &[usize], mode: Mode, seeds: &[u64]) -> Result<(Tensor<T>, Vec<usize>)> {
        let dims = data.dims();
        let [c, h, w] = self.output_dims(dims);
        let mut values = Vec::with_capacity(indices.len() * c * h * w);
        for (k, &i) in indices.iter().enumerate() {
            let seed = seeds.get(k).copied().unwrap_or(0);
            values.extend_from_slice(self.apply::<T>(data.sample(i), dims, mode, seed)?.data());
        }
        let x = Tensor::from_vec(Shape::new(indices.len(), c, h, w), values)?;
        Ok((x, indices.iter().map(|&i| data.label(i)).collect()))
    }
}

/// Reflects every plane left to right.
pub fn mirror_horizontal<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let w = x.shape().w;
    out.data_mut().chunks_mut(w).for_each(|row| row.reverse());
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_train: usize,
    pub batch_val: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_gamma: f64,
    /// Epochs between learning-rate drops.
    pub lr_step: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub precision: Precision,
    pub alpha0: f64,
    pub alpha_mode: AlphaMode,
    pub init: InitSpec,
    /// Multiplier on mean-subtracted inputs. Data stored on a `[0, 1]`
    /// scale trains poorly through the Xavier-initialised stack; desk runs
    /// use 20.
    pub input_scale: f64,
    pub crop: Option<CropSpec>,
    /// Fill `wall_ms` with measured step times. Off by default so that
    /// seeded runs produce identical logs.
    pub record_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_train: 256,
            batch_val: 128,
            epochs: 50,
            base_lr: 0.01,
            lr_gamma: 0.5,
            lr_step: 10,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
            precision: Precision::Standard,
            alpha0: 0.3,
            alpha_mode: AlphaMode::Linear,
            init: InitSpec::default(),
            input_scale: 1.0,
            crop: None,
            record_time: false,
        }
    }
}

impl TrainConfig {
    /// Short single-epoch runs for [`ArchConfig::desk`](crate::archs::ArchConfig::desk)
    /// networks: batch 8 and inputs scaled by 20.
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            batch_train: 8,
            batch_val: 8,
            epochs: 1,
            seed,
            input_scale: 20.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_train == 0 || self.batch_val == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if self.epochs == 0 || self.lr_step == 0 {
            return bad("epochs and lr_step must be at least 1".into());
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr {} must be finite and non-negative", self.base_lr));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return bad(format!("lr_gamma {} outside (0, 1]", self.lr_gamma));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if !(self.input_scale > 0.0 && self.input_scale.is_finite()) {
            return bad(format!("input_scale {} must be finite and positive", self.input_scale));
        }
        self.alpha_schedule().map(|_| ())
    }

    pub fn alpha_schedule(&self) -> Result<AlphaSchedule> {
        AlphaSchedule::with_mode(self.alpha0, self.epochs, self.alpha_mode)
    }
}

/// `base_lr * lr_gamma^(epoch / lr_step)`.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.base_lr * cfg.lr_gamma.powi((epoch / cfg.lr_step) as i32)
}

/// Momentum SGD: `v = momentum*v + g + weight_decay*w`, then `w -= lr*v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T> {
    velocity: Vec<T>,
}

impl<T: Real> Sgd<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        Sgd {
            velocity: vec![T::zero(); params.len()],
        }
    }

    pub fn velocity(&self) -> &[T] {
        &self.velocity
    }

    /// Applies one update from the gradient slots of `params`.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64, momentum: f64, weight_decay: f64) {
        let (lr, mu, wd) = (T::of(lr), T::of(momentum), T::of(weight_decay));
        let mut v = self.velocity.iter_mut();
        for (_, p) in params.iter_mut() {
            for (_, t) in p.tensors_mut() {
                let (w, g) = t.data_and_grad_mut();
                for ((w, &g), v) in w.iter_mut().zip(g.iter()).zip(&mut v) {
                    *v = mu * *v + g + wd * *w;
                    *w = *w - lr * *v;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// Completed epochs before this step (the schedule's `t`).
    pub epoch: usize,
    /// Global step, starting at 1.
    pub step: usize,
    pub lr: f64,
    pub alpha: f64,
    pub l0: f64,
    pub ls: f64,
    pub total: f64,
    pub top1: f64,
    pub top5: f64,
    pub wall_ms: u64,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(["epoch", "step", "lr", "alpha", "l0", "ls", "total", "top1", "top5", "wall_ms"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Domain(format!("csv buffer: {e}")))
}

/// Hooks called from inside [`train`].
pub trait Observer<T> {
    fn on_start(&mut self, _params: &ParamStore<T>) -> Result<()> {
        Ok(())
    }
    fn on_step(&mut self, _row: &MetricsRow) -> Result<()> {
        Ok(())
    }
    /// `epoch` counts completed epochs, starting at 1.
    fn on_epoch_end(&mut self, _epoch: usize, _params: &ParamStore<T>) -> Result<()> {
        Ok(())
    }
}

impl<T> Observer<T> for () {}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub rows: Vec<MetricsRow>,
    pub params: ParamStore<T>,
    pub preprocess: Preprocess,
}

/// Rank of `label` among `logits`: the number of classes scoring higher,
/// with equal scores at a lower index also counted ahead.
pub fn rank_of<T: Real>(logits: &[T], label: usize) -> usize {
    let y = logits[label];
    logits
        .iter()
        .enumerate()
        .filter(|&(j, &l)| l > y || (l == y && j < label))
        .count()
}

fn topk_counts<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> (usize, usize) {
    let k = logits.shape().c;
    let mut hits = (0, 0);
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let r = rank_of(row, label);
        hits.0 += (r < 1) as usize;
        hits.1 += (r < 5) as usize;
    }
    hits
}

fn check_compat(graph: &Graph, data: &Dataset, prep: &Preprocess) -> Result<()> {
    let input = graph
        .input_shape()
        .ok_or_else(|| Error::Structure("graph has no input".into()))?;
    let [c, h, w] = prep.output_dims(data.dims());
    if (input.c, input.h, input.w) != (c, h, w) {
        return Err(Error::Config(format!(
            "dataset yields {c}x{h}x{w} inputs but the graph expects {}x{}x{}",
            input.c, input.h, input.w
        )));
    }
    let loss = graph
        .loss_node(ParamGroup::Main)
        .ok_or_else(|| Error::Structure("graph has no main softmax loss".into()))?;
    let k = graph.shape_of(loss).expect("loss exists").c;
    if k != data.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the graph predicts {k}",
            data.classes
        )));
    }
    Ok(())
}

/// Seeded minibatch SGD on the combined loss. Sample order, augmentation
/// and dropout masks all derive from `cfg.seed`.
pub fn train<T: Real>(
    graph: &Graph,
    cfg: &TrainConfig,
    data: &Dataset,
    observer: &mut dyn Observer<T>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Domain("training set is empty".into()));
    }
    let prep = Preprocess {
        means: compute_channel_means(data)?,
        scale: cfg.input_scale,
        crop: cfg.crop,
    };
    check_compat(graph, data, &prep)?;
    let sched = cfg.alpha_schedule()?;
    let mut params = init_params::<T>(graph, &cfg.init, cfg.seed)?;
    let mut sgd = Sgd::new(&params);
    observer.on_start(&params)?;

    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    aug_rng.set_stream(2);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rows = Vec::new();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg, epoch);
        let alpha = sched.alpha_at(epoch)?;
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(cfg.batch_train) {
            step += 1;
            let started = Instant::now();
            let seeds: Vec<u64> = chunk.iter().map(|_| aug_rng.random()).collect();
            let (x, labels) = prep.batch::<T>(data, chunk, Mode::Train, &seeds)?;
            let dropout_seed = cfg.seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let (loss, pass) =
                loss_and_backward(graph, &mut params, &x, &labels, alpha, Mode::Train, dropout_seed)?;
            if !loss.total.is_finite() {
                return Err(Error::Arithmetic(format!("non-finite loss at step {step}")));
            }
            let main_logits = logits(graph, &pass, ParamGroup::Main).expect("checked above");
            let (h1, h5) = topk_counts(main_logits, &labels);
            drop(pass);
            sgd.step(&mut params, lr, cfg.momentum, cfg.weight_decay);
            let row = MetricsRow {
                epoch,
                step,
                lr,
                alpha,
                l0: loss.main,
                ls: loss.branch,
                total: loss.total,
                top1: h1 as f64 / labels.len() as f64,
                top5: h5 as f64 / labels.len() as f64,
                wall_ms: if cfg.record_time {
                    started.elapsed().as_millis() as u64
                } else {
                    0
                },
            };
            observer.on_step(&row)?;
            rows.push(row);
        }
        observer.on_epoch_end(epoch + 1, &params)?;
    }
    Ok(TrainOutcome {
        rows,
        params,
        preprocess: prep,
    })
}

/// Top-1 and top-5 accuracy of the main classifier in inference mode.
pub fn evaluate<T: Real>(
    graph: &Graph,
    params: &ParamStore<T>,
    data: &Dataset,
    prep: &Preprocess,
    batch: usize,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Domain("evaluation set is empty".into()));
    }
    check_compat(graph, data, prep)?;
    let order: Vec<usize> = (0..data.len()).collect();
    let (mut h1, mut h5) = (0, 0);
    for chunk in order.chunks(batch.max(1)) {
        let (x, labels) = prep.batch::<T>(data, chunk, Mode::Infer, &[])?;
        let pass = forward_single(graph, params, &x, Mode::Infer, 0)?;
        let l = logits(graph, &pass, ParamGroup::Main).expect("checked above");
        let (a, b) = topk_counts(l, &labels);
        h1 += a;
        h5 += b;
    }
    let n = data.len() as f64;
    Ok((h1 as f64 / n, h5 as f64 / n))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub node: String,
    pub tensor: String,
    pub shape: [usize; 4],
    /// Offset into the blob, in values.
    pub offset: usize,
    pub len: usize,
}

/// Writes `graph.json`, `params.json` (a tensor index) and `params.bin`
/// (every value as 32-bit little-endian) into `dir`.
pub fn write_checkpoint<T: Real>(dir: &Path, graph: &Graph, params: &ParamStore<T>) -> Result<()> {
    files::create_dir_all(dir)?;
    let mut index = Vec::new();
    let mut blob = Vec::with_capacity(4 * params.len());
    let mut offset = 0;
    for (id, p) in params.iter() {
        for (name, t) in p.tensors() {
            let s = t.shape();
            index.push(TensorEntry {
                node: id.to_string(),
                tensor: name.to_string(),
                shape: [s.n, s.c, s.h, s.w],
                offset,
                len: t.len(),
            });
            offset += t.len();
            for v in t.data() {
                blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
    }
    files::write_atomic(&dir.join("graph.json"), graph.to_json()?.as_bytes())?;
    files::write_atomic(&dir.join("params.json"), serde_json::to_string_pretty(&index)?.as_bytes())?;
    files::write_atomic(&dir.join("params.bin"), &blob)
}

pub fn read_checkpoint<T: Real>(dir: &Path) -> Result<(Graph, ParamStore<T>)> {
    let graph = Graph::from_json(&files::read_string(&dir.join("graph.json"))?)?;
    let index_path = dir.join("params.json");
    let index: Vec<TensorEntry> = serde_json::from_str(&files::read_string(&index_path)?)?;
    let blob_path = dir.join("params.bin");
    let blob = files::read(&blob_path)?;
    let mut store = ParamStore::<T>::zeros(&graph);
    let format = |msg: String| Error::Format {
        path: index_path.clone(),
        msg,
    };
    let mut filled = 0;
    for e in &index {
        let end = 4 * (e.offset + e.len);
        if blob.len() < end {
            return Err(Error::Truncated {
                path: blob_path.clone(),
                expected: end as u64,
                found: blob.len() as u64,
            });
        }
        let p = store
            .get_mut(&e.node)
            .ok_or_else(|| format(format!("unknown node '{}'", e.node)))?;
        let (_, t) = p
            .tensors_mut()
            .into_iter()
            .find(|(n, _)| *n == e.tensor)
            .ok_or_else(|| format(format!("unknown tensor '{}/{}'", e.node, e.tensor)))?;
        let s = t.shape();
        if [s.n, s.c, s.h, s.w] != e.shape || t.len() != e.len {
            return Err(format(format!("shape mismatch for '{}/{}'", e.node, e.tensor)));
        }
        for (v, b) in t.data_mut().iter_mut().zip(blob[4 * e.offset..end].chunks_exact(4)) {
            *v = T::of(f32::from_le_bytes(b.try_into().unwrap()) as f64);
        }
        filled += e.len;
    }
    if filled != store.len() {
        return Err(format(format!("index covers {filled} of {} values", store.len())));
    }
    Ok((graph, store))
}
