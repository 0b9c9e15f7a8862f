use std::collections::BTreeMap;

use super::{Graph, Layer, NodeParams, ParamStore};
use crate::error::{Error, Result};
use crate::ops::{self, Mode, Pooled};
use crate::tensor::{Real, Tensor};

/// Loss node id → weight applied to that loss in the backward pass.
pub type LossSeeds = BTreeMap<String, f64>;

#[derive(Debug, Clone)]
enum Cache<T> {
    None,
    Mask(Vec<T>),
    Argmax(Vec<usize>),
}

/// Activations of every node from one forward pass, plus the per-node state
/// (dropout masks, max-pool choices) that backward needs.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    values: Vec<Tensor<T>>,
    caches: Vec<Cache<T>>,
    pub mode: Mode,
    pub seed: u64,
}

impl<T: Real> ForwardPass<T> {
    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn value(&self, graph: &Graph, id: &str) -> Option<&Tensor<T>> {
        graph.position(id).map(|i| &self.values[i])
    }

    pub fn batch(&self) -> usize {
        self.values.first().map_or(0, |v| v.shape().n)
    }
}

fn params_of<'a, T: Real>(
    graph: &Graph,
    params: &'a ParamStore<T>,
    i: usize,
) -> Result<&'a NodeParams<T>> {
    let id = &graph.nodes()[i].id;
    params
        .get(id)
        .ok_or_else(|| Error::Structure(format!("no parameters for node '{id}'")))
}

/// Runs every node once in graph order. `seed` drives dropout masks; node
/// `i` draws from stream `i` so masks are independent of evaluation order.
pub fn forward<T: Real>(
    graph: &Graph,
    params: &ParamStore<T>,
    inputs: &BTreeMap<String, Tensor<T>>,
    mode: Mode,
    seed: u64,
) -> Result<ForwardPass<T>> {
    let mut values: Vec<Tensor<T>> = Vec::with_capacity(graph.len());
    let mut caches = Vec::with_capacity(graph.len());
    let mut batch = None;

    for (i, spec) in graph.nodes().iter().enumerate() {
        let arg = |k: usize| &values[graph.edges(i)[k]];
        let (value, cache) = match &spec.layer {
            Layer::Input { .. } => {
                let x = inputs
                    .get(&spec.id)
                    .ok_or_else(|| Error::Structure(format!("missing input '{}'", spec.id)))?;
                let n = x.shape().n;
                if x.shape() != graph.shape_at(i).with_batch(n) || *batch.get_or_insert(n) != n {
                    return Err(Error::dim(format!(
                        "input '{}' has shape {}, expected {}",
                        spec.id,
                        x.shape(),
                        graph.shape_at(i).with_batch(*batch.get_or_insert(n))
                    )));
                }
                (x.clone(), Cache::None)
            }
            Layer::Conv { stride, pad, .. } => {
                let NodeParams::Conv { weight, bias } = params_of(graph, params, i)? else {
                    return Err(Error::Structure(format!("'{}' needs conv params", spec.id)));
                };
                (
                    ops::conv2d(arg(0), weight, bias.data(), *stride, *pad)?,
                    Cache::None,
                )
            }
            Layer::Pool {
                op,
                kernel,
                stride,
                pad,
            } => {
                let Pooled { output, argmax } = ops::pool2d(arg(0), *op, *kernel, *stride, *pad)?;
                (output, Cache::Argmax(argmax))
            }
            Layer::Gap => (ops::global_avg_pool(arg(0)), Cache::None),
            Layer::Relu => (ops::relu(arg(0)), Cache::None),
            Layer::Dropout { rate } => {
                let (y, mask) = ops::dropout(arg(0), *rate, mode, seed, i as u64)?;
                (y, Cache::Mask(mask))
            }
            Layer::Concat => (ops::concat_channels(arg(0), arg(1))?, Cache::None),
            Layer::Add => (ops::add_elementwise(arg(0), arg(1))?, Cache::None),
            Layer::Scale => {
                let NodeParams::Scale { gamma, beta } = params_of(graph, params, i)? else {
                    return Err(Error::Structure(format!("'{}' needs scale params", spec.id)));
                };
                (
                    ops::scale_channels(arg(0), gamma.data(), beta.data())?,
                    Cache::None,
                )
            }
            Layer::SoftmaxLoss => (ops::softmax_rows(arg(0))?, Cache::None),
        };
        values.push(value);
        caches.push(cache);
    }
    Ok(ForwardPass {
        values,
        caches,
        mode,
        seed,
    })
}

/// Forward pass for a graph with exactly one input node.
pub fn forward_single<T: Real>(
    graph: &Graph,
    params: &ParamStore<T>,
    x: &Tensor<T>,
    mode: Mode,
    seed: u64,
) -> Result<ForwardPass<T>> {
    let mut ids = graph.input_ids();
    let id = ids
        .next()
        .ok_or_else(|| Error::Structure("graph has no input node".into()))?;
    if ids.next().is_some() {
        return Err(Error::Structure("graph has more than one input node".into()));
    }
    let inputs = BTreeMap::from([(id.to_string(), x.clone())]);
    forward(graph, params, &inputs, mode, seed)
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, &b)| *a = *a + b),
        None => *slot = Some(g),
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
}

/// Reverse-mode pass. Each softmax-loss node listed in `seeds` contributes
/// `weight * mean_batch(cross_entropy)`; parameter gradients are added into
/// the store's gradient slots (call [`ParamStore::zero_grads`] first).
/// Zero-weight seeds are skipped entirely.
pub fn backward<T: Real>(
    graph: &Graph,
    params: &mut ParamStore<T>,
    pass: &ForwardPass<T>,
    labels: &[usize],
    seeds: &LossSeeds,
) -> Result<()> {
    let n = pass.batch();
    if labels.len() != n {
        return Err(Error::dim(format!("{} labels for a batch of {n}", labels.len())));
    }
    let mut grads: Vec<Option<Tensor<T>>> = vec![None; graph.len()];

    for (id, &weight) in seeds {
        let i = graph
            .position(id)
            .ok_or_else(|| Error::Structure(format!("unknown loss node '{id}'")))?;
        if !matches!(graph.nodes()[i].layer, Layer::SoftmaxLoss) {
            return Err(Error::Structure(format!("'{id}' is not a softmax-loss node")));
        }
        if weight == 0.0 {
            continue;
        }
        let probs = &pass.values[i];
        let k = probs.shape().c;
        let scale = T::of(weight / n as f64);
        let mut g = Vec::with_capacity(probs.len());
        for (row, &label) in probs.data().chunks(k).zip(labels) {
            g.extend(
                ops::softmax_xent_grad(row, label)?
                    .into_iter()
                    .map(|v| v * scale),
            );
        }
        accumulate(&mut grads[i], Tensor::from_vec(probs.shape(), g)?);
    }

    for i in (0..graph.len()).rev() {
        let Some(dy) = grads[i].take() else {
            continue;
        };
        let spec = &graph.nodes()[i];
        let edges = graph.edges(i);
        let x = |k: usize| &pass.values[edges[k]];
        match &spec.layer {
            Layer::Input { .. } => {}
            Layer::SoftmaxLoss => {
                // Seed already holds d(loss)/d(logits).
                accumulate(&mut grads[edges[0]], dy);
            }
            Layer::Conv { stride, pad, .. } => {
                let NodeParams::Conv { weight, bias } = params
                    .get_mut(&spec.id)
                    .ok_or_else(|| Error::Structure(format!("no parameters for '{}'", spec.id)))?
                else {
                    return Err(Error::Structure(format!("'{}' needs conv params", spec.id)));
                };
                let g = ops::conv2d_backward(x(0), weight, &dy, *stride, *pad)?;
                add_into(weight.grad_mut(), g.weight.data());
                add_into(bias.grad_mut(), &g.bias);
                if !matches!(graph.nodes()[edges[0]].layer, Layer::Input { .. }) {
                    accumulate(&mut grads[edges[0]], g.input);
                }
            }
            Layer::Pool {
                op,
                kernel,
                stride,
                pad,
            } => {
                let argmax: &[usize] = match &pass.caches[i] {
                    Cache::Argmax(a) => a,
                    _ => &[],
                };
                let g = ops::pool2d_backward(x(0).shape(), argmax, &dy, *op, *kernel, *stride, *pad)?;
                accumulate(&mut grads[edges[0]], g);
            }
            Layer::Gap => {
                accumulate(
                    &mut grads[edges[0]],
                    ops::global_avg_pool_backward(x(0).shape(), &dy),
                );
            }
            Layer::Relu => {
                accumulate(&mut grads[edges[0]], ops::relu_backward(x(0), &dy)?);
            }
            Layer::Dropout { .. } => {
                let Cache::Mask(mask) = &pass.caches[i] else {
                    return Err(Error::Structure(format!("missing dropout mask for '{}'", spec.id)));
                };
                accumulate(&mut grads[edges[0]], ops::dropout_backward(mask, &dy));
            }
            Layer::Concat => {
                let parts = ops::concat_backward(&dy, &[x(0).shape().c, x(1).shape().c])?;
                for (&e, g) in edges.iter().zip(parts) {
                    accumulate(&mut grads[e], g);
                }
            }
            Layer::Add => {
                accumulate(&mut grads[edges[0]], dy.clone());
                accumulate(&mut grads[edges[1]], dy);
            }
            Layer::Scale => {
                let NodeParams::Scale { gamma, beta } = params
                    .get_mut(&spec.id)
                    .ok_or_else(|| Error::Structure(format!("no parameters for '{}'", spec.id)))?
                else {
                    return Err(Error::Structure(format!("'{}' needs scale params", spec.id)));
                };
                let g = ops::scale_channels_backward(x(0), gamma.data(), &dy)?;
                add_into(gamma.grad_mut(), &g.gamma);
                add_into(beta.grad_mut(), &g.beta);
                accumulate(&mut grads[edges[0]], g.input);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NodeSpec;
    use crate::tensor::Shape;

    #[test]
    fn identity_graph_passes_input_through() {
        let mut g = Graph::new();
        g.add_node(NodeSpec::input("x", 2, 3, 3)).unwrap();
        g.add_node(NodeSpec::unary("d", Layer::Dropout { rate: 0.5 }, "x")).unwrap();
        let p = ParamStore::<f64>::zeros(&g);
        let x = Tensor::from_fn(Shape::new(2, 2, 3, 3), |i| i as f64 - 10.0);
        let pass = forward_single(&g, &p, &x, Mode::Infer, 0).unwrap();
        assert_eq!(pass.value(&g, "d").unwrap(), &x);
    }

    #[test]
    fn single_conv_graph_matches_kernel() {
        let mut g = Graph::new();
        g.add_node(NodeSpec::input("x", 2, 5, 5)).unwrap();
        g.add_node(NodeSpec::conv("c", "x", 3, 3, 2, 1)).unwrap();
        let mut p = ParamStore::<f64>::zeros(&g);
        let vals: Vec<f64> = (0..p.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        p.set_flat_values(&vals).unwrap();
        let x = Tensor::from_fn(Shape::new(1, 2, 5, 5), |i| (i as f64 * 0.11).cos());
        let pass = forward_single(&g, &p, &x, Mode::Train, 0).unwrap();
        let NodeParams::Conv { weight, bias } = p.get("c").unwrap() else {
            unreachable!()
        };
        let direct = ops::conv2d(&x, weight, bias.data(), 2, 1).unwrap();
        assert_eq!(pass.value(&g, "c").unwrap(), &direct);
    }

    #[test]
    fn missing_or_misshapen_input_is_rejected() {
        let mut g = Graph::new();
        g.add_node(NodeSpec::input("x", 1, 2, 2)).unwrap();
        let p = ParamStore::<f32>::zeros(&g);
        assert!(forward(&g, &p, &BTreeMap::new(), Mode::Infer, 0).is_err());
        let bad = Tensor::zeros(Shape::new(1, 1, 3, 3));
        assert!(forward_single(&g, &p, &bad, Mode::Infer, 0).is_err());
    }
}
