use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Graph, Layer, ParamGroup};
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Learnable tensors of one node. Every tensor carries a gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeParams<T> {
    Conv { weight: Tensor<T>, bias: Tensor<T> },
    Scale { gamma: Tensor<T>, beta: Tensor<T> },
}

impl<T: Real> NodeParams<T> {
    /// `(name, tensor)` pairs in a fixed order.
    pub fn tensors(&self) -> [(&'static str, &Tensor<T>); 2] {
        match self {
            NodeParams::Conv { weight, bias } => [("weight", weight), ("bias", bias)],
            NodeParams::Scale { gamma, beta } => [("gamma", gamma), ("beta", beta)],
        }
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 2] {
        match self {
            NodeParams::Conv { weight, bias } => [("weight", weight), ("bias", bias)],
            NodeParams::Scale { gamma, beta } => [("gamma", gamma), ("beta", beta)],
        }
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Parameters of every learnable node, keyed by node id and kept in graph
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    ids: Vec<String>,
    params: Vec<NodeParams<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    /// Zero-valued parameters (with zeroed gradient slots) for every
    /// learnable node in `graph`.
    pub fn zeros(graph: &Graph) -> Self {
        let mut store = ParamStore {
            ids: Vec::new(),
            params: Vec::new(),
            index: HashMap::new(),
        };
        for (i, node) in graph.nodes().iter().enumerate() {
            let Some(shapes) = param_shapes(graph, i) else {
                continue;
            };
            let mut a = Tensor::zeros(shapes[0]);
            let mut b = Tensor::zeros(shapes[1]);
            a.zero_grad();
            b.zero_grad();
            let p = match node.layer {
                Layer::Conv { .. } => NodeParams::Conv { weight: a, bias: b },
                _ => NodeParams::Scale { gamma: a, beta: b },
            };
            store.index.insert(node.id.clone(), store.ids.len());
            store.ids.push(node.id.clone());
            store.params.push(p);
        }
        store
    }

    pub fn get(&self, id: &str) -> Option<&NodeParams<T>> {
        self.index.get(id).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut NodeParams<T>> {
        self.index.get(id).map(|&i| &mut self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &NodeParams<T>)> {
        self.ids.iter().map(String::as_str).zip(&self.params)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut NodeParams<T>)> {
        self.ids.iter().map(String::as_str).zip(self.params.iter_mut())
    }

    /// Total scalar parameter count.
    pub fn len(&self) -> usize {
        self.params.iter().map(NodeParams::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for (_, t) in p.tensors_mut() {
                t.zero_grad();
            }
        }
    }

    /// All parameter values concatenated in store order.
    pub fn flat_values(&self) -> Vec<T> {
        self.params
            .iter()
            .flat_map(|p| p.tensors().into_iter().flat_map(|(_, t)| t.data().to_vec()))
            .collect()
    }

    /// All gradients concatenated in store order (zeros where unset).
    pub fn flat_grads(&self) -> Vec<T> {
        self.params
            .iter()
            .flat_map(|p| {
                p.tensors().into_iter().flat_map(|(_, t)| match t.grad() {
                    Some(g) => g.to_vec(),
                    None => vec![T::zero(); t.len()],
                })
            })
            .collect()
    }

    /// Mutable access to the `k`-th scalar in [`ParamStore::flat_values`] order.
    pub fn flat_value_mut(&mut self, mut k: usize) -> Option<&mut T> {
        for p in &mut self.params {
            for (_, t) in p.tensors_mut() {
                if k < t.len() {
                    return Some(&mut t.data_mut()[k]);
                }
                k -= t.len();
            }
        }
        None
    }

    /// Overwrites every value from a flat slice in store order.
    pub fn set_flat_values(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::dim(format!(
                "{} values for a store of {}",
                values.len(),
                self.len()
            )));
        }
        let mut offset = 0;
        for p in &mut self.params {
            for (_, t) in p.tensors_mut() {
                let n = t.len();
                t.data_mut().copy_from_slice(&values[offset..offset + n]);
                offset += n;
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let cast = |t: &Tensor<T>| {
            let mut c = t.cast::<U>();
            c.zero_grad();
            c
        };
        ParamStore {
            ids: self.ids.clone(),
            index: self.index.clone(),
            params: self
                .params
                .iter()
                .map(|p| match p {
                    NodeParams::Conv { weight, bias } => NodeParams::Conv {
                        weight: cast(weight),
                        bias: cast(bias),
                    },
                    NodeParams::Scale { gamma, beta } => NodeParams::Scale {
                        gamma: cast(gamma),
                        beta: cast(beta),
                    },
                })
                .collect(),
        }
    }
}

/// Shapes of the two parameter tensors of node `i`, or `None` if it has none.
pub(crate) fn param_shapes(graph: &Graph, i: usize) -> Option<[Shape; 2]> {
    let node = &graph.nodes()[i];
    match node.layer {
        Layer::Conv {
            filters, kernel, ..
        } => {
            let in_c = graph.shape_at(graph.edges(i)[0]).c;
            Some([
                Shape::new(filters, in_c, kernel, kernel),
                Shape::vector(filters),
            ])
        }
        Layer::Scale => {
            let c = graph.shape_at(i).c;
            Some([Shape::vector(c), Shape::vector(c)])
        }
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeCount {
    pub id: String,
    pub group: Option<ParamGroup>,
    pub weight_set: Option<String>,
    /// Conv weights or Scale gammas.
    pub weights: usize,
    /// Conv biases or Scale betas.
    pub biases: usize,
}

impl NodeCount {
    pub fn total(&self) -> usize {
        self.weights + self.biases
    }
}

/// Exact scalar parameter counts derived from node hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub nodes: Vec<NodeCount>,
    pub main: usize,
    pub branch: usize,
    pub ungrouped: usize,
    pub total: usize,
}

impl ParamCount {
    pub fn node(&self, id: &str) -> Option<&NodeCount> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Total over all nodes belonging to `set`.
    pub fn weight_set(&self, set: &str) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.weight_set.as_deref() == Some(set))
            .map(NodeCount::total)
            .sum()
    }

    /// Distinct weight-set names per group, in first-seen order.
    pub fn weight_sets(&self, group: ParamGroup) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for n in self.nodes.iter().filter(|n| n.group == Some(group)) {
            if let Some(s) = &n.weight_set {
                if !out.contains(s) {
                    out.push(s.clone());
                }
            }
        }
        out
    }
}

pub fn param_count(graph: &Graph) -> ParamCount {
    let mut nodes = Vec::new();
    let (mut main, mut branch, mut ungrouped) = (0, 0, 0);
    for (i, spec) in graph.nodes().iter().enumerate() {
        let Some([a, b]) = param_shapes(graph, i) else {
            continue;
        };
        let count = NodeCount {
            id: spec.id.clone(),
            group: spec.group,
            weight_set: spec.weight_set.clone(),
            weights: a.len(),
            biases: b.len(),
        };
        match spec.group {
            Some(ParamGroup::Main) => main += count.total(),
            Some(ParamGroup::Branch) => branch += count.total(),
            None => ungrouped += count.total(),
        }
        nodes.push(count);
    }
    ParamCount {
        nodes,
        main,
        branch,
        ungrouped,
        total: main + branch + ungrouped,
    }
}

pub fn model_size_bytes(count: u64, bytes_per_value: u64) -> Result<u64> {
    if bytes_per_value != 4 && bytes_per_value != 8 {
        return Err(Error::Domain(format!(
            "bytes per value must be 4 or 8, got {bytes_per_value}"
        )));
    }
    count
        .checked_mul(bytes_per_value)
        .ok_or_else(|| Error::Arithmetic("model size overflows u64".into()))
}

/// Human-readable size in binary units (1 GiB = 2^30 bytes).
pub fn format_bytes(bytes: u64) -> String {
    const UNITS: [&str; 5] = ["B", "KiB", "MiB", "GiB", "TiB"];
    let mut v = bytes as f64;
    let mut unit = 0;
    while v >= 1024.0 && unit + 1 < UNITS.len() {
        v /= 1024.0;
        unit += 1;
    }
    if unit == 0 {
        format!("{bytes} B")
    } else {
        format!("{v:.2} {}", UNITS[unit])
    }
}
