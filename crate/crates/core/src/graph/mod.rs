//! Typed layer DAG: construction with eager shape inference, topological
//! ordering, reverse-mode execution and parameter accounting.

mod exec;
mod params;

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{conv_out_extent, pool_out_shape, PoolKind};
use crate::tensor::Shape;

pub use exec::{backward, forward, forward_single, ForwardPass, LossSeeds};
pub use params::{
    format_bytes, model_size_bytes, param_count, NodeCount, NodeParams, ParamCount, ParamStore,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Input {
        channels: usize,
        height: usize,
        width: usize,
    },
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Pool {
        op: PoolKind,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    /// Global average pooling.
    Gap,
    Relu,
    Dropout {
        rate: f64,
    },
    Concat,
    Add,
    /// Learnable per-channel affine map.
    Scale,
    /// Softmax over `(n, K, 1, 1)` logits; the node's value is the
    /// probability tensor and it anchors a cross-entropy loss.
    SoftmaxLoss,
}

impl Layer {
    pub fn arity(&self) -> usize {
        match self {
            Layer::Input { .. } => 0,
            Layer::Concat | Layer::Add => 2,
            _ => 1,
        }
    }

    pub fn is_learnable(&self) -> bool {
        matches!(self, Layer::Conv { .. } | Layer::Scale)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Layer::Input { .. } => "input",
            Layer::Conv { .. } => "conv",
            Layer::Pool { op: PoolKind::Max, .. } => "max_pool",
            Layer::Pool { op: PoolKind::Avg, .. } => "avg_pool",
            Layer::Gap => "gap",
            Layer::Relu => "relu",
            Layer::Dropout { .. } => "dropout",
            Layer::Concat => "concat",
            Layer::Add => "add",
            Layer::Scale => "scale",
            Layer::SoftmaxLoss => "softmax_loss",
        }
    }
}

/// Which weight grouping a node's parameters belong to: the main branch or
/// the auxiliary classifier branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Main,
    Branch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    #[serde(flatten)]
    pub layer: Layer,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<ParamGroup>,
    /// Named weight set (a layer or fire module) this node contributes to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_set: Option<String>,
}

impl NodeSpec {
    pub fn new(id: impl Into<String>, layer: Layer, inputs: &[&str]) -> Self {
        NodeSpec {
            id: id.into(),
            layer,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            group: None,
            weight_set: None,
        }
    }

    pub fn input(id: impl Into<String>, channels: usize, height: usize, width: usize) -> Self {
        Self::new(
            id,
            Layer::Input {
                channels,
                height,
                width,
            },
            &[],
        )
    }

    pub fn conv(
        id: impl Into<String>,
        input: &str,
        filters: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Self::new(
            id,
            Layer::Conv {
                filters,
                kernel,
                stride,
                pad,
            },
            &[input],
        )
    }

    pub fn pool(
        id: impl Into<String>,
        input: &str,
        op: PoolKind,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Self::new(
            id,
            Layer::Pool {
                op,
                kernel,
                stride,
                pad,
            },
            &[input],
        )
    }

    pub fn unary(id: impl Into<String>, layer: Layer, input: &str) -> Self {
        Self::new(id, layer, &[input])
    }

    pub fn binary(id: impl Into<String>, layer: Layer, a: &str, b: &str) -> Self {
        Self::new(id, layer, &[a, b])
    }

    pub fn in_group(mut self, group: ParamGroup) -> Self {
        self.group = Some(group);
        self
    }

    pub fn in_set(mut self, set: impl Into<String>) -> Self {
        self.weight_set = Some(set.into());
        self
    }
}

/// Serialized form of a [`Graph`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDoc {
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub outputs: Vec<String>,
}

/// A validated network. Nodes are stored in a topological order (every node
/// after its inputs) and carry a cached per-sample output shape.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<NodeSpec>,
    index: HashMap<String, usize>,
    edges: Vec<Vec<usize>>,
    shapes: Vec<Shape>,
    outputs: Vec<String>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    pub fn node(&self, id: &str) -> Option<&NodeSpec> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Input node indices of node `i`.
    pub fn edges(&self, i: usize) -> &[usize] {
        &self.edges[i]
    }

    /// Cached per-sample output shape (`n == 1`) of node `i`.
    pub fn shape_at(&self, i: usize) -> Shape {
        self.shapes[i]
    }

    pub fn shape_of(&self, id: &str) -> Option<Shape> {
        self.position(id).map(|i| self.shapes[i])
    }

    pub fn outputs(&self) -> &[String] {
        &self.outputs
    }

    pub fn input_ids(&self) -> impl Iterator<Item = &str> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.layer, Layer::Input { .. }))
            .map(|n| n.id.as_str())
    }

    /// Indices of nodes that consume node `i`.
    pub fn consumers(&self, i: usize) -> Vec<usize> {
        (i + 1..self.nodes.len())
            .filter(|&j| self.edges[j].contains(&i))
            .collect()
    }

    /// Appends a node after validating its id, inputs, arity and shapes.
    /// Returns the new node's index.
    pub fn add_node(&mut self, spec: NodeSpec) -> Result<usize> {
        if self.index.contains_key(&spec.id) {
            return Err(Error::Structure(format!("duplicate node id '{}'", spec.id)));
        }
        if spec.inputs.len() != spec.layer.arity() {
            return Err(Error::Structure(format!(
                "node '{}' ({}) takes {} inputs, got {}",
                spec.id,
                spec.layer.name(),
                spec.layer.arity(),
                spec.inputs.len()
            )));
        }
        let edges = spec
            .inputs
            .iter()
            .map(|src| {
                self.index.get(src).copied().ok_or_else(|| {
                    Error::Structure(format!("node '{}' references unknown input '{src}'", spec.id))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let in_shapes: Vec<Shape> = edges.iter().map(|&i| self.shapes[i]).collect();
        let shape = infer_shape(&spec, &in_shapes)?;

        if matches!(spec.layer, Layer::SoftmaxLoss) {
            self.outputs.push(spec.id.clone());
        }
        let i = self.nodes.len();
        self.index.insert(spec.id.clone(), i);
        self.nodes.push(spec);
        self.edges.push(edges);
        self.shapes.push(shape);
        Ok(i)
    }

    /// Builds a graph from specs in any order.
    pub fn from_specs(specs: Vec<NodeSpec>) -> Result<Self> {
        let order = topo_order(&specs)?;
        let mut slots: Vec<Option<NodeSpec>> = specs.into_iter().map(Some).collect();
        let mut g = Graph::new();
        for i in order {
            g.add_node(slots[i].take().expect("each index visited once"))?;
        }
        Ok(g)
    }

    pub fn topo_order(&self) -> Result<Vec<usize>> {
        topo_order(&self.nodes)
    }

    pub fn to_doc(&self) -> GraphDoc {
        GraphDoc {
            nodes: self.nodes.clone(),
            outputs: self.outputs.clone(),
        }
    }

    pub fn from_doc(doc: GraphDoc) -> Result<Self> {
        let mut g = Self::from_specs(doc.nodes)?;
        if !doc.outputs.is_empty() {
            for o in &doc.outputs {
                if !g.index.contains_key(o) {
                    return Err(Error::Structure(format!("unknown output node '{o}'")));
                }
            }
            g.outputs = doc.outputs;
        }
        Ok(g)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_doc())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_doc(serde_json::from_str(text)?)
    }

    /// The softmax-loss node tagged with `group`, if any.
    pub fn loss_node(&self, group: ParamGroup) -> Option<&str> {
        self.nodes
            .iter()
            .find(|n| matches!(n.layer, Layer::SoftmaxLoss) && n.group == Some(group))
            .map(|n| n.id.as_str())
    }

    /// Shape of the expected input batch tensor for the single input node.
    pub fn input_shape(&self) -> Option<Shape> {
        let mut ids = self.input_ids();
        let id = ids.next()?;
        self.shape_of(id)
    }
}

fn infer_shape(spec: &NodeSpec, ins: &[Shape]) -> Result<Shape> {
    let fail = |msg: String| Error::Structure(format!("node '{}': {msg}", spec.id));
    let geometry = |e: Error| fail(e.to_string());
    Ok(match &spec.layer {
        Layer::Input {
            channels,
            height,
            width,
        } => Shape::try_new(1, *channels, *height, *width).map_err(geometry)?,
        Layer::Conv {
            filters,
            kernel,
            stride,
            pad,
        } => {
            if *filters == 0 {
                return Err(fail("conv needs at least one filter".into()));
            }
            let x = ins[0];
            let h = conv_out_extent(x.h, *kernel, *stride, *pad).map_err(geometry)?;
            let w = conv_out_extent(x.w, *kernel, *stride, *pad).map_err(geometry)?;
            Shape::new(1, *filters, h, w)
        }
        Layer::Pool {
            kernel,
            stride,
            pad,
            ..
        } => pool_out_shape(ins[0], *kernel, *stride, *pad).map_err(geometry)?,
        Layer::Gap => Shape::new(1, ins[0].c, 1, 1),
        Layer::Relu | Layer::Scale => ins[0],
        Layer::Dropout { rate } => {
            if !(0.0..1.0).contains(rate) {
                return Err(fail(format!("dropout rate {rate} outside [0, 1)")));
            }
            ins[0]
        }
        Layer::Concat => {
            let (a, b) = (ins[0], ins[1]);
            if (a.h, a.w) != (b.h, b.w) {
                return Err(fail(format!("concat spatial mismatch {a} vs {b}")));
            }
            Shape::new(1, a.c + b.c, a.h, a.w)
        }
        Layer::Add => {
            if ins[0] != ins[1] {
                return Err(fail(format!(
                    "add inputs differ: {} vs {}",
                    ins[0], ins[1]
                )));
            }
            ins[0]
        }
        Layer::SoftmaxLoss => {
            let x = ins[0];
            if x.h != 1 || x.w != 1 {
                return Err(fail(format!("softmax loss expects (K, 1, 1) logits, got {x}")));
            }
            x
        }
    })
}

/// Kahn's algorithm over node specs. Among ready nodes the one declared
/// earliest goes first, so the order is deterministic.
pub fn topo_order(specs: &[NodeSpec]) -> Result<Vec<usize>> {
    let mut index = HashMap::with_capacity(specs.len());
    for (i, s) in specs.iter().enumerate() {
        if index.insert(s.id.as_str(), i).is_some() {
            return Err(Error::Structure(format!("duplicate node id '{}'", s.id)));
        }
    }
    let mut pending = vec![0usize; specs.len()];
    let mut consumers = vec![Vec::new(); specs.len()];
    for (i, s) in specs.iter().enumerate() {
        for src in &s.inputs {
            let j = *index.get(src.as_str()).ok_or_else(|| {
                Error::Structure(format!("node '{}' references unknown input '{src}'", s.id))
            })?;
            pending[i] += 1;
            consumers[j].push(i);
        }
    }
    let mut ready: BTreeSet<usize> = (0..specs.len()).filter(|&i| pending[i] == 0).collect();
    let mut order = Vec::with_capacity(specs.len());
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &c in &consumers[i] {
            pending[c] -= 1;
            if pending[c] == 0 {
                ready.insert(c);
            }
        }
    }
    if order.len() != specs.len() {
        let stuck: Vec<&str> = (0..specs.len())
            .filter(|&i| pending[i] > 0)
            .map(|i| specs[i].id.as_str())
            .collect();
        return Err(Error::Structure(format!("cycle through nodes {stuck:?}")));
    }
    Ok(order)
}
