//! Network builders: the fire module, projection shortcuts, the auxiliary
//! classifier branch and the complete compressed residual network graph, plus a
//! plain-convolution baseline with the same topology.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{model_size_bytes, param_count, Graph, Layer, NodeSpec, ParamGroup};
use crate::ops::PoolKind;
use crate::tensor::Shape;

/// Filter counts of a fire module: `s1` squeeze 1x1 filters feeding `e1`
/// expand 1x1 and `e3` expand 3x3 filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawFire")]
pub struct FireConfig {
    pub s1: usize,
    pub e1: usize,
    pub e3: usize,
}

#[derive(Deserialize)]
struct RawFire {
    s1: usize,
    e1: usize,
    e3: usize,
}

impl TryFrom<RawFire> for FireConfig {
    type Error = String;

    fn try_from(r: RawFire) -> std::result::Result<Self, String> {
        FireConfig::new(r.s1, r.e1, r.e3).map_err(|e| match e {
            Error::Config(m) => m,
            other => other.to_string(),
        })
    }
}

impl FireConfig {
    /// Fails unless every count is positive and `s1 < e1 + e3`.
    pub fn new(s1: usize, e1: usize, e3: usize) -> Result<Self> {
        if s1 == 0 || e1 == 0 || e3 == 0 {
            return Err(Error::Config(format!(
                "fire dims ({s1}, {e1}, {e3}) must all be positive"
            )));
        }
        if s1 >= e1 + e3 {
            return Err(Error::Config(format!(
                "fire squeeze s1={s1} must be less than e1 + e3 = {}",
                e1 + e3
            )));
        }
        Ok(FireConfig { s1, e1, e3 })
    }

    pub fn out_channels(&self) -> usize {
        self.e1 + self.e3
    }

    /// Weight count (no biases) at `in_ch` input channels.
    pub fn weights(&self, in_ch: usize) -> usize {
        in_ch * self.s1 + self.s1 * self.e1 + self.s1 * self.e3 * 9
    }
}

/// Square kernel geometry of a convolution or pooling layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub const fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Window {
            kernel,
            stride,
            pad,
        }
    }
}

/// The seven fire rows of the published main-branch table.
pub const REFERENCE_FIRES: [(usize, usize, usize); 7] = [
    (16, 64, 64),
    (32, 128, 128),
    (32, 128, 128),
    (64, 256, 256),
    (64, 256, 256),
    (64, 256, 256),
    (64, 256, 256),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub classes: usize,
    pub input_channels: usize,
    pub input_size: usize,
    pub conv1_filters: usize,
    pub conv1: Window,
    /// Geometry shared by all five main-branch max pools.
    pub pool: Window,
    /// Average pool opening the auxiliary branch.
    pub aux_pool: Window,
    pub aux_reduce_filters: usize,
    /// Width of the two 3x3 head convolutions in each branch.
    pub head_filters: usize,
    pub dropout: f64,
    pub fires: Vec<FireConfig>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            classes: 365,
            input_channels: 3,
            input_size: 227,
            conv1_filters: 96,
            conv1: Window::new(3, 2, 0),
            pool: Window::new(3, 2, 0),
            aux_pool: Window::new(5, 2, 0),
            aux_reduce_filters: 128,
            head_filters: 512,
            dropout: 0.5,
            fires: REFERENCE_FIRES
                .iter()
                .map(|&(s, e1, e3)| FireConfig { s1: s, e1, e3 })
                .collect(),
        }
    }
}

impl ArchConfig {
    pub fn reference() -> Self {
        Self::default()
    }

    /// Same topology at 8x8 input, two classes and fire dims (2, 4, 4).
    /// Pools are padded so that every stage keeps a non-empty extent.
    pub fn miniature() -> Self {
        ArchConfig {
            classes: 2,
            input_size: 8,
            conv1_filters: 4,
            conv1: Window::new(3, 1, 1),
            pool: Window::new(3, 2, 1),
            aux_pool: Window::new(3, 2, 1),
            aux_reduce_filters: 4,
            head_filters: 8,
            fires: vec![FireConfig { s1: 2, e1: 4, e3: 4 }; 7],
            ..Self::default()
        }
    }

    /// Reduced widths for CPU training on small images (64x64 by default).
    pub fn desk(classes: usize, input_size: usize) -> Self {
        let f = |s1, e| FireConfig { s1, e1: e, e3: e };
        ArchConfig {
            classes,
            input_size,
            conv1_filters: 16,
            pool: Window::new(3, 2, 1),
            aux_reduce_filters: 16,
            head_filters: 32,
            fires: vec![
                f(4, 8),
                f(8, 16),
                f(8, 16),
                f(16, 32),
                f(16, 32),
                f(16, 32),
                f(16, 32),
            ],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.classes < 2 {
            return cfg(format!("class count must be at least 2, got {}", self.classes));
        }
        if self.fires.len() != 7 {
            return cfg(format!("expected 7 fire modules, got {}", self.fires.len()));
        }
        for (i, f) in self.fires.iter().enumerate() {
            FireConfig::new(f.s1, f.e1, f.e3)
                .map_err(|e| Error::Config(format!("fire{}: {e}", i + 1)))?;
        }
        for (name, v) in [
            ("input_channels", self.input_channels),
            ("input_size", self.input_size),
            ("conv1_filters", self.conv1_filters),
            ("aux_reduce_filters", self.aux_reduce_filters),
            ("head_filters", self.head_filters),
        ] {
            if v == 0 {
                return cfg(format!("{name} must be at least 1"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return cfg(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ArchConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A projection shortcut from `source` added onto `destination`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidualStageSpec {
    pub source: String,
    pub destination: String,
    pub projection_filters: usize,
}

/// Node ids of the standard stage-1 tap and loss nodes.
pub mod ids {
    pub const INPUT: &str = "data";
    pub const MAIN_LOSS: &str = "loss";
    pub const AUX_LOSS: &str = "aux/loss";
    pub const AUX_TAP: &str = "stage1/add";
    pub const STAGES: [&str; 3] = ["stage1", "stage2", "stage3"];
}

fn tagged(spec: NodeSpec, group: ParamGroup, set: Option<&str>) -> NodeSpec {
    let spec = spec.in_group(group);
    match set {
        Some(s) => spec.in_set(s),
        None => spec,
    }
}

/// Squeeze 1x1 + ReLU feeding parallel expand 1x1 and 3x3 (pad 1) convs,
/// each followed by ReLU, channel-concatenated (1x1 first) and passed
/// through a Scale layer. Returns the Scale node id.
pub fn build_fire_module(
    graph: &mut Graph,
    input: &str,
    cfg: FireConfig,
    name: &str,
    group: ParamGroup,
) -> Result<String> {
    let cfg = FireConfig::new(cfg.s1, cfg.e1, cfg.e3)?;
    let id = |s: &str| format!("{name}/{s}");
    let mut add = |spec: NodeSpec| graph.add_node(tagged(spec, group, Some(name)));

    add(NodeSpec::conv(id("squeeze1x1"), input, cfg.s1, 1, 1, 0))?;
    add(NodeSpec::unary(id("squeeze_relu"), Layer::Relu, &id("squeeze1x1")))?;
    add(NodeSpec::conv(id("expand1x1"), &id("squeeze_relu"), cfg.e1, 1, 1, 0))?;
    add(NodeSpec::unary(id("expand1x1_relu"), Layer::Relu, &id("expand1x1")))?;
    add(NodeSpec::conv(id("expand3x3"), &id("squeeze_relu"), cfg.e3, 3, 1, 1))?;
    add(NodeSpec::unary(id("expand3x3_relu"), Layer::Relu, &id("expand3x3")))?;
    add(NodeSpec::binary(
        id("concat"),
        Layer::Concat,
        &id("expand1x1_relu"),
        &id("expand3x3_relu"),
    ))?;
    add(NodeSpec::unary(id("scale"), Layer::Scale, &id("concat")))?;
    Ok(id("scale"))
}

/// 1x1 stride-1 projection of `source`, added to `destination`.
/// Returns the addition node id.
pub fn build_residual_connection(
    graph: &mut Graph,
    spec: &ResidualStageSpec,
    name: &str,
) -> Result<String> {
    let shape = |id: &str| {
        graph
            .shape_of(id)
            .ok_or_else(|| Error::Config(format!("{name}: unknown node '{id}'")))
    };
    let src = shape(&spec.source)?;
    let dst = shape(&spec.destination)?;
    if (src.h, src.w) != (dst.h, dst.w) {
        return Err(Error::Config(format!(
            "{name}: source '{}' is {}x{} but destination '{}' is {}x{}",
            spec.source, src.h, src.w, spec.destination, dst.h, dst.w
        )));
    }
    if spec.projection_filters != dst.c {
        return Err(Error::Config(format!(
            "{name}: projection to {} channels cannot be added to {} channels",
            spec.projection_filters, dst.c
        )));
    }
    let proj = format!("{name}/projection");
    let sum = format!("{name}/add");
    graph.add_node(
        NodeSpec::conv(&proj, &spec.source, spec.projection_filters, 1, 1, 0)
            .in_group(ParamGroup::Main),
    )?;
    graph.add_node(
        NodeSpec::binary(&sum, Layer::Add, &spec.destination, &proj).in_group(ParamGroup::Main),
    )?;
    Ok(sum)
}

/// Auxiliary classifier tapped at `tap`: average pool, 1x1 reduction conv
/// with Scale, two 3x3 convs separated by dropout, a K-way 1x1 output conv,
/// global average pooling and a softmax loss. Returns the loss node id.
pub fn build_aux_branch(graph: &mut Graph, tap: &str, cfg: &ArchConfig) -> Result<String> {
    if graph.position(tap).is_none() {
        return Err(Error::Config(format!("auxiliary tap '{tap}' does not exist")));
    }
    let b = ParamGroup::Branch;
    let mut add = |spec: NodeSpec, set: Option<&str>| graph.add_node(tagged(spec, b, set));
    let ap = cfg.aux_pool;
    add(
        NodeSpec::pool("aux/pool", tap, PoolKind::Avg, ap.kernel, ap.stride, ap.pad),
        None,
    )?;
    add(
        NodeSpec::conv("aux/conv1", "aux/pool", cfg.aux_reduce_filters, 1, 1, 0),
        Some("aux1"),
    )?;
    add(NodeSpec::unary("aux/scale1", Layer::Scale, "aux/conv1"), Some("aux1"))?;
    add(NodeSpec::unary("aux/relu1", Layer::Relu, "aux/scale1"), Some("aux1"))?;
    add(
        NodeSpec::conv("aux/conv2", "aux/relu1", cfg.head_filters, 3, 1, 1),
        Some("aux2"),
    )?;
    add(NodeSpec::unary("aux/relu2", Layer::Relu, "aux/conv2"), Some("aux2"))?;
    add(
        NodeSpec::unary("aux/dropout", Layer::Dropout { rate: cfg.dropout }, "aux/relu2"),
        None,
    )?;
    add(
        NodeSpec::conv("aux/conv3", "aux/dropout", cfg.head_filters, 3, 1, 1),
        Some("aux3"),
    )?;
    add(NodeSpec::unary("aux/relu3", Layer::Relu, "aux/conv3"), Some("aux3"))?;
    add(
        NodeSpec::conv("aux/conv4", "aux/relu3", cfg.classes, 1, 1, 0),
        Some("aux4"),
    )?;
    add(NodeSpec::unary("aux/gap", Layer::Gap, "aux/conv4"), None)?;
    add(NodeSpec::unary(ids::AUX_LOSS, Layer::SoftmaxLoss, "aux/gap"), None)?;
    Ok(ids::AUX_LOSS.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Block {
    Fire,
    PlainConv,
}

fn build_block(
    graph: &mut Graph,
    input: &str,
    cfg: FireConfig,
    name: &str,
    block: Block,
) -> Result<String> {
    match block {
        Block::Fire => build_fire_module(graph, input, cfg, name, ParamGroup::Main),
        Block::PlainConv => {
            let conv = format!("{name}/conv3x3");
            let relu = format!("{name}/relu");
            let m = ParamGroup::Main;
            graph.add_node(tagged(
                NodeSpec::conv(&conv, input, cfg.out_channels(), 3, 1, 1),
                m,
                Some(name),
            ))?;
            graph.add_node(tagged(NodeSpec::unary(&relu, Layer::Relu, &conv), m, Some(name)))?;
            Ok(relu)
        }
    }
}

fn build_network(cfg: &ArchConfig, block: Block) -> Result<Graph> {
    cfg.validate()?;
    let mut g = Graph::new();
    let m = ParamGroup::Main;
    let main = |spec: NodeSpec, set: Option<&str>| tagged(spec, m, set);

    g.add_node(NodeSpec::input(
        ids::INPUT,
        cfg.input_channels,
        cfg.input_size,
        cfg.input_size,
    ))?;
    let c1 = cfg.conv1;
    g.add_node(main(
        NodeSpec::conv("conv1", ids::INPUT, cfg.conv1_filters, c1.kernel, c1.stride, c1.pad),
        Some("conv1"),
    ))?;
    g.add_node(main(NodeSpec::unary("conv1/scale", Layer::Scale, "conv1"), Some("conv1")))?;
    g.add_node(main(NodeSpec::unary("conv1/relu", Layer::Relu, "conv1/scale"), Some("conv1")))?;

    let p = cfg.pool;
    let pool = |g: &mut Graph, name: &str, input: &str| -> Result<String> {
        g.add_node(main(
            NodeSpec::pool(name, input, PoolKind::Max, p.kernel, p.stride, p.pad),
            None,
        ))?;
        Ok(name.to_string())
    };
    let fire = |i: usize| cfg.fires[i];

    let pool1 = pool(&mut g, "pool1", "conv1/relu")?;
    let fire1 = build_block(&mut g, &pool1, fire(0), "fire1", block)?;
    let pool2 = pool(&mut g, "pool2", &fire1)?;
    let fire2 = build_block(&mut g, &pool2, fire(1), "fire2", block)?;
    let fire3 = build_block(&mut g, &fire2, fire(2), "fire3", block)?;
    let stage1 = residual(&mut g, &pool2, &fire3, "stage1")?;
    build_aux_branch(&mut g, &stage1, cfg)?;

    let pool3 = pool(&mut g, "pool3", &stage1)?;
    let fire4 = build_block(&mut g, &pool3, fire(3), "fire4", block)?;
    let fire5 = build_block(&mut g, &fire4, fire(4), "fire5", block)?;
    let stage2 = residual(&mut g, &pool3, &fire5, "stage2")?;

    let pool4 = pool(&mut g, "pool4", &stage2)?;
    let fire6 = build_block(&mut g, &pool4, fire(5), "fire6", block)?;
    let fire7 = build_block(&mut g, &fire6, fire(6), "fire7", block)?;
    let stage3 = residual(&mut g, &pool4, &fire7, "stage3")?;

    let pool5 = pool(&mut g, "pool5", &stage3)?;
    let h = cfg.head_filters;
    g.add_node(main(NodeSpec::conv("conv6", &pool5, h, 3, 1, 1), Some("conv6")))?;
    g.add_node(main(NodeSpec::unary("conv6/relu", Layer::Relu, "conv6"), Some("conv6")))?;
    g.add_node(main(
        NodeSpec::unary("drop6", Layer::Dropout { rate: cfg.dropout }, "conv6/relu"),
        None,
    ))?;
    g.add_node(main(NodeSpec::conv("conv7", "drop6", h, 3, 1, 1), Some("conv7")))?;
    g.add_node(main(NodeSpec::unary("conv7/relu", Layer::Relu, "conv7"), Some("conv7")))?;
    g.add_node(main(
        NodeSpec::conv("conv8", "conv7/relu", cfg.classes, 1, 1, 0),
        Some("conv8"),
    ))?;
    g.add_node(main(NodeSpec::unary("pool8", Layer::Gap, "conv8"), None))?;
    g.add_node(main(NodeSpec::unary(ids::MAIN_LOSS, Layer::SoftmaxLoss, "pool8"), None))?;
    Ok(g)
}

fn residual(g: &mut Graph, source: &str, destination: &str, name: &str) -> Result<String> {
    let dst = g
        .shape_of(destination)
        .ok_or_else(|| Error::Config(format!("unknown node '{destination}'")))?;
    build_residual_connection(
        g,
        &ResidualStageSpec {
            source: source.into(),
            destination: destination.into(),
            projection_filters: dst.c,
        },
        name,
    )
}

/// The complete compressed network: fire stages, residual shortcuts and the
/// auxiliary branch.
pub fn build_res_squ_cnds(cfg: &ArchConfig) -> Result<Graph> {
    build_network(cfg, Block::Fire)
}

/// Same topology with each fire module replaced by one 3x3 pad-1 conv of
/// `e1 + e3` filters (plus ReLU).
pub fn build_plain_baseline(cfg: &ArchConfig) -> Result<Graph> {
    build_network(cfg, Block::PlainConv)
}

/// Recognizes the fire pattern ending at a concat node: two ReLU'd expand
/// convs sharing one ReLU'd 1x1 squeeze conv.
pub fn detect_fire(graph: &Graph, concat: usize) -> Option<FireConfig> {
    let nodes = graph.nodes();
    if !matches!(nodes[concat].layer, Layer::Concat) {
        return None;
    }
    let through_relu = |i: usize| -> Option<usize> {
        matches!(nodes[i].layer, Layer::Relu).then(|| graph.edges(i)[0])
    };
    let conv = |i: usize| match nodes[i].layer {
        Layer::Conv { filters, kernel, .. } => Some((filters, kernel)),
        _ => None,
    };
    let ea = through_relu(graph.edges(concat)[0])?;
    let eb = through_relu(graph.edges(concat)[1])?;
    let (e1, ka) = conv(ea)?;
    let (e3, _) = conv(eb)?;
    let sq_a = through_relu(graph.edges(ea)[0])?;
    let sq_b = through_relu(graph.edges(eb)[0])?;
    if sq_a != sq_b || ka != 1 {
        return None;
    }
    let (s1, ks) = conv(sq_a)?;
    (ks == 1).then_some(FireConfig { s1, e1, e3 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub kind: String,
    pub group: Option<ParamGroup>,
    /// Per-sample output `[c, h, w]`.
    pub output: [usize; 3],
    pub params: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fire: Option<FireConfig>,
}

/// Per-layer shapes and parameter counts. `nodes` lists every graph node;
/// `layers` collapses each weight set (a conv with its Scale/ReLU, or a
/// whole fire module) into one row and keeps pools, projections and
/// additions as their own rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeReport {
    pub layers: Vec<ReportRow>,
    pub nodes: Vec<ReportRow>,
    pub main_params: usize,
    pub branch_params: usize,
    pub total_params: usize,
    pub size_bytes: u64,
}

fn dims(s: Shape) -> [usize; 3] {
    [s.c, s.h, s.w]
}

pub fn shape_report(graph: &Graph) -> Result<ShapeReport> {
    let counts = param_count(graph);
    let count_of = |id: &str| counts.node(id).map_or(0, |c| c.total());
    let mut nodes = Vec::with_capacity(graph.len());
    let mut layers: Vec<ReportRow> = Vec::new();

    for (i, spec) in graph.nodes().iter().enumerate() {
        let fire = detect_fire(graph, i);
        let row = ReportRow {
            name: spec.id.clone(),
            kind: spec.layer.name().to_string(),
            group: spec.group,
            output: dims(graph.shape_at(i)),
            params: count_of(&spec.id),
            fire,
        };
        match &spec.weight_set {
            Some(set) => match layers.iter_mut().find(|l| &l.name == set) {
                Some(l) => {
                    l.output = row.output;
                    l.params += row.params;
                    if fire.is_some() {
                        l.fire = fire;
                        l.kind = "fire".into();
                    }
                }
                None => layers.push(ReportRow {
                    name: set.clone(),
                    kind: if fire.is_some() { "fire".into() } else { row.kind.clone() },
                    ..row.clone()
                }),
            },
            None => {
                if matches!(
                    spec.layer,
                    Layer::Input { .. } | Layer::Pool { .. } | Layer::Gap | Layer::Add | Layer::Conv { .. }
                ) {
                    layers.push(row.clone());
                }
            }
        }
        nodes.push(row);
    }
    Ok(ShapeReport {
        layers,
        nodes,
        main_params: counts.main,
        branch_params: counts.branch,
        total_params: counts.total,
        size_bytes: model_size_bytes(counts.total as u64, 4)?,
    })
}

impl ShapeReport {
    pub fn fire_rows(&self) -> Vec<(&str, FireConfig)> {
        self.layers
            .iter()
            .filter_map(|l| l.fire.map(|f| (l.name.as_str(), f)))
            .collect()
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<18} {:<13} {:<7} {:>16} {:>6} {:>6} {:>6} {:>12}",
            "layer", "type", "group", "output (c,h,w)", "s1x1", "e1x1", "e3x3", "params"
        );
        for l in &self.layers {
            let group = match l.group {
                Some(ParamGroup::Main) => "main",
                Some(ParamGroup::Branch) => "branch",
                None => "-",
            };
            let (s, e1, e3) = match l.fire {
                Some(f) => (f.s1.to_string(), f.e1.to_string(), f.e3.to_string()),
                None => ("-".into(), "-".into(), "-".into()),
            };
            let shape = format!("{}x{}x{}", l.output[0], l.output[1], l.output[2]);
            let _ = writeln!(
                out,
                "{:<18} {:<13} {:<7} {:>16} {:>6} {:>6} {:>6} {:>12}",
                l.name, l.kind, group, shape, s, e1, e3, l.params
            );
        }
        if !self.layers.is_empty() {
            let _ = writeln!(
                out,
                "parameters: main {} + branch {} = {} ({} bytes, {})",
                self.main_params,
                self.branch_params,
                self.total_params,
                self.size_bytes,
                crate::graph::format_bytes(self.size_bytes)
            );
        }
        out
    }
}

/// Size and optional training duration of one model. Units are free but
/// must agree between the two sides of a comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub size: f64,
    #[serde(default)]
    pub hours: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub baseline: ModelMetrics,
    pub candidate: ModelMetrics,
    /// `(baseline - candidate) / baseline * 100`, two decimals.
    pub size_reduction_pct: f64,
    pub duration_reduction_pct: Option<f64>,
}

impl ComparisonReport {
    pub fn render_text(&self) -> String {
        let mut s = format!("size: {:.2}% smaller\n", self.size_reduction_pct);
        if let Some(d) = self.duration_reduction_pct {
            let _ = writeln!(s, "duration: {d:.2}% faster");
        }
        s
    }
}

/// Percent reduction from `baseline` to `candidate`, rounded to two decimals.
pub fn percent_reduction(baseline: f64, candidate: f64) -> Result<f64> {
    if baseline == 0.0 {
        return Err(Error::Arithmetic("baseline value is zero".into()));
    }
    if !baseline.is_finite() || !candidate.is_finite() {
        return Err(Error::Arithmetic("non-finite comparison input".into()));
    }
    let pct = (baseline - candidate) / baseline * 100.0;
    Ok((pct * 100.0).round() / 100.0)
}

pub fn compare_models(baseline: ModelMetrics, candidate: ModelMetrics) -> Result<ComparisonReport> {
    let duration_reduction_pct = match (baseline.hours, candidate.hours) {
        (Some(a), Some(b)) => Some(percent_reduction(a, b)?),
        _ => None,
    };
    Ok(ComparisonReport {
        baseline,
        candidate,
        size_reduction_pct: percent_reduction(baseline.size, candidate.size)?,
        duration_reduction_pct,
    })
}
