//! Backend-independent layer graphs with shape inference and exact parameter
//! counting.
//!
//! Nodes are stored in topological order and addressed by string ids. Node
//! ids double as parameter names (`<id>.weight`, `<id>.bias`, ...), so any
//! execution backend that follows the graph produces checkpoints with the
//! same tensor names.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Output size `ceil(in / stride)`, zero padding split with the extra
    /// pixel at the end.
    Same,
    /// No padding: output size `floor((in - size) / stride) + 1`.
    Valid,
}

impl Padding {
    /// Output length and leading pad for one spatial axis.
    pub fn resolve(self, input: usize, size: usize, stride: usize) -> Option<(usize, usize)> {
        match self {
            Padding::Same => {
                let out = input.div_ceil(stride);
                let total = ((out - 1) * stride + size).saturating_sub(input);
                Some((out, total / 2))
            }
            Padding::Valid => (input >= size).then(|| ((input - size) / stride + 1, 0)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LayerOp {
    Input { index: usize },
    Conv2D { filters: usize, kernel: usize, stride: usize, padding: Padding },
    Dense { units: usize },
    BatchNorm { epsilon: f64, momentum: f64 },
    ReLU,
    Sigmoid,
    Dropout { p: f64 },
    AvgPool { size: usize, stride: usize, padding: Padding },
    MaxPool { size: usize, stride: usize, padding: Padding },
    GlobalAvgPool,
    GlobalMaxPool,
    Flatten,
    Concat,
}

impl LayerOp {
    pub fn name(&self) -> &'static str {
        match self {
            LayerOp::Input { .. } => "Input",
            LayerOp::Conv2D { .. } => "Conv2D",
            LayerOp::Dense { .. } => "Dense",
            LayerOp::BatchNorm { .. } => "BatchNorm",
            LayerOp::ReLU => "ReLU",
            LayerOp::Sigmoid => "Sigmoid",
            LayerOp::Dropout { .. } => "Dropout",
            LayerOp::AvgPool { .. } => "AvgPool",
            LayerOp::MaxPool { .. } => "MaxPool",
            LayerOp::GlobalAvgPool => "GlobalAvgPool",
            LayerOp::GlobalMaxPool => "GlobalMaxPool",
            LayerOp::Flatten => "Flatten",
            LayerOp::Concat => "Concat",
        }
    }

    fn check_attributes(&self) -> std::result::Result<(), String> {
        let bad = match *self {
            LayerOp::Conv2D { filters, kernel, stride, .. } => filters == 0 || kernel == 0 || stride == 0,
            LayerOp::Dense { units } => units == 0,
            LayerOp::BatchNorm { epsilon, momentum } => !(epsilon > 0.0) || !(0.0..1.0).contains(&momentum),
            LayerOp::Dropout { p } => !(0.0..1.0).contains(&p),
            LayerOp::AvgPool { size, stride, .. } | LayerOp::MaxPool { size, stride, .. } => size == 0 || stride == 0,
            _ => false,
        };
        if bad {
            Err(format!("incomplete or out-of-range attributes for {self:?}"))
        } else {
            Ok(())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNode {
    pub id: String,
    pub op: LayerOp,
    pub inputs: Vec<String>,
}

/// Per-sample tensor shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Shape {
    Spatial { channels: usize, height: usize, width: usize },
    Flat(usize),
}

impl Shape {
    pub fn spatial(channels: usize, height: usize, width: usize) -> Self {
        Shape::Spatial { channels, height, width }
    }

    pub fn numel(&self) -> usize {
        match *self {
            Shape::Spatial { channels, height, width } => channels * height * width,
            Shape::Flat(units) => units,
        }
    }

    /// Channels of a spatial shape, units of a flat one.
    pub fn channels(&self) -> usize {
        match *self {
            Shape::Spatial { channels, .. } => channels,
            Shape::Flat(units) => units,
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Spatial { channels, height, width } => write!(f, "({channels},{height},{width})"),
            Shape::Flat(u) => write!(f, "({u})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    pub fn suffix(self) -> &'static str {
        match self {
            ParamRole::Weight => "weight",
            ParamRole::Bias => "bias",
            ParamRole::Gamma => "gamma",
            ParamRole::Beta => "beta",
            ParamRole::RunningMean => "running_mean",
            ParamRole::RunningVar => "running_var",
        }
    }

    pub fn trainable(self) -> bool {
        !matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }
}

/// A named parameter tensor implied by the graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    /// Node that owns the storage (first member of its shared group).
    pub owner: String,
    pub role: ParamRole,
    pub shape: Vec<usize>,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerGraph {
    pub nodes: Vec<LayerNode>,
    /// Per-sample `(channels, height, width)` of each graph input.
    pub input_shapes: Vec<(usize, usize, usize)>,
    /// Output node of each head.
    pub outputs: Vec<String>,
    /// Groups of nodes constrained to one set of parameters.
    pub shared_groups: Vec<Vec<String>>,
}

pub fn param_name(owner: &str, role: ParamRole) -> String {
    format!("{owner}.{}", role.suffix())
}

impl LayerGraph {
    pub fn node(&self, id: &str) -> Option<&LayerNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Checks id uniqueness, input resolution (which also rules out cycles,
    /// since inputs must precede their consumers), attribute completeness,
    /// heads and shared-group consistency.
    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(Error::Shape(m));
        let mut seen: HashMap<&str, &LayerNode> = HashMap::new();
        for node in &self.nodes {
            if seen.contains_key(node.id.as_str()) {
                return invalid(format!("duplicate node id {:?}", node.id));
            }
            node.op.check_attributes().map_err(Error::Shape)?;
            match node.op {
                LayerOp::Input { index } => {
                    if index >= self.input_shapes.len() {
                        return invalid(format!("{}: input index {index} has no declared shape", node.id));
                    }
                    if !node.inputs.is_empty() {
                        return invalid(format!("{}: input nodes take no inputs", node.id));
                    }
                }
                LayerOp::Concat => {
                    if node.inputs.len() < 2 {
                        return invalid(format!("{}: concat needs at least two inputs", node.id));
                    }
                }
                _ => {
                    if node.inputs.len() != 1 {
                        return invalid(format!("{}: {} takes exactly one input", node.id, node.op.name()));
                    }
                }
            }
            for input in &node.inputs {
                if !seen.contains_key(input.as_str()) {
                    return invalid(format!("{}: input {input:?} is undefined or not earlier in the graph", node.id));
                }
            }
            seen.insert(&node.id, node);
        }
        if self.outputs.is_empty() {
            return invalid("graph has no output head".into());
        }
        for out in &self.outputs {
            if !seen.contains_key(out.as_str()) {
                return invalid(format!("output {out:?} is not a node"));
            }
        }
        let mut grouped: HashMap<&str, usize> = HashMap::new();
        for (gi, group) in self.shared_groups.iter().enumerate() {
            let Some(first) = group.first().and_then(|id| seen.get(id.as_str())) else {
                return invalid(format!("shared group {gi} is empty or names an unknown node"));
            };
            for id in group {
                let Some(node) = seen.get(id.as_str()) else {
                    return invalid(format!("shared group {gi} names unknown node {id:?}"));
                };
                if node.op != first.op {
                    return invalid(format!("shared group {gi}: {id} differs in kind or attributes from {}", first.id));
                }
                if grouped.insert(id, gi).is_some() {
                    return invalid(format!("node {id} belongs to more than one shared group"));
                }
            }
        }
        Ok(())
    }

    /// Node id that owns the parameters of `id`.
    pub fn owner_of<'a>(&'a self, id: &'a str) -> &'a str {
        self.shared_groups
            .iter()
            .find(|g| g.iter().any(|m| m == id))
            .map(|g| g[0].as_str())
            .unwrap_or(id)
    }

    /// Shapes of every node's per-sample output.
    pub fn infer_shapes(&self) -> Result<BTreeMap<String, Shape>> {
        self.validate()?;
        let mut shapes: BTreeMap<String, Shape> = BTreeMap::new();
        for node in &self.nodes {
            let ins: Vec<Shape> = node.inputs.iter().map(|i| shapes[i]).collect();
            let shape = output_shape(node, &ins, &self.input_shapes)?;
            shapes.insert(node.id.clone(), shape);
        }
        Ok(shapes)
    }

    /// Every parameter tensor the graph implies, shared groups counted once,
    /// in node order.
    pub fn param_specs(&self) -> Result<Vec<ParamSpec>> {
        let shapes = self.infer_shapes()?;
        let mut specs = Vec::new();
        for node in &self.nodes {
            let owner = self.owner_of(&node.id);
            if owner != node.id {
                continue;
            }
            let input = node.inputs.first().map(|i| shapes[i]);
            let mut push = |role: ParamRole, shape: Vec<usize>| {
                specs.push(ParamSpec { name: param_name(owner, role), owner: owner.to_string(), role, shape });
            };
            match node.op {
                LayerOp::Conv2D { filters, kernel, .. } => {
                    let in_ch = input.map(|s| s.channels()).unwrap_or(0);
                    push(ParamRole::Weight, vec![filters, in_ch, kernel, kernel]);
                    push(ParamRole::Bias, vec![filters]);
                }
                LayerOp::Dense { units } => {
                    let in_units = input.map(|s| s.numel()).unwrap_or(0);
                    push(ParamRole::Weight, vec![in_units, units]);
                    push(ParamRole::Bias, vec![units]);
                }
                LayerOp::BatchNorm { .. } => {
                    let c = input.map(|s| s.channels()).unwrap_or(0);
                    for role in [ParamRole::Gamma, ParamRole::Beta, ParamRole::RunningMean, ParamRole::RunningVar] {
                        push(role, vec![c]);
                    }
                }
                _ => {}
            }
        }
        Ok(specs)
    }

    /// Trainable parameter count; `include_non_trainable` adds batch-norm
    /// running statistics.
    pub fn count_params_with(&self, include_non_trainable: bool) -> Result<u64> {
        Ok(self
            .param_specs()?
            .iter()
            .filter(|p| include_non_trainable || p.role.trainable())
            .map(|p| p.numel() as u64)
            .sum())
    }

    pub fn count_params(&self) -> Result<u64> {
        self.count_params_with(false)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let g: Self = serde_json::from_str(s)?;
        g.validate()?;
        Ok(g)
    }
}

fn output_shape(node: &LayerNode, ins: &[Shape], input_shapes: &[(usize, usize, usize)]) -> Result<Shape> {
    let id = &node.id;
    let need_spatial = |s: Shape| match s {
        Shape::Spatial { channels, height, width } => Ok((channels, height, width)),
        Shape::Flat(_) => Err(Error::Shape(format!("{id}: {} needs a spatial input, got {s}", node.op.name()))),
    };
    let collapsed = |what: &str| Error::Shape(format!("{id}: spatial size reaches 0 in {what}"));
    let shape = match node.op {
        LayerOp::Input { index } => {
            let (c, h, w) = input_shapes[index];
            if c == 0 || h == 0 || w == 0 {
                return Err(Error::Shape(format!("{id}: input shape ({c},{h},{w}) has a zero dimension")));
            }
            Shape::spatial(c, h, w)
        }
        LayerOp::Conv2D { filters, kernel, stride, padding } => {
            let (_, h, w) = need_spatial(ins[0])?;
            let (oh, _) = padding.resolve(h, kernel, stride).ok_or_else(|| collapsed("Conv2D"))?;
            let (ow, _) = padding.resolve(w, kernel, stride).ok_or_else(|| collapsed("Conv2D"))?;
            Shape::spatial(filters, oh, ow)
        }
        LayerOp::AvgPool { size, stride, padding } | LayerOp::MaxPool { size, stride, padding } => {
            let (c, h, w) = need_spatial(ins[0])?;
            let (oh, _) = padding.resolve(h, size, stride).ok_or_else(|| collapsed("pooling"))?;
            let (ow, _) = padding.resolve(w, size, stride).ok_or_else(|| collapsed("pooling"))?;
            if oh == 0 || ow == 0 {
                return Err(collapsed("pooling"));
            }
            Shape::spatial(c, oh, ow)
        }
        LayerOp::Dense { units } => Shape::Flat(units),
        LayerOp::BatchNorm { .. } | LayerOp::ReLU | LayerOp::Sigmoid | LayerOp::Dropout { .. } => ins[0],
        LayerOp::GlobalAvgPool | LayerOp::GlobalMaxPool => Shape::Flat(need_spatial(ins[0])?.0),
        LayerOp::Flatten => Shape::Flat(ins[0].numel()),
        LayerOp::Concat => match ins[0] {
            Shape::Spatial { height, width, .. } => {
                let mut channels = 0;
                for s in ins {
                    match *s {
                        Shape::Spatial { channels: c, height: h, width: w } if (h, w) == (height, width) => channels += c,
                        other => {
                            return Err(Error::Shape(format!(
                                "{id}: cannot concatenate {other} with spatial size ({height},{width})"
                            )))
                        }
                    }
                }
                Shape::spatial(channels, height, width)
            }
            Shape::Flat(_) => {
                let mut units = 0;
                for s in ins {
                    match *s {
                        Shape::Flat(u) => units += u,
                        other => return Err(Error::Shape(format!("{id}: cannot concatenate {other} with flat inputs"))),
                    }
                }
                Shape::Flat(units)
            }
        },
    };
    if shape.numel() == 0 {
        return Err(collapsed(node.op.name()));
    }
    Ok(shape)
}

/// Channels leaving a dense block: every layer appends `growth` maps.
pub fn dense_block_out_channels(in_channels: usize, layers: usize, growth: usize) -> usize {
    in_channels + layers * growth
}

/// Channels leaving a transition layer: `floor(in * compression)`, at
/// least one.
pub fn transition_out_channels(in_channels: usize, compression: f64) -> usize {
    ((in_channels as f64 * compression).floor() as usize).max(1)
}

/// Incremental graph construction with generated ids.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    graph: LayerGraph,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn input(&mut self, id: &str, shape: (usize, usize, usize)) -> String {
        let index = self.graph.input_shapes.len();
        self.graph.input_shapes.push(shape);
        self.add(id, LayerOp::Input { index }, &[])
    }

    pub fn add(&mut self, id: &str, op: LayerOp, inputs: &[&str]) -> String {
        self.graph.nodes.push(LayerNode {
            id: id.to_string(),
            op,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        });
        id.to_string()
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.graph.nodes
    }

    pub fn output(&mut self, id: &str) {
        self.graph.outputs.push(id.to_string());
    }

    pub fn share(&mut self, group: Vec<String>) {
        self.graph.shared_groups.push(group);
    }

    pub fn finish(self) -> Result<LayerGraph> {
        self.graph.validate()?;
        self.graph.infer_shapes()?;
        Ok(self.graph)
    }
}
