//! The three matching networks, built as [`LayerGraph`]s from typed
//! configurations.
//!
//! Siamese graphs name their branches `a/...` and `b/...`; every
//! parameter-bearing node of branch `b` shares storage with its `a`
//! counterpart.

use serde::{Deserialize, Serialize};

use crate::dataset::LabelOrientation;
use crate::error::{Error, Result};
use crate::netgraph::{dense_block_out_channels, transition_out_channels, GraphBuilder, LayerGraph, LayerOp, Padding};

pub const BN_EPSILON: f64 = 1.1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArchId {
    #[serde(rename = "DTC")]
    Dtc,
    #[serde(rename = "DS")]
    Ds,
    #[serde(rename = "VGG_CL")]
    VggCl,
}

impl ArchId {
    pub fn as_str(self) -> &'static str {
        match self {
            ArchId::Dtc => "DTC",
            ArchId::Ds => "DS",
            ArchId::VggCl => "VGG_CL",
        }
    }
}

impl std::fmt::Display for ArchId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ArchId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "DTC" => Ok(ArchId::Dtc),
            "DS" => Ok(ArchId::Ds),
            "VGG_CL" | "VGG" => Ok(ArchId::VggCl),
            _ => Err(Error::Config(format!("unknown architecture {s:?} (expected DTC, DS or VGG_CL)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputSemantics {
    MatchProbability,
    EmbeddingDistance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Avg,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrunkPooling {
    Flatten,
    Avg,
}

/// How a table's compression value maps to the transition factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressionMode {
    /// The value is the fraction of channels kept.
    Retain,
    /// The value is the fraction of channels removed.
    Remove,
}

impl CompressionMode {
    pub fn factor(self, value: f64) -> f64 {
        match self {
            CompressionMode::Retain => value,
            CompressionMode::Remove => 1.0 - value,
        }
    }
}

/// First layers of a DenseNet trunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stem {
    /// 3x3 convolution, stride 1.
    Plain,
    /// 7x7 stride-2 convolution, batch norm, ReLU and 3x3 stride-2 max pooling.
    Subsample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterGrowth {
    Constant,
    Doubling,
}

fn default_compression_mode() -> CompressionMode {
    CompressionMode::Remove
}

fn default_stem() -> Stem {
    Stem::Subsample
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtcConfig {
    pub block_layers: Vec<usize>,
    pub growth: usize,
    pub initial_filters: usize,
    pub dropout: f64,
    pub compression: f64,
    #[serde(default = "default_compression_mode")]
    pub compression_mode: CompressionMode,
    pub bottleneck: bool,
    pub pooling: Pooling,
    #[serde(default = "default_stem")]
    pub stem: Stem,
    /// `(channels, height, width)`; channels must be 2.
    pub input: (usize, usize, usize),
}

impl Default for DtcConfig {
    fn default() -> Self {
        Self {
            block_layers: vec![2, 2, 2],
            growth: 12,
            initial_filters: 32,
            dropout: 0.2,
            compression: 0.5,
            compression_mode: CompressionMode::Remove,
            bottleneck: false,
            pooling: Pooling::Avg,
            stem: Stem::Subsample,
            input: (2, 96, 96),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsConfig {
    pub block_layers: Vec<usize>,
    pub growth: usize,
    pub initial_filters: usize,
    pub densenet_dropout: f64,
    pub compression: f64,
    #[serde(default = "default_compression_mode")]
    pub compression_mode: CompressionMode,
    pub bottleneck: bool,
    pub trunk_pooling: TrunkPooling,
    pub fc_units: usize,
    pub fc_dropout: f64,
    /// Batch norm after the hidden fully connected layer's ReLU.
    #[serde(default = "default_true")]
    pub fc_batch_norm: bool,
    #[serde(default = "default_stem")]
    pub stem: Stem,
    /// Per-branch `(channels, height, width)`; channels must be 1.
    pub input: (usize, usize, usize),
}

fn default_true() -> bool {
    true
}

impl Default for DsConfig {
    fn default() -> Self {
        Self {
            block_layers: vec![2, 2],
            growth: 30,
            initial_filters: 16,
            densenet_dropout: 0.4,
            compression: 0.3,
            compression_mode: CompressionMode::Remove,
            bottleneck: false,
            trunk_pooling: TrunkPooling::Flatten,
            fc_units: 512,
            fc_dropout: 0.7,
            fc_batch_norm: true,
            stem: Stem::Subsample,
            input: (1, 96, 96),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VggClConfig {
    pub base_filters: usize,
    pub kernel: usize,
    pub fc_layers: usize,
    pub embedding_units: usize,
    pub batch_norm: bool,
    pub dropout: f64,
    pub conv_blocks: usize,
    pub convs_per_block: usize,
    pub filter_growth: FilterGrowth,
    pub conv_padding: Padding,
    /// Per-branch `(channels, height, width)`; channels must be 1.
    pub input: (usize, usize, usize),
    pub margin: f64,
}

impl Default for VggClConfig {
    fn default() -> Self {
        Self {
            base_filters: 16,
            kernel: 3,
            fc_layers: 1,
            embedding_units: 2048,
            batch_norm: false,
            dropout: 0.6,
            conv_blocks: 3,
            convs_per_block: 1,
            filter_growth: FilterGrowth::Constant,
            conv_padding: Padding::Valid,
            input: (1, 96, 96),
            margin: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch")]
pub enum ArchConfig {
    #[serde(rename = "DTC")]
    Dtc(DtcConfig),
    #[serde(rename = "DS")]
    Ds(DsConfig),
    #[serde(rename = "VGG_CL")]
    VggCl(VggClConfig),
}

impl ArchConfig {
    pub fn default_for(arch: ArchId) -> Self {
        match arch {
            ArchId::Dtc => ArchConfig::Dtc(DtcConfig::default()),
            ArchId::Ds => ArchConfig::Ds(DsConfig::default()),
            ArchId::VggCl => ArchConfig::VggCl(VggClConfig::default()),
        }
    }

    pub fn arch_id(&self) -> ArchId {
        match self {
            ArchConfig::Dtc(_) => ArchId::Dtc,
            ArchConfig::Ds(_) => ArchId::Ds,
            ArchConfig::VggCl(_) => ArchId::VggCl,
        }
    }

    /// Patch height and width the model expects.
    pub fn patch_size(&self) -> (usize, usize) {
        let (_, h, w) = match self {
            ArchConfig::Dtc(c) => c.input,
            ArchConfig::Ds(c) => c.input,
            ArchConfig::VggCl(c) => c.input,
        };
        (h, w)
    }

    pub fn with_patch_size(mut self, height: usize, width: usize) -> Self {
        match &mut self {
            ArchConfig::Dtc(c) => c.input = (2, height, width),
            ArchConfig::Ds(c) => c.input = (1, height, width),
            ArchConfig::VggCl(c) => c.input = (1, height, width),
        }
        self
    }

    pub fn build(&self) -> Result<ModelSpec> {
        match self {
            ArchConfig::Dtc(c) => build_dtc(c),
            ArchConfig::Ds(c) => build_ds(c),
            ArchConfig::VggCl(c) => build_vgg_siamese(c),
        }
    }
}

/// Weight initialization family of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    /// Glorot uniform everywhere.
    GlorotUniform,
    /// Convolutions normal(0, 0.05), dense layers truncated Glorot normal.
    NormalConvGlorotNormalDense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch_id: ArchId,
    pub config: ArchConfig,
    pub graph: LayerGraph,
    pub output_semantics: OutputSemantics,
    /// Label convention the model's loss consumes.
    pub label_orientation: LabelOrientation,
    pub init: InitPolicy,
}

impl ModelSpec {
    pub fn is_siamese(&self) -> bool {
        self.graph.input_shapes.len() == 2
    }

    /// Contrastive margin, for embedding models.
    pub fn margin(&self) -> Option<f64> {
        match &self.config {
            ArchConfig::VggCl(c) => Some(c.margin),
            _ => None,
        }
    }

    pub fn has_dropout(&self) -> bool {
        self.graph.nodes.iter().any(|n| matches!(n.op, LayerOp::Dropout { .. }))
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

fn check_probability(name: &str, p: f64) -> Result<()> {
    check((0.0..1.0).contains(&p), || format!("{name} must lie in [0,1), got {p}"))
}

fn check_input(input: (usize, usize, usize), channels: usize) -> Result<()> {
    check(input.0 == channels, || format!("input must have {channels} channel(s), got {}", input.0))?;
    check(input.1 > 0 && input.2 > 0, || format!("input size {}x{} is empty", input.1, input.2))
}

struct DenseNetTrunk<'a> {
    block_layers: &'a [usize],
    growth: usize,
    initial_filters: usize,
    dropout: f64,
    compression: f64,
    bottleneck: bool,
    stem: Stem,
}

impl DenseNetTrunk<'_> {
    fn validate(&self) -> Result<()> {
        check(!self.block_layers.is_empty(), || "block_layers must not be empty".into())?;
        check(self.growth >= 1, || "growth must be at least 1".into())?;
        check(self.initial_filters >= 1, || "initial_filters must be at least 1".into())?;
        check_probability("dropout", self.dropout)?;
        check(self.compression > 0.0 && self.compression <= 1.0, || {
            format!("effective compression factor must lie in (0,1], got {}", self.compression)
        })
    }

    /// Appends the trunk after `input` under the id prefix `p`; returns the
    /// post-activation output node id and its channel count.
    fn build(&self, b: &mut GraphBuilder, p: &str, input: &str) -> (String, usize) {
        let bn = LayerOp::BatchNorm { epsilon: BN_EPSILON, momentum: BN_MOMENTUM };
        let conv = |filters, kernel| LayerOp::Conv2D { filters, kernel, stride: 1, padding: Padding::Same };
        let mut channels = self.initial_filters;
        let mut x = match self.stem {
            Stem::Plain => b.add(&format!("{p}stem.conv"), conv(channels, 3), &[input]),
            Stem::Subsample => {
                let c = b.add(
                    &format!("{p}stem.conv"),
                    LayerOp::Conv2D { filters: channels, kernel: 7, stride: 2, padding: Padding::Same },
                    &[input],
                );
                let n = b.add(&format!("{p}stem.bn"), bn.clone(), &[&c]);
                let r = b.add(&format!("{p}stem.relu"), LayerOp::ReLU, &[&n]);
                b.add(
                    &format!("{p}stem.pool"),
                    LayerOp::MaxPool { size: 3, stride: 2, padding: Padding::Same },
                    &[&r],
                )
            }
        };
        for (bi, &layers) in self.block_layers.iter().enumerate() {
            let blk = format!("{p}block{}", bi + 1);
            for li in 1..=layers {
                let l = format!("{blk}.layer{li}");
                let mut h = b.add(&format!("{l}.bn"), bn.clone(), &[&x]);
                h = b.add(&format!("{l}.relu"), LayerOp::ReLU, &[&h]);
                if self.bottleneck {
                    h = b.add(&format!("{l}.bottleneck"), conv(4 * self.growth, 1), &[&h]);
                    if self.dropout > 0.0 {
                        h = b.add(&format!("{l}.bottleneck_drop"), LayerOp::Dropout { p: self.dropout }, &[&h]);
                    }
                    h = b.add(&format!("{l}.bn2"), bn.clone(), &[&h]);
                    h = b.add(&format!("{l}.relu2"), LayerOp::ReLU, &[&h]);
                }
                h = b.add(&format!("{l}.conv"), conv(self.growth, 3), &[&h]);
                if self.dropout > 0.0 {
                    h = b.add(&format!("{l}.drop"), LayerOp::Dropout { p: self.dropout }, &[&h]);
                }
                x = b.add(&format!("{l}.concat"), LayerOp::Concat, &[&x, &h]);
            }
            channels = dense_block_out_channels(channels, layers, self.growth);
            if bi + 1 < self.block_layers.len() {
                let t = format!("{p}transition{}", bi + 1);
                channels = transition_out_channels(channels, self.compression);
                let mut h = b.add(&format!("{t}.bn"), bn.clone(), &[&x]);
                h = b.add(&format!("{t}.relu"), LayerOp::ReLU, &[&h]);
                h = b.add(&format!("{t}.conv"), conv(channels, 1), &[&h]);
                x = b.add(
                    &format!("{t}.pool"),
                    LayerOp::AvgPool { size: 2, stride: 2, padding: Padding::Valid },
                    &[&h],
                );
            }
        }
        let n = b.add(&format!("{p}final.bn"), bn, &[&x]);
        let r = b.add(&format!("{p}final.relu"), LayerOp::ReLU, &[&n]);
        (r, channels)
    }
}

/// Shares every parameter-bearing `a/` node with its `b/` twin.
fn share_branches(b: &mut GraphBuilder, graph_nodes: &[(String, bool)]) {
    for (id, has_params) in graph_nodes {
        if let (true, Some(rest)) = (*has_params, id.strip_prefix("a/")) {
            b.share(vec![id.clone(), format!("b/{rest}")]);
        }
    }
}

fn param_nodes(b: &GraphBuilder, prefix: &str) -> Vec<(String, bool)> {
    b.nodes()
        .iter()
        .filter(|n| n.id.starts_with(prefix))
        .map(|n| {
            let params = matches!(n.op, LayerOp::Conv2D { .. } | LayerOp::Dense { .. } | LayerOp::BatchNorm { .. });
            (n.id.clone(), params)
        })
        .collect()
}

pub fn build_dtc(c: &DtcConfig) -> Result<ModelSpec> {
    check_input(c.input, 2)?;
    let trunk = DenseNetTrunk {
        block_layers: &c.block_layers,
        growth: c.growth,
        initial_filters: c.initial_filters,
        dropout: c.dropout,
        compression: c.compression_mode.factor(c.compression),
        bottleneck: c.bottleneck,
        stem: c.stem,
    };
    trunk.validate()?;
    let mut b = GraphBuilder::new();
    let x = b.input("input", c.input);
    let (features, _) = trunk.build(&mut b, "", &x);
    let pool = match c.pooling {
        Pooling::Avg => LayerOp::GlobalAvgPool,
        Pooling::Max => LayerOp::GlobalMaxPool,
    };
    let g = b.add("pool", pool, &[&features]);
    let fc = b.add("classifier", LayerOp::Dense { units: 1 }, &[&g]);
    let out = b.add("sigmoid", LayerOp::Sigmoid, &[&fc]);
    b.output(&out);
    Ok(ModelSpec {
        arch_id: ArchId::Dtc,
        config: ArchConfig::Dtc(c.clone()),
        graph: b.finish()?,
        output_semantics: OutputSemantics::MatchProbability,
        label_orientation: LabelOrientation::MatchIsOne,
        init: InitPolicy::GlorotUniform,
    })
}

pub fn build_ds(c: &DsConfig) -> Result<ModelSpec> {
    check_input(c.input, 1)?;
    check(c.fc_units >= 1, || "fc_units must be at least 1".into())?;
    check_probability("fc_dropout", c.fc_dropout)?;
    let trunk = DenseNetTrunk {
        block_layers: &c.block_layers,
        growth: c.growth,
        initial_filters: c.initial_filters,
        dropout: c.densenet_dropout,
        compression: c.compression_mode.factor(c.compression),
        bottleneck: c.bottleneck,
        stem: c.stem,
    };
    trunk.validate()?;
    let mut b = GraphBuilder::new();
    let mut branch_out = Vec::new();
    for side in ["a", "b"] {
        let x = b.input(&format!("{side}/input"), c.input);
        let (features, _) = trunk.build(&mut b, &format!("{side}/"), &x);
        let op = match c.trunk_pooling {
            TrunkPooling::Flatten => LayerOp::Flatten,
            TrunkPooling::Avg => LayerOp::GlobalAvgPool,
        };
        branch_out.push(b.add(&format!("{side}/pool"), op, &[&features]));
    }
    let shared = param_nodes(&b, "a/");
    share_branches(&mut b, &shared);
    let cat = b.add("concat", LayerOp::Concat, &[&branch_out[0], &branch_out[1]]);
    let mut h = b.add("fc", LayerOp::Dense { units: c.fc_units }, &[&cat]);
    h = b.add("fc.relu", LayerOp::ReLU, &[&h]);
    if c.fc_batch_norm {
        h = b.add("fc.bn", LayerOp::BatchNorm { epsilon: BN_EPSILON, momentum: BN_MOMENTUM }, &[&h]);
    }
    if c.fc_dropout > 0.0 {
        h = b.add("fc.drop", LayerOp::Dropout { p: c.fc_dropout }, &[&h]);
    }
    let logit = b.add("classifier", LayerOp::Dense { units: 1 }, &[&h]);
    let out = b.add("sigmoid", LayerOp::Sigmoid, &[&logit]);
    b.output(&out);
    Ok(ModelSpec {
        arch_id: ArchId::Ds,
        config: ArchConfig::Ds(c.clone()),
        graph: b.finish()?,
        output_semantics: OutputSemantics::MatchProbability,
        label_orientation: LabelOrientation::MatchIsOne,
        init: InitPolicy::GlorotUniform,
    })
}

/// Two weight-shared VGG branches. The graph's two heads are the branch
/// embeddings; the model output is their Euclidean distance.
pub fn build_vgg_siamese(c: &VggClConfig) -> Result<ModelSpec> {
    check_input(c.input, 1)?;
    check(c.base_filters >= 1 && c.kernel >= 1, || "base_filters and kernel must be at least 1".into())?;
    check(c.conv_blocks >= 1 && c.convs_per_block >= 1, || "conv_blocks and convs_per_block must be at least 1".into())?;
    check(c.fc_layers >= 1 && c.embedding_units >= 1, || "fc_layers and embedding_units must be at least 1".into())?;
    check_probability("dropout", c.dropout)?;
    check(c.margin > 0.0 && c.margin.is_finite(), || format!("margin must be positive, got {}", c.margin))?;

    let mut b = GraphBuilder::new();
    let mut embeddings = Vec::new();
    for side in ["a", "b"] {
        let mut x = b.input(&format!("{side}/input"), c.input);
        let mut filters = c.base_filters;
        for bi in 1..=c.conv_blocks {
            for ci in 1..=c.convs_per_block {
                let id = format!("{side}/block{bi}.conv{ci}");
                x = b.add(
                    &id,
                    LayerOp::Conv2D { filters, kernel: c.kernel, stride: 1, padding: c.conv_padding },
                    &[&x],
                );
                if c.batch_norm {
                    x = b.add(&format!("{id}.bn"), LayerOp::BatchNorm { epsilon: 1e-3, momentum: BN_MOMENTUM }, &[&x]);
                }
                x = b.add(&format!("{id}.relu"), LayerOp::ReLU, &[&x]);
            }
            x = b.add(
                &format!("{side}/block{bi}.pool"),
                LayerOp::MaxPool { size: 2, stride: 2, padding: Padding::Valid },
                &[&x],
            );
            if c.filter_growth == FilterGrowth::Doubling {
                filters *= 2;
            }
        }
        x = b.add(&format!("{side}/flatten"), LayerOp::Flatten, &[&x]);
        for fi in 1..c.fc_layers {
            x = b.add(&format!("{side}/fc{fi}"), LayerOp::Dense { units: c.embedding_units }, &[&x]);
            x = b.add(&format!("{side}/fc{fi}.relu"), LayerOp::ReLU, &[&x]);
        }
        x = b.add(&format!("{side}/embedding"), LayerOp::Dense { units: c.embedding_units }, &[&x]);
        if c.dropout > 0.0 {
            x = b.add(&format!("{side}/embedding.drop"), LayerOp::Dropout { p: c.dropout }, &[&x]);
        }
        embeddings.push(x);
    }
    let shared = param_nodes(&b, "a/");
    share_branches(&mut b, &shared);
    for e in &embeddings {
        b.output(e);
    }
    let graph = b.finish().map_err(|e| match e {
        Error::Shape(m) => Error::Shape(format!("VGG block stack collapses the {}x{} input: {m}", c.input.1, c.input.2)),
        other => other,
    })?;
    Ok(ModelSpec {
        arch_id: ArchId::VggCl,
        config: ArchConfig::VggCl(c.clone()),
        graph,
        output_semantics: OutputSemantics::EmbeddingDistance,
        label_orientation: LabelOrientation::MatchIsZero,
        init: InitPolicy::NormalConvGlorotNormalDense,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::Shape;

    fn shapes(spec: &ModelSpec) -> std::collections::BTreeMap<String, Shape> {
        spec.graph.infer_shapes().unwrap()
    }

    #[test]
    fn dtc_channel_chain() {
        let spec = build_dtc(&DtcConfig::default()).unwrap();
        let s = shapes(&spec);
        assert_eq!(s["block1.layer2.concat"].channels(), 56);
        assert_eq!(s["transition1.conv"].channels(), 28);
        assert_eq!(s["classifier"], Shape::Flat(1));
        assert_eq!(spec.graph.outputs, vec!["sigmoid".to_string()]);
        assert!(spec.has_dropout());
    }

    #[test]
    fn ds_channel_chain_in_retain_mode() {
        let cfg = DsConfig { compression_mode: CompressionMode::Retain, ..DsConfig::default() };
        let s = shapes(&build_ds(&cfg).unwrap());
        assert_eq!(s["a/block1.layer2.concat"].channels(), 76);
        assert_eq!(s["a/transition1.conv"].channels(), 22);
        assert_eq!(s["a/block2.layer2.concat"].channels(), 82);
    }

    #[test]
    fn ds_default_chain() {
        let s = shapes(&build_ds(&DsConfig::default()).unwrap());
        assert_eq!(s["a/transition1.conv"].channels(), 53);
        assert_eq!(s["a/pool"], Shape::Flat(113 * 12 * 12));
        assert_eq!(s["concat"], Shape::Flat(2 * 113 * 12 * 12));
    }

    #[test]
    fn ds_sharing_counts_trunk_once() {
        let spec = build_ds(&DsConfig::default()).unwrap();
        let mut unshared = spec.graph.clone();
        unshared.shared_groups.clear();
        let shared = spec.graph.count_params().unwrap();
        let full = unshared.count_params().unwrap();
        let trunk = full - shared;
        assert!(trunk > 0);
        // head = shared - trunk
        assert_eq!(full, 2 * trunk + (shared - trunk));
        assert!(shared < full);
    }

    #[test]
    fn vgg_graph_and_count() {
        let spec = build_vgg_siamese(&VggClConfig::default()).unwrap();
        let s = shapes(&spec);
        assert_eq!(s["a/flatten"], Shape::Flat(16 * 10 * 10));
        assert_eq!(spec.graph.outputs.len(), 2);
        assert_eq!(spec.output_semantics, OutputSemantics::EmbeddingDistance);
        assert_eq!(spec.label_orientation, LabelOrientation::MatchIsZero);
        let expected = (9 + 1) * 16 + 2 * (9 * 16 * 16 + 16) + 1600 * 2048 + 2048;
        assert_eq!(spec.graph.count_params().unwrap(), expected as u64);
    }

    #[test]
    fn vgg_collapse_is_reported() {
        let cfg = VggClConfig { input: (1, 12, 12), ..VggClConfig::default() };
        assert!(matches!(build_vgg_siamese(&cfg), Err(Error::Shape(_))));
    }

    #[test]
    fn invalid_configs() {
        assert!(build_dtc(&DtcConfig { growth: 0, ..DtcConfig::default() }).is_err());
        assert!(build_dtc(&DtcConfig { input: (1, 96, 96), ..DtcConfig::default() }).is_err());
        assert!(build_ds(&DsConfig { fc_dropout: 1.0, ..DsConfig::default() }).is_err());
        assert!(build_vgg_siamese(&VggClConfig { margin: 0.0, ..VggClConfig::default() }).is_err());
        assert!(build_dtc(&DtcConfig { compression: 1.0, ..DtcConfig::default() }).is_err());
    }

    #[test]
    fn configs_round_trip_and_rebuild_identically() {
        for arch in [ArchId::Dtc, ArchId::Ds, ArchId::VggCl] {
            let cfg = ArchConfig::default_for(arch);
            let text = serde_json::to_string(&cfg).unwrap();
            let back: ArchConfig = serde_json::from_str(&text).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.build().unwrap(), cfg.build().unwrap());
        }
    }

    #[test]
    fn table_defaults() {
        let d = DtcConfig::default();
        assert_eq!((d.block_layers.as_slice(), d.growth, d.initial_filters), (&[2, 2, 2][..], 12, 32));
        assert_eq!((d.dropout, d.compression, d.bottleneck, d.pooling), (0.2, 0.5, false, Pooling::Avg));
        let s = DsConfig::default();
        assert_eq!((s.block_layers.as_slice(), s.growth, s.initial_filters), (&[2, 2][..], 30, 16));
        assert_eq!((s.densenet_dropout, s.compression, s.fc_units, s.fc_dropout), (0.4, 0.3, 512, 0.7));
        assert_eq!(s.trunk_pooling, TrunkPooling::Flatten);
        let v = VggClConfig::default();
        assert_eq!((v.base_filters, v.kernel, v.fc_layers, v.embedding_units), (16, 3, 1, 2048));
        assert_eq!((v.batch_norm, v.dropout, v.margin), (false, 0.6, 1.0));
    }

    #[test]
    fn arch_id_parsing() {
        assert_eq!("dtc".parse::<ArchId>().unwrap(), ArchId::Dtc);
        assert_eq!("VGG_CL".parse::<ArchId>().unwrap(), ArchId::VggCl);
        assert!("resnet".parse::<ArchId>().is_err());
    }
}
