//! Forward and reverse-mode execution of a [`LayerGraph`] on f32 batches.
//!
//! Activations are stored per node as `[N, C, H, W]` (spatial) or `[N, D]`
//! (flat) row-major buffers. Parameters live in a [`ParamStore`] keyed by the
//! names from [`LayerGraph::param_specs`], so nodes in a shared group read
//! and accumulate into the same tensors.

mod kernels;

use std::collections::HashMap;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::netgraph::{param_name, LayerGraph, LayerOp, ParamRole, ParamSpec, Shape};
use crate::seeds::Rng;
use kernels::Window;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    specs: Vec<ParamSpec>,
    values: Vec<Vec<f32>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    /// Zero tensors for every spec.
    pub fn zeros(specs: Vec<ParamSpec>) -> Self {
        let values = specs.iter().map(|s| vec![0f32; s.numel()]).collect();
        let index = specs.iter().enumerate().map(|(i, s)| (s.name.clone(), i)).collect();
        Self { specs, values, index }
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn values(&self) -> &[Vec<f32>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Vec<f32>] {
        &mut self.values
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.position(name).map(|i| self.values[i].as_slice())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Vec<f32>> {
        self.position(name).map(|i| &mut self.values[i])
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Replaces the tensor `name`, checking its length.
    pub fn set(&mut self, name: &str, data: Vec<f32>) -> Result<()> {
        let i = self.position(name).ok_or_else(|| Error::Validation(format!("unknown parameter {name}")))?;
        if data.len() != self.specs[i].numel() {
            return Err(Error::Validation(format!(
                "parameter {name} expects {} values, got {}",
                self.specs[i].numel(),
                data.len()
            )));
        }
        self.values[i] = data;
        Ok(())
    }

    pub fn total_numel(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm, dropout active.
    Train,
    /// Running statistics, dropout off.
    Eval,
    /// Running statistics, dropout active.
    McDropout,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub mode: Mode,
    /// Replaces every dropout probability when set.
    pub dropout_override: Option<f64>,
}

impl RunOptions {
    pub fn new(mode: Mode) -> Self {
        Self { mode, dropout_override: None }
    }
}

#[derive(Debug, Clone)]
enum Kernel {
    Input { index: usize },
    Conv { in_c: usize, filters: usize, win: Window },
    Dense { in_units: usize, units: usize },
    BatchNorm { epsilon: f32, momentum: f32, channels: usize, spatial: usize },
    Relu,
    Sigmoid,
    Dropout { p: f64 },
    AvgPool { channels: usize, win: Window },
    MaxPool { channels: usize, win: Window },
    GlobalAvg { channels: usize, spatial: usize },
    GlobalMax { channels: usize, spatial: usize },
    Copy,
    Concat,
}

#[derive(Debug, Clone)]
struct Node {
    kernel: Kernel,
    inputs: Vec<usize>,
    numel: usize,
    /// Parameter positions: weight/bias or gamma/beta/mean/var.
    params: Vec<usize>,
}

#[derive(Debug, Default)]
enum Cache {
    #[default]
    None,
    BatchNorm { xhat: Vec<f32>, inv_std: Vec<f32>, batch_stats: bool },
    Mask(Vec<f32>),
    Argmax(Vec<u32>),
}

/// Node outputs of one forward pass.
#[derive(Debug)]
pub struct Activations {
    n: usize,
    values: Vec<Vec<f32>>,
    caches: Vec<Cache>,
    /// Batch mean and variance per batch-norm node, in train mode.
    bn_batch: Vec<(usize, Vec<f32>, Vec<f32>)>,
}

impl Activations {
    pub fn batch_size(&self) -> usize {
        self.n
    }

    pub fn node(&self, i: usize) -> &[f32] {
        &self.values[i]
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    graph: LayerGraph,
    nodes: Vec<Node>,
    ids: HashMap<String, usize>,
    specs: Vec<ParamSpec>,
    outputs: Vec<usize>,
    input_numel: Vec<usize>,
    last_use: Vec<usize>,
}

fn window(input: Shape, size: usize, stride: usize, padding: crate::netgraph::Padding) -> Result<Window> {
    let Shape::Spatial { height, width, .. } = input else {
        return Err(Error::Shape("windowed op on a flat tensor".into()));
    };
    let (out_h, pad_top) = padding.resolve(height, size, stride).ok_or_else(|| Error::Shape("window larger than input".into()))?;
    let (out_w, pad_left) = padding.resolve(width, size, stride).ok_or_else(|| Error::Shape("window larger than input".into()))?;
    Ok(Window { in_h: height, in_w: width, out_h, out_w, size, stride, pad_top, pad_left })
}

fn spatial(shape: Shape) -> usize {
    match shape {
        Shape::Spatial { height, width, .. } => height * width,
        Shape::Flat(_) => 1,
    }
}

impl Network {
    pub fn new(graph: &LayerGraph) -> Result<Self> {
        let shapes = graph.infer_shapes()?;
        let specs = graph.param_specs()?;
        let spec_index: HashMap<&str, usize> = specs.iter().enumerate().map(|(i, s)| (s.name.as_str(), i)).collect();
        let ids: HashMap<String, usize> = graph.nodes.iter().enumerate().map(|(i, n)| (n.id.clone(), i)).collect();
        let mut nodes = Vec::with_capacity(graph.nodes.len());
        for node in &graph.nodes {
            let out = shapes[&node.id];
            let input = node.inputs.first().map(|i| shapes[i]);
            let owner = graph.owner_of(&node.id);
            let lookup = |roles: &[ParamRole]| -> Vec<usize> {
                roles.iter().map(|&r| spec_index[param_name(owner, r).as_str()]).collect()
            };
            let (kernel, params) = match node.op {
                LayerOp::Input { index } => (Kernel::Input { index }, vec![]),
                LayerOp::Conv2D { filters, kernel, stride, padding } => {
                    let input = input.expect("validated");
                    let win = window(input, kernel, stride, padding)?;
                    (Kernel::Conv { in_c: input.channels(), filters, win }, lookup(&[ParamRole::Weight, ParamRole::Bias]))
                }
                LayerOp::Dense { units } => (
                    Kernel::Dense { in_units: input.expect("validated").numel(), units },
                    lookup(&[ParamRole::Weight, ParamRole::Bias]),
                ),
                LayerOp::BatchNorm { epsilon, momentum } => (
                    Kernel::BatchNorm {
                        epsilon: epsilon as f32,
                        momentum: momentum as f32,
                        channels: out.channels(),
                        spatial: spatial(out),
                    },
                    lookup(&[ParamRole::Gamma, ParamRole::Beta, ParamRole::RunningMean, ParamRole::RunningVar]),
                ),
                LayerOp::ReLU => (Kernel::Relu, vec![]),
                LayerOp::Sigmoid => (Kernel::Sigmoid, vec![]),
                LayerOp::Dropout { p } => (Kernel::Dropout { p }, vec![]),
                LayerOp::AvgPool { size, stride, padding } => {
                    let input = input.expect("validated");
                    (Kernel::AvgPool { channels: input.channels(), win: window(input, size, stride, padding)? }, vec![])
                }
                LayerOp::MaxPool { size, stride, padding } => {
                    let input = input.expect("validated");
                    (Kernel::MaxPool { channels: input.channels(), win: window(input, size, stride, padding)? }, vec![])
                }
                LayerOp::GlobalAvgPool => {
                    let input = input.expect("validated");
                    (Kernel::GlobalAvg { channels: input.channels(), spatial: spatial(input) }, vec![])
                }
                LayerOp::GlobalMaxPool => {
                    let input = input.expect("validated");
                    (Kernel::GlobalMax { channels: input.channels(), spatial: spatial(input) }, vec![])
                }
                LayerOp::Flatten => (Kernel::Copy, vec![]),
                LayerOp::Concat => (Kernel::Concat, vec![]),
            };
            nodes.push(Node { kernel, inputs: node.inputs.iter().map(|i| ids[i]).collect(), numel: out.numel(), params });
        }
        let outputs: Vec<usize> = graph.outputs.iter().map(|o| ids[o]).collect();
        let mut last_use: Vec<usize> = (0..nodes.len()).collect();
        for (i, node) in nodes.iter().enumerate() {
            for &j in &node.inputs {
                last_use[j] = last_use[j].max(i);
            }
        }
        for &o in &outputs {
            last_use[o] = usize::MAX;
        }
        let input_numel = graph.input_shapes.iter().map(|&(c, h, w)| c * h * w).collect();
        Ok(Self { graph: graph.clone(), nodes, ids, specs, outputs, input_numel, last_use })
    }

    pub fn graph(&self) -> &LayerGraph {
        &self.graph
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.ids.get(id).copied()
    }

    pub fn outputs(&self) -> &[usize] {
        &self.outputs
    }

    pub fn node_inputs(&self, i: usize) -> &[usize] {
        &self.nodes[i].inputs
    }

    /// Per-sample size of node `i`'s output.
    pub fn node_numel(&self, i: usize) -> usize {
        self.nodes[i].numel
    }

    pub fn input_numel(&self) -> &[usize] {
        &self.input_numel
    }

    pub fn has_dropout(&self) -> bool {
        self.nodes.iter().any(|n| matches!(n.kernel, Kernel::Dropout { .. }))
    }

    /// Fresh parameter store with the graph's names and shapes.
    pub fn zero_params(&self) -> ParamStore {
        ParamStore::zeros(self.specs.clone())
    }

    /// Checks that `params` has exactly this network's names and shapes.
    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        if params.specs().len() != self.specs.len() {
            return Err(Error::Validation(format!(
                "expected {} parameter tensors, found {}",
                self.specs.len(),
                params.specs().len()
            )));
        }
        for spec in &self.specs {
            let Some(i) = params.position(&spec.name) else {
                return Err(Error::Validation(format!("missing parameter {}", spec.name)));
            };
            if params.specs()[i].shape != spec.shape || params.values()[i].len() != spec.numel() {
                return Err(Error::Validation(format!(
                    "parameter {} has shape {:?}, graph expects {:?}",
                    spec.name,
                    params.specs()[i].shape,
                    spec.shape
                )));
            }
        }
        Ok(())
    }

    /// Runs the graph on a batch of `n` samples. `inputs[k]` holds input
    /// `k` as `[n, C, H, W]`. Outside train mode, intermediate activations
    /// are released once consumed.
    pub fn forward(&self, params: &ParamStore, inputs: &[&[f32]], n: usize, opts: RunOptions, rng: &mut Rng) -> Result<Activations> {
        if inputs.len() != self.input_numel.len() {
            return Err(Error::Shape(format!("graph takes {} inputs, got {}", self.input_numel.len(), inputs.len())));
        }
        for (k, (x, &per)) in inputs.iter().zip(&self.input_numel).enumerate() {
            if x.len() != n * per {
                return Err(Error::Shape(format!("input {k}: expected {} values for batch {n}, got {}", n * per, x.len())));
            }
        }
        let keep_all = opts.mode == Mode::Train;
        let mut values: Vec<Vec<f32>> = vec![Vec::new(); self.nodes.len()];
        let mut caches: Vec<Cache> = (0..self.nodes.len()).map(|_| Cache::None).collect();
        let mut bn_batch = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let x: &[f32] = node.inputs.first().map(|&j| values[j].as_slice()).unwrap_or(&[]);
            let in_per = node.inputs.first().map(|&j| self.nodes[j].numel).unwrap_or(0);
            let mut out = vec![0f32; n * node.numel];
            match &node.kernel {
                Kernel::Input { index } => out.copy_from_slice(inputs[*index]),
                Kernel::Conv { in_c, filters, win } => {
                    let (w, b) = (&params.values[node.params[0]], &params.values[node.params[1]]);
                    let (ckk, p) = (in_c * win.size * win.size, win.out_h * win.out_w);
                    let mut cols = if win.is_identity() { Vec::new() } else { vec![0f32; ckk * p] };
                    for s in 0..n {
                        let xs = &x[s * in_per..(s + 1) * in_per];
                        let os = &mut out[s * node.numel..(s + 1) * node.numel];
                        let src = if win.is_identity() {
                            xs
                        } else {
                            kernels::im2col(xs, *in_c, win, &mut cols);
                            &cols
                        };
                        kernels::gemm(*filters, ckk, p, w, false, src, false, os, 0.0);
                        for (f, row) in os.chunks_exact_mut(p).enumerate() {
                            row.iter_mut().for_each(|v| *v += b[f]);
                        }
                    }
                }
                Kernel::Dense { in_units, units } => {
                    let (w, b) = (&params.values[node.params[0]], &params.values[node.params[1]]);
                    kernels::gemm(n, *in_units, *units, x, false, w, false, &mut out, 0.0);
                    for row in out.chunks_exact_mut(*units) {
                        row.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
                    }
                }
                Kernel::BatchNorm { epsilon, channels, spatial, .. } => {
                    let [g, be, rm, rv] = [0, 1, 2, 3].map(|k| &params.values[node.params[k]]);
                    let m = n * spatial;
                    let mut xhat = vec![0f32; out.len()];
                    let mut inv_std = vec![0f32; *channels];
                    let batch_stats = opts.mode == Mode::Train;
                    let (mut means, mut vars) = (vec![0f32; *channels], vec![0f32; *channels]);
                    for c in 0..*channels {
                        let idx = |s: usize| (s * channels + c) * spatial;
                        let (mean, var) = if batch_stats {
                            let mut sum = 0f64;
                            for s in 0..n {
                                sum += x[idx(s)..idx(s) + spatial].iter().map(|&v| v as f64).sum::<f64>();
                            }
                            let mean = sum / m as f64;
                            let mut sq = 0f64;
                            for s in 0..n {
                                sq += x[idx(s)..idx(s) + spatial].iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>();
                            }
                            (mean as f32, (sq / m as f64) as f32)
                        } else {
                            (rm[c], rv[c])
                        };
                        means[c] = mean;
                        vars[c] = var;
                        let inv = 1.0 / (var + epsilon).sqrt();
                        inv_std[c] = inv;
                        for s in 0..n {
                            let r = idx(s)..idx(s) + spatial;
                            for ((o, h), &v) in out[r.clone()].iter_mut().zip(&mut xhat[r.clone()]).zip(&x[r]) {
                                *h = (v - mean) * inv;
                                *o = g[c] * *h + be[c];
                            }
                        }
                    }
                    if batch_stats {
                        bn_batch.push((i, means, vars));
                    }
                    caches[i] = Cache::BatchNorm { xhat, inv_std, batch_stats };
                }
                Kernel::Relu => out.iter_mut().zip(x).for_each(|(o, &v)| *o = v.max(0.0)),
                Kernel::Sigmoid => out.iter_mut().zip(x).for_each(|(o, &v)| *o = 1.0 / (1.0 + (-v).exp())),
                Kernel::Dropout { p } => {
                    let p = opts.dropout_override.unwrap_or(*p);
                    if opts.mode != Mode::Eval && p > 0.0 {
                        let scale = (1.0 / (1.0 - p)) as f32;
                        let mask: Vec<f32> = (0..out.len()).map(|_| if rng.random::<f64>() < p { 0.0 } else { scale }).collect();
                        out.iter_mut().zip(x).zip(&mask).for_each(|((o, &v), &k)| *o = v * k);
                        caches[i] = Cache::Mask(mask);
                    } else {
                        out.copy_from_slice(x);
                    }
                }
                Kernel::AvgPool { channels, win } => {
                    let (ip, op) = (win.in_h * win.in_w, win.out_h * win.out_w);
                    for sc in 0..n * channels {
                        kernels::avg_pool(&x[sc * ip..(sc + 1) * ip], win, &mut out[sc * op..(sc + 1) * op]);
                    }
                }
                Kernel::MaxPool { channels, win } => {
                    let (ip, op) = (win.in_h * win.in_w, win.out_h * win.out_w);
                    let mut arg = vec![0u32; out.len()];
                    for sc in 0..n * channels {
                        let r = sc * op..(sc + 1) * op;
                        kernels::max_pool(&x[sc * ip..(sc + 1) * ip], win, &mut out[r.clone()], &mut arg[r]);
                    }
                    caches[i] = Cache::Argmax(arg);
                }
                Kernel::GlobalAvg { channels, spatial } => {
                    for (o, plane) in out.iter_mut().zip(x.chunks_exact(*spatial)).take(n * channels) {
                        *o = plane.iter().sum::<f32>() / *spatial as f32;
                    }
                }
                Kernel::GlobalMax { channels, spatial } => {
                    let mut arg = vec![0u32; out.len()];
                    for ((o, a), plane) in out.iter_mut().zip(&mut arg).zip(x.chunks_exact(*spatial)).take(n * channels) {
                        let (k, v) = plane
                            .iter()
                            .enumerate()
                            .fold((0, f32::NEG_INFINITY), |(bk, bv), (k, &v)| if v > bv { (k, v) } else { (bk, bv) });
                        *o = v;
                        *a = k as u32;
                    }
                    caches[i] = Cache::Argmax(arg);
                }
                Kernel::Copy => out.copy_from_slice(x),
                Kernel::Concat => {
                    let mut offset = 0;
                    for &j in &node.inputs {
                        let per = self.nodes[j].numel;
                        for s in 0..n {
                            out[s * node.numel + offset..s * node.numel + offset + per]
                                .copy_from_slice(&values[j][s * per..(s + 1) * per]);
                        }
                        offset += per;
                    }
                }
            }
            values[i] = out;
            if !keep_all {
                for &j in &node.inputs {
                    if self.last_use[j] == i {
                        values[j] = Vec::new();
                        caches[j] = Cache::None;
                    }
                }
            }
        }
        Ok(Activations { n, values, caches, bn_batch })
    }

    /// Output head `k` of a forward pass, `[n, units]`.
    pub fn output<'a>(&self, acts: &'a Activations, k: usize) -> &'a [f32] {
        &acts.values[self.outputs[k]]
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn update_running_stats(&self, params: &mut ParamStore, acts: &Activations) {
        for (i, mean, var) in &acts.bn_batch {
            let node = &self.nodes[*i];
            let Kernel::BatchNorm { momentum, spatial, .. } = node.kernel else { continue };
            let m = (acts.n * spatial) as f32;
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            let (pm, pv) = (node.params[2], node.params[3]);
            for (r, &b) in params.values[pm].iter_mut().zip(mean) {
                *r = momentum * *r + (1.0 - momentum) * b;
            }
            for (r, &b) in params.values[pv].iter_mut().zip(var) {
                *r = momentum * *r + (1.0 - momentum) * b * unbias;
            }
        }
    }

    /// Reverse pass from gradients seeded at arbitrary nodes. Returns one
    /// gradient tensor per parameter (zero for running statistics); shared
    /// nodes accumulate into their owner's tensors. Requires a train-mode
    /// (fully retained) forward pass.
    pub fn backward(&self, params: &ParamStore, acts: &Activations, seeds: Vec<(usize, Vec<f32>)>) -> Result<Vec<Vec<f32>>> {
        let n = acts.n;
        let mut grads: Vec<Vec<f32>> = params.values.iter().map(|v| vec![0f32; v.len()]).collect();
        let mut dvals: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        for (i, g) in seeds {
            if g.len() != n * self.nodes[i].numel {
                return Err(Error::Shape(format!("gradient seed for node {i} has {} values, expected {}", g.len(), n * self.nodes[i].numel)));
            }
            accumulate(&mut dvals[i], g);
        }
        for (i, node) in self.nodes.iter().enumerate().rev() {
            let Some(dy) = dvals[i].take() else { continue };
            let Some(&j) = node.inputs.first() else { continue };
            if acts.values[j].len() != n * self.nodes[j].numel && !matches!(node.kernel, Kernel::Concat) {
                return Err(Error::Shape("backward needs a train-mode forward pass".into()));
            }
            let x = &acts.values[j];
            let in_per = self.nodes[j].numel;
            let wants_dx = !matches!(self.nodes[j].kernel, Kernel::Input { .. });
            let dx: Option<Vec<f32>> = match &node.kernel {
                Kernel::Input { .. } => None,
                Kernel::Conv { in_c, filters, win } => {
                    let w = &params.values[node.params[0]];
                    let (ckk, p) = (in_c * win.size * win.size, win.out_h * win.out_w);
                    let mut dw = vec![0f32; w.len()];
                    let mut db = vec![0f32; *filters];
                    let mut cols = if win.is_identity() { Vec::new() } else { vec![0f32; ckk * p] };
                    let mut dcols = vec![0f32; ckk * p];
                    let mut dx = if wants_dx { vec![0f32; n * in_per] } else { Vec::new() };
                    for s in 0..n {
                        let xs = &x[s * in_per..(s + 1) * in_per];
                        let ds = &dy[s * node.numel..(s + 1) * node.numel];
                        let src = if win.is_identity() {
                            xs
                        } else {
                            kernels::im2col(xs, *in_c, win, &mut cols);
                            &cols
                        };
                        kernels::gemm(*filters, p, ckk, ds, false, src, true, &mut dw, 1.0);
                        for (f, row) in ds.chunks_exact(p).enumerate() {
                            db[f] += row.iter().sum::<f32>();
                        }
                        if wants_dx {
                            let dxs = &mut dx[s * in_per..(s + 1) * in_per];
                            if win.is_identity() {
                                kernels::gemm(ckk, *filters, p, w, true, ds, false, dxs, 1.0);
                            } else {
                                kernels::gemm(ckk, *filters, p, w, true, ds, false, &mut dcols, 0.0);
                                kernels::col2im(&dcols, *in_c, win, dxs);
                            }
                        }
                    }
                    add_into(&mut grads[node.params[0]], &dw);
                    add_into(&mut grads[node.params[1]], &db);
                    wants_dx.then_some(dx)
                }
                Kernel::Dense { in_units, units } => {
                    let w = &params.values[node.params[0]];
                    kernels::gemm(*in_units, n, *units, x, true, &dy, false, &mut grads[node.params[0]], 1.0);
                    let db = &mut grads[node.params[1]];
                    for row in dy.chunks_exact(*units) {
                        db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                    }
                    wants_dx.then(|| {
                        let mut dx = vec![0f32; n * in_units];
                        kernels::gemm(n, *units, *in_units, &dy, false, w, true, &mut dx, 0.0);
                        dx
                    })
                }
                Kernel::BatchNorm { channels, spatial, .. } => {
                    let Cache::BatchNorm { xhat, inv_std, batch_stats } = &acts.caches[i] else {
                        return Err(Error::Shape("missing batch-norm cache".into()));
                    };
                    let gamma = &params.values[node.params[0]];
                    let m = (n * spatial) as f32;
                    let mut dx = vec![0f32; dy.len()];
                    let (mut dgamma, mut dbeta) = (vec![0f32; *channels], vec![0f32; *channels]);
                    for c in 0..*channels {
                        let idx = |s: usize| (s * channels + c) * spatial;
                        let (mut sum_dy, mut sum_dy_xhat) = (0f64, 0f64);
                        for s in 0..n {
                            let r = idx(s)..idx(s) + spatial;
                            for (&g, &h) in dy[r.clone()].iter().zip(&xhat[r]) {
                                sum_dy += g as f64;
                                sum_dy_xhat += (g * h) as f64;
                            }
                        }
                        dgamma[c] = sum_dy_xhat as f32;
                        dbeta[c] = sum_dy as f32;
                        let k = gamma[c] * inv_std[c];
                        for s in 0..n {
                            let r = idx(s)..idx(s) + spatial;
                            for ((d, &g), &h) in dx[r.clone()].iter_mut().zip(&dy[r.clone()]).zip(&xhat[r]) {
                                *d = if *batch_stats {
                                    k * (g - (sum_dy as f32) / m - h * (sum_dy_xhat as f32) / m)
                                } else {
                                    k * g
                                };
                            }
                        }
                    }
                    add_into(&mut grads[node.params[0]], &dgamma);
                    add_into(&mut grads[node.params[1]], &dbeta);
                    Some(dx)
                }
                Kernel::Relu => Some(dy.iter().zip(&acts.values[i]).map(|(&g, &y)| if y > 0.0 { g } else { 0.0 }).collect()),
                Kernel::Sigmoid => Some(dy.iter().zip(&acts.values[i]).map(|(&g, &y)| g * y * (1.0 - y)).collect()),
                Kernel::Dropout { .. } => match &acts.caches[i] {
                    Cache::Mask(mask) => Some(dy.iter().zip(mask).map(|(&g, &k)| g * k).collect()),
                    _ => Some(dy),
                },
                Kernel::AvgPool { channels, win } => {
                    let (ip, op) = (win.in_h * win.in_w, win.out_h * win.out_w);
                    let mut dx = vec![0f32; n * in_per];
                    for sc in 0..n * channels {
                        kernels::avg_pool_backward(&dy[sc * op..(sc + 1) * op], win, &mut dx[sc * ip..(sc + 1) * ip]);
                    }
                    Some(dx)
                }
                Kernel::MaxPool { channels, win } => {
                    let Cache::Argmax(arg) = &acts.caches[i] else {
                        return Err(Error::Shape("missing pooling cache".into()));
                    };
                    let (ip, op) = (win.in_h * win.in_w, win.out_h * win.out_w);
                    let mut dx = vec![0f32; n * in_per];
                    for sc in 0..n * channels {
                        for k in sc * op..(sc + 1) * op {
                            dx[sc * ip + arg[k] as usize] += dy[k];
                        }
                    }
                    Some(dx)
                }
                Kernel::GlobalAvg { spatial, .. } => {
                    let mut dx = vec![0f32; n * in_per];
                    for (plane, &g) in dx.chunks_exact_mut(*spatial).zip(&dy) {
                        plane.fill(g / *spatial as f32);
                    }
                    Some(dx)
                }
                Kernel::GlobalMax { spatial, .. } => {
                    let Cache::Argmax(arg) = &acts.caches[i] else {
                        return Err(Error::Shape("missing pooling cache".into()));
                    };
                    let mut dx = vec![0f32; n * in_per];
                    for (k, (&g, &a)) in dy.iter().zip(arg).enumerate() {
                        dx[k * spatial + a as usize] = g;
                    }
                    Some(dx)
                }
                Kernel::Copy => Some(dy),
                Kernel::Concat => {
                    let mut offset = 0;
                    for &j in &node.inputs {
                        let per = self.nodes[j].numel;
                        if !matches!(self.nodes[j].kernel, Kernel::Input { .. }) {
                            let mut part = vec![0f32; n * per];
                            for s in 0..n {
                                part[s * per..(s + 1) * per]
                                    .copy_from_slice(&dy[s * node.numel + offset..s * node.numel + offset + per]);
                            }
                            accumulate(&mut dvals[j], part);
                        }
                        offset += per;
                    }
                    None
                }
            };
            if let Some(dx) = dx {
                if wants_dx {
                    accumulate(&mut dvals[j], dx);
                }
            }
        }
        for spec_i in 0..self.specs.len() {
            if !self.specs[spec_i].role.trainable() {
                grads[spec_i].fill(0.0);
            }
        }
        Ok(grads)
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn accumulate(slot: &mut Option<Vec<f32>>, g: Vec<f32>) {
    match slot {
        Some(existing) => add_into(existing, &g),
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{GraphBuilder, Padding};
    use crate::seeds;

    fn seeded_params(net: &Network, seed: u64) -> ParamStore {
        let mut p = net.zero_params();
        let mut rng = seeds::rng(seed);
        for (spec, v) in p.specs.clone().iter().zip(p.values_mut()) {
            for x in v.iter_mut() {
                *x = match spec.role {
                    ParamRole::RunningVar => rng.random_range(0.5..1.5),
                    ParamRole::Gamma => rng.random_range(0.5..1.5),
                    _ => rng.random_range(-0.5..0.5),
                };
            }
        }
        p
    }

    /// A small graph touching every kernel, with one scalar output.
    fn zoo() -> Network {
        let mut b = GraphBuilder::new();
        let x = b.input("x", (2, 7, 6));
        let y = b.input("y", (2, 7, 6));
        let c1 = b.add("c1", LayerOp::Conv2D { filters: 3, kernel: 3, stride: 2, padding: Padding::Same }, &[&x]);
        let c2 = b.add("c2", LayerOp::Conv2D { filters: 3, kernel: 3, stride: 2, padding: Padding::Same }, &[&y]);
        b.share(vec![c1.clone(), c2.clone()]);
        let cat = b.add("cat", LayerOp::Concat, &[&c1, &c2]);
        let n = b.add("bn", LayerOp::BatchNorm { epsilon: 1e-3, momentum: 0.9 }, &[&cat]);
        let r = b.add("relu", LayerOp::ReLU, &[&n]);
        let one = b.add("one", LayerOp::Conv2D { filters: 4, kernel: 1, stride: 1, padding: Padding::Same }, &[&r]);
        let mp = b.add("mp", LayerOp::MaxPool { size: 3, stride: 2, padding: Padding::Same }, &[&one]);
        let ap = b.add("ap", LayerOp::AvgPool { size: 2, stride: 1, padding: Padding::Valid }, &[&one]);
        let ga = b.add("ga", LayerOp::GlobalAvgPool, &[&mp]);
        let gm = b.add("gm", LayerOp::GlobalMaxPool, &[&ap]);
        let f = b.add("f", LayerOp::Flatten, &[&mp]);
        let cat2 = b.add("cat2", LayerOp::Concat, &[&ga, &gm, &f]);
        let d = b.add("d", LayerOp::Dense { units: 5 }, &[&cat2]);
        let bn2 = b.add("bn2", LayerOp::BatchNorm { epsilon: 1e-3, momentum: 0.9 }, &[&d]);
        let s = b.add("s", LayerOp::Sigmoid, &[&bn2]);
        let o = b.add("o", LayerOp::Dense { units: 1 }, &[&s]);
        b.output(&o);
        Network::new(&b.finish().unwrap()).unwrap()
    }

    fn inputs(n: usize, seed: u64) -> (Vec<f32>, Vec<f32>) {
        let mut rng = seeds::rng(seed);
        let mut v = || (0..n * 84).map(|_| rng.random_range(0.0..1.0)).collect::<Vec<f32>>();
        (v(), v())
    }

    /// Loss = sum of outputs weighted by fixed coefficients, in f64.
    fn loss(net: &Network, p: &ParamStore, x: &[f32], y: &[f32], n: usize) -> f64 {
        let acts = net.forward(p, &[x, y], n, RunOptions::new(Mode::Train), &mut seeds::rng(0)).unwrap();
        net.output(&acts, 0).iter().enumerate().map(|(k, &v)| (k as f64 + 1.0) * v as f64).sum()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let net = zoo();
        let n = 3;
        let (x, y) = inputs(n, 1);
        let p = seeded_params(&net, 2);
        let acts = net.forward(&p, &[&x, &y], n, RunOptions::new(Mode::Train), &mut seeds::rng(0)).unwrap();
        let seed: Vec<f32> = (0..n).map(|k| k as f32 + 1.0).collect();
        let grads = net.backward(&p, &acts, vec![(net.outputs()[0], seed)]).unwrap();
        let mut checked = 0;
        for (pi, spec) in p.specs().iter().enumerate() {
            if !spec.role.trainable() {
                assert!(grads[pi].iter().all(|&g| g == 0.0));
                continue;
            }
            for k in (0..spec.numel()).step_by(spec.numel().div_ceil(4)) {
                let h = 1e-3f32;
                let mut plus = p.clone();
                plus.values_mut()[pi][k] += h;
                let mut minus = p.clone();
                minus.values_mut()[pi][k] -= h;
                let fd = (loss(&net, &plus, &x, &y, n) - loss(&net, &minus, &x, &y, n)) / (2.0 * h as f64);
                let an = grads[pi][k] as f64;
                let tol = 2e-2 * fd.abs().max(an.abs()).max(0.05);
                assert!((fd - an).abs() <= tol, "{}[{k}]: analytic {an} vs numeric {fd}", spec.name);
                checked += 1;
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn shared_nodes_use_one_tensor() {
        let net = zoo();
        assert!(net.param_specs().iter().any(|s| s.name == "c1.weight"));
        assert!(!net.param_specs().iter().any(|s| s.name.starts_with("c2.")));
    }

    #[test]
    fn eval_mode_is_deterministic_and_releases_buffers() {
        let net = zoo();
        let (x, y) = inputs(2, 5);
        let p = seeded_params(&net, 3);
        let run = |seed| {
            let acts = net.forward(&p, &[&x, &y], 2, RunOptions::new(Mode::Eval), &mut seeds::rng(seed)).unwrap();
            assert!(acts.node(net.node_index("c1").unwrap()).is_empty());
            net.output(&acts, 0).to_vec()
        };
        assert_eq!(run(1), run(2));
    }

    #[test]
    fn batch_statistics_and_running_update() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", (2, 1, 2));
        let n = b.add("bn", LayerOp::BatchNorm { epsilon: 1e-5, momentum: 0.5 }, &[&x]);
        b.output(&n);
        let net = Network::new(&b.finish().unwrap()).unwrap();
        let mut p = net.zero_params();
        p.set("bn.gamma", vec![1.0, 2.0]).unwrap();
        p.set("bn.running_var", vec![1.0, 1.0]).unwrap();
        // channel 0 sees 1,3,5,7; channel 1 sees 0 four times
        let data = [1.0, 3.0, 0.0, 0.0, 5.0, 7.0, 0.0, 0.0];
        let acts = net.forward(&p, &[&data], 2, RunOptions::new(Mode::Train), &mut seeds::rng(0)).unwrap();
        let out = net.output(&acts, 0);
        let inv = 1.0 / (5.0f32 + 1e-5).sqrt();
        assert!((out[0] - (-3.0 * inv)).abs() < 1e-6);
        assert_eq!(out[2], 0.0);
        net.update_running_stats(&mut p, &acts);
        assert_eq!(p.get("bn.running_mean").unwrap(), &[2.0, 0.0]);
        let unbiased = 20.0 / 3.0;
        assert!((p.get("bn.running_var").unwrap()[0] - (0.5 + 0.5 * unbiased)).abs() < 1e-5);
    }

    #[test]
    fn dropout_modes() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", (1, 10, 10));
        let d = b.add("d", LayerOp::Dropout { p: 0.5 }, &[&x]);
        b.output(&d);
        let net = Network::new(&b.finish().unwrap()).unwrap();
        let p = net.zero_params();
        let ones = vec![1f32; 100];
        let run = |opts, seed| net.forward(&p, &[&ones], 1, opts, &mut seeds::rng(seed)).unwrap().node(1).to_vec();
        assert_eq!(run(RunOptions::new(Mode::Eval), 0), ones);
        let mc = run(RunOptions::new(Mode::McDropout), 0);
        assert!(mc.iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(mc.contains(&0.0));
        assert_eq!(mc, run(RunOptions::new(Mode::McDropout), 0));
        let off = RunOptions { mode: Mode::McDropout, dropout_override: Some(0.0) };
        assert_eq!(run(off, 0), ones);
    }

    #[test]
    fn rejects_bad_inputs_and_params() {
        let net = zoo();
        let p = net.zero_params();
        let short = vec![0f32; 10];
        assert!(net.forward(&p, &[&short, &short], 1, RunOptions::new(Mode::Eval), &mut seeds::rng(0)).is_err());
        let mut other = p.clone();
        other.specs[0].shape = vec![1];
        assert!(net.check_params(&other).is_err());
        assert!(net.check_params(&p).is_ok());
    }
}
