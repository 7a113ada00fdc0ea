//! Monte Carlo dropout: repeated stochastic passes and std ranking.

use std::fs;
use std::path::Path;

use image::{GrayImage, Luma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{PairDataset, Patch};
use crate::error::{Error, Result};
use crate::exec::{Mode, RunOptions};
use crate::netgraph::LayerOp;
use crate::seeds;
use crate::training::TrainedModel;

pub const DEFAULT_PASSES: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub passes: usize,
    pub seed: u64,
    /// Replaces every dropout probability for the sampling passes.
    pub dropout_override: Option<f64>,
    pub parallel: bool,
}

impl Default for McConfig {
    fn default() -> Self {
        Self { passes: DEFAULT_PASSES, seed: 0, dropout_override: None, parallel: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEntry {
    pub index: usize,
    pub label: u8,
    pub mean: f64,
    /// Population standard deviation (divides by the pass count).
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub entries: Vec<McEntry>,
    pub passes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankDirection {
    Highest,
    Lowest,
}

/// Seed of pass `p` under the splitting scheme used by [`mc_dropout_scores`].
pub fn pass_seed(seed: u64, p: usize) -> u64 {
    seeds::derive_indexed(seed, "mc", p as u64)
}

fn check_dropout(m: &TrainedModel, dropout_override: Option<f64>) -> Result<()> {
    let probs: Vec<f64> = m
        .spec
        .graph
        .nodes
        .iter()
        .filter_map(|n| match n.op {
            LayerOp::Dropout { p } => Some(p),
            _ => None,
        })
        .collect();
    if probs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} has no dropout layer, so every MC-dropout pass would be identical",
            m.spec.arch_id
        )));
    }
    match dropout_override {
        Some(p) if !(0.0..1.0).contains(&p) => Err(Error::InvalidArgument(format!("dropout override {p} outside [0, 1)"))),
        None if probs.iter().all(|&p| p == 0.0) => Err(Error::InvalidArgument(
            "every dropout probability is 0; pass an explicit override to sample anyway".into(),
        )),
        _ => Ok(()),
    }
}

/// `passes` stochastic forward passes with dropout active and batch norm
/// in inference mode; per-pair mean and population std.
pub fn mc_dropout_scores(m: &TrainedModel, d: &PairDataset, cfg: &McConfig) -> Result<McResult> {
    if cfg.passes < 2 {
        return Err(Error::InvalidArgument(format!("MC dropout needs at least 2 passes, got {}", cfg.passes)));
    }
    let seeds: Vec<u64> = (0..cfg.passes).map(|p| pass_seed(cfg.seed, p)).collect();
    mc_dropout_with_seeds(m, d, &seeds, cfg.dropout_override, cfg.parallel)
}

/// Like [`mc_dropout_scores`] with one explicit seed per pass.
pub fn mc_dropout_with_seeds(
    m: &TrainedModel,
    d: &PairDataset,
    pass_seeds: &[u64],
    dropout_override: Option<f64>,
    parallel: bool,
) -> Result<McResult> {
    if pass_seeds.len() < 2 {
        return Err(Error::InvalidArgument(format!("MC dropout needs at least 2 passes, got {}", pass_seeds.len())));
    }
    check_dropout(m, dropout_override)?;
    let opts = RunOptions { mode: Mode::McDropout, dropout_override };
    let samples: Vec<Vec<f64>> = if parallel {
        pass_seeds.par_iter().map(|&s| m.predict(d, opts, s)).collect::<Result<_>>()?
    } else {
        pass_seeds.iter().map(|&s| m.predict(d, opts, s)).collect::<Result<_>>()?
    };
    let t = samples.len() as f64;
    let entries = d
        .pairs()
        .iter()
        .enumerate()
        .map(|(i, pair)| {
            let mean = samples.iter().map(|s| s[i]).sum::<f64>() / t;
            let var = samples.iter().map(|s| (s[i] - mean).powi(2)).sum::<f64>() / t;
            McEntry { index: pair.index, label: pair.label, mean, std: var.sqrt() }
        })
        .collect();
    Ok(McResult { entries, passes: samples.len() })
}

/// Pair indices of the `k` entries with the highest or lowest std; ties
/// go to the smaller index.
pub fn rank_by_std(r: &McResult, k: usize, direction: RankDirection) -> Result<Vec<usize>> {
    if k > r.entries.len() {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds {} pairs", r.entries.len())));
    }
    let mut order: Vec<&McEntry> = r.entries.iter().collect();
    order.sort_by(|a, b| {
        let by_std = match direction {
            RankDirection::Highest => b.std.total_cmp(&a.std),
            RankDirection::Lowest => a.std.total_cmp(&b.std),
        };
        by_std.then(a.index.cmp(&b.index))
    });
    Ok(order.into_iter().take(k).map(|e| e.index).collect())
}

pub fn write_mc_csv(r: &McResult, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["index", "mean", "std"])?;
    for e in &r.entries {
        w.write_record([e.index.to_string(), e.mean.to_string(), e.std.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn blit(img: &mut GrayImage, patch: &Patch, x0: u32, y0: u32) {
    let px = patch.pixels();
    let (lo, hi) = px.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    for y in 0..patch.height() {
        for x in 0..patch.width() {
            let v = (px[y * patch.width() + x] - lo) / span;
            img.put_pixel(x0 + x as u32, y0 + y as u32, Luma([(v * 255.0).round() as u8]));
        }
    }
}

/// One row per listed pair: patch a, patch b and a label bar (white for a
/// match, black otherwise).
pub fn write_thumbnail_grid(d: &PairDataset, indices: &[usize], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if indices.is_empty() {
        return Err(Error::InvalidArgument("thumbnail grid needs at least one pair".into()));
    }
    let (h, w) = d.patch_dims().ok_or_else(|| Error::InvalidArgument("dataset is empty".into()))?;
    let canon = d.canonical_labels();
    let gap = 4u32;
    let bar = 6u32;
    let width = 2 * w as u32 + 3 * gap + bar;
    let height = indices.len() as u32 * (h as u32 + gap) + gap;
    let mut img = GrayImage::from_pixel(width, height, Luma([128]));
    for (row, &idx) in indices.iter().enumerate() {
        let pos = d
            .pairs()
            .iter()
            .position(|p| p.index == idx)
            .ok_or_else(|| Error::InvalidArgument(format!("pair index {idx} is not in the dataset")))?;
        let pair = &d.pairs()[pos];
        let y0 = gap + row as u32 * (h as u32 + gap);
        blit(&mut img, &pair.a, gap, y0);
        blit(&mut img, &pair.b, 2 * gap + w as u32, y0);
        let shade = if canon[pos] == 1 { 255 } else { 0 };
        for y in y0..y0 + h as u32 {
            for x in 0..bar {
                img.put_pixel(3 * gap + 2 * w as u32 + x, y, Luma([shade]));
            }
        }
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path)?;
    Ok(())
}
