//! Patch-pair datasets: loading, label orientation, validation splits and
//! batching.

mod archive;
mod raw;
pub mod synthetic;

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;

pub use archive::{write_archive, ArchiveLayout};
pub use raw::{read_raw_binary, write_raw_binary, RAW_MAGIC};

pub const DEFAULT_PATCH_SIZE: usize = 96;

/// Which label value marks a matching pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LabelOrientation {
    MatchIsOne,
    MatchIsZero,
}

impl LabelOrientation {
    pub fn flipped(self) -> Self {
        match self {
            LabelOrientation::MatchIsOne => LabelOrientation::MatchIsZero,
            LabelOrientation::MatchIsZero => LabelOrientation::MatchIsOne,
        }
    }

    /// Restates `label` (given in this orientation) as a match-is-one label.
    pub fn to_canonical(self, label: u8) -> u8 {
        match self {
            LabelOrientation::MatchIsOne => label,
            LabelOrientation::MatchIsZero => 1 - label,
        }
    }
}

/// A single-channel intensity patch stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Patch {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("patch dimensions must be positive, got {height}x{width}")));
        }
        if pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "patch {height}x{width} needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Format(format!("pixel value {v} outside [0,1]")));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, pixels: vec![0.0; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub a: Arc<Patch>,
    pub b: Arc<Patch>,
    pub label: u8,
    pub index: usize,
}

impl PatchPair {
    pub fn new(a: Patch, b: Patch, label: u8, index: usize) -> Result<Self> {
        if label > 1 {
            return Err(Error::Format(format!("label {label} outside {{0,1}}")));
        }
        if a.dims() != b.dims() {
            return Err(Error::Shape(format!(
                "pair {index}: patch a is {:?} but patch b is {:?}",
                a.dims(),
                b.dims()
            )));
        }
        Ok(Self { a: Arc::new(a), b: Arc::new(b), label, index })
    }
}

/// An ordered, immutable collection of labelled patch pairs.
///
/// Patches are reference counted, so subsets, splits and label flips share
/// pixel storage with the dataset they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset {
    pairs: Vec<PatchPair>,
    split_name: String,
    orientation: LabelOrientation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetFormat {
    PublishedArchive,
    RawBinary,
}

impl PairDataset {
    pub fn new(pairs: Vec<PatchPair>, split_name: impl Into<String>, orientation: LabelOrientation) -> Result<Self> {
        if let Some(first) = pairs.first() {
            let dims = first.a.dims();
            if let Some(bad) = pairs.iter().find(|p| p.a.dims() != dims || p.b.dims() != dims) {
                return Err(Error::Shape(format!(
                    "inconsistent patch dimensions: pair {} is {:?}, expected {:?}",
                    bad.index,
                    bad.a.dims(),
                    dims
                )));
            }
        }
        if let Some(bad) = pairs.iter().find(|p| p.label > 1) {
            return Err(Error::Format(format!("label {} outside {{0,1}}", bad.label)));
        }
        Ok(Self { pairs, split_name: split_name.into(), orientation })
    }

    pub fn pairs(&self) -> &[PatchPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn split_name(&self) -> &str {
        &self.split_name
    }

    pub fn orientation(&self) -> LabelOrientation {
        self.orientation
    }

    /// (height, width) of every patch, `None` for an empty dataset.
    pub fn patch_dims(&self) -> Option<(usize, usize)> {
        self.pairs.first().map(|p| p.a.dims())
    }

    /// Number of matching pairs, whatever the current orientation.
    pub fn match_count(&self) -> usize {
        self.pairs.iter().filter(|p| self.orientation.to_canonical(p.label) == 1).count()
    }

    /// Labels restated in match-is-one convention.
    pub fn canonical_labels(&self) -> Vec<u8> {
        self.pairs.iter().map(|p| self.orientation.to_canonical(p.label)).collect()
    }

    /// A dataset holding the given positions (not pair ids) in order.
    pub fn select(&self, positions: &[usize], split_name: impl Into<String>) -> Self {
        Self {
            pairs: positions.iter().map(|&i| self.pairs[i].clone()).collect(),
            split_name: split_name.into(),
            orientation: self.orientation,
        }
    }

    /// Returns the same data in `orientation`, flipping labels if needed.
    pub fn with_orientation(&self, orientation: LabelOrientation) -> Self {
        if orientation == self.orientation {
            self.clone()
        } else {
            flip_labels(self)
        }
    }

    /// A stratified random subset of `n` pairs (all pairs if `n >= len`).
    pub fn stratified_subset(&self, n: usize, seed: u64) -> Self {
        if n >= self.len() {
            return self.clone();
        }
        let picked = stratified_pick(self, n, seeds::derive(seed, "subset"));
        let mut positions: Vec<usize> = picked;
        positions.sort_unstable();
        self.select(&positions, format!("{}-subset{}", self.split_name, n))
    }
}

/// Loads a dataset in match-is-one orientation with pixels in [0,1].
pub fn load_dataset(path: impl AsRef<Path>, format: DatasetFormat) -> Result<PairDataset> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")));
    }
    match format {
        DatasetFormat::RawBinary => read_raw_binary(path),
        DatasetFormat::PublishedArchive => archive::read_archive(path, &ArchiveLayout::default()),
    }
}

/// Loads one split from the published archive with an explicit layout.
pub fn load_archive(path: impl AsRef<Path>, layout: &ArchiveLayout) -> Result<PairDataset> {
    archive::read_archive(path.as_ref(), layout)
}

/// `y -> 1 - y` on every label, toggling the orientation flag.
pub fn flip_labels(d: &PairDataset) -> PairDataset {
    PairDataset {
        pairs: d
            .pairs
            .iter()
            .map(|p| PatchPair { label: 1 - p.label, ..p.clone() })
            .collect(),
        split_name: d.split_name.clone(),
        orientation: d.orientation.flipped(),
    }
}

/// Picks `n` positions, allocating them across the two label classes by
/// largest remainder so class proportions follow the dataset's.
fn stratified_pick(d: &PairDataset, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = seeds::rng(seed);
    let mut classes: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (pos, p) in d.pairs.iter().enumerate() {
        classes[p.label as usize].push(pos);
    }
    for class in classes.iter_mut() {
        class.shuffle(&mut rng);
    }
    let total = d.len() as f64;
    let quotas: Vec<f64> = classes.iter().map(|c| n as f64 * c.len() as f64 / total).collect();
    let mut take: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut remaining = n - take.iter().sum::<usize>();
    let mut order: Vec<usize> = vec![0, 1];
    order.sort_by(|&x, &y| {
        let rx = quotas[x] - quotas[x].floor();
        let ry = quotas[y] - quotas[y].floor();
        ry.partial_cmp(&rx).unwrap().then(x.cmp(&y))
    });
    for &c in order.iter().cycle().take(4) {
        if remaining == 0 {
            break;
        }
        if take[c] < classes[c].len() {
            take[c] += 1;
            remaining -= 1;
        }
    }
    classes
        .iter()
        .zip(&take)
        .flat_map(|(c, &k)| c[..k].iter().copied())
        .collect()
}

/// Stratified, seeded hold-out split. Both parts keep the input's stored
/// order.
pub fn split_validation(d: &PairDataset, fraction: f64, seed: u64) -> Result<(PairDataset, PairDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("validation fraction {fraction} not in (0,1)")));
    }
    if d.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "cannot split {} pair(s) into two nonempty parts",
            d.len()
        )));
    }
    let n_val = ((d.len() as f64 * fraction).round() as usize).clamp(1, d.len() - 1);
    let mut in_val = vec![false; d.len()];
    for pos in stratified_pick(d, n_val, seed) {
        in_val[pos] = true;
    }
    let (val_pos, train_pos): (Vec<usize>, Vec<usize>) = (0..d.len()).partition(|&i| in_val[i]);
    Ok((
        d.select(&train_pos, format!("{}-train", d.split_name)),
        d.select(&val_pos, format!("{}-val", d.split_name)),
    ))
}

/// Positions of the pairs in each batch of one epoch.
///
/// Without shuffling the stored order is kept; with shuffling the order is a
/// function of `(seed, epoch)` only.
pub fn batches(d: &PairDataset, batch_size: usize, shuffle: bool, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    if d.is_empty() {
        return Err(Error::InvalidArgument("cannot batch an empty dataset".into()));
    }
    let mut order: Vec<usize> = (0..d.len()).collect();
    if shuffle {
        let mut rng = seeds::rng(seeds::derive_indexed(seed, "shuffle", epoch as u64));
        order.shuffle(&mut rng);
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
pub(crate) fn toy_dataset(n: usize, matches: usize, side: usize) -> PairDataset {
    let pairs = (0..n)
        .map(|i| {
            let v = (i % 7) as f32 / 7.0;
            let a = Patch::new(side, side, vec![v; side * side]).unwrap();
            let b = Patch::new(side, side, vec![1.0 - v; side * side]).unwrap();
            PatchPair::new(a, b, u8::from(i < matches), i).unwrap()
        })
        .collect();
    PairDataset::new(pairs, "toy", LabelOrientation::MatchIsOne).unwrap()
}
