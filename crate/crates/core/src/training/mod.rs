//! Mini-batch training with early stopping, checkpoints and random
//! hyper-parameter search.

pub mod checkpoint;
mod init;
mod optim;
pub mod search;

use serde::{Deserialize, Serialize};

use crate::architectures::{ArchId, ModelSpec, OutputSemantics};
use crate::dataset::{batches, split_validation, PairDataset};
use crate::error::{Error, Result};
use crate::evaluation::{self, ScoreSet};
use crate::exec::{Activations, Mode, Network, ParamStore, RunOptions};
use crate::losses::{self, ContrastiveConfig};
use crate::seeds;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use init::{init_params, CONV_NORMAL_STD};
pub use optim::{Optimizer, OptimizerKind};
pub use search::{hyperparameter_search, ParamRange, SearchOutcome, SearchSpace, TrialResult, TrialStatus};

/// Pairs per forward pass when scoring.
pub const INFERENCE_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation AUC improvement before stopping.
    pub early_stop_patience: usize,
    pub seed: u64,
    pub validation_fraction: f64,
}

impl TrainConfig {
    pub fn defaults_for(arch: ArchId) -> Self {
        let (optimizer, learning_rate, batch_size) = match arch {
            ArchId::Dtc => (OptimizerKind::Adadelta, 0.03, 128),
            ArchId::Ds => (OptimizerKind::Adadelta, 0.07, 64),
            ArchId::VggCl => (OptimizerKind::Nadam, 0.0002, 256),
        };
        Self {
            optimizer,
            learning_rate,
            batch_size,
            max_epochs: 60,
            early_stop_patience: 10,
            seed: 0,
            validation_fraction: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be finite and non-negative, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config(format!("validation_fraction must lie in (0,1), got {}", self.validation_fraction)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub params: ParamStore,
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were kept; 0 means the initialization.
    pub best_epoch: usize,
    pub train_config: TrainConfig,
    network: Network,
}

impl TrainedModel {
    pub fn new(
        spec: ModelSpec,
        params: ParamStore,
        history: Vec<EpochRecord>,
        best_epoch: usize,
        train_config: TrainConfig,
    ) -> Result<Self> {
        let network = Network::new(&spec.graph)?;
        network.check_params(&params)?;
        Ok(Self { spec, params, history, best_epoch, train_config, network })
    }

    /// Freshly initialized, untrained model.
    pub fn initialized(spec: ModelSpec, train_config: TrainConfig) -> Result<Self> {
        let network = Network::new(&spec.graph)?;
        let mut params = network.zero_params();
        init_params(&mut params, spec.init, train_config.seed);
        Ok(Self { spec, params, history: Vec::new(), best_epoch: 0, train_config, network })
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn param_count(&self) -> Result<u64> {
        self.spec.graph.count_params()
    }

    /// Raw model outputs, one per pair in stored order: match probabilities
    /// or embedding distances depending on the architecture.
    pub fn predict(&self, d: &PairDataset, opts: RunOptions, seed: u64) -> Result<Vec<f64>> {
        check_dims(&self.spec, d)?;
        let positions: Vec<usize> = (0..d.len()).collect();
        let mut scores = Vec::with_capacity(d.len());
        for (chunk_i, chunk) in positions.chunks(INFERENCE_BATCH).enumerate() {
            let inputs = batch_inputs(&self.spec, d, chunk);
            let refs: Vec<&[f32]> = inputs.iter().map(Vec::as_slice).collect();
            let mut rng = seeds::rng(seeds::derive_indexed(seed, "predict", chunk_i as u64));
            let acts = self.network.forward(&self.params, &refs, chunk.len(), opts, &mut rng)?;
            scores.extend(outputs(&self.network, &self.spec, &acts)?);
        }
        Ok(scores)
    }
}

fn check_dims(spec: &ModelSpec, d: &PairDataset) -> Result<()> {
    let want = spec.config.patch_size();
    match d.patch_dims() {
        Some(dims) if dims != want => Err(Error::Shape(format!(
            "{} expects {}x{} patches, dataset {} has {}x{}",
            spec.arch_id,
            want.0,
            want.1,
            d.split_name(),
            dims.0,
            dims.1
        ))),
        _ => Ok(()),
    }
}

/// Model inputs for the pairs at `positions`: one two-channel tensor for
/// two-channel models, one single-channel tensor per branch otherwise.
pub fn batch_inputs(spec: &ModelSpec, d: &PairDataset, positions: &[usize]) -> Vec<Vec<f32>> {
    let pairs = d.pairs();
    if spec.is_siamese() {
        let side = |pick: fn(&crate::dataset::PatchPair) -> &[f32]| {
            positions.iter().flat_map(|&p| pick(&pairs[p]).iter().copied()).collect::<Vec<f32>>()
        };
        vec![side(|p| p.a.pixels()), side(|p| p.b.pixels())]
    } else {
        vec![positions
            .iter()
            .flat_map(|&p| pairs[p].a.pixels().iter().chain(pairs[p].b.pixels()).copied())
            .collect()]
    }
}

fn outputs(net: &Network, spec: &ModelSpec, acts: &Activations) -> Result<Vec<f64>> {
    match spec.output_semantics {
        OutputSemantics::MatchProbability => Ok(net.output(acts, 0).iter().map(|&p| p as f64).collect()),
        OutputSemantics::EmbeddingDistance => {
            let (ea, eb) = (net.output(acts, 0), net.output(acts, 1));
            let units = net.node_numel(net.outputs()[0]);
            ea.chunks_exact(units)
                .zip(eb.chunks_exact(units))
                .map(|(a, b)| {
                    let a: Vec<f64> = a.iter().map(|&v| v as f64).collect();
                    let b: Vec<f64> = b.iter().map(|&v| v as f64).collect();
                    losses::euclidean_distance(&a, &b)
                })
                .collect()
        }
    }
}

/// Mean loss of one train-mode forward pass and the gradient seeds that
/// start the reverse pass.
pub fn batch_loss(net: &Network, spec: &ModelSpec, acts: &Activations, labels: &[u8]) -> Result<(f64, Vec<(usize, Vec<f32>)>)> {
    let n = labels.len() as f64;
    match spec.output_semantics {
        OutputSemantics::MatchProbability => {
            // the sigmoid is fused into the loss: seed at its input
            let sigmoid = net.outputs()[0];
            let logit_node = net.node_inputs(sigmoid)[0];
            let mut total = 0.0;
            let mut seed = Vec::with_capacity(labels.len());
            for (&z, &y) in acts.node(logit_node).iter().zip(labels) {
                let (l, dz) = losses::bce_with_logit(z as f64, y);
                total += l;
                seed.push((dz / n) as f32);
            }
            Ok((total / n, vec![(logit_node, seed)]))
        }
        OutputSemantics::EmbeddingDistance => {
            let cfg = ContrastiveConfig::new(spec.margin().unwrap_or(1.0))?;
            let (ha, hb) = (net.outputs()[0], net.outputs()[1]);
            let units = net.node_numel(ha);
            let (ea, eb) = (acts.node(ha), acts.node(hb));
            let mut da = vec![0f32; ea.len()];
            let mut total = 0.0;
            for (k, &y) in labels.iter().enumerate() {
                let a: Vec<f64> = ea[k * units..(k + 1) * units].iter().map(|&v| v as f64).collect();
                let b: Vec<f64> = eb[k * units..(k + 1) * units].iter().map(|&v| v as f64).collect();
                let d = losses::euclidean_distance(&a, &b)?;
                total += losses::contrastive_loss(d, y, cfg)?;
                let dl_dd = losses::contrastive_loss_grad(d, y, cfg)? / n;
                for (g, dd) in da[k * units..(k + 1) * units].iter_mut().zip(losses::euclidean_distance_grad(&a, &b)?) {
                    *g = (dl_dd * dd) as f32;
                }
            }
            let db = da.iter().map(|g| -g).collect();
            Ok((total / n, vec![(ha, da), (hb, db)]))
        }
    }
}

/// Validation AUC of `params` on `val`.
fn validation_auc(model: &TrainedModel, val: &PairDataset) -> Result<f64> {
    let scores = model.predict(val, RunOptions::new(Mode::Eval), 0)?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Ok(f64::NAN);
    }
    let set = ScoreSet::from_dataset(val, scores, model.spec.output_semantics.into())?;
    Ok(evaluation::auc_trapezoid(&set)?.auc)
}

pub fn train(spec: ModelSpec, data: &PairDataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    train_with_progress(spec, data, cfg, &mut |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with_progress(
    spec: ModelSpec,
    data: &PairDataset,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainedModel> {
    cfg.validate()?;
    if data.orientation() != spec.label_orientation {
        return Err(Error::Validation(format!(
            "{} trains on {:?} labels but the dataset is {:?}; flip the labels first",
            spec.arch_id,
            spec.label_orientation,
            data.orientation()
        )));
    }
    check_dims(&spec, data)?;
    let (train_set, val_set) = split_validation(data, cfg.validation_fraction, seeds::derive(cfg.seed, "validation"))?;
    let val_matches = val_set.match_count();
    if val_matches == 0 || val_matches == val_set.len() {
        return Err(Error::Validation(format!(
            "validation split of {} pairs holds a single class; use more data or a larger validation_fraction",
            val_set.len()
        )));
    }

    let mut model = TrainedModel::initialized(spec, cfg.clone())?;
    let net = model.network.clone();
    let mask: Vec<bool> = model.params.specs().iter().map(|s| s.role.trainable()).collect();
    let sizes: Vec<usize> = model.params.values().iter().map(Vec::len).collect();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, &sizes);
    let dropout_root = seeds::derive(cfg.seed, "dropout");
    let mut best: Option<(f64, ParamStore)> = None;
    let mut since_best = 0;

    for epoch in 1..=cfg.max_epochs {
        let mut loss_sum = 0.0;
        for (bi, batch) in batches(&train_set, cfg.batch_size, true, cfg.seed, epoch)?.iter().enumerate() {
            let inputs = batch_inputs(&model.spec, &train_set, batch);
            let refs: Vec<&[f32]> = inputs.iter().map(Vec::as_slice).collect();
            let labels: Vec<u8> = batch.iter().map(|&p| train_set.pairs()[p].label).collect();
            let mut rng = seeds::rng(seeds::derive_indexed(dropout_root, "batch", ((epoch as u64) << 32) | bi as u64));
            let acts = net.forward(&model.params, &refs, batch.len(), RunOptions::new(Mode::Train), &mut rng)?;
            let (loss, seeds) = batch_loss(&net, &model.spec, &acts, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, batch: bi, loss });
            }
            let grads = net.backward(&model.params, &acts, seeds)?;
            if grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch, batch: bi, loss: f64::NAN });
            }
            opt.step(model.params.values_mut(), &grads, &mask);
            net.update_running_stats(&mut model.params, &acts);
            loss_sum += loss * batch.len() as f64;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let val_auc = validation_auc(&model, &val_set)?;
        let record = EpochRecord { epoch, train_loss, val_auc };
        progress(&record);
        model.history.push(record);
        if !val_auc.is_finite() {
            return Err(Error::Divergence { epoch, batch: 0, loss: train_loss });
        }
        if best.as_ref().is_none_or(|(b, _)| val_auc > *b) {
            best = Some((val_auc, model.params.clone()));
            model.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                break;
            }
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok(model)
}
