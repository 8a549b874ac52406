//! Supervised fine-tuning of the encoder plus regression head, and the
//! error metrics used to score it.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::array::{Array, DenseArray};
use crate::data::ChargingSnippet;
use crate::error::{dim_err, Error, Result};
use crate::model::{self, ModelParams, HEAD_PARAMS};
use crate::optim::{Adam, LrSchedule};
use crate::rng;
use crate::tape::Tape;

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    /// Train only the head, keeping the encoder frozen.
    pub linear_probe: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { epochs: 200, patience: 20, batch_size: 32, peak_lr: 0.01, warmup_fraction: 0.05, linear_probe: false }
    }
}

/// Affine map between capacities in Ah and the head's standardized output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelScaler {
    pub mean: f64,
    pub std: f64,
}

impl LabelScaler {
    pub fn fit(labels: &[f64]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Config("no labels to fit".into()));
        }
        let n = labels.len() as f64;
        let mean = labels.iter().sum::<f64>() / n;
        let var = labels.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
        // a constant label set still needs a usable scale
        let std = libm::sqrt(var).max(1e-3 * mean.abs()).max(1e-6);
        Ok(Self { mean, std })
    }

    pub fn to_unit(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn from_unit(&self, z: f64) -> f64 {
        self.mean + self.std * z
    }
}

/// Encoder and head weights plus the label scale they were trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetunedModel {
    pub params: ModelParams,
    pub labels: LabelScaler,
}

impl FinetunedModel {
    /// Capacity estimates in Ah for normalized `T × C` series.
    pub fn predict(&self, series: &[&DenseArray]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(series.len());
        for chunk in series.chunks(64) {
            let z = head_outputs(&self.params, chunk)?;
            out.extend(z.into_iter().map(|v| self.labels.from_unit(v)));
        }
        Ok(out)
    }

    pub fn predict_snippets(&self, snippets: &[ChargingSnippet]) -> Result<Vec<f64>> {
        let refs: Vec<&DenseArray> = snippets.iter().map(|s| &s.series).collect();
        self.predict(&refs)
    }
}

fn head_outputs(params: &ModelParams, series: &[&DenseArray]) -> Result<Vec<f64>> {
    let cfg = params.config;
    let mut tape = Tape::new();
    let vars = params.register_frozen(&mut tape);
    let x = tape.constant(model::series_rows(series, &cfg)?);
    let p = model::encode_series(&mut tape, &vars, &cfg, x)?;
    let y = model::regress(&mut tape, &vars, &cfg, p)?;
    Ok(tape.value(y).values().iter().map(|&v| v as f64).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    /// Mean squared error on standardized labels over the epoch's batches.
    pub train_loss: f64,
    /// Validation RMSE in Ah, when a validation set is given.
    pub val_rmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FinetuneReport {
    pub epochs: Vec<FinetuneEpoch>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl FinetuneReport {
    /// First epoch whose training loss is at or below `threshold`.
    pub fn epochs_to_reach(&self, threshold: f64) -> Option<usize> {
        self.epochs.iter().find(|e| e.train_loss <= threshold).map(|e| e.epoch)
    }
}

fn labeled_pairs(snippets: &[ChargingSnippet]) -> Result<(Vec<&DenseArray>, Vec<f64>)> {
    let mut xs = Vec::with_capacity(snippets.len());
    let mut ys = Vec::with_capacity(snippets.len());
    for s in snippets {
        let y = s
            .capacity_label_ah
            .ok_or_else(|| Error::Config(alloc::format!("snippet {} has no capacity label", s.snippet_id)))?;
        xs.push(&s.series);
        ys.push(y);
    }
    Ok((xs, ys))
}

/// Fine-tunes from `pretrained` with a fresh head. `train` and `val` hold
/// normalized, labeled snippets; with an empty `val`, early stopping watches
/// the training loss instead. Returns the best-scoring parameters.
pub fn finetune(
    pretrained: &ModelParams,
    train: &[ChargingSnippet],
    val: &[ChargingSnippet],
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<(FinetunedModel, FinetuneReport)> {
    if train.is_empty() {
        return Err(Error::Config("fine-tuning needs at least one labeled snippet".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("fine-tuning epochs and batch size must be positive".into()));
    }
    pretrained.validate()?;
    let (xs, ys) = labeled_pairs(train)?;
    let (val_x, val_y) = labeled_pairs(val)?;
    let scaler = LabelScaler::fit(&ys)?;
    let mcfg = pretrained.config;

    let mut params = pretrained.clone();
    params.reset_head(seed);
    let trainable = |name: &str| {
        if cfg.linear_probe {
            HEAD_PARAMS.contains(&name)
        } else {
            !name.starts_with("loss.")
        }
    };
    let batches = xs.len().div_ceil(cfg.batch_size);
    let schedule = LrSchedule::new(cfg.peak_lr, cfg.epochs * batches, cfg.warmup_fraction)?;
    let mut adam = Adam::default();
    let mut shuffle = rng::stream(seed, rng::ids::SHUFFLE);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut report = FinetuneReport::default();
    let mut best = (f64::INFINITY, params.clone(), 0usize);
    let mut since_best = 0usize;
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&DenseArray> = idx.iter().map(|&i| xs[i]).collect();
            let target: Vec<f32> = idx.iter().map(|&i| scaler.to_unit(ys[i]) as f32).collect();
            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let x = tape.constant(model::series_rows(&batch, &mcfg)?);
            let p = model::encode_series(&mut tape, &vars, &mcfg, x)?;
            let y = model::regress(&mut tape, &vars, &mcfg, p)?;
            let t = tape.constant(Array::new(alloc::vec![idx.len(), 1], target)?);
            let d = tape.sub(y, t)?;
            let sq = tape.mul(d, d)?;
            let loss = tape.mean_all(sq);
            let lv = tape.scalar(loss) as f64;
            if !lv.is_finite() {
                return Err(Error::Divergence { epoch, reason: "non-finite fine-tuning loss".into() });
            }
            let grads = tape.backward(loss)?;
            adam.update(&mut params.tensors, &grads, schedule.at(step), trainable)?;
            step += 1;
            loss_sum += lv * idx.len() as f64;
        }
        let train_loss = loss_sum / xs.len() as f64;
        let val_rmse = if val_x.is_empty() {
            None
        } else {
            let current = FinetunedModel { params: params.clone(), labels: scaler };
            Some(rmse(&current.predict(&val_x)?, &val_y)?)
        };
        let score = val_rmse.unwrap_or(train_loss);
        report.epochs.push(FinetuneEpoch { epoch, train_loss, val_rmse });
        if score < best.0 {
            best = (score, params.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    report.best_epoch = best.2;
    Ok((FinetunedModel { params: best.1, labels: scaler }, report))
}

fn check_lengths(preds: &[f64], labels: &[f64]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(dim_err!("{} predictions for {} labels", preds.len(), labels.len()));
    }
    if preds.is_empty() {
        return Err(dim_err!("metrics need at least one prediction"));
    }
    Ok(())
}

pub fn rmse(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(preds, labels)?;
    let mse = preds.iter().zip(labels).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / preds.len() as f64;
    Ok(libm::sqrt(mse))
}

/// Percentage error plus the number of zero labels that had to be skipped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mape {
    pub percent: f64,
    pub excluded: usize,
}

pub fn mape(preds: &[f64], labels: &[f64]) -> Result<Mape> {
    check_lengths(preds, labels)?;
    let mut sum = 0.0;
    let mut used = 0usize;
    for (p, y) in preds.iter().zip(labels) {
        if *y == 0.0 {
            continue;
        }
        sum += ((p - y) / y).abs();
        used += 1;
    }
    if used == 0 {
        return Err(Error::Validation("every label is zero; MAPE undefined".into()));
    }
    Ok(Mape { percent: 100.0 * sum / used as f64, excluded: preds.len() - used })
}

/// One cell of an experiment table, aggregated over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub protocol: String,
    pub pretrain_corpus: String,
    pub target: String,
    pub seeds: Vec<u64>,
    pub rmse: Vec<f64>,
    pub mape: Vec<f64>,
    /// Validation reconstruction MSE at the end of pretraining, per seed
    /// (empty when the cell has no pretraining).
    pub recon_mse: Vec<f64>,
    pub n_test: usize,
    pub mape_excluded: usize,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, libm::sqrt(var))
}

impl EvalReport {
    pub fn rmse_stats(&self) -> (f64, f64) {
        mean_std(&self.rmse)
    }

    pub fn mape_stats(&self) -> (f64, f64) {
        mean_std(&self.mape)
    }

    pub fn recon_stats(&self) -> Option<(f64, f64)> {
        (!self.recon_mse.is_empty()).then(|| mean_std(&self.recon_mse))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.rmse.len() != self.seeds.len() || self.mape.len() != self.seeds.len() {
            return Err(Error::Validation(alloc::format!("report {} has inconsistent seed columns", self.protocol)));
        }
        if self.rmse.iter().chain(&self.mape).any(|v| !(*v >= 0.0)) {
            return Err(Error::Validation(alloc::format!("report {} has negative or NaN metrics", self.protocol)));
        }
        Ok(())
    }
}
