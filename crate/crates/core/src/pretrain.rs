//! Self-supervised pretraining: contrastive similarity between series
//! representations and similarity-weighted masked reconstruction, balanced by
//! learnable log-variances.
//!
//! A batch of `b` snippets yields `M = b·C` univariate series. Each series
//! appears twice in the batch matrix: row `2k` holds original series `k` and
//! row `2k + 1` its masked copy, so the positive of row `r` is `r ^ 1`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::array::{matmul, Array, DenseArray};
use crate::error::{dim_err, Error, Result};
use crate::gradcheck::ParamVars;
use crate::masking::channel_masks;
use crate::model::{self, ModelConfig, ModelParams, LOGVAR_C, LOGVAR_R};
use crate::optim::{Adam, LrSchedule};
use crate::real::Real;
use crate::rng::{self, Rng};
use crate::tape::{contrastive_terms_f64, softmax_rows_value, Tape, Var};

/// Training hyperparameters for the pretraining loop.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub tau: f64,
    pub mask_ratio: f64,
    pub mean_masked_run: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub use_contrastive: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            mask_ratio: 0.5,
            mean_masked_run: crate::masking::DEFAULT_MEAN_MASKED_RUN,
            batch_size: 32,
            epochs: 50,
            peak_lr: 0.01,
            warmup_fraction: 0.05,
            use_contrastive: true,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Parameter(alloc::format!("temperature must be positive, got {}", self.tau)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Parameter(alloc::format!("mask ratio {} outside [0, 1]", self.mask_ratio)));
        }
        LrSchedule::new(self.peak_lr, 1, self.warmup_fraction)?;
        Ok(())
    }
}

/// Cosine similarities of a batch and the reconstruction weights derived
/// from them.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityRecord {
    pub matrix: DenseArray,
    pub tau: f64,
    /// Row `i` is the softmax of `matrix[i, j] / tau` over `j ≠ i`.
    pub weights: DenseArray,
}

impl SimilarityRecord {
    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }

    /// Bytes held by the similarity and weight matrices.
    pub fn memory_bytes(&self) -> usize {
        (self.matrix.len() + self.weights.len()) * core::mem::size_of::<f32>()
    }
}

/// Row `r`'s positive partner under the interleaved layout.
pub fn interleaved_positives(rows: usize) -> Vec<usize> {
    (0..rows).map(|r| r ^ 1).collect()
}

/// Even rows: the original series.
pub fn original_rows(rows: usize) -> Vec<usize> {
    (0..rows).step_by(2).collect()
}

/// Builds `D` and its off-diagonal softmax from `2M × d_h` representations.
pub fn similarity_matrix(reps: &DenseArray, tau: f64) -> Result<SimilarityRecord> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(alloc::format!("temperature must be positive, got {tau}")));
    }
    if reps.shape().len() != 2 {
        return Err(dim_err!("representations must be 2-D, got {:?}", reps.shape()));
    }
    let mut tape: Tape = Tape::new();
    let s = tape.constant(reps.clone());
    let d = tape.cosine_similarity(s)?;
    let matrix = tape.value(d).clone();
    let weights = softmax_rows_value(&matrix, tau, true)?;
    Ok(SimilarityRecord { matrix, tau, weights })
}

/// Per-anchor contrastive terms.
pub fn contrastive_terms(record: &SimilarityRecord, positives: &[usize]) -> Result<Vec<f64>> {
    let n = record.rows();
    if positives.len() != n {
        return Err(Error::Pairing(alloc::format!("{} positives for {} anchors", positives.len(), n)));
    }
    for (a, &p) in positives.iter().enumerate() {
        if p >= n || p == a {
            return Err(Error::Pairing(alloc::format!("anchor {a} has invalid positive {p}")));
        }
    }
    Ok(contrastive_terms_f64(&record.matrix, positives, record.tau)?.1)
}

/// Sum of the per-anchor terms over every row.
pub fn contrastive_loss(record: &SimilarityRecord, positives: &[usize]) -> Result<f64> {
    Ok(contrastive_terms(record, positives)?.iter().sum())
}

/// Mixes point-wise representations (`2M × (T·d_f)`) with the weights of the
/// rows listed in `targets`; returns `targets.len() × (T·d_f)`.
pub fn weighted_reconstruction(record: &SimilarityRecord, pointwise: &DenseArray, targets: &[usize]) -> Result<DenseArray> {
    let n = record.rows();
    if pointwise.rows() != n {
        return Err(dim_err!("{} point-wise rows for a {n}-row similarity matrix", pointwise.rows()));
    }
    let mut sel = Vec::with_capacity(targets.len() * n);
    for &t in targets {
        if t >= n {
            return Err(dim_err!("target row {t} out of range"));
        }
        sel.extend_from_slice(record.weights.row(t));
    }
    matmul(&Array::new(vec![targets.len(), n], sel)?, pointwise)
}

/// Squared error of each series, summed over its entries.
pub fn reconstruction_errors(originals: &[DenseArray], reconstructions: &[DenseArray]) -> Result<Vec<f64>> {
    if originals.len() != reconstructions.len() {
        return Err(dim_err!("{} originals, {} reconstructions", originals.len(), reconstructions.len()));
    }
    originals
        .iter()
        .zip(reconstructions)
        .map(|(o, r)| {
            if o.shape() != r.shape() {
                return Err(dim_err!("shape {:?} vs {:?}", o.shape(), r.shape()));
            }
            Ok(o.values().iter().zip(r.values()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum())
        })
        .collect()
}

/// Mean squared error over every entry of every series.
pub fn reconstruction_loss(originals: &[DenseArray], reconstructions: &[DenseArray]) -> Result<f64> {
    let errs = reconstruction_errors(originals, reconstructions)?;
    let count: usize = originals.iter().map(|o| o.len()).sum();
    if count == 0 {
        return Err(dim_err!("empty reconstruction batch"));
    }
    Ok(errs.iter().sum::<f64>() / count as f64)
}

/// The two learnable log-variances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UncertaintyWeights {
    pub logvar_r: f64,
    pub logvar_c: f64,
}

impl UncertaintyWeights {
    pub fn from_params(params: &ModelParams) -> Result<Self> {
        Ok(Self {
            logvar_r: params.get(LOGVAR_R)?.values()[0] as f64,
            logvar_c: params.get(LOGVAR_C)?.values()[0] as f64,
        })
    }

    pub fn weight_r(&self) -> f64 {
        libm::exp(-self.logvar_r)
    }

    pub fn weight_c(&self) -> f64 {
        libm::exp(-self.logvar_c)
    }
}

/// Starting point for a fresh pretraining run: `logvar_c` is set to the log
/// of the contrastive loss of a full batch at uniform similarity, so both
/// weighted terms start near one. `logvar_r` stays at zero because the
/// inputs are standardized.
pub fn calibrate_loss_weights(params: &mut ModelParams, pcfg: &PretrainConfig) -> Result<()> {
    pcfg.validate()?;
    let rows = 2 * pcfg.batch_size * params.config.channels;
    let uniform = rows as f64 * libm::log((rows - 1) as f64);
    let lv = params.tensors.get_mut(LOGVAR_C).ok_or_else(|| Error::Config("log-variance not registered".into()))?;
    lv.values_mut()[0] = libm::log(uniform) as f32;
    Ok(())
}

pub fn total_loss(l_r: f64, l_c: f64, w: UncertaintyWeights) -> Result<f64> {
    let t = w.weight_r() * l_r + w.weight_c() * l_c + w.logvar_r + w.logvar_c;
    if !t.is_finite() {
        return Err(Error::Numeric(alloc::format!("non-finite pretraining loss (L_r={l_r}, L_c={l_c})")));
    }
    Ok(t)
}

/// One batch ready for the tape: interleaved original/masked rows and the
/// channel of each series.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `2M × T`.
    pub rows: DenseArray,
    /// Channel index of each of the `M` series.
    pub channels: Vec<usize>,
}

impl Batch {
    pub fn series(&self) -> usize {
        self.channels.len()
    }
}

/// Splits snippets into series, draws one mask per series and interleaves.
pub fn make_batch(snippets: &[&DenseArray], cfg: &ModelConfig, pcfg: &PretrainConfig, rng: &mut Rng) -> Result<Batch> {
    let t = cfg.steps;
    let originals = model::series_rows(snippets, cfg)?;
    let m = originals.rows();
    let mut vals = Vec::with_capacity(2 * m * t);
    let mut channels = Vec::with_capacity(m);
    for (k, _) in snippets.iter().enumerate() {
        let masks = channel_masks(t, cfg.channels, pcfg.mask_ratio, pcfg.mean_masked_run, rng)?;
        for (ch, mask) in masks.iter().enumerate() {
            let row = originals.row(k * cfg.channels + ch);
            vals.extend_from_slice(row);
            vals.extend(row.iter().zip(&mask.mask).map(|(&v, &masked)| if masked { 0.0 } else { v }));
            channels.push(ch);
        }
    }
    Ok(Batch { rows: DenseArray::new(vec![2 * m, t], vals)?, channels })
}

/// Handles into the recorded pretraining forward pass.
#[derive(Debug, Clone, Copy)]
pub struct PretrainGraph {
    pub loss: Var,
    pub l_r: Var,
    pub l_c: Option<Var>,
    pub pointwise: Var,
    pub snippet_reps: Var,
    pub similarity: Var,
    pub weights: Var,
    /// Reconstructed values of each original series' own channel, `(M·T) × 1`.
    pub reconstruction: Var,
}

fn uncertainty_term<F: Real>(tape: &mut Tape<F>, logvar: Var, loss: Var) -> Result<Var> {
    let neg = tape.scale(logvar, -1.0);
    let w = tape.exp(neg);
    let weighted = tape.mul(w, loss)?;
    tape.add(weighted, logvar)
}

/// Records the full pretraining objective for one batch.
pub fn pretrain_graph<F: Real>(
    tape: &mut Tape<F>,
    vars: &ParamVars,
    cfg: &ModelConfig,
    rows: Array<F>,
    channels: &[usize],
    tau: f64,
    use_contrastive: bool,
) -> Result<PretrainGraph> {
    let n = rows.rows();
    let m = channels.len();
    if n != 2 * m || m == 0 {
        return Err(dim_err!("{n} batch rows for {m} series"));
    }
    let t = cfg.steps;
    let mut target = Vec::with_capacity(m * t);
    let mut cols = Vec::with_capacity(m * t);
    for (k, &ch) in channels.iter().enumerate() {
        if ch >= cfg.channels {
            return Err(dim_err!("channel {ch} out of range"));
        }
        target.extend_from_slice(rows.row(2 * k));
        cols.extend(core::iter::repeat(ch).take(t));
    }
    let x = tape.constant(rows);
    let target = tape.constant(Array::new(vec![m * t, 1], target)?);

    let p = model::encode_series(tape, vars, cfg, x)?;
    let s = model::project(tape, vars, cfg, p)?;
    let d = tape.cosine_similarity(s)?;
    let w = tape.offdiag_softmax(d, tau)?;
    let w_orig = tape.select_rows(w, &original_rows(n))?;
    let p_hat = tape.matmul(w_orig, p)?;
    let x_hat = model::decode(tape, vars, cfg, p_hat)?;
    let x_hat = tape.gather_cols(x_hat, &cols)?;
    let diff = tape.sub(x_hat, target)?;
    let sq = tape.mul(diff, diff)?;
    let l_r = tape.mean_all(sq);

    let lv_r = vars.get(LOGVAR_R).copied().ok_or_else(|| Error::Config("log-variance not registered".into()))?;
    let mut loss = uncertainty_term(tape, lv_r, l_r)?;
    let l_c = if use_contrastive {
        let lv_c = vars.get(LOGVAR_C).copied().ok_or_else(|| Error::Config("log-variance not registered".into()))?;
        let l_c = tape.contrastive_nll(d, &interleaved_positives(n), tau)?;
        let term = uncertainty_term(tape, lv_c, l_c)?;
        loss = tape.add(loss, term)?;
        Some(l_c)
    } else {
        None
    };
    Ok(PretrainGraph { loss, l_r, l_c, pointwise: p, snippet_reps: s, similarity: d, weights: w, reconstruction: x_hat })
}

/// Values from a forward pass without gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutcome {
    pub l_r: f64,
    pub l_c: Option<f64>,
    pub record: SimilarityRecord,
    pub reconstruction: DenseArray,
}

pub fn forward_batch(params: &ModelParams, batch: &Batch, pcfg: &PretrainConfig) -> Result<ForwardOutcome> {
    let mut tape = Tape::new();
    let vars = params.register_frozen(&mut tape);
    let g = pretrain_graph(&mut tape, &vars, &params.config, batch.rows.clone(), &batch.channels, pcfg.tau, true)?;
    Ok(ForwardOutcome {
        l_r: tape.scalar(g.l_r) as f64,
        l_c: g.l_c.map(|v| tape.scalar(v) as f64),
        record: SimilarityRecord {
            matrix: tape.value(g.similarity).clone(),
            tau: pcfg.tau,
            weights: tape.value(g.weights).clone(),
        },
        reconstruction: tape.value(g.reconstruction).clone(),
    })
}

/// One epoch's summary.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_r: f64,
    pub l_c: Option<f64>,
    pub total: f64,
    pub weight_r: f64,
    pub weight_c: f64,
    pub val_mse: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PretrainReport {
    pub epochs: Vec<EpochRecord>,
}

impl PretrainReport {
    pub fn final_val_mse(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.val_mse)
    }
}

/// Side channel for the loop: a clock and a per-epoch callback (for logging
/// and checkpointing). Both default to no-ops.
pub trait PretrainObserver {
    fn now(&self) -> f64 {
        0.0
    }

    fn on_epoch(&mut self, _record: &EpochRecord, _params: &ModelParams) -> Result<()> {
        Ok(())
    }
}

pub struct Silent;

impl PretrainObserver for Silent {}

/// Reconstruction MSE on `snippets` with masks from the held-out validation
/// stream, so repeated calls see identical masks.
pub fn reconstruction_mse(params: &ModelParams, snippets: &[DenseArray], pcfg: &PretrainConfig, seed: u64) -> Result<f64> {
    if snippets.is_empty() {
        return Err(Error::Config("no snippets to evaluate".into()));
    }
    let mut rng = rng::stream(seed, rng::ids::VALIDATION_MASK);
    let mut sum = 0.0;
    let mut count = 0usize;
    for chunk in snippets.chunks(pcfg.batch_size) {
        let refs: Vec<&DenseArray> = chunk.iter().collect();
        let batch = make_batch(&refs, &params.config, pcfg, &mut rng)?;
        let out = forward_batch(params, &batch, pcfg)?;
        let n = batch.series() * params.config.steps;
        sum += out.l_r * n as f64;
        count += n;
    }
    Ok(sum / count as f64)
}

/// Mean cosine similarity between each series and its masked copy.
pub fn positive_pair_cosine(params: &ModelParams, snippets: &[DenseArray], pcfg: &PretrainConfig, seed: u64) -> Result<f64> {
    let mut rng = rng::stream(seed, rng::ids::VALIDATION_MASK);
    let mut sum = 0.0;
    let mut count = 0usize;
    for chunk in snippets.chunks(pcfg.batch_size) {
        let refs: Vec<&DenseArray> = chunk.iter().collect();
        let batch = make_batch(&refs, &params.config, pcfg, &mut rng)?;
        let out = forward_batch(params, &batch, pcfg)?;
        for r in original_rows(out.record.rows()) {
            sum += out.record.matrix.get(r, r + 1) as f64;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Config("no snippets to evaluate".into()));
    }
    Ok(sum / count as f64)
}

fn divergence(epoch: usize, reason: String) -> Error {
    Error::Divergence { epoch, reason }
}

/// Trains from `init` on `train`; `val` (may be empty) is scored after every
/// epoch. Deterministic given `seed`.
pub fn pretrain_loop(
    init: ModelParams,
    train: &[DenseArray],
    val: &[DenseArray],
    pcfg: &PretrainConfig,
    seed: u64,
    observer: &mut dyn PretrainObserver,
) -> Result<(ModelParams, PretrainReport)> {
    pcfg.validate()?;
    init.validate()?;
    if train.is_empty() {
        return Err(Error::Config("empty pretraining corpus".into()));
    }
    let cfg = init.config;
    let batches_per_epoch = train.len().div_ceil(pcfg.batch_size);
    let schedule = LrSchedule::new(pcfg.peak_lr, pcfg.epochs * batches_per_epoch, pcfg.warmup_fraction)?;
    let mut shuffle_rng = rng::stream(seed, rng::ids::SHUFFLE);
    let mut mask_rng = rng::stream(seed, rng::ids::MASK);
    let mut adam = Adam::default();
    let mut params = init;
    let mut report = PretrainReport::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;

    for epoch in 1..=pcfg.epochs {
        let start = observer.now();
        order.shuffle(&mut shuffle_rng);
        let (mut sum_r, mut sum_c, mut sum_t, mut weight) = (0.0, 0.0, 0.0, 0.0);
        for idx in order.chunks(pcfg.batch_size) {
            let refs: Vec<&DenseArray> = idx.iter().map(|&i| &train[i]).collect();
            let batch = make_batch(&refs, &cfg, pcfg, &mut mask_rng)?;
            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let g = pretrain_graph(&mut tape, &vars, &cfg, batch.rows, &batch.channels, pcfg.tau, pcfg.use_contrastive)?;
            let total = tape.scalar(g.loss) as f64;
            if !total.is_finite() {
                return Err(divergence(epoch, alloc::format!("non-finite loss at step {step}")));
            }
            let grads = tape.backward(g.loss)?;
            adam.update(&mut params.tensors, &grads, schedule.at(step), |_| true)
                .map_err(|e| divergence(epoch, alloc::format!("{e}")))?;
            step += 1;
            let n = idx.len() as f64;
            sum_r += tape.scalar(g.l_r) as f64 * n;
            sum_c += g.l_c.map_or(0.0, |v| tape.scalar(v) as f64) * n;
            sum_t += total * n;
            weight += n;
        }
        let w = UncertaintyWeights::from_params(&params)?;
        let val_mse = if val.is_empty() {
            None
        } else {
            let v = reconstruction_mse(&params, val, pcfg, seed)?;
            if !v.is_finite() {
                return Err(divergence(epoch, "non-finite validation error".into()));
            }
            Some(v)
        };
        let record = EpochRecord {
            epoch,
            l_r: sum_r / weight,
            l_c: pcfg.use_contrastive.then_some(sum_c / weight),
            total: sum_t / weight,
            weight_r: w.weight_r(),
            weight_c: if pcfg.use_contrastive { w.weight_c() } else { 0.0 },
            val_mse,
            seconds: observer.now() - start,
        };
        observer.on_epoch(&record, &params)?;
        report.epochs.push(record);
    }
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::{Rng as _, SeedableRng};

    fn random(shape: &[usize], seed: u64) -> DenseArray {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        DenseArray::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn record_from(d: &[&[f32]], tau: f64) -> SimilarityRecord {
        let matrix = DenseArray::from_rows(d).unwrap();
        let weights = softmax_rows_value(&matrix, tau, true).unwrap();
        SimilarityRecord { matrix, tau, weights }
    }

    #[test]
    fn similarity_special_cases() {
        let reps = DenseArray::from_rows(&[&[1.0, 2.0], &[1.0, 2.0], &[-2.0, 1.0], &[-1.0, -2.0]]).unwrap();
        let r = similarity_matrix(&reps, 0.1).unwrap();
        assert!((r.matrix.get(0, 1) - 1.0).abs() < 1e-6);
        assert!(r.matrix.get(0, 2).abs() < 1e-6);
        assert!((r.matrix.get(0, 3) + 1.0).abs() < 1e-6);
        for i in 0..4 {
            assert_eq!(r.matrix.get(i, i), 1.0);
            assert_eq!(r.weights.get(i, i), 0.0);
            let s: f64 = r.weights.row(i).iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert!(matches!(similarity_matrix(&reps, 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn contrastive_saturated_case() {
        let d: [&[f32]; 4] = [&[1.0, 1.0, 0.0, 0.0], &[1.0, 1.0, 0.0, 0.0], &[0.0, 0.0, 1.0, 1.0], &[0.0, 0.0, 1.0, 1.0]];
        let r = record_from(&d, 0.1);
        let pos = interleaved_positives(4);
        let per = -libm::log(libm::exp(10.0) / (libm::exp(10.0) + 2.0));
        for t in contrastive_terms(&r, &pos).unwrap() {
            assert!((t - per).abs() < 1e-6);
            assert!((t - 9.08e-5).abs() < 1e-7);
        }
        let total = contrastive_loss(&r, &pos).unwrap();
        assert!((total - 4.0 * per).abs() < 1e-6);
        assert!((total - 3.63e-4).abs() < 1e-6);
    }

    #[test]
    fn contrastive_uniform_and_monotone() {
        let d: [&[f32]; 4] = [&[1.0, 0.3, 0.3, 0.3], &[0.3, 1.0, 0.3, 0.3], &[0.3, 0.3, 1.0, 0.3], &[0.3, 0.3, 0.3, 1.0]];
        let r = record_from(&d, 0.1);
        for t in contrastive_terms(&r, &interleaved_positives(4)).unwrap() {
            assert!((t - libm::log(3.0)).abs() < 1e-6);
        }
        let base = contrastive_loss(&r, &interleaved_positives(4)).unwrap();
        let mut lowered = r.matrix.clone();
        lowered.set(0, 1, 0.1);
        let r2 = SimilarityRecord { weights: softmax_rows_value(&lowered, 0.1, true).unwrap(), matrix: lowered, tau: 0.1 };
        assert!(contrastive_loss(&r2, &interleaved_positives(4)).unwrap() > base);
    }

    #[test]
    fn pairing_errors() {
        let r = record_from(&[&[1.0, 0.0], &[0.0, 1.0]], 0.1);
        assert!(matches!(contrastive_loss(&r, &[1]), Err(Error::Pairing(_))));
        assert!(matches!(contrastive_loss(&r, &[0, 0]), Err(Error::Pairing(_))));
    }

    #[test]
    fn three_row_weights() {
        let r = record_from(&[&[1.0, 0.9, 0.1], &[0.9, 1.0, 0.0], &[0.1, 0.0, 1.0]], 0.1);
        let e9 = libm::exp(9.0);
        let e1 = libm::exp(1.0);
        assert!((r.weights.get(0, 1) as f64 - e9 / (e9 + e1)).abs() < 1e-6);
        assert!((r.weights.get(0, 2) as f64 - e1 / (e9 + e1)).abs() < 1e-6);
        assert!((r.weights.get(0, 1) - 0.99966).abs() < 1e-5);
        let p = random(&[3, 4], 1);
        let hat = weighted_reconstruction(&r, &p, &[0]).unwrap();
        for c in 0..4 {
            let expect = r.weights.get(0, 1) as f64 * p.get(1, c) as f64 + r.weights.get(0, 2) as f64 * p.get(2, c) as f64;
            assert!((hat.get(0, c) as f64 - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn saturated_and_uniform_reconstruction() {
        let r = record_from(&[&[1.0, 1.0, -1.0], &[1.0, 1.0, -1.0], &[-1.0, -1.0, 1.0]], 0.01);
        let p = random(&[3, 5], 2);
        let hat = weighted_reconstruction(&r, &p, &[0]).unwrap();
        for c in 0..5 {
            assert!((hat.get(0, c) - p.get(1, c)).abs() < 1e-6);
        }
        let r = record_from(&[&[1.0, 0.2, 0.2], &[0.2, 1.0, 0.2], &[0.2, 0.2, 1.0]], 0.1);
        let hat = weighted_reconstruction(&r, &p, &[0]).unwrap();
        for c in 0..5 {
            assert!((hat.get(0, c) - 0.5 * (p.get(1, c) + p.get(2, c))).abs() < 1e-6);
        }
    }

    #[test]
    fn reconstruction_loss_cases() {
        let o = vec![random(&[4, 3], 3), random(&[4, 3], 4)];
        assert_eq!(reconstruction_loss(&o, &o).unwrap(), 0.0);
        let plus: Vec<_> = o.iter().map(|a| a.map(|v| v + 1.0)).collect();
        assert!((reconstruction_loss(&o, &plus).unwrap() - 1.0).abs() < 1e-6);
        let other = vec![random(&[4, 3], 5), random(&[4, 3], 6)];
        let mut brute = 0.0f64;
        for (a, b) in o.iter().zip(&other) {
            for i in 0..4 {
                for j in 0..3 {
                    brute += (a.get(i, j) as f64 - b.get(i, j) as f64).powi(2);
                }
            }
        }
        assert!((reconstruction_loss(&o, &other).unwrap() - brute / 24.0).abs() < 1e-6);
        assert!(reconstruction_loss(&o, &other[..1]).is_err());
    }

    #[test]
    fn calibrated_contrastive_weight_matches_uniform_loss() {
        let cfg = ModelConfig::toy();
        let pcfg = PretrainConfig { batch_size: 2, ..Default::default() };
        let mut params = ModelParams::init(cfg, 3).unwrap();
        calibrate_loss_weights(&mut params, &pcfg).unwrap();
        let w = UncertaintyWeights::from_params(&params).unwrap();
        // 2 snippets x 2 channels x 2 copies = 8 rows, each anchor at log 7
        assert!((w.weight_c() * 8.0 * 7f64.ln() - 1.0).abs() < 1e-5);
        assert_eq!(w.logvar_r, 0.0);
    }

    #[test]
    fn total_loss_cases() {
        let zero = UncertaintyWeights { logvar_r: 0.0, logvar_c: 0.0 };
        assert!((total_loss(0.7, 2.5, zero).unwrap() - 3.2).abs() < 1e-12);
        assert!(total_loss(0.7, 3.0, zero).unwrap() > total_loss(0.7, 2.5, zero).unwrap());
        assert!(matches!(total_loss(f64::NAN, 1.0, zero), Err(Error::Numeric(_))));
        // derivative in logvar_r vanishes at log L_r
        let l_r = 0.37;
        let h = 1e-6;
        let at = |lv: f64| total_loss(l_r, 1.0, UncertaintyWeights { logvar_r: lv, logvar_c: 0.0 }).unwrap();
        let lv = libm::log(l_r);
        assert!(((at(lv + h) - at(lv - h)) / (2.0 * h)).abs() < 1e-6);
        let lv = 0.3;
        let analytic = -libm::exp(-lv) * l_r + 1.0;
        assert!(((at(lv + h) - at(lv - h)) / (2.0 * h) - analytic).abs() < 1e-6);
    }

    #[test]
    fn batch_layout() {
        let cfg = ModelConfig { steps: 16, channels: 3, d_f: 4, d_h: 4 };
        let pcfg = PretrainConfig::default();
        let a = random(&[16, 3], 7);
        let b = random(&[16, 3], 8);
        let batch = make_batch(&[&a, &b], &cfg, &pcfg, &mut rng::stream(1, rng::ids::MASK)).unwrap();
        assert_eq!(batch.rows.shape(), &[12, 16]);
        assert_eq!(batch.channels, vec![0, 1, 2, 0, 1, 2]);
        for t in 0..16 {
            assert_eq!(batch.rows.get(2, t), a.get(t, 1));
            assert_eq!(batch.rows.get(8, t), b.get(t, 1));
            let m = batch.rows.get(9, t);
            assert!(m == 0.0 || m == b.get(t, 1));
        }
    }

    #[test]
    fn end_to_end_gradient() {
        let cfg = ModelConfig::toy();
        let pcfg = PretrainConfig::default();
        let mut params = ModelParams::init(cfg, 11).unwrap();
        params.tensors.get_mut(LOGVAR_R).unwrap().values_mut()[0] = 0.3;
        params.tensors.get_mut(LOGVAR_C).unwrap().values_mut()[0] = -0.2;
        let params = params.cast::<f64>();
        let a = random(&[8, 2], 12);
        let b = random(&[8, 2], 13);
        let batch = make_batch(&[&a, &b], &cfg, &pcfg, &mut rng::stream(3, rng::ids::MASK)).unwrap();
        let rows = batch.rows.cast::<f64>();
        let err = grad_check(
            |t, v| Ok(pretrain_graph(t, v, &cfg, rows.clone(), &batch.channels, pcfg.tau, true)?.loss),
            &params.tensors,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn graph_matches_value_level_functions() {
        let cfg = ModelConfig::toy();
        let pcfg = PretrainConfig::default();
        let params = ModelParams::init(cfg, 14).unwrap();
        let snippets = [random(&[8, 2], 15), random(&[8, 2], 16), random(&[8, 2], 17)];
        let refs: Vec<&DenseArray> = snippets.iter().collect();
        let batch = make_batch(&refs, &cfg, &pcfg, &mut rng::stream(5, rng::ids::MASK)).unwrap();
        let mut tape = Tape::new();
        let vars = params.register_frozen(&mut tape);
        let g = pretrain_graph(&mut tape, &vars, &cfg, batch.rows.clone(), &batch.channels, pcfg.tau, true).unwrap();

        let rec = similarity_matrix(tape.value(g.snippet_reps), pcfg.tau).unwrap();
        assert!(rec.matrix.max_abs_diff(tape.value(g.similarity)) < 1e-6);
        let n = rec.rows();
        let l_c = contrastive_loss(&rec, &interleaved_positives(n)).unwrap();
        assert!((l_c - tape.scalar(g.l_c.unwrap()) as f64).abs() < 1e-3 * l_c.abs().max(1.0));

        let p_hat = weighted_reconstruction(&rec, tape.value(g.pointwise), &original_rows(n)).unwrap();
        let mut originals = Vec::new();
        let mut recons = Vec::new();
        for (k, &ch) in batch.channels.iter().enumerate() {
            let pw = DenseArray::new(vec![cfg.steps, cfg.d_f], p_hat.row(k).to_vec()).unwrap();
            let x_hat = model::decode_one(&pw, &params).unwrap();
            let col: Vec<f32> = (0..cfg.steps).map(|t| x_hat.get(t, ch)).collect();
            recons.push(DenseArray::new(vec![cfg.steps, 1], col).unwrap());
            originals.push(DenseArray::new(vec![cfg.steps, 1], batch.rows.row(2 * k).to_vec()).unwrap());
        }
        let l_r = reconstruction_loss(&originals, &recons).unwrap();
        assert!((l_r - tape.scalar(g.l_r) as f64).abs() < 1e-5);
        let w = UncertaintyWeights::from_params(&params).unwrap();
        let total = total_loss(l_r, l_c, w).unwrap();
        assert!((total - tape.scalar(g.loss) as f64).abs() < 1e-3 * total);
    }

    fn toy_corpus(n: usize, seed: u64) -> Vec<DenseArray> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let a: f32 = rng.random_range(0.5..1.5);
                let ph: f32 = rng.random_range(0.0..6.0);
                let vals = (0..8).flat_map(|t| [a * (t as f32 * 0.7 + ph).sin(), a * (t as f32 * 0.7 + ph).cos()]).collect();
                DenseArray::new(vec![8, 2], vals).unwrap()
            })
            .collect()
    }

    #[test]
    fn loop_is_deterministic_and_reduces_reconstruction() {
        let cfg = ModelConfig::toy();
        let pcfg = PretrainConfig { batch_size: 8, epochs: 3, ..PretrainConfig::default() };
        let data = toy_corpus(64, 1);
        let init = ModelParams::init(cfg, 2).unwrap();
        let (a, rep) = pretrain_loop(init.clone(), &data, &data[..8], &pcfg, 9, &mut Silent).unwrap();
        let (b, rep_b) = pretrain_loop(init, &data, &data[..8], &pcfg, 9, &mut Silent).unwrap();
        assert_eq!(a, b);
        assert_eq!(rep, rep_b);
        assert_eq!(rep.epochs.len(), 3);
        for w in rep.epochs.windows(2) {
            assert!(w[1].l_r < w[0].l_r, "{:?}", rep.epochs);
        }
        assert!(rep.final_val_mse().unwrap().is_finite());
    }
}
