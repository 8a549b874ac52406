//! Experiment protocols: which corpus pretrains the encoder, which labeled
//! slice fine-tunes it and which vehicles score it.
//!
//! Pretraining always uses low-mileage (D1) snippets of pretrain-split
//! vehicles. Fine-tuning for target `Dk` uses the labeled `Dk` snippets of the
//! designated fine-tune vehicles, early-stops on validation vehicles and is
//! scored on test vehicles. Runs are memoized so protocols that share a cell
//! (for example the D1 model reused for novel-pattern inference) train once.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::array::DenseArray;
use crate::data::{assign_distribution, make_splits, vehicle_ids, ChargingSnippet, DistributionTag, NormalizationStats, Split, SplitAssignment};
use crate::error::{Error, Result};
use crate::finetune::{finetune, mape, rmse, EvalReport, FinetuneConfig, FinetunedModel};
use crate::model::{ModelConfig, ModelParams};
use crate::pretrain::{calibrate_loss_weights, pretrain_loop, PretrainConfig, PretrainObserver, PretrainReport};
use crate::synthgen::{generate_fleet, generate_novel_slice, FleetConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Protocol {
    UnlabeledImpact,
    AgeShift,
    CrossManufacturer,
    NovelInference,
    Ablation,
    /// Pretrained encoder against the same architecture trained from scratch.
    PretrainUtility,
}

impl Protocol {
    pub const ALL: [Protocol; 6] = [
        Protocol::UnlabeledImpact,
        Protocol::AgeShift,
        Protocol::CrossManufacturer,
        Protocol::NovelInference,
        Protocol::Ablation,
        Protocol::PretrainUtility,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::UnlabeledImpact => "unlabeled_impact",
            Protocol::AgeShift => "age_shift",
            Protocol::CrossManufacturer => "cross_manufacturer",
            Protocol::NovelInference => "novel_inference",
            Protocol::Ablation => "ablation",
            Protocol::PretrainUtility => "pretrain_utility",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s.trim())
            .ok_or_else(|| Error::Config(alloc::format!("unknown protocol {s:?}")))
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Source of the pretraining snippets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PretrainCorpus {
    /// Every D1 snippet, fast-charging ones included.
    Full,
    /// Only the D1 snippets that carry labels (labels unused).
    LabeledOnly,
    /// Every D1 snippet of the second manufacturer.
    SecondManufacturer,
}

impl PretrainCorpus {
    pub const ALL: [PretrainCorpus; 3] = [PretrainCorpus::Full, PretrainCorpus::LabeledOnly, PretrainCorpus::SecondManufacturer];

    pub fn as_str(self) -> &'static str {
        match self {
            PretrainCorpus::Full => "full",
            PretrainCorpus::LabeledOnly => "labeled",
            PretrainCorpus::SecondManufacturer => "second",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s.trim())
            .ok_or_else(|| Error::Config(alloc::format!("unknown pretraining corpus {s:?}")))
    }

    pub fn id(self, corpora: &Corpora) -> String {
        let m = match self {
            PretrainCorpus::SecondManufacturer => corpora.second.as_ref().map_or("second", |s| s.manufacturer.as_str()),
            _ => corpora.primary.manufacturer.as_str(),
        };
        let variant = if self == PretrainCorpus::LabeledOnly { "labeled" } else { "full" };
        alloc::format!("{m}-D1-{variant}")
    }
}

/// Starting point for fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Init {
    Pretrained { corpus: PretrainCorpus, contrastive: bool },
    Random,
}

impl Init {
    pub const FULL: Init = Init::Pretrained { corpus: PretrainCorpus::Full, contrastive: true };

    pub fn label(self, corpora: &Corpora) -> String {
        match self {
            Init::Pretrained { corpus, contrastive: true } => corpus.id(corpora),
            Init::Pretrained { corpus, contrastive: false } => alloc::format!("{}-lr-only", corpus.id(corpora)),
            Init::Random => "none".to_string(),
        }
    }
}

/// One manufacturer's snippets with its vehicle split and normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Fleet {
    pub manufacturer: String,
    pub snippets: Vec<ChargingSnippet>,
    pub splits: SplitAssignment,
    pub stats: NormalizationStats,
}

impl Fleet {
    pub fn new(snippets: Vec<ChargingSnippet>, splits: SplitAssignment) -> Result<Self> {
        let manufacturer = snippets.first().map(|s| s.manufacturer_id.clone()).unwrap_or_default();
        let pretrain: Vec<ChargingSnippet> =
            snippets.iter().filter(|s| splits.split_of(&s.vehicle_id) == Some(Split::Pretrain)).cloned().collect();
        let stats = NormalizationStats::from_pretrain_split(&pretrain, &splits)?;
        Ok(Self { manufacturer, snippets, splits, stats })
    }

    fn select(&self, split: Split, keep: impl Fn(&ChargingSnippet, DistributionTag) -> bool) -> Result<Vec<ChargingSnippet>> {
        let mut out = Vec::new();
        for s in &self.snippets {
            if self.splits.split_of(&s.vehicle_id) == Some(split) && keep(s, assign_distribution(s)?) {
                out.push(s.clone());
            }
        }
        Ok(out)
    }
}

/// All data an experiment draws from.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpora {
    pub primary: Fleet,
    pub second: Option<Fleet>,
    pub novel: Vec<ChargingSnippet>,
}

impl Corpora {
    /// Generates both fleets and the novel slice, and splits vehicles.
    pub fn generate(primary: &FleetConfig, second: Option<&FleetConfig>, split_seed: u64) -> Result<Self> {
        let snippets = generate_fleet(primary)?;
        let splits = make_splits(&vehicle_ids(&snippets), split_seed)?;
        let second = match second {
            Some(cfg) => {
                let s = generate_fleet(cfg)?;
                let sp = make_splits(&vehicle_ids(&s), split_seed)?;
                Some(Fleet::new(s, sp)?)
            }
            None => None,
        };
        Ok(Self { primary: Fleet::new(snippets, splits)?, second, novel: generate_novel_slice(primary)? })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub seeds: Vec<u64>,
}

/// Normalized inputs for one fine-tuning cell.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetData {
    pub train: Vec<ChargingSnippet>,
    pub val: Vec<ChargingSnippet>,
    pub test: Vec<ChargingSnippet>,
}

type Progress = Box<dyn FnMut(&str)>;

/// Runs protocols over shared, memoized pretraining and fine-tuning runs.
pub struct Experiment<'a> {
    corpora: &'a Corpora,
    cfg: ExperimentConfig,
    pretrained: BTreeMap<(Init, u64), (ModelParams, PretrainReport)>,
    finetuned: BTreeMap<(Init, DistributionTag, u64), FinetunedModel>,
    progress: Option<Progress>,
    observer: Option<Box<dyn PretrainObserver + 'a>>,
}

impl<'a> Experiment<'a> {
    pub fn new(corpora: &'a Corpora, cfg: ExperimentConfig) -> Result<Self> {
        if cfg.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        cfg.model.validate()?;
        cfg.pretrain.validate()?;
        corpora.primary.splits.validate()?;
        if let Some(s) = &corpora.second {
            s.splits.validate()?;
        }
        let known = &corpora.primary.splits.splits;
        if let Some(s) = corpora.novel.iter().find(|s| known.contains_key(&s.vehicle_id)) {
            return Err(Error::Leakage(alloc::format!("novel-slice vehicle {} also appears in the fleet", s.vehicle_id)));
        }
        Ok(Self { corpora, cfg, pretrained: BTreeMap::new(), finetuned: BTreeMap::new(), progress: None, observer: None })
    }

    /// Receives one line per completed run.
    pub fn with_progress(mut self, f: impl FnMut(&str) + 'static) -> Self {
        self.progress = Some(Box::new(f));
        self
    }

    /// Supplies the clock and per-epoch hook used during pretraining.
    pub fn with_observer(mut self, o: impl PretrainObserver + 'a) -> Self {
        self.observer = Some(Box::new(o));
        self
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    fn say(&mut self, msg: &str) {
        if let Some(p) = self.progress.as_mut() {
            p(msg);
        }
    }

    fn fleet_for(&self, init: Init) -> Result<&'a Fleet> {
        match init {
            Init::Pretrained { corpus: PretrainCorpus::SecondManufacturer, .. } => {
                self.corpora.second.as_ref().ok_or_else(|| Error::Config("no second-manufacturer corpus".into()))
            }
            _ => Ok(&self.corpora.primary),
        }
    }

    /// Normalized pretraining snippets and validation snippets for `corpus`.
    pub fn pretrain_sets(&self, corpus: PretrainCorpus) -> Result<(Vec<DenseArray>, Vec<DenseArray>)> {
        let fleet = self.fleet_for(Init::Pretrained { corpus, contrastive: true })?;
        let keep = |s: &ChargingSnippet, tag: DistributionTag| {
            tag == DistributionTag::D1 && (corpus != PretrainCorpus::LabeledOnly || s.is_labeled())
        };
        let train = fleet.select(Split::Pretrain, keep)?;
        fleet.splits.ensure_all_in(&train, Split::Pretrain, "pretraining corpus")?;
        let val = fleet.select(Split::Validation, keep)?;
        fleet.splits.ensure_all_in(&val, Split::Validation, "pretraining validation")?;
        if train.is_empty() {
            return Err(Error::Config(alloc::format!("pretraining corpus {} is empty", corpus.id(self.corpora))));
        }
        let norm = |v: Vec<ChargingSnippet>| -> Result<Vec<DenseArray>> {
            Ok(fleet.stats.normalize_all(&v)?.into_iter().map(|s| s.series).collect())
        };
        Ok((norm(train)?, norm(val)?))
    }

    /// Pretrained parameters (or a fresh initialization for `Init::Random`).
    pub fn pretrained(&mut self, init: Init, seed: u64) -> Result<&(ModelParams, PretrainReport)> {
        if !self.pretrained.contains_key(&(init, seed)) {
            let fresh = ModelParams::init(self.cfg.model, seed)?;
            let entry = match init {
                Init::Random => (fresh, PretrainReport::default()),
                Init::Pretrained { corpus, contrastive } => {
                    let (train, val) = self.pretrain_sets(corpus)?;
                    let pcfg = PretrainConfig { use_contrastive: contrastive, ..self.cfg.pretrain.clone() };
                    let mut fresh = fresh;
                    calibrate_loss_weights(&mut fresh, &pcfg)?;
                    let mut silent = crate::pretrain::Silent;
                    let obs: &mut dyn PretrainObserver = match self.observer.as_mut() {
                        Some(o) => o.as_mut(),
                        None => &mut silent,
                    };
                    let out = pretrain_loop(fresh, &train, &val, &pcfg, seed, obs)?;
                    let msg = alloc::format!(
                        "pretrained {} seed {seed}: {} snippets, final val mse {:?}",
                        init.label(self.corpora),
                        train.len(),
                        out.1.final_val_mse()
                    );
                    self.say(&msg);
                    out
                }
            };
            self.pretrained.insert((init, seed), entry);
        }
        Ok(&self.pretrained[&(init, seed)])
    }

    /// Supplies the outcome of an earlier pretraining run (for example one
    /// restored from a checkpoint) so that it is not recomputed.
    pub fn insert_pretrained(&mut self, init: Init, seed: u64, params: ModelParams, report: PretrainReport) -> Result<()> {
        if params.config != self.cfg.model {
            return Err(Error::Config("pretrained parameters do not match the model configuration".into()));
        }
        params.validate()?;
        self.finetuned.retain(|k, _| !(k.0 == init && k.2 == seed));
        self.pretrained.insert((init, seed), (params, report));
        Ok(())
    }

    /// Fine-tuning, validation and test snippets for `target`, normalized
    /// with the statistics of the fleet that pretrained `init`.
    pub fn target_data(&self, init: Init, target: DistributionTag) -> Result<TargetData> {
        let primary = &self.corpora.primary;
        let stats = &self.fleet_for(init)?.stats;
        let keep = |s: &ChargingSnippet, tag: DistributionTag| s.is_labeled() && tag == target;
        let train: Vec<ChargingSnippet> =
            primary.select(Split::Pretrain, keep)?.into_iter().filter(|s| primary.splits.is_finetune(&s.vehicle_id)).collect();
        let val = primary.select(Split::Validation, keep)?;
        let test = primary.select(Split::Test, keep)?;
        primary.splits.ensure_all_in(&val, Split::Validation, "fine-tuning validation")?;
        primary.splits.ensure_all_in(&test, Split::Test, "test set")?;
        if let Some(s) = train.iter().find(|s| !primary.splits.is_finetune(&s.vehicle_id)) {
            return Err(Error::Leakage(alloc::format!("vehicle {} is not a fine-tune vehicle", s.vehicle_id)));
        }
        if train.is_empty() || test.is_empty() {
            return Err(Error::Config(alloc::format!("no labeled {target} snippets for fine-tuning or testing")));
        }
        Ok(TargetData { train: stats.normalize_all(&train)?, val: stats.normalize_all(&val)?, test: stats.normalize_all(&test)? })
    }

    /// Fine-tuned model for one cell, trained on first use.
    pub fn finetuned(&mut self, init: Init, target: DistributionTag, seed: u64) -> Result<&FinetunedModel> {
        if !self.finetuned.contains_key(&(init, target, seed)) {
            let data = self.target_data(init, target)?;
            let start = self.pretrained(init, seed)?.0.clone();
            let (model, rep) = finetune(&start, &data.train, &data.val, &self.cfg.finetune, seed)?;
            let msg = alloc::format!(
                "fine-tuned {} on {target} seed {seed}: {} snippets, best epoch {}",
                init.label(self.corpora),
                data.train.len(),
                rep.best_epoch
            );
            self.say(&msg);
            self.finetuned.insert((init, target, seed), model);
        }
        Ok(&self.finetuned[&(init, target, seed)])
    }

    fn score(model: &FinetunedModel, test: &[ChargingSnippet]) -> Result<(f64, f64, usize)> {
        let labels: Vec<f64> = test.iter().map(|s| s.capacity_label_ah.unwrap_or(0.0)).collect();
        let preds = model.predict_snippets(test)?;
        let m = mape(&preds, &labels)?;
        Ok((rmse(&preds, &labels)?, m.percent, m.excluded))
    }

    /// Fine-tunes and tests one (init, target) cell over every seed.
    pub fn cell(&mut self, protocol: Protocol, init: Init, target: DistributionTag) -> Result<EvalReport> {
        let seeds = self.cfg.seeds.clone();
        let test = self.target_data(init, target)?.test;
        let mut report = self.empty_report(protocol, init, alloc::format!("{}-{target}", self.corpora.primary.manufacturer));
        for seed in seeds {
            let (r, m, excl) = Self::score(self.finetuned(init, target, seed)?, &test)?;
            self.push_seed(&mut report, init, seed, r, m, excl)?;
            report.n_test = test.len();
        }
        report.validate()?;
        Ok(report)
    }

    /// Scores the D1-fine-tuned model on the novel slice without further
    /// training.
    pub fn novel_cell(&mut self, init: Init) -> Result<EvalReport> {
        if self.corpora.novel.is_empty() {
            return Err(Error::Config("the novel slice is empty".into()));
        }
        let stats = &self.fleet_for(init)?.stats;
        let test = stats.normalize_all(&self.corpora.novel)?;
        let seeds = self.cfg.seeds.clone();
        let mut report = self.empty_report(Protocol::NovelInference, init, "novel".to_string());
        for seed in seeds {
            let (r, m, excl) = Self::score(self.finetuned(init, DistributionTag::D1, seed)?, &test)?;
            self.push_seed(&mut report, init, seed, r, m, excl)?;
        }
        report.n_test = test.len();
        report.validate()?;
        Ok(report)
    }

    fn empty_report(&self, protocol: Protocol, init: Init, target: String) -> EvalReport {
        EvalReport {
            protocol: protocol.as_str().to_string(),
            pretrain_corpus: init.label(self.corpora),
            target,
            seeds: Vec::new(),
            rmse: Vec::new(),
            mape: Vec::new(),
            recon_mse: Vec::new(),
            n_test: 0,
            mape_excluded: 0,
        }
    }

    fn push_seed(&mut self, report: &mut EvalReport, init: Init, seed: u64, r: f64, m: f64, excl: usize) -> Result<()> {
        report.seeds.push(seed);
        report.rmse.push(r);
        report.mape.push(m);
        report.mape_excluded += excl;
        if let Some(v) = self.pretrained(init, seed)?.1.final_val_mse() {
            report.recon_mse.push(v);
        }
        Ok(())
    }

    /// Every report of one protocol, in a fixed order.
    pub fn run(&mut self, protocol: Protocol) -> Result<Vec<EvalReport>> {
        let targets = DistributionTag::ALL;
        let mut out = Vec::new();
        match protocol {
            Protocol::UnlabeledImpact => {
                for corpus in [PretrainCorpus::Full, PretrainCorpus::LabeledOnly] {
                    for t in targets {
                        out.push(self.cell(protocol, Init::Pretrained { corpus, contrastive: true }, t)?);
                    }
                }
            }
            Protocol::AgeShift => {
                for t in targets {
                    out.push(self.cell(protocol, Init::FULL, t)?);
                }
            }
            Protocol::CrossManufacturer => {
                let init = Init::Pretrained { corpus: PretrainCorpus::SecondManufacturer, contrastive: true };
                for t in targets {
                    out.push(self.cell(protocol, init, t)?);
                }
            }
            Protocol::NovelInference => {
                for corpus in [PretrainCorpus::Full, PretrainCorpus::LabeledOnly] {
                    out.push(self.novel_cell(Init::Pretrained { corpus, contrastive: true })?);
                }
            }
            Protocol::Ablation => {
                for contrastive in [false, true] {
                    for t in targets {
                        out.push(self.cell(protocol, Init::Pretrained { corpus: PretrainCorpus::Full, contrastive }, t)?);
                    }
                }
            }
            Protocol::PretrainUtility => {
                for init in [Init::FULL, Init::Random] {
                    for t in targets {
                        out.push(self.cell(protocol, init, t)?);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Runs protocols over `seeds` on freshly built experiment state.
pub fn run_protocol(protocol: Protocol, corpora: &Corpora, cfg: ExperimentConfig) -> Result<Vec<EvalReport>> {
    Experiment::new(corpora, cfg)?.run(protocol)
}
