//! Flat `key = value` run configuration.
//!
//! Values are layered: built-in defaults, then the config file, then
//! `EVCAP_*` environment variables, then `--set` flags and the dedicated
//! global flags. `EVCAP_PRETRAIN__EPOCHS=5` overrides `pretrain.epochs`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use evcap_core::data::DistributionTag;
use evcap_core::finetune::FinetuneConfig;
use evcap_core::model::ModelConfig;
use evcap_core::pretrain::PretrainConfig;
use evcap_core::protocol::{ExperimentConfig, Init, PretrainCorpus, Protocol};
use evcap_core::synthgen::FleetConfig;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const ENV_PREFIX: &str = "EVCAP_";
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Which parameters a fine-tuning run starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinetuneInit {
    Pretrained,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub fleet: FleetConfig,
    /// Second manufacturer for the transfer protocol; `None` when disabled.
    pub second: Option<FleetConfig>,
    pub split_seed: u64,
    /// Seed of single-run commands (`pretrain`, `finetune`, `dump-sim`).
    pub seed: u64,
    /// Seeds of protocol evaluation.
    pub seeds: Vec<u64>,
    pub corpus: PretrainCorpus,
    pub target: DistributionTag,
    pub finetune_init: FinetuneInit,
    pub protocols: Vec<Protocol>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            fleet: FleetConfig::default(),
            second: Some(FleetConfig::second_manufacturer(11)),
            split_seed: 5,
            seed: 1,
            seeds: vec![1, 2, 3, 4, 5],
            corpus: PretrainCorpus::Full,
            target: DistributionTag::D1,
            finetune_init: FinetuneInit::Pretrained,
            protocols: Vec::new(),
            out: PathBuf::from("runs"),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| CliError::Config(format!("invalid value {v:?} for {key}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::Config(format!("invalid boolean {v:?} for {key}"))),
    }
}

fn list<T>(v: &str, parse: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(parse).collect()
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let v = value.trim();
        if let Some(k) = key.strip_prefix("fleet.") {
            return Ok(self.fleet.set(k, v)?);
        }
        if key == "second.enabled" {
            self.second = flag(key, v)?.then(|| self.second.clone().unwrap_or_else(|| FleetConfig::second_manufacturer(11)));
            return Ok(());
        }
        if let Some(k) = key.strip_prefix("second.") {
            let second = self.second.as_mut().ok_or_else(|| CliError::Config(format!("{key} set while second.enabled = false")))?;
            return Ok(second.set(k, v)?);
        }
        match key {
            "model.steps" => self.model.steps = num(key, v)?,
            "model.channels" => self.model.channels = num(key, v)?,
            "model.d_f" => self.model.d_f = num(key, v)?,
            "model.d_h" => self.model.d_h = num(key, v)?,
            "pretrain.tau" => self.pretrain.tau = num(key, v)?,
            "pretrain.mask_ratio" => self.pretrain.mask_ratio = num(key, v)?,
            "pretrain.mean_masked_run" => self.pretrain.mean_masked_run = num(key, v)?,
            "pretrain.batch_size" => self.pretrain.batch_size = num(key, v)?,
            "pretrain.epochs" => self.pretrain.epochs = num(key, v)?,
            "pretrain.peak_lr" => self.pretrain.peak_lr = num(key, v)?,
            "pretrain.warmup_fraction" => self.pretrain.warmup_fraction = num(key, v)?,
            "pretrain.contrastive" => self.pretrain.use_contrastive = flag(key, v)?,
            "pretrain.corpus" => self.corpus = PretrainCorpus::parse(v)?,
            "finetune.epochs" => self.finetune.epochs = num(key, v)?,
            "finetune.patience" => self.finetune.patience = num(key, v)?,
            "finetune.batch_size" => self.finetune.batch_size = num(key, v)?,
            "finetune.peak_lr" => self.finetune.peak_lr = num(key, v)?,
            "finetune.warmup_fraction" => self.finetune.warmup_fraction = num(key, v)?,
            "finetune.linear_probe" => self.finetune.linear_probe = flag(key, v)?,
            "finetune.target" => self.target = DistributionTag::parse(v)?,
            "finetune.init" => {
                self.finetune_init = match v {
                    "pretrained" => FinetuneInit::Pretrained,
                    "random" => FinetuneInit::Random,
                    _ => return Err(CliError::Config(format!("finetune.init must be pretrained or random, got {v:?}"))),
                }
            }
            "split_seed" => self.split_seed = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "seeds" => self.seeds = list(v, |s| num(key, s))?,
            "protocols" => self.protocols = list(v, |s| Ok(Protocol::parse(s)?))?,
            "out" => self.out = PathBuf::from(v),
            _ => return Err(CliError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies every non-comment line of a config text. `origin` names the
    /// source in error messages.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::parse(origin, i as u64 + 1, format!("expected key = value, got {line:?}")))?;
            self.set(k, v).map_err(|e| CliError::parse(origin, i as u64 + 1, e.to_string()))?;
        }
        Ok(())
    }

    /// Applies `EVCAP_*` variables from `vars`.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
        let mut found: BTreeMap<String, String> = BTreeMap::new();
        for (k, v) in vars {
            if let Some(rest) = k.strip_prefix(ENV_PREFIX) {
                found.insert(rest.to_ascii_lowercase().replace("__", "."), v);
            }
        }
        for (k, v) in found {
            self.set(&k, &v).map_err(|e| CliError::Config(format!("{ENV_PREFIX}{}: {e}", k.to_ascii_uppercase())))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.fleet.validate()?;
        if let Some(s) = &self.second {
            s.validate()?;
        }
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds must list at least one seed".into()));
        }
        if self.finetune.epochs == 0 || self.finetune.batch_size == 0 {
            return Err(CliError::Config("finetune.epochs and finetune.batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Every setting in canonical order, as `(key, value)` pairs.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut push = |k: &str, v: String| out.push((k.to_string(), v));
        let (m, p, f) = (&self.model, &self.pretrain, &self.finetune);
        push("model.steps", m.steps.to_string());
        push("model.channels", m.channels.to_string());
        push("model.d_f", m.d_f.to_string());
        push("model.d_h", m.d_h.to_string());
        push("pretrain.tau", p.tau.to_string());
        push("pretrain.mask_ratio", p.mask_ratio.to_string());
        push("pretrain.mean_masked_run", p.mean_masked_run.to_string());
        push("pretrain.batch_size", p.batch_size.to_string());
        push("pretrain.epochs", p.epochs.to_string());
        push("pretrain.peak_lr", p.peak_lr.to_string());
        push("pretrain.warmup_fraction", p.warmup_fraction.to_string());
        push("pretrain.contrastive", p.use_contrastive.to_string());
        push("pretrain.corpus", self.corpus.as_str().to_string());
        push("finetune.epochs", f.epochs.to_string());
        push("finetune.patience", f.patience.to_string());
        push("finetune.batch_size", f.batch_size.to_string());
        push("finetune.peak_lr", f.peak_lr.to_string());
        push("finetune.warmup_fraction", f.warmup_fraction.to_string());
        push("finetune.linear_probe", f.linear_probe.to_string());
        push("finetune.target", self.target.to_string());
        push(
            "finetune.init",
            match self.finetune_init {
                FinetuneInit::Pretrained => "pretrained".into(),
                FinetuneInit::Random => "random".into(),
            },
        );
        push("split_seed", self.split_seed.to_string());
        push("seed", self.seed.to_string());
        push("seeds", join(&self.seeds));
        push("protocols", join(&self.protocols));
        push("out", self.out.display().to_string());
        for (k, v) in self.fleet.to_pairs() {
            push(&format!("fleet.{k}"), v);
        }
        push("second.enabled", self.second.is_some().to_string());
        if let Some(s) = &self.second {
            for (k, v) in s.to_pairs() {
                push(&format!("second.{k}"), v);
            }
        }
        out
    }

    /// The canonical text form; parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// First 16 hex digits of the SHA-256 of the canonical text, leaving out
    /// the output directory so identical runs hash identically wherever they
    /// write.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.pairs() {
            if k != "out" {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            model: self.model,
            pretrain: self.pretrain.clone(),
            finetune: self.finetune.clone(),
            seeds: self.seeds.clone(),
        }
    }

    /// The pretraining variant selected by `pretrain.corpus` and
    /// `pretrain.contrastive`.
    pub fn pretrain_init(&self) -> Init {
        Init::Pretrained { corpus: self.corpus, contrastive: self.pretrain.use_contrastive }
    }

    /// Provenance fields embedded in every artifact produced with `seeds`.
    pub fn provenance(&self, seeds: &[u64]) -> Provenance {
        Provenance { config_hash: self.hash(), seed: join(seeds), code_version: CODE_VERSION.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    /// One seed, or a comma-separated list for multi-seed reports.
    pub seed: String,
    pub code_version: String,
}

impl Provenance {
    /// One-line `#` comment for text artifacts.
    pub fn comment(&self) -> String {
        format!("# config_hash={} seed={} code_version={}", self.config_hash, self.seed, self.code_version)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_stated_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!((c.model.d_f, c.model.d_h), (32, 128));
        assert_eq!(c.pretrain.batch_size, 32);
        assert_eq!((c.pretrain.epochs, c.finetune.epochs), (50, 200));
        assert_eq!((c.pretrain.tau, c.pretrain.mask_ratio, c.pretrain.peak_lr), (0.1, 0.5, 0.01));
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("model.d_h", "64").unwrap();
        c.set("protocols", "ablation, age_shift").unwrap();
        c.set("second.enabled", "false").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text(), Path::new("x")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn hash_tracks_settings_but_not_output_dir() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.set("pretrain.tau", "0.2").unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn env_overrides() {
        let mut c = RunConfig::default();
        c.apply_env([
            ("EVCAP_PRETRAIN__EPOCHS".to_string(), "3".to_string()),
            ("EVCAP_MODEL__D_F".to_string(), "8".to_string()),
            ("HOME".to_string(), "/root".to_string()),
        ])
        .unwrap();
        assert_eq!((c.pretrain.epochs, c.model.d_f), (3, 8));
        assert!(c.apply_env([("EVCAP_NOPE".to_string(), "1".to_string())]).is_err());
    }

    #[test]
    fn bad_lines_report_their_number() {
        let mut c = RunConfig::default();
        let err = c.apply_text("# ok\nmodel.d_f = 8\nmodel.d_h: 3\n", Path::new("run.cfg")).unwrap_err();
        assert!(matches!(err, CliError::Parse { line: 3, .. }), "{err}");
        let err = c.apply_text("pretrain.epochs = many\n", Path::new("run.cfg")).unwrap_err();
        assert!(matches!(err, CliError::Parse { line: 1, .. }), "{err}");
    }
}
