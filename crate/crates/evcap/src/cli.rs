//! The `evcap` command line: argument parsing, config layering and the six
//! workflow commands.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::time::Instant;

use clap::{Parser, Subcommand};
use evcap_core::data::{make_splits, vehicle_ids, DistributionTag, Split, CHANNEL_NAMES};
use evcap_core::finetune::{finetune, mape, rmse, EvalReport, FinetunedModel, LabelScaler};
use evcap_core::model::{ModelConfig, ModelParams};
use evcap_core::pretrain::{forward_batch, make_batch, EpochRecord, PretrainObserver};
use evcap_core::protocol::{Corpora, Experiment, Fleet, Init, PretrainCorpus, Protocol};
use evcap_core::rng;
use evcap_core::synthgen::{generate_fleet, generate_novel_slice};

use crate::checkpoint;
use crate::config::{FinetuneInit, Provenance, RunConfig};
use crate::dataset::{load_dataset, load_manifest, save_dataset, save_manifest};
use crate::error::{CliError, Result};
use crate::report::{write_reports, FinetuneLogLine, JsonLines, PretrainLogLine, ReportRow};
use crate::simdump::{batch_labels, save_dump};

#[derive(Debug, Parser)]
#[command(name = "evcap", version, about = "Masked-reconstruction pretraining for EV battery capacity estimation")]
pub struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed of single-run commands; also the only seed of `eval`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Extra `key=value` override; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic fleets and the novel-pattern slice.
    Gen,
    /// Assign vehicles to pretrain/validation/test splits.
    Split,
    /// Pretrain the encoder; writes a checkpoint every epoch and a JSON-lines log.
    Pretrain,
    /// Fine-tune on one target distribution.
    Finetune,
    /// Score a fine-tuned checkpoint, or run whole protocols with `--protocol`.
    Eval {
        /// Protocol to run end to end; repeatable. Overrides `protocols`.
        #[arg(long = "protocol")]
        protocols: Vec<String>,
    },
    /// Write one validation batch's similarity matrix and weights as CSV.
    DumpSim,
}

/// Resolves the run configuration: defaults, config file, environment,
/// `--set`, then the dedicated flags.
pub fn resolve_config(cli: &Cli, env: impl IntoIterator<Item = (String, String)>) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        cfg.apply_text(&text, path)?;
    }
    cfg.apply_env(env)?;
    for kv in &cli.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k, v)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        if matches!(cli.command, Command::Eval { .. }) {
            cfg.seeds = vec![seed];
        }
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Command::Eval { protocols } = &cli.command {
        if !protocols.is_empty() {
            cfg.protocols = protocols.iter().map(|p| Protocol::parse(p)).collect::<evcap_core::Result<_>>()?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// File layout under the output directory.
pub struct Layout<'a> {
    pub cfg: &'a RunConfig,
}

impl Layout<'_> {
    pub fn dataset(&self) -> PathBuf {
        self.cfg.out.join("dataset.csv")
    }
    pub fn second_dataset(&self) -> PathBuf {
        self.cfg.out.join("dataset_second.csv")
    }
    pub fn novel(&self) -> PathBuf {
        self.cfg.out.join("novel.csv")
    }
    pub fn splits(&self) -> PathBuf {
        self.cfg.out.join("splits.csv")
    }
    pub fn second_splits(&self) -> PathBuf {
        self.cfg.out.join("splits_second.csv")
    }

    fn pretrain_stem(&self) -> String {
        let variant = if self.cfg.pretrain.use_contrastive { "" } else { "-lr-only" };
        format!("pretrain-{}{variant}-s{}", self.cfg.corpus.as_str(), self.cfg.seed)
    }

    fn finetune_stem(&self) -> String {
        let from = match self.cfg.finetune_init {
            FinetuneInit::Random => "random".to_string(),
            FinetuneInit::Pretrained => self.pretrain_stem().replacen("pretrain-", "", 1),
        };
        let from = from.trim_end_matches(&format!("-s{}", self.cfg.seed)).to_string();
        format!("finetune-{from}-{}-s{}", self.cfg.target, self.cfg.seed)
    }

    pub fn pretrain_checkpoint(&self) -> PathBuf {
        self.cfg.out.join(format!("{}.ckpt", self.pretrain_stem()))
    }
    pub fn pretrain_log(&self) -> PathBuf {
        self.cfg.out.join(format!("{}.jsonl", self.pretrain_stem()))
    }
    pub fn finetune_checkpoint(&self) -> PathBuf {
        self.cfg.out.join(format!("{}.ckpt", self.finetune_stem()))
    }
    pub fn finetune_log(&self) -> PathBuf {
        self.cfg.out.join(format!("{}.jsonl", self.finetune_stem()))
    }
    pub fn eval_stem(&self) -> String {
        format!("eval-{}", self.finetune_stem().replacen("finetune-", "", 1))
    }
    pub fn similarity_dump(&self) -> PathBuf {
        self.cfg.out.join(format!("similarity-{}.csv", self.pretrain_stem()))
    }
}

fn echo_config(cfg: &RunConfig, command: &str) -> Result<()> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| CliError::io(&cfg.out, e))?;
    let path = cfg.out.join(format!("{command}.cfg"));
    // The echo sits inside the output directory, so the `out` line is dropped
    // to keep artifacts independent of where they were written.
    let body: String = cfg.to_text().lines().filter(|l| !l.starts_with("out =")).map(|l| format!("{l}\n")).collect();
    let text = format!("{}\n{body}", cfg.provenance(&[cfg.seed]).comment());
    std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingArtifact { path: path.to_path_buf(), what: what.to_string() })
    }
}

pub fn cmd_gen(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let l = Layout { cfg };
    let prov = cfg.provenance(&[cfg.fleet.seed]);
    let mut written = vec![l.dataset(), l.novel()];
    save_dataset(&generate_fleet(&cfg.fleet)?, &l.dataset(), Some(&prov))?;
    save_dataset(&generate_novel_slice(&cfg.fleet)?, &l.novel(), Some(&prov))?;
    if let Some(second) = &cfg.second {
        let prov = cfg.provenance(&[second.seed]);
        save_dataset(&generate_fleet(second)?, &l.second_dataset(), Some(&prov))?;
        written.push(l.second_dataset());
    }
    echo_config(cfg, "gen")?;
    Ok(written)
}

pub fn cmd_split(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let l = Layout { cfg };
    require(&l.dataset(), "run `evcap gen` first")?;
    let prov = cfg.provenance(&[cfg.split_seed]);
    let primary = load_dataset(&l.dataset())?;
    save_manifest(&make_splits(&vehicle_ids(&primary), cfg.split_seed)?, &l.splits(), Some(&prov))?;
    let mut written = vec![l.splits()];
    if cfg.second.is_some() {
        require(&l.second_dataset(), "run `evcap gen` with second.enabled = true first")?;
        let second = load_dataset(&l.second_dataset())?;
        save_manifest(&make_splits(&vehicle_ids(&second), cfg.split_seed)?, &l.second_splits(), Some(&prov))?;
        written.push(l.second_splits());
    }
    echo_config(cfg, "split")?;
    Ok(written)
}

/// Loads the generated fleets and their split manifests.
pub fn load_corpora(cfg: &RunConfig) -> Result<Corpora> {
    let l = Layout { cfg };
    require(&l.dataset(), "run `evcap gen` first")?;
    require(&l.splits(), "run `evcap split` first")?;
    let primary = Fleet::new(load_dataset(&l.dataset())?, load_manifest(&l.splits())?)?;
    let second = if cfg.second.is_some() && l.second_dataset().exists() {
        require(&l.second_splits(), "run `evcap split` first")?;
        Some(Fleet::new(load_dataset(&l.second_dataset())?, load_manifest(&l.second_splits())?)?)
    } else {
        None
    };
    let novel = if l.novel().exists() { load_dataset(&l.novel())? } else { Vec::new() };
    Ok(Corpora { primary, second, novel })
}

fn checkpoint_meta(cfg: &RunConfig, prov: &Provenance, kind: &str, epoch: usize) -> BTreeMap<String, String> {
    let mut meta: BTreeMap<String, String> =
        cfg.pairs().into_iter().filter(|(k, _)| k != "out").map(|(k, v)| (format!("config.{k}"), v)).collect();
    meta.insert("kind".into(), kind.into());
    meta.insert("seed".into(), prov.seed.clone());
    meta.insert("epoch".into(), epoch.to_string());
    meta.insert("config_hash".into(), prov.config_hash.clone());
    meta.insert("code_version".into(), prov.code_version.clone());
    meta
}

/// Per-epoch hook: appends the log line and replaces the checkpoint, so a
/// diverged run leaves its last good epoch on disk.
struct EpochWriter {
    cfg: RunConfig,
    prov: Provenance,
    log: JsonLines,
    checkpoint: PathBuf,
    start: Instant,
    failure: Rc<RefCell<Option<CliError>>>,
}

impl PretrainObserver for EpochWriter {
    fn now(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    fn on_epoch(&mut self, record: &EpochRecord, params: &ModelParams) -> evcap_core::Result<()> {
        let meta = checkpoint_meta(&self.cfg, &self.prov, "pretrain", record.epoch);
        let res = self
            .log
            .push(&PretrainLogLine::new(record, &self.prov))
            .and_then(|_| checkpoint::save(params, &meta, &self.checkpoint));
        match res {
            Ok(()) => Ok(()),
            Err(e) => {
                let msg = e.to_string();
                *self.failure.borrow_mut() = Some(e);
                Err(evcap_core::Error::Config(msg))
            }
        }
    }
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PathBuf> {
    let l = Layout { cfg };
    let corpora = load_corpora(cfg)?;
    let prov = cfg.provenance(&[cfg.seed]);
    let failure = Rc::new(RefCell::new(None));
    let writer = EpochWriter {
        cfg: cfg.clone(),
        prov,
        log: JsonLines::create(&l.pretrain_log())?,
        checkpoint: l.pretrain_checkpoint(),
        start: Instant::now(),
        failure: failure.clone(),
    };
    let mut exp = Experiment::new(&corpora, cfg.experiment())?.with_observer(writer);
    let outcome = exp.pretrained(cfg.pretrain_init(), cfg.seed).map(|_| ());
    drop(exp);
    if let Some(e) = failure.borrow_mut().take() {
        return Err(e);
    }
    outcome?;
    echo_config(cfg, "pretrain")?;
    Ok(l.pretrain_checkpoint())
}

fn finetune_init(cfg: &RunConfig) -> Init {
    match cfg.finetune_init {
        FinetuneInit::Random => Init::Random,
        FinetuneInit::Pretrained => cfg.pretrain_init(),
    }
}

fn starting_params(cfg: &RunConfig) -> Result<ModelParams> {
    match cfg.finetune_init {
        FinetuneInit::Random => Ok(ModelParams::init(cfg.model, cfg.seed)?),
        FinetuneInit::Pretrained => {
            let path = Layout { cfg }.pretrain_checkpoint();
            require(&path, "run `evcap pretrain` first")?;
            Ok(checkpoint::load(&path, &cfg.model)?.params)
        }
    }
}

pub fn cmd_finetune(cfg: &RunConfig) -> Result<PathBuf> {
    let l = Layout { cfg };
    let corpora = load_corpora(cfg)?;
    let start = starting_params(cfg)?;
    let exp = Experiment::new(&corpora, cfg.experiment())?;
    let data = exp.target_data(finetune_init(cfg), cfg.target)?;
    let (model, report) = finetune(&start, &data.train, &data.val, &cfg.finetune, cfg.seed)?;
    let prov = cfg.provenance(&[cfg.seed]);
    let mut log = JsonLines::create(&l.finetune_log())?;
    for e in &report.epochs {
        log.push(&FinetuneLogLine::new(e, &prov))?;
    }
    let mut meta = checkpoint_meta(cfg, &prov, "finetune", report.best_epoch);
    meta.insert("label_mean".into(), model.labels.mean.to_string());
    meta.insert("label_std".into(), model.labels.std.to_string());
    checkpoint::save(&model.params, &meta, &l.finetune_checkpoint())?;
    echo_config(cfg, "finetune")?;
    Ok(l.finetune_checkpoint())
}

fn load_finetuned(path: &Path, model: &ModelConfig) -> Result<FinetunedModel> {
    let ck = checkpoint::load(path, model)?;
    let get = |k: &str| -> Result<f64> {
        ck.meta.get(k).and_then(|v| v.parse().ok()).ok_or_else(|| CliError::checkpoint(path, format!("not a fine-tuned checkpoint: no {k}")))
    };
    Ok(FinetunedModel { labels: LabelScaler { mean: get("label_mean")?, std: get("label_std")? }, params: ck.params })
}

fn eval_checkpoint(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let l = Layout { cfg };
    let path = l.finetune_checkpoint();
    require(&path, "run `evcap finetune` first")?;
    let model = load_finetuned(&path, &cfg.model)?;
    let corpora = load_corpora(cfg)?;
    let init = finetune_init(cfg);
    let exp = Experiment::new(&corpora, cfg.experiment())?;
    let test = exp.target_data(init, cfg.target)?.test;
    let labels: Vec<f64> = test.iter().map(|s| s.capacity_label_ah.unwrap_or(0.0)).collect();
    let preds = model.predict_snippets(&test)?;
    let m = mape(&preds, &labels)?;
    let report = EvalReport {
        protocol: "checkpoint".into(),
        pretrain_corpus: init.label(&corpora),
        target: format!("{}-{}", corpora.primary.manufacturer, cfg.target),
        seeds: vec![cfg.seed],
        rmse: vec![rmse(&preds, &labels)?],
        mape: vec![m.percent],
        recon_mse: Vec::new(),
        n_test: test.len(),
        mape_excluded: m.excluded,
    };
    report.validate()?;
    let rows = vec![ReportRow::new(&report, &cfg.provenance(&[cfg.seed]))];
    let stem = l.eval_stem();
    write_reports(&cfg.out, &stem, &stem, &rows)?;
    Ok(["csv", "jsonl", "svg"].iter().map(|ext| cfg.out.join(format!("{stem}.{ext}"))).collect())
}

/// Runs every configured protocol and writes one report set per protocol.
pub fn eval_protocols(cfg: &RunConfig, corpora: &Corpora, progress: impl FnMut(&str) + 'static) -> Result<Vec<(Protocol, Vec<EvalReport>)>> {
    let mut exp = Experiment::new(corpora, cfg.experiment())?.with_progress(progress);
    let mut out = Vec::new();
    for &p in &cfg.protocols {
        out.push((p, exp.run(p)?));
    }
    Ok(out)
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    if cfg.protocols.is_empty() {
        let written = eval_checkpoint(cfg)?;
        echo_config(cfg, "eval")?;
        return Ok(written);
    }
    let corpora = load_corpora(cfg)?;
    let prov = cfg.provenance(&cfg.seeds);
    let start = Instant::now();
    let results = eval_protocols(cfg, &corpora, move |m| eprintln!("[{:>7.1}s] {m}", start.elapsed().as_secs_f64()))?;
    let mut written = Vec::new();
    for (p, reports) in results {
        let rows: Vec<ReportRow> = reports.iter().map(|r| ReportRow::new(r, &prov)).collect();
        let stem = format!("report-{p}");
        write_reports(&cfg.out, &stem, &format!("{p}: test RMSE over seeds {}", prov.seed), &rows)?;
        written.extend(["csv", "jsonl", "svg"].iter().map(|ext| cfg.out.join(format!("{stem}.{ext}"))));
    }
    echo_config(cfg, "eval")?;
    Ok(written)
}

pub fn cmd_dump_sim(cfg: &RunConfig) -> Result<PathBuf> {
    let l = Layout { cfg };
    let path = l.pretrain_checkpoint();
    require(&path, "run `evcap pretrain` first")?;
    let params = checkpoint::load(&path, &cfg.model)?.params;
    let corpora = load_corpora(cfg)?;
    let fleet = match cfg.corpus {
        PretrainCorpus::SecondManufacturer => {
            corpora.second.as_ref().ok_or_else(|| CliError::Config("no second-manufacturer corpus".into()))?
        }
        _ => &corpora.primary,
    };
    let chosen: Vec<_> = fleet
        .snippets
        .iter()
        .filter(|s| fleet.splits.split_of(&s.vehicle_id) == Some(Split::Validation))
        .filter(|s| evcap_core::data::assign_distribution(s).ok() == Some(DistributionTag::D1))
        .take(cfg.pretrain.batch_size)
        .collect();
    if chosen.is_empty() {
        return Err(CliError::Config("no D1 validation snippets to dump".into()));
    }
    let normalized: Vec<_> = chosen.iter().map(|s| fleet.stats.normalize(s)).collect::<evcap_core::Result<_>>()?;
    let refs: Vec<_> = normalized.iter().map(|s| &s.series).collect();
    let mut mask_rng = rng::stream(cfg.seed, rng::ids::VALIDATION_MASK);
    let batch = make_batch(&refs, &cfg.model, &cfg.pretrain, &mut mask_rng)?;
    let out = forward_batch(&params, &batch, &cfg.pretrain)?;
    let labels = batch_labels(&chosen, &CHANNEL_NAMES[..cfg.model.channels]);
    save_dump(&out.record, &labels, &l.similarity_dump(), Some(&cfg.provenance(&[cfg.seed])))?;
    echo_config(cfg, "dump-sim")?;
    Ok(l.similarity_dump())
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run(args: impl IntoIterator<Item = String>, env: impl IntoIterator<Item = (String, String)>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli, env) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli, env: impl IntoIterator<Item = (String, String)>) -> Result<Vec<PathBuf>> {
    let cfg = resolve_config(cli, env)?;
    match &cli.command {
        Command::Gen => cmd_gen(&cfg),
        Command::Split => cmd_split(&cfg),
        Command::Pretrain => cmd_pretrain(&cfg).map(|p| vec![p]),
        Command::Finetune => cmd_finetune(&cfg).map(|p| vec![p]),
        Command::Eval { .. } => cmd_eval(&cfg),
        Command::DumpSim => cmd_dump_sim(&cfg).map(|p| vec![p]),
    }
}
