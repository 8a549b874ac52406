//! Training logs (JSON lines) and evaluation reports (CSV, JSON lines, SVG).

use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use evcap_core::finetune::{EvalReport, FinetuneEpoch};
use evcap_core::pretrain::EpochRecord;
use serde::{Deserialize, Serialize};

use crate::config::Provenance;
use crate::error::{CliError, Result};

/// One pretraining epoch as written to the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainLogLine {
    pub epoch: usize,
    #[serde(rename = "L_r")]
    pub l_r: f64,
    #[serde(rename = "L_c")]
    pub l_c: Option<f64>,
    pub weight_r: f64,
    pub weight_c: f64,
    pub val_mse: Option<f64>,
    pub seconds: f64,
    #[serde(flatten)]
    pub provenance: Provenance,
}

impl PretrainLogLine {
    pub fn new(r: &EpochRecord, provenance: &Provenance) -> Self {
        Self {
            epoch: r.epoch,
            l_r: r.l_r,
            l_c: r.l_c,
            weight_r: r.weight_r,
            weight_c: r.weight_c,
            val_mse: r.val_mse,
            seconds: r.seconds,
            provenance: provenance.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLogLine {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_rmse: Option<f64>,
    #[serde(flatten)]
    pub provenance: Provenance,
}

impl FinetuneLogLine {
    pub fn new(e: &FinetuneEpoch, provenance: &Provenance) -> Self {
        Self { epoch: e.epoch, train_loss: e.train_loss, val_rmse: e.val_rmse, provenance: provenance.clone() }
    }
}

/// Appends JSON records, one per line.
pub struct JsonLines {
    out: BufWriter<File>,
    path: std::path::PathBuf,
}

impl JsonLines {
    /// Starts a new log at `path`, replacing any previous one.
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        let f = OpenOptions::new().create(true).write(true).truncate(true).open(path).map_err(|e| CliError::io(path, e))?;
        Ok(Self { out: BufWriter::new(f), path: path.to_path_buf() })
    }

    pub fn push<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| CliError::Config(format!("unserializable record: {e}")))?;
        writeln!(self.out, "{line}").and_then(|_| self.out.flush()).map_err(|e| CliError::io(&self.path, e))
    }
}

pub fn read_json_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::parse(path, i as u64 + 1, e.to_string())))
        .collect()
}

/// Flat, serializable view of an [`EvalReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub protocol: String,
    pub pretrain_corpus: String,
    pub target: String,
    pub seeds: Vec<u64>,
    pub n_test: usize,
    pub rmse: Vec<f64>,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub mape: Vec<f64>,
    pub mape_mean: f64,
    pub mape_std: f64,
    pub recon_mse: Vec<f64>,
    pub recon_mse_mean: Option<f64>,
    pub recon_mse_std: Option<f64>,
    pub mape_excluded: usize,
    #[serde(flatten)]
    pub provenance: Provenance,
}

impl ReportRow {
    pub fn new(r: &EvalReport, provenance: &Provenance) -> Self {
        let (rmse_mean, rmse_std) = r.rmse_stats();
        let (mape_mean, mape_std) = r.mape_stats();
        let recon = r.recon_stats();
        Self {
            protocol: r.protocol.clone(),
            pretrain_corpus: r.pretrain_corpus.clone(),
            target: r.target.clone(),
            seeds: r.seeds.clone(),
            n_test: r.n_test,
            rmse: r.rmse.clone(),
            rmse_mean,
            rmse_std,
            mape: r.mape.clone(),
            mape_mean,
            mape_std,
            recon_mse: r.recon_mse.clone(),
            recon_mse_mean: recon.map(|s| s.0),
            recon_mse_std: recon.map(|s| s.1),
            mape_excluded: r.mape_excluded,
            provenance: provenance.clone(),
        }
    }
}

fn semis<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

const CSV_HEADER: [&str; 18] = [
    "protocol",
    "pretrain_corpus",
    "target",
    "seeds",
    "n_test",
    "rmse_mean",
    "rmse_std",
    "mape_mean",
    "mape_std",
    "recon_mse_mean",
    "recon_mse_std",
    "rmse_per_seed",
    "mape_per_seed",
    "recon_mse_per_seed",
    "mape_excluded",
    "config_hash",
    "seed",
    "code_version",
];

pub fn reports_csv(rows: &[ReportRow]) -> Result<String> {
    let mut wr = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::Config(format!("csv encoding failed: {e}"));
    wr.write_record(CSV_HEADER).map_err(err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        wr.write_record([
            r.protocol.clone(),
            r.pretrain_corpus.clone(),
            r.target.clone(),
            semis(&r.seeds),
            r.n_test.to_string(),
            r.rmse_mean.to_string(),
            r.rmse_std.to_string(),
            r.mape_mean.to_string(),
            r.mape_std.to_string(),
            opt(r.recon_mse_mean),
            opt(r.recon_mse_std),
            semis(&r.rmse),
            semis(&r.mape),
            semis(&r.recon_mse),
            r.mape_excluded.to_string(),
            r.provenance.config_hash.clone(),
            r.provenance.seed.clone(),
            r.provenance.code_version.clone(),
        ])
        .map_err(err)?;
    }
    let bytes = wr.into_inner().map_err(|e| CliError::Config(format!("csv encoding failed: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Bar chart of mean RMSE per report with one-standard-deviation whiskers.
pub fn reports_svg(title: &str, rows: &[ReportRow]) -> String {
    let (bar, gap, left, top, height) = (36.0, 18.0, 60.0, 40.0, 220.0);
    let width = left + rows.len() as f64 * (bar + gap) + gap;
    let max = rows.iter().map(|r| r.rmse_mean + r.rmse_std).fold(0.0f64, f64::max).max(1e-9) * 1.1;
    let y = |v: f64| top + height * (1.0 - v / max);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#,
        w = width,
        h = top + height + 90.0
    );
    if let Some(p) = rows.first().map(|r| &r.provenance) {
        let _ = writeln!(s, "<!-- config_hash={} seed={} code_version={} -->", p.config_hash, p.seed, p.code_version);
    }
    let _ = writeln!(s, r#"<text x="{left}" y="20" font-size="14">{}</text>"#, escape(title));
    let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{b}" stroke="black"/>"#, b = top + height);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{b}" x2="{width}" y2="{b}" stroke="black"/>"#, b = top + height);
    for k in 0..=4 {
        let v = max * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{x}" y="{y}" text-anchor="end">{v:.2}</text>"#, x = left - 4.0, y = y(v) + 4.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="14" y="{m}" transform="rotate(-90 14 {m})" text-anchor="middle">RMSE (Ah)</text>"#,
        m = top + height / 2.0
    );
    for (i, r) in rows.iter().enumerate() {
        let x = left + gap + i as f64 * (bar + gap);
        let _ = writeln!(
            s,
            r##"<rect x="{x}" y="{y0}" width="{bar}" height="{h}" fill="#4a78b0"><title>{t}: {m:.4} ± {sd:.4}</title></rect>"##,
            y0 = y(r.rmse_mean),
            h = height - (y(r.rmse_mean) - top),
            t = escape(&format!("{} {}", r.pretrain_corpus, r.target)),
            m = r.rmse_mean,
            sd = r.rmse_std
        );
        let cx = x + bar / 2.0;
        let _ = writeln!(
            s,
            r#"<line x1="{cx}" y1="{a}" x2="{cx}" y2="{b}" stroke="black"/>"#,
            a = y(r.rmse_mean + r.rmse_std),
            b = y((r.rmse_mean - r.rmse_std).max(0.0))
        );
        let ly = top + height + 12.0;
        let _ = writeln!(
            s,
            r#"<text x="{cx}" y="{ly}" transform="rotate(40 {cx} {ly})">{}</text>"#,
            escape(&format!("{} / {}", r.pretrain_corpus, r.target))
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `<stem>.csv`, `<stem>.jsonl` and `<stem>.svg` under `dir`.
pub fn write_reports(dir: &Path, stem: &str, title: &str, rows: &[ReportRow]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let mut csv_text = String::new();
    if let Some(r) = rows.first() {
        csv_text.push_str(&r.provenance.comment());
        csv_text.push('\n');
    }
    csv_text.push_str(&reports_csv(rows)?);
    std::fs::write(&csv_path, csv_text).map_err(|e| CliError::io(&csv_path, e))?;
    let mut jl = JsonLines::create(&dir.join(format!("{stem}.jsonl")))?;
    for r in rows {
        jl.push(r)?;
    }
    let svg_path = dir.join(format!("{stem}.svg"));
    std::fs::write(&svg_path, reports_svg(title, rows)).map_err(|e| CliError::io(&svg_path, e))
}
