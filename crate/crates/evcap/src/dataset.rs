//! Dataset CSV (one row per snippet time step) and the split manifest CSV.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use evcap_core::data::{ChargingSnippet, Split, SplitAssignment, CHANNELS, CHANNEL_NAMES, SNIPPET_STEPS};
use evcap_core::DenseArray;

use crate::config::Provenance;
use crate::error::{CliError, Result};

const META_COLUMNS: [&str; 6] = ["snippet_id", "vehicle_id", "manufacturer_id", "mileage_km", "capacity_ah", "t_index"];
const MANIFEST_COLUMNS: [&str; 3] = ["vehicle_id", "split", "finetune_flag"];

pub fn dataset_header() -> Vec<&'static str> {
    META_COLUMNS.iter().chain(CHANNEL_NAMES.iter()).copied().collect()
}

pub(crate) fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::io(path, e))
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

pub(crate) fn csv_reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().comment(Some(b'#')).flexible(true).from_reader(r)
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> CliError {
    let line = e.position().map_or(0, |p| p.line());
    CliError::parse(path, line, e.to_string())
}

pub(crate) fn check_header(path: &Path, rd: &mut csv::Reader<impl Read>, expected: &[&str]) -> Result<()> {
    let header = rd.headers().map_err(|e| csv_err(path, e))?.clone();
    let line = header.position().map_or(1, |p| p.line());
    if header.iter().map(str::trim).ne(expected.iter().copied()) {
        return Err(CliError::parse(path, line, format!("header must be {}", expected.join(","))));
    }
    Ok(())
}

pub(crate) fn write_comment(w: &mut impl Write, path: &Path, prov: Option<&Provenance>) -> Result<()> {
    if let Some(p) = prov {
        writeln!(w, "{}", p.comment()).map_err(|e| CliError::io(path, e))?;
    }
    Ok(())
}

pub fn write_dataset<W: Write>(snippets: &[ChargingSnippet], w: W, prov: Option<&Provenance>, path: &Path) -> Result<()> {
    let mut w = w;
    write_comment(&mut w, path, prov)?;
    let mut wr = csv::Writer::from_writer(w);
    let io = |e: csv::Error| CliError::Io { path: path.to_path_buf(), source: e.into() };
    wr.write_record(dataset_header()).map_err(io)?;
    for s in snippets {
        s.validate()?;
        let label = s.capacity_label_ah.map(|c| c.to_string()).unwrap_or_default();
        let mileage = s.mileage_km.to_string();
        for t in 0..SNIPPET_STEPS {
            let mut rec: Vec<String> = vec![
                s.snippet_id.clone(),
                s.vehicle_id.clone(),
                s.manufacturer_id.clone(),
                mileage.clone(),
                label.clone(),
                t.to_string(),
            ];
            rec.extend(s.series.row(t).iter().map(|v| v.to_string()));
            wr.write_record(&rec).map_err(io)?;
        }
    }
    wr.flush().map_err(|e| CliError::io(path, e))
}

pub fn save_dataset(snippets: &[ChargingSnippet], path: &Path, prov: Option<&Provenance>) -> Result<()> {
    write_dataset(snippets, create(path)?, prov, path)
}

/// Snippet being assembled from consecutive rows.
struct Partial {
    meta: [String; 5],
    start_line: u64,
    values: Vec<f32>,
}

impl Partial {
    fn finish(self, path: &Path, end_line: u64) -> Result<ChargingSnippet> {
        let rows = self.values.len() / CHANNELS;
        if rows != SNIPPET_STEPS {
            return Err(CliError::parse(
                path,
                end_line,
                format!("snippet {} has {rows} rows, expected {SNIPPET_STEPS}", self.meta[0]),
            ));
        }
        let [snippet_id, vehicle_id, manufacturer_id, mileage, label] = self.meta;
        let mileage_km: f64 = mileage
            .parse()
            .map_err(|_| CliError::parse(path, self.start_line, format!("invalid mileage {mileage:?}")))?;
        let capacity_label_ah = if label.is_empty() {
            None
        } else {
            Some(label.parse().map_err(|_| CliError::parse(path, self.start_line, format!("invalid capacity {label:?}")))?)
        };
        let s = ChargingSnippet {
            snippet_id,
            vehicle_id,
            manufacturer_id,
            mileage_km,
            capacity_label_ah,
            series: DenseArray::new(vec![SNIPPET_STEPS, CHANNELS], self.values)?,
        };
        s.validate().map_err(|e| CliError::parse(path, self.start_line, e.to_string()))?;
        Ok(s)
    }
}

pub fn read_dataset<R: Read>(r: R, path: &Path) -> Result<Vec<ChargingSnippet>> {
    let mut rd = csv_reader(r);
    let header = dataset_header();
    check_header(path, &mut rd, &header)?;
    let mut out = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut current: Option<Partial> = None;
    let mut last_line = 1;
    for rec in rd.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        last_line = line;
        if rec.len() != header.len() {
            return Err(CliError::parse(path, line, format!("expected {} columns, found {}", header.len(), rec.len())));
        }
        let meta: [String; 5] = std::array::from_fn(|i| rec[i].trim().to_string());
        let t: usize = rec[5].trim().parse().map_err(|_| CliError::parse(path, line, format!("invalid t_index {:?}", &rec[5])))?;
        let continues = current.as_ref().is_some_and(|p| p.meta[0] == meta[0]);
        if !continues {
            if let Some(done) = current.take() {
                out.push(done.finish(path, line)?);
            }
            if !seen.insert(meta[0].clone()) {
                return Err(CliError::parse(path, line, format!("rows of snippet {} are not contiguous", meta[0])));
            }
            current = Some(Partial { meta: meta.clone(), start_line: line, values: Vec::with_capacity(SNIPPET_STEPS * CHANNELS) });
        }
        let p = current.as_mut().expect("set above");
        if p.meta != meta {
            return Err(CliError::parse(path, line, format!("metadata of snippet {} changes between rows", p.meta[0])));
        }
        let expected = p.values.len() / CHANNELS;
        if t < expected {
            return Err(CliError::parse(path, line, format!("duplicate t_index {t} for snippet {}", p.meta[0])));
        }
        if t != expected {
            return Err(CliError::parse(path, line, format!("t_index {t} of snippet {} should be {expected}", p.meta[0])));
        }
        if expected >= SNIPPET_STEPS {
            return Err(CliError::parse(path, line, format!("snippet {} has more than {SNIPPET_STEPS} rows", p.meta[0])));
        }
        for (ch, name) in CHANNEL_NAMES.iter().enumerate() {
            let raw = rec[META_COLUMNS.len() + ch].trim();
            let v: f32 = raw.parse().map_err(|_| CliError::parse(path, line, format!("invalid {name} value {raw:?}")))?;
            p.values.push(v);
        }
    }
    if let Some(done) = current {
        out.push(done.finish(path, last_line)?);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<ChargingSnippet>> {
    read_dataset(open(path)?, path)
}

pub fn write_manifest<W: Write>(splits: &SplitAssignment, w: W, prov: Option<&Provenance>, path: &Path) -> Result<()> {
    let mut w = w;
    write_comment(&mut w, path, prov)?;
    let mut wr = csv::Writer::from_writer(w);
    let io = |e: csv::Error| CliError::Io { path: path.to_path_buf(), source: e.into() };
    wr.write_record(MANIFEST_COLUMNS).map_err(io)?;
    for (v, split) in &splits.splits {
        let flag = if splits.is_finetune(v) { "1" } else { "0" };
        wr.write_record([v.as_str(), split.as_str(), flag]).map_err(io)?;
    }
    wr.flush().map_err(|e| CliError::io(path, e))
}

pub fn save_manifest(splits: &SplitAssignment, path: &Path, prov: Option<&Provenance>) -> Result<()> {
    write_manifest(splits, create(path)?, prov, path)
}

pub fn read_manifest<R: Read>(r: R, path: &Path) -> Result<SplitAssignment> {
    let mut rd = csv_reader(r);
    check_header(path, &mut rd, &MANIFEST_COLUMNS)?;
    let mut out = SplitAssignment::default();
    for rec in rd.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != MANIFEST_COLUMNS.len() {
            return Err(CliError::parse(path, line, format!("expected 3 columns, found {}", rec.len())));
        }
        let vehicle = rec[0].trim().to_string();
        let split = Split::parse(&rec[1]).map_err(|e| CliError::parse(path, line, e.to_string()))?;
        let flag = match rec[2].trim() {
            "1" | "true" => true,
            "0" | "false" => false,
            other => return Err(CliError::parse(path, line, format!("invalid finetune_flag {other:?}"))),
        };
        if out.splits.insert(vehicle.clone(), split).is_some() {
            return Err(CliError::parse(path, line, format!("vehicle {vehicle} listed twice")));
        }
        if flag {
            out.finetune_vehicles.insert(vehicle);
        }
    }
    out.validate()?;
    Ok(out)
}

pub fn load_manifest(path: &Path) -> Result<SplitAssignment> {
    read_manifest(open(path)?, path)
}
