//! Similarity dump: one CSV row per (row, column) pair of a batch's
//! similarity matrix, with the reconstruction weight that row assigns to
//! that column.

use std::io::{Read, Write};
use std::path::Path;

use evcap_core::data::ChargingSnippet;
use evcap_core::pretrain::SimilarityRecord;
use evcap_core::DenseArray;

use crate::config::Provenance;
use crate::dataset::{check_header, create, csv_err, csv_reader, open, write_comment};
use crate::error::{CliError, Result};

const COLUMNS: [&str; 8] =
    ["row_snippet_id", "row_channel", "row_view", "col_snippet_id", "col_channel", "col_view", "similarity", "weight"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowLabel {
    pub snippet_id: String,
    pub channel: String,
    /// `original` or `masked`.
    pub view: String,
}

/// Labels of the interleaved batch rows built from `snippets`: for each
/// snippet and channel, the original row followed by its masked copy.
pub fn batch_labels(snippets: &[&ChargingSnippet], channel_names: &[&str]) -> Vec<RowLabel> {
    let mut out = Vec::with_capacity(2 * snippets.len() * channel_names.len());
    for s in snippets {
        for ch in channel_names {
            for view in ["original", "masked"] {
                out.push(RowLabel { snippet_id: s.snippet_id.clone(), channel: ch.to_string(), view: view.to_string() });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityDump {
    pub labels: Vec<RowLabel>,
    pub similarity: DenseArray,
    pub weights: DenseArray,
}

pub fn write_dump<W: Write>(record: &SimilarityRecord, labels: &[RowLabel], w: W, prov: Option<&Provenance>, path: &Path) -> Result<()> {
    let n = record.rows();
    if labels.len() != n {
        return Err(CliError::Config(format!("{} row labels for a {n}-row similarity matrix", labels.len())));
    }
    let mut w = w;
    write_comment(&mut w, path, prov)?;
    let mut wr = csv::Writer::from_writer(w);
    let io = |e: csv::Error| CliError::Io { path: path.to_path_buf(), source: e.into() };
    wr.write_record(COLUMNS).map_err(io)?;
    for (i, a) in labels.iter().enumerate() {
        for (j, b) in labels.iter().enumerate() {
            let sim = record.matrix.get(i, j).to_string();
            let wt = record.weights.get(i, j).to_string();
            wr.write_record([&a.snippet_id, &a.channel, &a.view, &b.snippet_id, &b.channel, &b.view, &sim, &wt]).map_err(io)?;
        }
    }
    wr.flush().map_err(|e| CliError::io(path, e))
}

pub fn save_dump(record: &SimilarityRecord, labels: &[RowLabel], path: &Path, prov: Option<&Provenance>) -> Result<()> {
    write_dump(record, labels, create(path)?, prov, path)
}

pub fn read_dump<R: Read>(r: R, path: &Path) -> Result<SimilarityDump> {
    let mut rd = csv_reader(r);
    check_header(path, &mut rd, &COLUMNS)?;
    let mut labels: Vec<RowLabel> = Vec::new();
    let mut sim = Vec::new();
    let mut wts = Vec::new();
    let mut cells = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != COLUMNS.len() {
            return Err(CliError::parse(path, line, format!("expected {} columns, found {}", COLUMNS.len(), rec.len())));
        }
        let label = |o: usize| RowLabel { snippet_id: rec[o].to_string(), channel: rec[o + 1].to_string(), view: rec[o + 2].to_string() };
        let (a, b) = (label(0), label(3));
        let num = |k: usize| -> Result<f32> {
            rec[k].trim().parse().map_err(|_| CliError::parse(path, line, format!("invalid {} {:?}", COLUMNS[k], &rec[k])))
        };
        sim.push(num(6)?);
        wts.push(num(7)?);
        cells.push((a, b, line));
    }
    // The first row of the matrix lists every column label in order.
    if let Some((first, _, _)) = cells.first() {
        labels = cells.iter().take_while(|(a, _, _)| a == first).map(|(_, b, _)| b.clone()).collect();
    }
    let n = labels.len();
    if cells.len() != n * n {
        let line = cells.last().map_or(1, |c| c.2);
        return Err(CliError::parse(path, line, format!("{} cells do not form a square matrix over {n} rows", cells.len())));
    }
    for (k, (a, b, line)) in cells.iter().enumerate() {
        if *a != labels[k / n] || *b != labels[k % n] {
            return Err(CliError::parse(path, *line, "cells are not in row-major order of the row labels"));
        }
    }
    Ok(SimilarityDump {
        labels,
        similarity: DenseArray::new(vec![n, n], sim)?,
        weights: DenseArray::new(vec![n, n], wts)?,
    })
}

pub fn load_dump(path: &Path) -> Result<SimilarityDump> {
    read_dump(open(path)?, path)
}
