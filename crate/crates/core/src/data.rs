//! Charging-snippet data model, normalization, mileage partitioning and
//! vehicle-level splits.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;

use crate::array::DenseArray;
use crate::error::{Error, Result};
use crate::rng;

/// Time steps per snippet.
pub const SNIPPET_STEPS: usize = 128;
/// Monitored channels per snippet.
pub const CHANNELS: usize = 7;
/// Channel order of `series` columns.
pub const CHANNEL_NAMES: [&str; CHANNELS] =
    ["current_a", "voltage_max_v", "voltage_min_v", "temp_max_c", "temp_min_c", "soc_pct", "resistance_mohm"];
/// Column index of the charging current channel.
pub const CURRENT: usize = 0;

/// Upper mileage bound (inclusive) of D1.
pub const D1_MAX_KM: f64 = 100_000.0;
/// Upper mileage bound (inclusive) of D2.
pub const D2_MAX_KM: f64 = 150_000.0;

/// One charging record: a `T × C` series plus metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ChargingSnippet {
    pub snippet_id: String,
    pub vehicle_id: String,
    pub manufacturer_id: String,
    pub mileage_km: f64,
    pub capacity_label_ah: Option<f64>,
    pub series: DenseArray,
}

impl ChargingSnippet {
    pub fn validate(&self) -> Result<()> {
        let shape = self.series.shape();
        if shape != [SNIPPET_STEPS, CHANNELS] {
            return Err(Error::Validation(alloc::format!(
                "snippet {} has shape {:?}, expected [{SNIPPET_STEPS}, {CHANNELS}]",
                self.snippet_id,
                shape
            )));
        }
        if !(self.mileage_km >= 0.0) || !self.mileage_km.is_finite() {
            return Err(Error::Validation(alloc::format!(
                "snippet {} has invalid mileage {}",
                self.snippet_id,
                self.mileage_km
            )));
        }
        if let Some(c) = self.capacity_label_ah {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::Validation(alloc::format!(
                    "snippet {} has non-positive capacity label {c}",
                    self.snippet_id
                )));
            }
        }
        if !self.series.is_finite() {
            return Err(Error::Validation(alloc::format!("snippet {} has non-finite values", self.snippet_id)));
        }
        Ok(())
    }

    pub fn is_labeled(&self) -> bool {
        self.capacity_label_ah.is_some()
    }

    /// Peak of the raw current channel.
    pub fn max_current(&self) -> f32 {
        (0..self.series.rows()).map(|t| self.series.get(t, CURRENT)).fold(f32::NEG_INFINITY, f32::max)
    }
}

/// Mileage-defined data distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DistributionTag {
    D1,
    D2,
    D3,
}

impl DistributionTag {
    pub const ALL: [DistributionTag; 3] = [DistributionTag::D1, DistributionTag::D2, DistributionTag::D3];

    pub fn from_mileage(mileage_km: f64) -> Result<Self> {
        if !(mileage_km >= 0.0) {
            return Err(Error::Validation(alloc::format!("negative mileage {mileage_km}")));
        }
        Ok(if mileage_km <= D1_MAX_KM {
            DistributionTag::D1
        } else if mileage_km <= D2_MAX_KM {
            DistributionTag::D2
        } else {
            DistributionTag::D3
        })
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "D1" | "d1" => Ok(Self::D1),
            "D2" | "d2" => Ok(Self::D2),
            "D3" | "d3" => Ok(Self::D3),
            other => Err(Error::Validation(alloc::format!("unknown distribution {other:?}"))),
        }
    }
}

impl fmt::Display for DistributionTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::D1 => "D1",
            Self::D2 => "D2",
            Self::D3 => "D3",
        })
    }
}

pub fn assign_distribution(snippet: &ChargingSnippet) -> Result<DistributionTag> {
    DistributionTag::from_mileage(snippet.mileage_km)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Pretrain,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Split::Pretrain),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(alloc::format!("unknown split {other:?}"))),
        }
    }
}

/// Vehicle-level assignment to pretrain/validation/test, plus the labeled
/// fine-tuning subset of the pretrain vehicles.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SplitAssignment {
    pub splits: BTreeMap<String, Split>,
    pub finetune_vehicles: BTreeSet<String>,
}

impl SplitAssignment {
    pub fn split_of(&self, vehicle_id: &str) -> Option<Split> {
        self.splits.get(vehicle_id).copied()
    }

    pub fn vehicles(&self, split: Split) -> BTreeSet<String> {
        self.splits.iter().filter(|(_, s)| **s == split).map(|(v, _)| v.clone()).collect()
    }

    pub fn is_finetune(&self, vehicle_id: &str) -> bool {
        self.finetune_vehicles.contains(vehicle_id)
    }

    /// Checks that fine-tuning vehicles are pretrain vehicles. Disjointness of
    /// the three splits holds by construction of the map.
    pub fn validate(&self) -> Result<()> {
        for v in &self.finetune_vehicles {
            if self.split_of(v) != Some(Split::Pretrain) {
                return Err(Error::Leakage(alloc::format!("fine-tuning vehicle {v} is not in the pretrain split")));
            }
        }
        Ok(())
    }

    /// Fails if any snippet's vehicle is not assigned to `split`.
    pub fn ensure_all_in(&self, snippets: &[ChargingSnippet], split: Split, what: &str) -> Result<()> {
        for s in snippets {
            if self.split_of(&s.vehicle_id) != Some(split) {
                return Err(Error::Leakage(alloc::format!(
                    "{what}: snippet {} from vehicle {} is not in the {} split",
                    s.snippet_id,
                    s.vehicle_id,
                    split.as_str()
                )));
            }
        }
        Ok(())
    }
}

/// Deterministic 70/10/20 vehicle partition. The fine-tuning subset is the
/// first 10% (rounded up, at least one) of the shuffled pretrain vehicles.
pub fn make_splits(vehicles: &[String], seed: u64) -> Result<SplitAssignment> {
    let mut ids: Vec<String> = vehicles.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if ids.len() < 10 {
        return Err(Error::Config(alloc::format!("need at least 10 vehicles to split, got {}", ids.len())));
    }
    ids.shuffle(&mut rng::stream(seed, rng::ids::SPLIT));
    let n = ids.len();
    let n_pre = libm::round(0.7 * n as f64) as usize;
    let n_val = libm::round(0.1 * n as f64).max(1.0) as usize;
    let n_fine = libm::ceil(0.1 * n_pre as f64).max(1.0) as usize;
    let mut out = SplitAssignment::default();
    for (i, v) in ids.into_iter().enumerate() {
        let split = if i < n_pre {
            Split::Pretrain
        } else if i < n_pre + n_val {
            Split::Validation
        } else {
            Split::Test
        };
        if i < n_fine {
            out.finetune_vehicles.insert(v.clone());
        }
        out.splits.insert(v, split);
    }
    Ok(out)
}

/// Sorted unique vehicle ids of a corpus.
pub fn vehicle_ids(snippets: &[ChargingSnippet]) -> Vec<String> {
    snippets.iter().map(|s| s.vehicle_id.clone()).collect::<BTreeSet<_>>().into_iter().collect()
}

/// Per-channel corpus statistics for range-adjusted z-scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub range: Vec<f64>,
}

impl NormalizationStats {
    /// Pooled over every time step of every snippet.
    pub fn compute(snippets: &[ChargingSnippet]) -> Result<Self> {
        let first = snippets.first().ok_or_else(|| Error::Config("no snippets to compute statistics".to_string()))?;
        let c = first.series.cols();
        let mut sum = alloc::vec![0.0f64; c];
        let mut sq = alloc::vec![0.0f64; c];
        let mut lo = alloc::vec![f64::INFINITY; c];
        let mut hi = alloc::vec![f64::NEG_INFINITY; c];
        let mut count = 0usize;
        for s in snippets {
            if s.series.cols() != c {
                return Err(Error::Schema(alloc::format!("snippet {} has {} channels, expected {c}", s.snippet_id, s.series.cols())));
            }
            for t in 0..s.series.rows() {
                for (ch, &v) in s.series.row(t).iter().enumerate() {
                    let v = v as f64;
                    sum[ch] += v;
                    sq[ch] += v * v;
                    lo[ch] = lo[ch].min(v);
                    hi[ch] = hi[ch].max(v);
                }
                count += 1;
            }
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| libm::sqrt((q / n - m * m).max(0.0))).collect();
        let range = hi.iter().zip(&lo).map(|(h, l)| h - l).collect();
        Ok(Self { mean, std, range })
    }

    /// Statistics from pretrain-split snippets only; any other vehicle is a
    /// leakage error.
    pub fn from_pretrain_split(snippets: &[ChargingSnippet], splits: &SplitAssignment) -> Result<Self> {
        splits.ensure_all_in(snippets, Split::Pretrain, "normalization statistics")?;
        Self::compute(snippets)
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn divisor(&self, ch: usize) -> f64 {
        self.std[ch].max(0.01 * self.range[ch]).max(1e-6)
    }

    fn check(&self, s: &ChargingSnippet) -> Result<()> {
        if s.series.cols() != self.channels() {
            return Err(Error::Schema(alloc::format!(
                "statistics cover {} channels, snippet {} has {}",
                self.channels(),
                s.snippet_id,
                s.series.cols()
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, s: &ChargingSnippet) -> Result<ChargingSnippet> {
        self.check(s)?;
        let mut out = s.clone();
        let c = self.channels();
        for (i, v) in out.series.values_mut().iter_mut().enumerate() {
            let ch = i % c;
            *v = ((*v as f64 - self.mean[ch]) / self.divisor(ch)) as f32;
        }
        Ok(out)
    }

    pub fn denormalize(&self, s: &ChargingSnippet) -> Result<ChargingSnippet> {
        self.check(s)?;
        let mut out = s.clone();
        let c = self.channels();
        for (i, v) in out.series.values_mut().iter_mut().enumerate() {
            let ch = i % c;
            *v = (*v as f64 * self.divisor(ch) + self.mean[ch]) as f32;
        }
        Ok(out)
    }

    pub fn normalize_all(&self, snippets: &[ChargingSnippet]) -> Result<Vec<ChargingSnippet>> {
        snippets.iter().map(|s| self.normalize(s)).collect()
    }
}

/// Free-function form of [`NormalizationStats::normalize`].
pub fn normalize(snippet: &ChargingSnippet, stats: &NormalizationStats) -> Result<ChargingSnippet> {
    stats.normalize(snippet)
}
