//! Geometric masking: alternating masked/unmasked runs with geometrically
//! distributed lengths, drawn independently per channel.

use alloc::vec::Vec;

use rand::Rng;

use crate::array::DenseArray;
use crate::error::{dim_err, Error, Result};

/// Default mean masked-run length.
pub const DEFAULT_MEAN_MASKED_RUN: f64 = 3.0;

/// A boolean mask over one channel (`true` = masked).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub mask: Vec<bool>,
    pub ratio: f64,
    pub mean_masked_run: f64,
}

impl MaskSpec {
    pub fn masked_fraction(&self) -> f64 {
        if self.mask.is_empty() {
            return 0.0;
        }
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }

    /// Lengths of the maximal masked runs.
    pub fn masked_runs(&self) -> Vec<usize> {
        let mut runs = Vec::new();
        let mut cur = 0;
        for &m in &self.mask {
            if m {
                cur += 1;
            } else if cur > 0 {
                runs.push(cur);
                cur = 0;
            }
        }
        if cur > 0 {
            runs.push(cur);
        }
        runs
    }
}

/// Draws a mask from the two-state Markov chain whose stationary masked
/// fraction is `ratio` and whose masked runs have mean `mean_masked_run`.
pub fn geometric_mask<R: Rng + ?Sized>(length: usize, ratio: f64, mean_masked_run: f64, rng: &mut R) -> Result<MaskSpec> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Parameter(alloc::format!("mask ratio {ratio} outside [0, 1]")));
    }
    if !(mean_masked_run >= 1.0) || !mean_masked_run.is_finite() {
        return Err(Error::Parameter(alloc::format!("mean masked run {mean_masked_run} must be >= 1")));
    }
    let mask = if ratio == 0.0 {
        alloc::vec![false; length]
    } else if ratio == 1.0 {
        alloc::vec![true; length]
    } else {
        let leave_masked = 1.0 / mean_masked_run;
        let mean_unmasked_run = mean_masked_run * (1.0 - ratio) / ratio;
        let leave_unmasked = (1.0 / mean_unmasked_run).min(1.0);
        let mut masked = rng.random::<f64>() < ratio;
        let mut mask = Vec::with_capacity(length);
        for _ in 0..length {
            mask.push(masked);
            let p_leave = if masked { leave_masked } else { leave_unmasked };
            if rng.random::<f64>() < p_leave {
                masked = !masked;
            }
        }
        mask
    };
    Ok(MaskSpec { mask, ratio, mean_masked_run })
}

/// One independent mask per channel.
pub fn channel_masks<R: Rng + ?Sized>(
    steps: usize,
    channels: usize,
    ratio: f64,
    mean_masked_run: f64,
    rng: &mut R,
) -> Result<Vec<MaskSpec>> {
    (0..channels).map(|_| geometric_mask(steps, ratio, mean_masked_run, rng)).collect()
}

/// Zeroes masked positions of a `T × C` series; other entries are copied
/// unchanged.
pub fn apply_mask(series: &DenseArray, masks: &[MaskSpec]) -> Result<DenseArray> {
    let (t, c) = (series.rows(), series.cols());
    if masks.len() != c {
        return Err(dim_err!("{} masks for {} channels", masks.len(), c));
    }
    if let Some(m) = masks.iter().find(|m| m.mask.len() != t) {
        return Err(dim_err!("mask length {} does not match {} steps", m.mask.len(), t));
    }
    let mut out = series.clone();
    for (ch, m) in masks.iter().enumerate() {
        for (step, &masked) in m.mask.iter().enumerate() {
            if masked {
                out.set(step, ch, 0.0);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn ratio_extremes() {
        let mut rng = stream(1, 0);
        assert!(geometric_mask(128, 0.0, 3.0, &mut rng).unwrap().mask.iter().all(|&m| !m));
        assert!(geometric_mask(128, 1.0, 3.0, &mut rng).unwrap().mask.iter().all(|&m| m));
    }

    #[test]
    fn ratio_out_of_range() {
        let mut rng = stream(1, 0);
        assert!(matches!(geometric_mask(8, 1.5, 3.0, &mut rng), Err(Error::Parameter(_))));
        assert!(matches!(geometric_mask(8, -0.1, 3.0, &mut rng), Err(Error::Parameter(_))));
        assert!(matches!(geometric_mask(8, 0.5, 0.5, &mut rng), Err(Error::Parameter(_))));
    }

    #[test]
    fn identity_and_all_zero() {
        let series = DenseArray::new(alloc::vec![4, 2], (0..8).map(|v| v as f32 + 0.5).collect()).unwrap();
        let none = alloc::vec![MaskSpec { mask: alloc::vec![false; 4], ratio: 0.0, mean_masked_run: 3.0 }; 2];
        assert_eq!(apply_mask(&series, &none).unwrap(), series);
        let all = alloc::vec![MaskSpec { mask: alloc::vec![true; 4], ratio: 1.0, mean_masked_run: 3.0 }; 2];
        assert!(apply_mask(&series, &all).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_mask_keeps_unmasked_bits() {
        let mut rng = stream(9, 4);
        let series = DenseArray::new(alloc::vec![128, 3], (0..384).map(|v| (v as f32).sin()).collect()).unwrap();
        let masks = channel_masks(128, 3, 0.5, 3.0, &mut rng).unwrap();
        let out = apply_mask(&series, &masks).unwrap();
        for (ch, m) in masks.iter().enumerate() {
            for t in 0..128 {
                if m.mask[t] {
                    assert_eq!(out.get(t, ch), 0.0);
                } else {
                    assert_eq!(out.get(t, ch).to_bits(), series.get(t, ch).to_bits());
                }
            }
        }
    }

    #[test]
    fn wrong_mask_length() {
        let series = DenseArray::zeros(&[4, 1]);
        let m = alloc::vec![MaskSpec { mask: alloc::vec![false; 3], ratio: 0.0, mean_masked_run: 3.0 }];
        assert!(matches!(apply_mask(&series, &m), Err(Error::Dimension(_))));
    }

    #[test]
    fn reproducible_under_seed() {
        let a = geometric_mask(128, 0.5, 3.0, &mut stream(42, 7)).unwrap();
        let b = geometric_mask(128, 0.5, 3.0, &mut stream(42, 7)).unwrap();
        assert_eq!(a, b);
    }
}
