//! Deterministic synthetic EV fleet.
//!
//! Each vehicle carries a fast-charging share and draws its own random
//! substream from `(seed, vehicle index)`. Capacity fades linearly with
//! mileage, faster for vehicles that fast-charge more:
//!
//! `C(m) = rated · (1 − fade · m/1000 · (1 + multiplier · fast_share)) + noise`
//!
//! Slow-charging snippets (8–16 A constant current with a taper) carry the
//! capacity label; fast-charging snippets (30–60 A) are unlabeled. The
//! physical channels respond to the true capacity: state of charge rises by
//! `I·dt / C`, and internal resistance grows with the faded fraction.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::array::DenseArray;
use crate::data::{ChargingSnippet, CHANNELS, D1_MAX_KM, SNIPPET_STEPS};
use crate::error::{Error, Result};
use crate::rng;

/// Seconds between samples.
pub const SAMPLE_INTERVAL_S: f64 = 10.0;

/// Channel noise scales; `noise_std` multiplies these.
const NOISE_SCALE: [f64; CHANNELS] = [2.0, 0.05, 0.05, 2.0, 2.0, 1.0, 10.0];

const VOLTAGE_CAP_V: f64 = 4.2;
const SLOW_CURRENT_A: (f64, f64) = (8.0, 16.0);
const FAST_CURRENT_A: (f64, f64) = (30.0, 60.0);
/// Constant-current levels for the novel slice; after noise and clipping the
/// peak lies in 25–40 A.
const NOVEL_CURRENT_A: (f64, f64) = (26.0, 39.0);
const NOVEL_PEAK_A: (f64, f64) = (25.0, 40.0);

/// Affine channel transform `x · scale + shift` applied after generation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelOffset {
    pub scale: f64,
    pub shift: f64,
}

impl Default for ChannelOffset {
    fn default() -> Self {
        Self { scale: 1.0, shift: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FleetConfig {
    pub n_vehicles: usize,
    pub snippets_per_vehicle: usize,
    pub manufacturer_id: String,
    pub seed: u64,
    pub rated_capacity_ah: f64,
    /// Fractional capacity loss per 1000 km (4e-4 = 0.04 %).
    pub fade_per_1000km: f64,
    pub fast_fade_multiplier: f64,
    pub fast_charge_fraction: f64,
    pub mileage_range_km: (f64, f64),
    /// Dimensionless noise level: label noise is `noise_std · 1% · rated`,
    /// channel noise is `noise_std` times a per-channel scale.
    pub noise_std: f64,
    pub manufacturer_offsets: [ChannelOffset; CHANNELS],
}

impl Default for FleetConfig {
    fn default() -> Self {
        Self {
            n_vehicles: 40,
            snippets_per_vehicle: 30,
            manufacturer_id: "EVM1".to_string(),
            seed: 7,
            rated_capacity_ah: 150.0,
            fade_per_1000km: 4e-4,
            fast_fade_multiplier: 2.0,
            fast_charge_fraction: 0.2,
            mileage_range_km: (0.0, 200_000.0),
            noise_std: 0.1,
            manufacturer_offsets: [ChannelOffset::default(); CHANNELS],
        }
    }
}

impl FleetConfig {
    /// A second manufacturer: smaller pack, shifted sensor calibration.
    pub fn second_manufacturer(seed: u64) -> Self {
        let mut offsets = [ChannelOffset::default(); CHANNELS];
        offsets[1] = ChannelOffset { scale: 1.0, shift: 0.06 };
        offsets[2] = ChannelOffset { scale: 1.0, shift: 0.05 };
        offsets[3] = ChannelOffset { scale: 1.0, shift: 3.0 };
        offsets[4] = ChannelOffset { scale: 1.0, shift: 2.5 };
        offsets[6] = ChannelOffset { scale: 1.25, shift: 0.0 };
        Self {
            manufacturer_id: "EVM3".to_string(),
            seed,
            rated_capacity_ah: 120.0,
            fade_per_1000km: 5e-4,
            manufacturer_offsets: offsets,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_vehicles == 0 || self.snippets_per_vehicle == 0 {
            return bad("fleet needs at least one vehicle and one snippet per vehicle".into());
        }
        if !(self.rated_capacity_ah > 0.0) || !self.rated_capacity_ah.is_finite() {
            return bad(format!("rated capacity must be positive, got {}", self.rated_capacity_ah));
        }
        if !(self.fade_per_1000km >= 0.0) || !self.fade_per_1000km.is_finite() {
            return bad(format!("fade rate must be finite and non-negative, got {}", self.fade_per_1000km));
        }
        if !(self.fast_fade_multiplier >= 1.0) || !self.fast_fade_multiplier.is_finite() {
            return bad(format!("fast fade multiplier must be >= 1, got {}", self.fast_fade_multiplier));
        }
        if !(0.0..=1.0).contains(&self.fast_charge_fraction) {
            return bad(format!("fast charge fraction {} outside [0, 1]", self.fast_charge_fraction));
        }
        let (lo, hi) = self.mileage_range_km;
        if !(lo >= 0.0 && lo < hi && hi.is_finite()) {
            return bad(format!("invalid mileage range ({lo}, {hi})"));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return bad(format!("noise_std must be non-negative, got {}", self.noise_std));
        }
        if self.manufacturer_offsets.iter().any(|o| !o.scale.is_finite() || !o.shift.is_finite()) {
            return bad("manufacturer offsets must be finite".into());
        }
        Ok(())
    }

    /// Sets one field from its key=value text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: core::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
        }
        match key {
            "n_vehicles" => self.n_vehicles = num(key, value)?,
            "snippets_per_vehicle" => self.snippets_per_vehicle = num(key, value)?,
            "manufacturer_id" => self.manufacturer_id = value.trim().to_string(),
            "seed" => self.seed = num(key, value)?,
            "rated_capacity_ah" => self.rated_capacity_ah = num(key, value)?,
            "fade_per_1000km" => self.fade_per_1000km = num(key, value)?,
            "fast_fade_multiplier" => self.fast_fade_multiplier = num(key, value)?,
            "fast_charge_fraction" => self.fast_charge_fraction = num(key, value)?,
            "mileage_min_km" => self.mileage_range_km.0 = num(key, value)?,
            "mileage_max_km" => self.mileage_range_km.1 = num(key, value)?,
            "noise_std" => self.noise_std = num(key, value)?,
            _ => {
                let Some((ch, field)) = parse_offset_key(key) else {
                    return Err(Error::Config(format!("unknown fleet key {key:?}")));
                };
                let off = &mut self.manufacturer_offsets[ch];
                match field {
                    "scale" => off.scale = num(key, value)?,
                    _ => off.shift = num(key, value)?,
                }
            }
        }
        Ok(())
    }

    /// Key=value pairs covering every field, in a stable order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut push = |k: &str, v: String| out.push((k.to_string(), v));
        push("n_vehicles", format!("{}", self.n_vehicles));
        push("snippets_per_vehicle", format!("{}", self.snippets_per_vehicle));
        push("manufacturer_id", self.manufacturer_id.clone());
        push("seed", format!("{}", self.seed));
        push("rated_capacity_ah", format!("{}", self.rated_capacity_ah));
        push("fade_per_1000km", format!("{}", self.fade_per_1000km));
        push("fast_fade_multiplier", format!("{}", self.fast_fade_multiplier));
        push("fast_charge_fraction", format!("{}", self.fast_charge_fraction));
        push("mileage_min_km", format!("{}", self.mileage_range_km.0));
        push("mileage_max_km", format!("{}", self.mileage_range_km.1));
        push("noise_std", format!("{}", self.noise_std));
        for (ch, off) in self.manufacturer_offsets.iter().enumerate() {
            let name = crate::data::CHANNEL_NAMES[ch];
            push(&format!("offset.{name}.scale"), format!("{}", off.scale));
            push(&format!("offset.{name}.shift"), format!("{}", off.shift));
        }
        out
    }

    /// Noise-free capacity at `mileage_km` for a vehicle with the given
    /// fast-charging share.
    pub fn expected_capacity(&self, mileage_km: f64, fast_share: f64) -> f64 {
        self.rated_capacity_ah
            * (1.0 - self.fade_per_1000km * (mileage_km / 1000.0) * (1.0 + self.fast_fade_multiplier * fast_share))
    }
}

fn parse_offset_key(key: &str) -> Option<(usize, &str)> {
    let rest = key.strip_prefix("offset.")?;
    let (name, field) = rest.rsplit_once('.')?;
    if field != "scale" && field != "shift" {
        return None;
    }
    let ch = crate::data::CHANNEL_NAMES.iter().position(|n| *n == name)?;
    Some((ch, field))
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Regime {
    Slow,
    Fast,
    Novel,
}

struct VehicleProfile {
    fast_share: f64,
    resistance_mohm: f64,
    heat_gain: f64,
}

fn gaussian<R: Rng>(rng: &mut R, std: f64) -> f64 {
    if std <= 0.0 {
        return 0.0;
    }
    Normal::new(0.0, std).expect("finite std").sample(rng)
}

fn vehicle_profile<R: Rng>(cfg: &FleetConfig, rng: &mut R) -> VehicleProfile {
    let f = cfg.fast_charge_fraction;
    // mean of the share equals the configured fleet-wide fraction
    let fast_share = if f <= 0.5 { rng.random_range(0.0..=2.0 * f) } else { rng.random_range(2.0 * f - 1.0..=1.0) };
    VehicleProfile {
        fast_share,
        resistance_mohm: rng.random_range(97.0..103.0),
        heat_gain: rng.random_range(0.8..1.2),
    }
}

fn capacity_label<R: Rng>(cfg: &FleetConfig, mileage: f64, share: f64, rng: &mut R) -> (f64, f64) {
    let truth = cfg.expected_capacity(mileage, share).max(1e-3 * cfg.rated_capacity_ah);
    let noisy = truth + gaussian(rng, cfg.noise_std * 0.01 * cfg.rated_capacity_ah);
    (truth, noisy.clamp(1e-3 * cfg.rated_capacity_ah, cfg.rated_capacity_ah))
}

fn ocv(soc_pct: f64) -> f64 {
    let s = (soc_pct / 100.0).clamp(0.0, 1.0);
    3.45 + 0.62 * s + 0.1 * s * s
}

/// Renders one `T × C` snippet in physical units.
fn render<R: Rng>(
    cfg: &FleetConfig,
    profile: &VehicleProfile,
    regime: Regime,
    capacity_ah: f64,
    rng: &mut R,
) -> DenseArray {
    let ns = cfg.noise_std;
    let faded = (1.0 - capacity_ah / cfg.rated_capacity_ah).max(0.0);
    let (lo, hi) = match regime {
        Regime::Slow => SLOW_CURRENT_A,
        Regime::Fast => FAST_CURRENT_A,
        Regime::Novel => NOVEL_CURRENT_A,
    };
    let level = rng.random_range(lo..hi);
    let taper_start = rng.random_range(48.0..176.0);
    let mut soc = rng.random_range(10.0..55.0);
    let ambient = rng.random_range(12.0..30.0);
    let mut temp = ambient + rng.random_range(0.0..3.0);
    let temp_spread = rng.random_range(1.0..3.0);
    let cell_spread = 0.008 + 0.15 * faded;
    let resistance = profile.resistance_mohm * (1.0 + 5.0 * faded);
    // pack resistance to per-cell voltage drop
    let ir_scale = 1.0 / 20_000.0;

    let mut values = Vec::with_capacity(SNIPPET_STEPS * CHANNELS);
    let mut v_prev = 0.0f64;
    for t in 0..SNIPPET_STEPS {
        let tf = t as f64;
        let shape = if tf < taper_start { 1.0 } else { 0.4 + 0.6 * libm::exp(-(tf - taper_start) / 30.0) };
        let mut current = level * shape + gaussian(rng, ns * NOISE_SCALE[0]);
        if regime == Regime::Novel {
            current = current.clamp(level * shape - 1.0, level * shape + 1.0).min(NOVEL_PEAK_A.1);
        }
        let current = current.max(0.0);

        let r_now = resistance * (1.0 + 0.01 * (25.0 - temp) / 10.0);
        let v_ideal = (ocv(soc) + current * r_now * ir_scale).min(VOLTAGE_CAP_V);
        // charging voltage does not fall back beyond noise
        let v_max = v_ideal.max(v_prev) + gaussian(rng, ns * NOISE_SCALE[1]);
        v_prev = v_ideal.max(v_prev);
        let v_min = v_max - cell_spread + gaussian(rng, ns * NOISE_SCALE[2] * 0.2);

        let heat = profile.heat_gain * 2.5e-6 * current * current * r_now;
        temp += heat * SAMPLE_INTERVAL_S - 0.002 * (temp - ambient);
        let t_max = temp + gaussian(rng, ns * NOISE_SCALE[3]);
        let t_min = temp - temp_spread + gaussian(rng, ns * NOISE_SCALE[4]);

        let soc_obs = soc + gaussian(rng, ns * NOISE_SCALE[5]);
        let r_obs = r_now + gaussian(rng, ns * NOISE_SCALE[6]);

        let row = [current, v_max, v_min, t_max, t_min, soc_obs, r_obs];
        for (ch, v) in row.iter().enumerate() {
            let off = cfg.manufacturer_offsets[ch];
            values.push((v * off.scale + off.shift) as f32);
        }
        soc = (soc + current * SAMPLE_INTERVAL_S / 3600.0 / capacity_ah * 100.0).min(100.0);
    }
    DenseArray::new(alloc::vec![SNIPPET_STEPS, CHANNELS], values).expect("fixed shape")
}

fn vehicle_snippets(cfg: &FleetConfig, v: usize, novel: bool) -> Vec<ChargingSnippet> {
    let tag = if novel { 1u64 << 31 } else { 0 };
    let mut rng = rng::stream(cfg.seed, rng::ids::VEHICLE_BASE + tag + v as u64);
    let profile = vehicle_profile(cfg, &mut rng);
    let (lo, hi) = cfg.mileage_range_km;
    let hi = if novel { hi.min(D1_MAX_KM - 1.0).max(lo + 1.0) } else { hi };
    let prefix = if novel { "N" } else { "V" };
    let vehicle_id = format!("{}-{prefix}{v:04}", cfg.manufacturer_id);
    let mut mileages: Vec<f64> = (0..cfg.snippets_per_vehicle).map(|_| rng.random_range(lo..hi)).collect();
    mileages.sort_by(f64::total_cmp);
    mileages
        .into_iter()
        .enumerate()
        .map(|(k, mileage)| {
            let regime = if novel {
                Regime::Novel
            } else if rng.random::<f64>() < profile.fast_share {
                Regime::Fast
            } else {
                Regime::Slow
            };
            let (truth, label) = capacity_label(cfg, mileage, profile.fast_share, &mut rng);
            let series = render(cfg, &profile, regime, truth, &mut rng);
            ChargingSnippet {
                snippet_id: format!("{vehicle_id}-S{k:04}"),
                vehicle_id: vehicle_id.clone(),
                manufacturer_id: cfg.manufacturer_id.clone(),
                mileage_km: mileage,
                capacity_label_ah: (regime != Regime::Fast).then_some(label),
                series,
            }
        })
        .collect()
}

/// Generates the fleet's snippets, vehicle by vehicle.
pub fn generate_fleet(cfg: &FleetConfig) -> Result<Vec<ChargingSnippet>> {
    cfg.validate()?;
    Ok((0..cfg.n_vehicles).flat_map(|v| vehicle_snippets(cfg, v, false)).collect())
}

/// Labeled D1 snippets charged at 25–40 A: faster than any labeled training
/// snippet, slower than the unlabeled fast-charging regime.
pub fn generate_novel_slice(cfg: &FleetConfig) -> Result<Vec<ChargingSnippet>> {
    cfg.validate()?;
    Ok((0..cfg.n_vehicles).flat_map(|v| vehicle_snippets(cfg, v, true)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{assign_distribution, DistributionTag};

    fn small() -> FleetConfig {
        FleetConfig { n_vehicles: 6, snippets_per_vehicle: 8, ..FleetConfig::default() }
    }

    #[test]
    fn zero_fade_zero_noise_labels_equal_rated() {
        let cfg = FleetConfig { fade_per_1000km: 0.0, noise_std: 0.0, ..small() };
        let snippets = generate_fleet(&cfg).unwrap();
        let labeled: Vec<_> = snippets.iter().filter_map(|s| s.capacity_label_ah).collect();
        assert!(!labeled.is_empty());
        assert!(labeled.iter().all(|&c| c == cfg.rated_capacity_ah));
    }

    #[test]
    fn deterministic() {
        let a = generate_fleet(&small()).unwrap();
        let b = generate_fleet(&small()).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x, y);
            let bits = |s: &ChargingSnippet| s.series.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(x), bits(y));
        }
        let other = generate_fleet(&FleetConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn snippets_are_valid() {
        for s in generate_fleet(&small()).unwrap() {
            s.validate().unwrap();
        }
    }

    #[test]
    fn regimes_follow_labels() {
        for s in generate_fleet(&small()).unwrap() {
            let peak = s.max_current();
            if s.is_labeled() {
                assert!(peak < 20.0, "slow snippet peaks at {peak}");
            } else {
                assert!(peak >= 29.0, "fast snippet peaks at {peak}");
            }
        }
    }

    #[test]
    fn novel_slice_properties() {
        let cfg = small();
        let slice = generate_novel_slice(&cfg).unwrap();
        assert_eq!(slice.len(), 48);
        for s in &slice {
            let peak = s.max_current();
            assert!((25.0..=40.0).contains(&peak), "{peak}");
            assert_eq!(assign_distribution(s).unwrap(), DistributionTag::D1);
            assert!(s.is_labeled());
            s.validate().unwrap();
        }
        let fleet_ids: alloc::collections::BTreeSet<_> =
            generate_fleet(&cfg).unwrap().into_iter().map(|s| s.vehicle_id).collect();
        assert!(slice.iter().all(|s| !fleet_ids.contains(&s.vehicle_id)));
    }

    #[test]
    fn invalid_configs() {
        assert!(generate_fleet(&FleetConfig { fast_charge_fraction: 1.5, ..small() }).is_err());
        assert!(generate_fleet(&FleetConfig { mileage_range_km: (5.0, 5.0), ..small() }).is_err());
        assert!(generate_fleet(&FleetConfig { rated_capacity_ah: 0.0, ..small() }).is_err());
        assert!(generate_fleet(&FleetConfig { n_vehicles: 0, ..small() }).is_err());
        assert!(generate_fleet(&FleetConfig { noise_std: f64::NAN, ..small() }).is_err());
    }

    #[test]
    fn key_value_roundtrip() {
        let cfg = FleetConfig::second_manufacturer(99);
        let mut back = FleetConfig::default();
        for (k, v) in cfg.to_pairs() {
            back.set(&k, &v).unwrap();
        }
        assert_eq!(back, cfg);
        assert!(back.set("bogus", "1").is_err());
        assert!(back.set("seed", "x").is_err());
    }
}
