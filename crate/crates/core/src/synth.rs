//! Seeded synthetic year: multi-area PV plus system demand.
//!
//! PV in area `a` at hour `t` is `capacity_a * clear(t) * envelope(day) *
//! clearness_a(t)`. The clear-sky term is a half sine between sunrise and
//! sunset, so night hours are exactly 0. Clearness is a logistic of a shared
//! daily weather state (multi-day persistence), a shared hourly AR(1) term
//! and a per-area AR(1) term, which makes the areas correlated.

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Timelike, Weekday};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::timeseries::{DataError, TimeSeriesDataset};

pub const HOURS_PER_YEAR: usize = 8760;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic profile: {0}")]
    Invalid(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub year: i32,
    /// Nameplate MW of each PV area; its length is the number of areas.
    pub capacity_mw: Vec<f64>,
    /// Day length at the winter and summer solstice, hours.
    pub min_daylight_h: f64,
    pub max_daylight_h: f64,
    /// Irradiance envelope at the winter solstice relative to summer.
    pub winter_envelope: f64,
    /// Day-to-day persistence of the shared weather state.
    pub weather_persistence: f64,
    pub weather_weight: f64,
    pub hourly_persistence: f64,
    pub hourly_sigma: f64,
    pub area_persistence: f64,
    pub area_sigma: f64,
    pub clearness_bias: f64,
    pub demand_base_mw: f64,
    pub demand_diurnal_mw: f64,
    /// Extra winter load, MW.
    pub demand_seasonal_mw: f64,
    /// Load reduction on weekends, MW.
    pub demand_weekend_mw: f64,
    pub demand_sigma_mw: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            year: 2023,
            capacity_mw: vec![50.0, 40.0, 30.0],
            min_daylight_h: 8.0,
            max_daylight_h: 16.5,
            winter_envelope: 0.45,
            weather_persistence: 0.8,
            weather_weight: 1.6,
            hourly_persistence: 0.9,
            hourly_sigma: 0.35,
            area_persistence: 0.9,
            area_sigma: 0.3,
            clearness_bias: 0.6,
            demand_base_mw: 96.0,
            demand_diurnal_mw: 22.0,
            demand_seasonal_mw: 5.0,
            demand_weekend_mw: 6.0,
            demand_sigma_mw: 2.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Invalid(m.into()));
        if self.capacity_mw.is_empty() {
            return bad("at least one area is required");
        }
        if self.capacity_mw.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return bad("capacities must be finite and >= 0");
        }
        if !(0.0 < self.min_daylight_h && self.min_daylight_h <= self.max_daylight_h && self.max_daylight_h < 24.0) {
            return bad("daylight hours must satisfy 0 < min <= max < 24");
        }
        if !(0.0..=1.0).contains(&self.winter_envelope) {
            return bad("winter_envelope must be in [0, 1]");
        }
        for (name, rho) in [
            ("weather_persistence", self.weather_persistence),
            ("hourly_persistence", self.hourly_persistence),
            ("area_persistence", self.area_persistence),
        ] {
            if !(0.0..1.0).contains(&rho) {
                return Err(SynthError::Invalid(format!("{name} must be in [0, 1)")));
            }
        }
        if self.demand_base_mw < self.demand_diurnal_mw + self.demand_weekend_mw {
            return bad("demand base must exceed the diurnal and weekend swings");
        }
        Ok(())
    }
}

/// Fraction of the year's seasonal cycle, 1 at the summer solstice and -1 at
/// the winter solstice.
fn season(day_of_year: u32) -> f64 {
    (2.0 * std::f64::consts::PI * (day_of_year as f64 - 81.0) / 365.0).sin()
}

/// Clear-sky shape for hour `hour` (evaluated at mid-hour) on a day with the
/// given daylight length, centred on 12:30.
pub fn clear_sky(hour: u32, daylight_h: f64) -> f64 {
    let sunrise = 12.5 - daylight_h / 2.0;
    let x = hour as f64 + 0.5 - sunrise;
    if x <= 0.0 || x >= daylight_h {
        0.0
    } else {
        (std::f64::consts::PI * x / daylight_h).sin()
    }
}

pub fn daylight_hours(cfg: &SynthConfig, day_of_year: u32) -> f64 {
    let mid = (cfg.min_daylight_h + cfg.max_daylight_h) / 2.0;
    let amp = (cfg.max_daylight_h - cfg.min_daylight_h) / 2.0;
    mid + amp * season(day_of_year)
}

/// Daytime plateau from about 07:00 to 21:00 with an evening bump near
/// 18:00; peaks a little above 1, night values near 0.
pub fn diurnal_shape(hour: u32) -> f64 {
    let h = hour as f64 + 0.5;
    let plateau = 1.0 / (1.0 + (-(h - 7.0)).exp()) / (1.0 + (h - 21.0).exp());
    plateau + 0.15 * (-((h - 18.0) / 2.0).powi(2)).exp()
}

fn ar1(prev: f64, rho: f64, sigma: f64, rng: &mut ChaCha8Rng) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    rho * prev + sigma * (1.0 - rho * rho).sqrt() * z
}

/// Hourly generation (one column per area) and demand for one year.
pub struct SyntheticYear {
    pub generation: TimeSeriesDataset,
    pub demand: TimeSeriesDataset,
}

pub fn synth_year(seed: u64, cfg: &SynthConfig) -> Result<SyntheticYear, SynthError> {
    cfg.validate()?;
    let start: NaiveDateTime = NaiveDate::from_ymd_opt(cfg.year, 1, 1)
        .ok_or_else(|| SynthError::Invalid(format!("year {}", cfg.year)))?
        .and_hms_opt(0, 0, 0)
        .expect("midnight");
    let areas = cfg.capacity_mw.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut weather = 0.0;
    let mut hourly = 0.0;
    let mut local = vec![0.0; areas];
    let mut demand_noise = 0.0;

    let mut stamps = Vec::with_capacity(HOURS_PER_YEAR);
    let mut pv = Vec::with_capacity(HOURS_PER_YEAR * areas);
    let mut load = Vec::with_capacity(HOURS_PER_YEAR);
    for k in 0..HOURS_PER_YEAR {
        let ts = start + Duration::hours(k as i64);
        let hour = ts.hour();
        if hour == 0 {
            weather = ar1(weather, cfg.weather_persistence, 1.0, &mut rng);
        }
        hourly = ar1(hourly, cfg.hourly_persistence, cfg.hourly_sigma, &mut rng);
        let doy = ts.ordinal();
        let s = season(doy);
        let shape = clear_sky(hour, daylight_hours(cfg, doy));
        let envelope = cfg.winter_envelope + (1.0 - cfg.winter_envelope) * (s + 1.0) / 2.0;
        for (a, cap) in cfg.capacity_mw.iter().enumerate() {
            local[a] = ar1(local[a], cfg.area_persistence, cfg.area_sigma, &mut rng);
            let logit = cfg.clearness_bias + cfg.weather_weight * weather + hourly + local[a];
            let clearness = 1.0 / (1.0 + (-logit).exp());
            pv.push(cap * shape * envelope * clearness);
        }

        demand_noise = ar1(demand_noise, 0.7, cfg.demand_sigma_mw, &mut rng);
        let diurnal = diurnal_shape(hour);
        let weekend = matches!(ts.weekday(), Weekday::Sat | Weekday::Sun);
        let value = cfg.demand_base_mw + cfg.demand_diurnal_mw * diurnal - cfg.demand_seasonal_mw * s
            - if weekend { cfg.demand_weekend_mw } else { 0.0 }
            + demand_noise;
        load.push(value.max(0.0));
        stamps.push(ts);
    }
    let names = (1..=areas).map(|a| format!("pv_area{a}")).collect();
    Ok(SyntheticYear {
        generation: TimeSeriesDataset::new(stamps.clone(), pv, names)?,
        demand: TimeSeriesDataset::new(stamps, load, vec!["demand_mw".into()])?,
    })
}
