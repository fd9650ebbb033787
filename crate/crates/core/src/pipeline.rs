//! End-to-end orchestration: data, three forecasters, per-day dispatch and
//! the metric reports.
//!
//! Every stage is also callable on its own so the command-line front end
//! can run them one at a time through intermediate files.

use std::collections::BTreeMap;
use std::error::Error as StdError;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::{NaiveDate, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baselines::{KMeansConfig, KMeansModel, MonthPolicy, MonthlyHourModel};
use crate::checkpoint::Checkpoint;
use crate::dispatch::{self, default_fleet, DispatchCase, EvaluationReport, GeneratorSpec};
use crate::lstm::{self, Activation, NetworkConfig, TrainingConfig};
use crate::synth::{synth_year, SynthConfig};
use crate::timeseries::{
    format_timestamp, load_csv, make_windows, parse_timestamp, DarkHourMask, NormalizationParams, TimeSeriesDataset,
    WindowSpec,
};

/// Forecaster columns, in report order.
pub const METHODS: [&str; 3] = ["kmeans", "monthly", "mlstm"];

pub const METRICS_FILE: &str = "metrics.csv";
pub const DAILY_METRICS_FILE: &str = "daily_metrics.csv";
pub const DISCREPANCY_FILE: &str = "discrepancy.csv";
pub const FORECASTS_FILE: &str = "forecasts.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOSS_FILE: &str = "loss_history.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

type BoxError = Box<dyn StdError + Send + Sync>;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: BoxError,
    },
}

impl PipelineError {
    pub fn is_config(&self) -> bool {
        matches!(self, PipelineError::Config(_))
    }

    pub fn stage(stage: &'static str, source: impl Into<BoxError>) -> Self {
        PipelineError::Stage {
            stage,
            source: source.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn in_stage<T, E: Into<BoxError>>(stage: &'static str, r: std::result::Result<T, E>) -> Result<T> {
    r.map_err(|e| PipelineError::stage(stage, e))
}

// ---------------------------------------------------------------- config

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Generation CSV (`timestamp,<area>...`). Synthesized when absent.
    pub generation: Option<PathBuf>,
    /// Demand CSV (`timestamp,demand_mw`); required with `generation`.
    pub demand: Option<PathBuf>,
    /// Fleet CSV; the three-unit reference fleet when absent.
    pub fleet: Option<PathBuf>,
    /// `month,hour,dark` file replacing the mask derived from training data.
    pub dark_mask: Option<PathBuf>,
    pub train_fraction: f64,
    /// Move the split back to the preceding midnight so both spans hold whole days.
    pub align_split_to_day: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            generation: None,
            demand: None,
            fleet: None,
            dark_mask: None,
            train_fraction: 0.75,
            align_split_to_day: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub lookback: usize,
    pub horizon: usize,
    /// Target feature name; the first column when empty.
    pub target: String,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            lookback: 24,
            horizon: 12,
            target: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub layer_sizes: Vec<usize>,
    pub dropout_rate: f64,
    pub activation: Activation,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            layer_sizes: vec![64, 32],
            dropout_rate: 0.2,
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub shuffle: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainingConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            shuffle: t.shuffle,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    pub k: usize,
    pub max_iters: usize,
    pub tol: f64,
    /// How the baselines treat test months absent from training.
    pub month_policy: MonthPolicy,
}

impl Default for BaselineSection {
    fn default() -> Self {
        let k = KMeansConfig::default();
        Self {
            k: k.k,
            max_iters: k.max_iters,
            tol: k.tol,
            month_policy: MonthPolicy::Nearest,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DispatchSection {
    pub voll: f64,
    pub emission_factor: f64,
    /// Hours per dispatch block; blocks start at midnight.
    pub horizon: usize,
}

impl Default for DispatchSection {
    fn default() -> Self {
        Self {
            voll: dispatch::DEFAULT_VOLL,
            emission_factor: dispatch::DEFAULT_EMISSION_FACTOR,
            horizon: 24,
        }
    }
}

/// Per-component seeds; unset ones derive from the global seed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedSection {
    pub synth: Option<u64>,
    pub init: Option<u64>,
    pub training: Option<u64>,
    pub kmeans: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub synth: u64,
    pub init: u64,
    pub training: u64,
    pub kmeans: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub window: WindowConfig,
    pub network: NetworkSection,
    pub training: TrainingSection,
    pub baselines: BaselineSection,
    pub dispatch: DispatchSection,
    pub seeds: SeedSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            output_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            window: WindowConfig::default(),
            network: NetworkSection::default(),
            training: TrainingSection::default(),
            baselines: BaselineSection::default(),
            dispatch: DispatchSection::default(),
            seeds: SeedSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Reads a TOML file. Relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.data.generation,
            &mut cfg.data.demand,
            &mut cfg.data.fleet,
            &mut cfg.data.dark_mask,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable")
    }

    pub fn seeds(&self) -> Seeds {
        let s = &self.seeds;
        Seeds {
            synth: s.synth.unwrap_or(self.seed),
            init: s.init.unwrap_or(self.seed.wrapping_add(1)),
            training: s.training.unwrap_or(self.seed.wrapping_add(2)),
            kmeans: s.kmeans.unwrap_or(self.seed.wrapping_add(3)),
        }
    }

    pub fn network_config(&self, input_features: usize) -> NetworkConfig {
        NetworkConfig {
            input_features,
            layer_sizes: self.network.layer_sizes.clone(),
            dropout_rate: self.network.dropout_rate,
            activation: self.network.activation,
            seed: self.seeds().init,
        }
    }

    pub fn training_config(&self) -> TrainingConfig {
        TrainingConfig {
            epochs: self.training.epochs,
            batch_size: self.training.batch_size,
            learning_rate: self.training.learning_rate,
            seed: self.seeds().training,
            shuffle: self.training.shuffle,
        }
    }

    pub fn kmeans_config(&self) -> KMeansConfig {
        KMeansConfig {
            k: self.baselines.k,
            seed: self.seeds().kmeans,
            max_iters: self.baselines.max_iters,
            tol: self.baselines.tol,
        }
    }

    /// Checks everything that can be checked without reading data.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        let d = &self.data;
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return bad(format!("data.train_fraction must be in (0, 1), got {}", d.train_fraction));
        }
        if d.generation.is_some() != d.demand.is_some() {
            return bad("data.generation and data.demand must be given together".into());
        }
        for p in [&d.generation, &d.demand, &d.fleet, &d.dark_mask].into_iter().flatten() {
            if !p.is_file() {
                return bad(format!("input file {} does not exist", p.display()));
            }
        }
        if self.window.lookback == 0 || self.window.horizon == 0 {
            return bad("window.lookback and window.horizon must be >= 1".into());
        }
        self.network_config(1)
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        self.training_config()
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.baselines.k == 0 {
            return bad("baselines.k must be >= 1".into());
        }
        let disp = &self.dispatch;
        if !(disp.emission_factor > 0.0 && disp.emission_factor.is_finite()) {
            return bad("dispatch.emission_factor must be > 0".into());
        }
        if !(disp.voll > 0.0 && disp.voll.is_finite()) {
            return bad("dispatch.voll must be > 0".into());
        }
        if disp.horizon == 0 {
            return bad("dispatch.horizon must be >= 1".into());
        }
        if d.generation.is_none() {
            self.synth.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- inputs

pub struct Inputs {
    pub generation: TimeSeriesDataset,
    pub demand: Vec<f64>,
    pub fleet: Vec<GeneratorSpec>,
    pub target: usize,
    /// First test row.
    pub split: usize,
}

impl Inputs {
    pub fn train(&self) -> TimeSeriesDataset {
        self.generation.slice(0, self.split).expect("split inside the dataset")
    }

    pub fn target_name(&self) -> &str {
        &self.generation.feature_names()[self.target]
    }
}

/// Row index of the train/test boundary.
pub fn split_index(stamps: &[NaiveDateTime], fraction: f64, align_to_day: bool) -> Option<usize> {
    let n = stamps.len();
    let mut cut = (n as f64 * fraction).floor() as usize;
    if align_to_day {
        while cut > 0 && cut < n && stamps[cut].hour() != 0 {
            cut -= 1;
        }
    }
    (cut > 0 && cut < n).then_some(cut)
}

/// Loads or synthesizes the data and resolves the target and split.
pub fn load_inputs(cfg: &PipelineConfig) -> Result<Inputs> {
    cfg.validate()?;
    const STAGE: &str = "load";
    let (generation, demand_ds) = match (&cfg.data.generation, &cfg.data.demand) {
        (Some(g), Some(d)) => (in_stage(STAGE, load_csv(g))?, in_stage(STAGE, load_csv(d))?),
        _ => {
            let year = in_stage(STAGE, synth_year(cfg.seeds().synth, &cfg.synth))?;
            (year.generation, year.demand)
        }
    };
    if demand_ds.timestamps() != generation.timestamps() {
        return Err(PipelineError::stage(STAGE, "demand and generation timestamps differ"));
    }
    if demand_ds.num_features() != 1 {
        return Err(PipelineError::stage(STAGE, "demand file must have exactly one value column"));
    }
    let fleet = match &cfg.data.fleet {
        Some(p) => in_stage(STAGE, dispatch::load_fleet(p))?,
        None => default_fleet(),
    };
    let target = if cfg.window.target.is_empty() {
        0
    } else {
        generation
            .feature_index(&cfg.window.target)
            .ok_or_else(|| PipelineError::Config(format!("target feature `{}` not in data", cfg.window.target)))?
    };
    let split = split_index(generation.timestamps(), cfg.data.train_fraction, cfg.data.align_split_to_day)
        .ok_or_else(|| PipelineError::Config("train/test split leaves an empty side".into()))?;
    let spec = window_spec(cfg, target);
    if split < spec.min_rows() {
        return Err(PipelineError::stage(
            STAGE,
            format!("training span of {split} rows is shorter than one window ({})", spec.min_rows()),
        ));
    }
    Ok(Inputs {
        demand: demand_ds.column(0),
        generation,
        fleet,
        target,
        split,
    })
}

pub fn window_spec(cfg: &PipelineConfig, target: usize) -> WindowSpec {
    WindowSpec::new(cfg.window.lookback, cfg.window.horizon, target)
}

// ---------------------------------------------------------------- training

/// Fits the normalizer, dark mask, LSTM and both baselines on the training span.
pub fn fit_models(cfg: &PipelineConfig, inputs: &Inputs) -> Result<Checkpoint> {
    const STAGE: &str = "train";
    let train = inputs.train();
    let spec = window_spec(cfg, inputs.target);
    let normalizer = NormalizationParams::fit(&train);
    let mask = match &cfg.data.dark_mask {
        Some(p) => in_stage(STAGE, DarkHourMask::load_csv(p))?,
        None => in_stage(STAGE, DarkHourMask::derive_filled(&train, inputs.target))?,
    };
    let samples = in_stage(STAGE, make_windows(&normalizer.transform(&train), &spec))?;
    let net = cfg.network_config(train.num_features());
    let tc = cfg.training_config();
    let outcome = in_stage(STAGE, lstm::train(&samples, &net, &tc))?;
    let mut ckpt = Checkpoint::new(
        train.feature_names().to_vec(),
        spec,
        normalizer,
        mask,
        outcome.params,
        tc,
        outcome.loss_history,
    );
    ckpt.kmeans = Some(in_stage(STAGE, KMeansModel::fit(&train, inputs.target, &cfg.kmeans_config()))?);
    ckpt.monthly = Some(in_stage(STAGE, MonthlyHourModel::fit(&train, inputs.target))?);
    Ok(ckpt)
}

// ---------------------------------------------------------------- forecasts

/// Test-span forecasts of every method next to the actual target and demand.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastTable {
    pub timestamps: Vec<NaiveDateTime>,
    pub demand: Vec<f64>,
    pub actual: Vec<f64>,
    /// One series per entry of [`METHODS`].
    pub forecasts: Vec<Vec<f64>>,
}

impl ForecastTable {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["timestamp".to_string(), "demand_mw".into(), "actual_mw".into()];
        header.extend(METHODS.iter().map(|m| format!("{m}_mw")));
        out.write_record(&header)?;
        for r in 0..self.len() {
            let mut rec = vec![format_timestamp(&self.timestamps[r]), num(self.demand[r]), num(self.actual[r])];
            rec.extend(self.forecasts.iter().map(|f| num(f[r])));
            out.write_record(&rec)?;
        }
        out.flush()
    }

    pub fn read_csv<R: Read>(r: R) -> std::result::Result<Self, BoxError> {
        let (stamps, cols) = read_numeric_csv(r, &expected_forecast_header())?;
        let mut cols = cols.into_iter();
        let demand = cols.next().unwrap();
        let actual = cols.next().unwrap();
        Ok(Self {
            timestamps: stamps,
            demand,
            actual,
            forecasts: cols.collect(),
        })
    }
}

fn expected_forecast_header() -> Vec<String> {
    let mut h = vec!["timestamp".to_string(), "demand_mw".into(), "actual_mw".into()];
    h.extend(METHODS.iter().map(|m| format!("{m}_mw")));
    h
}

/// Shortest text that parses back to the same f64.
fn num(v: f64) -> String {
    format!("{v}")
}

fn read_numeric_csv<R: Read>(r: R, header: &[String]) -> std::result::Result<(Vec<NaiveDateTime>, Vec<Vec<f64>>), BoxError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let got: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if got != header {
        return Err(format!("expected header {:?}, found {:?}", header.join(","), got.join(",")).into());
    }
    let mut stamps = Vec::new();
    let mut cols = vec![Vec::new(); header.len() - 1];
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        stamps.push(parse_timestamp(&rec[0]).map_err(|e| format!("row {row}: {e}"))?);
        for (c, col) in cols.iter_mut().enumerate() {
            let v: f64 = rec[c + 1]
                .parse()
                .map_err(|_| format!("row {row}: `{}` is not a number", &rec[c + 1]))?;
            col.push(v);
        }
    }
    Ok((stamps, cols))
}

/// Forecasts the whole test span with every method and applies the dark mask.
pub fn forecast_test_span(inputs: &Inputs, ckpt: &Checkpoint, policy: MonthPolicy) -> Result<ForecastTable> {
    const STAGE: &str = "forecast";
    let ds = &inputs.generation;
    if ckpt.feature_names != ds.feature_names() {
        return Err(PipelineError::stage(STAGE, "checkpoint features do not match the data"));
    }
    let range = inputs.split..ds.len();
    let stamps = ds.timestamps()[range.clone()].to_vec();
    let label = inputs.target_name();
    let (Some(kmeans), Some(monthly)) = (&ckpt.kmeans, &ckpt.monthly) else {
        return Err(PipelineError::stage(STAGE, "checkpoint lacks baseline models"));
    };
    let mlstm = in_stage(
        STAGE,
        lstm::predict_targets(&ckpt.network, ds, &ckpt.window, &ckpt.normalizer, &ckpt.mask, range.clone()),
    )?;
    let km = in_stage(STAGE, kmeans.forecast(label, &stamps, policy))?;
    let mo = in_stage(STAGE, monthly.forecast(label, &stamps, policy))?;
    let forecasts = [km, mo, mlstm].iter().map(|f| ckpt.mask.apply(f).values).collect();
    Ok(ForecastTable {
        timestamps: stamps,
        demand: inputs.demand[range.clone()].to_vec(),
        actual: range.map(|r| ds.value(r, inputs.target)).collect(),
        forecasts,
    })
}

// ---------------------------------------------------------------- dispatch

/// One method's outcome in one hour.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MethodHour {
    pub forecast: f64,
    /// PV accepted in the day-ahead schedule.
    pub da_renewable: f64,
    /// Gas-fired MW after redispatch.
    pub gas: f64,
    /// Final shed MW.
    pub shed: f64,
    pub spill: f64,
    /// Day-ahead plus real-time cost attributed to the hour.
    pub cost: f64,
}

const HOUR_FIELDS: [&str; 6] = ["forecast_mw", "da_res_mw", "gas_mw", "shed_mw", "spill_mw", "cost_usd"];

impl MethodHour {
    fn fields(&self) -> [f64; 6] {
        [self.forecast, self.da_renewable, self.gas, self.shed, self.spill, self.cost]
    }
}

/// Hour-by-hour dispatch of every method over the evaluated span.
#[derive(Debug, Clone, PartialEq)]
pub struct HourlyDispatch {
    pub timestamps: Vec<NaiveDateTime>,
    pub demand: Vec<f64>,
    pub actual: Vec<f64>,
    /// `hours[method][t]`.
    pub hours: Vec<Vec<MethodHour>>,
}

fn discrepancy_header() -> Vec<String> {
    let mut h = vec!["timestamp".to_string(), "demand_mw".into(), "actual_mw".into()];
    for m in METHODS {
        h.extend(HOUR_FIELDS.iter().map(|f| format!("{m}_{f}")));
    }
    h
}

impl HourlyDispatch {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(discrepancy_header())?;
        for t in 0..self.len() {
            let mut rec = vec![format_timestamp(&self.timestamps[t]), num(self.demand[t]), num(self.actual[t])];
            for method in &self.hours {
                rec.extend(method[t].fields().iter().map(|v| num(*v)));
            }
            out.write_record(&rec)?;
        }
        out.flush()
    }

    pub fn read_csv<R: Read>(r: R) -> std::result::Result<Self, BoxError> {
        let (timestamps, cols) = read_numeric_csv(r, &discrepancy_header())?;
        let n = timestamps.len();
        let hours = (0..METHODS.len())
            .map(|m| {
                let base = 2 + m * HOUR_FIELDS.len();
                (0..n)
                    .map(|t| MethodHour {
                        forecast: cols[base][t],
                        da_renewable: cols[base + 1][t],
                        gas: cols[base + 2][t],
                        shed: cols[base + 3][t],
                        spill: cols[base + 4][t],
                        cost: cols[base + 5][t],
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            timestamps,
            demand: cols[0].clone(),
            actual: cols[1].clone(),
            hours,
        })
    }
}

/// Start rows of whole `horizon`-hour blocks that begin at midnight and
/// run over consecutive hours.
pub fn dispatch_blocks(stamps: &[NaiveDateTime], horizon: usize) -> Vec<usize> {
    let mut blocks = Vec::new();
    let mut r = 0;
    while r + horizon <= stamps.len() {
        let contiguous = (1..horizon).all(|k| stamps[r + k] - stamps[r + k - 1] == chrono::Duration::hours(1));
        if stamps[r].hour() == 0 && contiguous {
            blocks.push(r);
            r += horizon;
        } else {
            r += 1;
        }
    }
    blocks
}

/// Runs day-ahead and real-time dispatch block by block for every method.
pub fn dispatch_forecasts(table: &ForecastTable, fleet: &[GeneratorSpec], cfg: &DispatchSection) -> Result<HourlyDispatch> {
    const STAGE: &str = "dispatch";
    if table.forecasts.len() != METHODS.len() {
        return Err(PipelineError::stage(STAGE, "forecast table must hold one series per method"));
    }
    let blocks = dispatch_blocks(&table.timestamps, cfg.horizon);
    if blocks.is_empty() {
        return Err(PipelineError::stage(STAGE, format!("test span holds no whole {}-hour block", cfg.horizon)));
    }
    let rows: Vec<usize> = blocks.iter().flat_map(|&b| b..b + cfg.horizon).collect();
    let mut hours = vec![Vec::with_capacity(rows.len()); METHODS.len()];
    for &start in &blocks {
        let span = start..start + cfg.horizon;
        for (m, forecast) in table.forecasts.iter().enumerate() {
            let case = DispatchCase {
                demand: table.demand[span.clone()].to_vec(),
                forecast: forecast[span.clone()].to_vec(),
                actual: table.actual[span.clone()].to_vec(),
                fleet: fleet.to_vec(),
                voll: cfg.voll,
                emission_factor: cfg.emission_factor,
            };
            let outcome = dispatch::run_case(&case).map_err(|e| {
                PipelineError::stage(
                    STAGE,
                    format!("{} block at {}: {e}", METHODS[m], format_timestamp(&table.timestamps[start])),
                )
            })?;
            hours[m].extend(hourly_outcomes(&case, &outcome));
        }
    }
    Ok(HourlyDispatch {
        timestamps: rows.iter().map(|&r| table.timestamps[r]).collect(),
        demand: rows.iter().map(|&r| table.demand[r]).collect(),
        actual: rows.iter().map(|&r| table.actual[r]).collect(),
        hours,
    })
}

fn hourly_outcomes(case: &DispatchCase, outcome: &dispatch::CaseOutcome) -> Vec<MethodHour> {
    let (da, rt) = (&outcome.da, &outcome.rt);
    (0..case.horizon())
        .map(|t| {
            let mut gas = 0.0;
            let mut cost = case.voll * (da.shed[t] + rt.shed[t]);
            for (v, g) in case.fleet.iter().enumerate() {
                let p = da.generation[v][t] + rt.adjustment[v][t];
                cost += g.cost * p;
                if g.gas_fired {
                    gas += p;
                }
            }
            MethodHour {
                forecast: case.forecast[t],
                da_renewable: da.renewable[t],
                gas,
                shed: (da.shed[t] + rt.shed[t]).max(0.0),
                spill: rt.spill[t],
                cost,
            }
        })
        .collect()
}

// ---------------------------------------------------------------- metrics

/// Aggregates hours `range` of every method into one report each.
fn reports_over(d: &HourlyDispatch, range: std::ops::Range<usize>, emission_factor: f64) -> Result<Vec<EvaluationReport>> {
    let actual = &d.actual[range.clone()];
    d.hours
        .iter()
        .map(|method| {
            let hours = &method[range.clone()];
            let gas_mwh: f64 = hours.iter().map(|h| h.gas).sum();
            let forecast: Vec<f64> = hours.iter().map(|h| h.forecast).collect();
            Ok(EvaluationReport {
                gas_mwh,
                co2_kg: dispatch::co2_kg(gas_mwh, emission_factor),
                load_shed: hours.iter().map(|h| h.shed).sum(),
                spillage: hours.iter().map(|h| h.spill).sum(),
                cost: hours.iter().map(|h| h.cost).sum(),
                nmae: in_stage("evaluate", dispatch::nmae(&forecast, actual))?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// One report per method over the whole evaluated span.
    pub overall: Vec<EvaluationReport>,
    /// Per calendar day; days whose actual PV is all zero have no NMAE and
    /// carry `NaN` there.
    pub daily: Vec<(NaiveDate, Vec<EvaluationReport>)>,
}

pub fn evaluate(d: &HourlyDispatch, emission_factor: f64) -> Result<Evaluation> {
    if d.is_empty() {
        return Err(PipelineError::stage("evaluate", "no dispatched hours"));
    }
    let overall = reports_over(d, 0..d.len(), emission_factor)?;
    let mut daily = Vec::new();
    let mut start = 0;
    while start < d.len() {
        let date = d.timestamps[start].date();
        let mut end = start;
        while end < d.len() && d.timestamps[end].date() == date {
            end += 1;
        }
        let reports = if d.actual[start..end].iter().all(|v| *v == 0.0) {
            let mut r = reports_over_zero_pv(d, start..end, emission_factor);
            r.iter_mut().for_each(|x| x.nmae = f64::NAN);
            r
        } else {
            reports_over(d, start..end, emission_factor)?
        };
        daily.push((date, reports));
        start = end;
    }
    Ok(Evaluation { overall, daily })
}

fn reports_over_zero_pv(d: &HourlyDispatch, range: std::ops::Range<usize>, emission_factor: f64) -> Vec<EvaluationReport> {
    let mut patched = d.clone();
    // Any nonzero actual lets the shared path compute the other metrics.
    patched.actual[range.start] = 1.0;
    reports_over(&patched, range, emission_factor).expect("nonzero actual")
}

/// Fixed six-decimal rendering used by every metrics file.
pub fn fmt_metric(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        // Avoid printing "-0.000000".
        let s = format!("{v:.6}");
        if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
            s.trim_start_matches('-').to_string()
        } else {
            s
        }
    }
}

pub fn write_metrics_csv<W: Write>(reports: &[EvaluationReport], mut w: W) -> std::io::Result<()> {
    let mut s = String::from("metric");
    for m in METHODS {
        s.push(',');
        s.push_str(m);
    }
    s.push('\n');
    for (i, name) in EvaluationReport::ROW_NAMES.iter().enumerate() {
        s.push_str(name);
        for r in reports {
            let _ = write!(s, ",{}", fmt_metric(r.rows()[i]));
        }
        s.push('\n');
    }
    w.write_all(s.as_bytes())
}

pub fn write_daily_metrics_csv<W: Write>(daily: &[(NaiveDate, Vec<EvaluationReport>)], mut w: W) -> std::io::Result<()> {
    let mut s = String::from("date,method");
    for name in EvaluationReport::ROW_NAMES {
        s.push(',');
        s.push_str(name);
    }
    s.push('\n');
    for (date, reports) in daily {
        for (m, r) in METHODS.iter().zip(reports) {
            let _ = write!(s, "{date},{m}");
            for v in r.rows() {
                let _ = write!(s, ",{}", fmt_metric(v));
            }
            s.push('\n');
        }
    }
    w.write_all(s.as_bytes())
}

pub fn write_loss_csv<W: Write>(history: &[f64], mut w: W) -> std::io::Result<()> {
    let mut s = String::from("epoch,loss\n");
    for (e, l) in history.iter().enumerate() {
        let _ = writeln!(s, "{},{}", e + 1, num(*l));
    }
    w.write_all(s.as_bytes())
}

// ---------------------------------------------------------------- outputs

/// Collects files in a hidden directory next to their destination and moves
/// them into place only on [`StagedOutput::commit`]. Dropping without a
/// commit deletes everything written so far.
pub struct StagedOutput {
    final_dir: PathBuf,
    staging: PathBuf,
    created_final: bool,
    files: Vec<String>,
    committed: bool,
}

impl StagedOutput {
    pub fn new(final_dir: &Path) -> std::io::Result<Self> {
        let created_final = !final_dir.exists();
        fs::create_dir_all(final_dir)?;
        let staging = final_dir.join(format!(".staging-{}", std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir(&staging)?;
        Ok(Self {
            final_dir: final_dir.to_path_buf(),
            staging,
            created_final,
            files: Vec::new(),
            committed: false,
        })
    }

    pub fn final_dir(&self) -> &Path {
        &self.final_dir
    }

    /// Path a file will have once committed.
    pub fn final_path(&self, name: &str) -> PathBuf {
        self.final_dir.join(name)
    }

    /// Creates `name` in the staging area and hands `write` a buffered writer.
    pub fn write(&mut self, name: &str, write: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> std::io::Result<()> {
        let path = self.staging.join(name);
        let mut w = BufWriter::new(File::create(&path)?);
        write(&mut w)?;
        w.flush()?;
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        Ok(())
    }

    pub fn staged_path(&self, name: &str) -> PathBuf {
        self.staging.join(name)
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    pub fn commit(mut self) -> std::io::Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        for f in &self.files {
            let dest = self.final_dir.join(f);
            fs::rename(self.staging.join(f), &dest)?;
            out.push(dest);
        }
        fs::remove_dir_all(&self.staging)?;
        self.committed = true;
        Ok(out)
    }
}

impl Drop for StagedOutput {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.staging);
            if self.created_final {
                // Only removes the directory if nothing else landed there.
                let _ = fs::remove_dir(&self.final_dir);
            }
        }
    }
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let mut hasher = Sha256::new();
    let mut f = File::open(path)?;
    std::io::copy(&mut f, &mut hasher)?;
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config: PipelineConfig,
    pub seeds: Seeds,
    pub train_rows: usize,
    pub test_rows: usize,
    pub evaluated_hours: usize,
    pub final_training_loss: Option<f64>,
    pub timings: Vec<StageTiming>,
    /// File name to SHA-256 of its contents.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    /// Names of listed files whose current digest differs (or that are missing).
    pub fn verify(&self, dir: &Path) -> Vec<String> {
        self.outputs
            .iter()
            .filter(|(name, digest)| sha256_file(&dir.join(name)).map_or(true, |d| &d != *digest))
            .map(|(name, _)| name.clone())
            .collect()
    }

    pub fn load(path: &Path) -> std::result::Result<Self, BoxError> {
        Ok(serde_json::from_reader(File::open(path)?)?)
    }
}

/// Everything a full run produces in memory.
pub struct RunOutcome {
    pub checkpoint: Checkpoint,
    pub forecasts: ForecastTable,
    pub dispatch: HourlyDispatch,
    pub evaluation: Evaluation,
    pub manifest: RunManifest,
}

fn io_stage(stage: &'static str) -> impl Fn(std::io::Error) -> PipelineError {
    move |e| PipelineError::stage(stage, e)
}

/// Writes metrics, daily metrics and the per-hour discrepancy table.
pub fn emit_report(out: &mut StagedOutput, dispatch: &HourlyDispatch, evaluation: &Evaluation) -> Result<()> {
    let io = io_stage("report");
    out.write(METRICS_FILE, |w| write_metrics_csv(&evaluation.overall, w)).map_err(&io)?;
    out.write(DAILY_METRICS_FILE, |w| write_daily_metrics_csv(&evaluation.daily, w))
        .map_err(&io)?;
    out.write(DISCREPANCY_FILE, |w| dispatch.write_csv(w)).map_err(&io)?;
    Ok(())
}

/// Validates the config, runs every stage and writes all outputs to
/// `cfg.output_dir`. On failure nothing from this run is left behind.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut timings = Vec::new();
    let mut timed = |stage: &str, start: Instant| {
        timings.push(StageTiming {
            stage: stage.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        })
    };
    let mut out = StagedOutput::new(&cfg.output_dir).map_err(io_stage("report"))?;

    let t = Instant::now();
    let inputs = load_inputs(cfg)?;
    timed("load", t);

    let t = Instant::now();
    let checkpoint = fit_models(cfg, &inputs)?;
    timed("train", t);

    let t = Instant::now();
    let forecasts = forecast_test_span(&inputs, &checkpoint, cfg.baselines.month_policy)?;
    timed("forecast", t);

    let t = Instant::now();
    let dispatch = dispatch_forecasts(&forecasts, &inputs.fleet, &cfg.dispatch)?;
    timed("dispatch", t);

    let t = Instant::now();
    let evaluation = evaluate(&dispatch, cfg.dispatch.emission_factor)?;
    timed("evaluate", t);

    let t = Instant::now();
    let io = io_stage("report");
    emit_report(&mut out, &dispatch, &evaluation)?;
    out.write(FORECASTS_FILE, |w| forecasts.write_csv(w)).map_err(&io)?;
    out.write(LOSS_FILE, |w| write_loss_csv(&checkpoint.loss_history, w)).map_err(&io)?;
    out.write(CHECKPOINT_FILE, |w| {
        checkpoint.to_writer(w).map_err(|e| std::io::Error::new(std::io::ErrorKind::Other, e))
    })
    .map_err(&io)?;
    timed("report", t);

    let mut outputs = BTreeMap::new();
    for f in out.files() {
        outputs.insert(f.clone(), sha256_file(&out.staged_path(f)).map_err(&io)?);
    }
    let manifest = RunManifest {
        tool: "gridcast".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        seeds: cfg.seeds(),
        train_rows: inputs.split,
        test_rows: inputs.generation.len() - inputs.split,
        evaluated_hours: dispatch.len(),
        final_training_loss: checkpoint.loss_history.last().copied(),
        timings,
        outputs,
    };
    out.write(MANIFEST_FILE, |w| {
        serde_json::to_writer_pretty(&mut *w, &manifest).map_err(|e| std::io::Error::new(std::io::ErrorKind::Other, e))?;
        w.write_all(b"\n")
    })
    .map_err(&io)?;
    out.commit().map_err(&io)?;
    Ok(RunOutcome {
        checkpoint,
        forecasts,
        dispatch,
        evaluation,
        manifest,
    })
}
