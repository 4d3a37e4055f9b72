//! Experiment driver and reports.
//!
//! An [`Experiment`] names a dataset of tensors, a list of quantization
//! methods and a list of seeds, and produces one [`ReportRow`] per
//! (tensor, method, seed). LO-BCQ methods are calibrated either once per
//! seed on a separate calibration source and applied to every tensor
//! (universal mode) or on each tensor itself (layerwise mode).
//!
//! Experiment files are JSON:
//!
//! ```json
//! {
//!   "dataset": [{"synth": {"dist": "outliers", "len": 65536}}, {"file": "w.bcqt"}],
//!   "methods": [
//!     {"lobcq": {"block_len": 8, "array_len": 64, "num_codebooks": 16}},
//!     {"baseline": "mxfp4-g32"},
//!     {"lloydmax": {"bits": 4}},
//!     {"format": "e2m1"}
//!   ],
//!   "calibration_mode": "universal",
//!   "seeds": [0, 1, 2]
//! }
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use num_rational::Ratio;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{nmse_slices, quantize_baseline, BaselineSpec};
use crate::calib::{
    calibrate, calibrate_tensor, freeze_family, normalize_blocks, CalibOptions, CalibTrace, CodebookFamily,
    InitMethod, QuantConfig,
};
use crate::codec::{decode, effective_bitwidth, encode, fake_quantize, ratio_to_f64};
use crate::error::{Error, Result};
use crate::formats::{compute_scale, NumberFormat, ScalarGrid};
use crate::lloyd_max::{assign, lloyd_max, quantile_init, LloydMaxOptions};
use crate::rng::derive_seed;
use crate::tensor::{load_tensor, synth_tensor, DistSpec, TensorView};

/// Scalars in the default universal calibration tensor.
pub const DEFAULT_CALIBRATION_LEN: usize = 1 << 20;

/// Scalars in a synthetic dataset tensor when `len` is omitted.
pub const DEFAULT_SYNTH_LEN: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorSource {
    File(PathBuf),
    Synth(SynthSource),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSource {
    pub dist: DistSpec,
    #[serde(default = "default_synth_len")]
    pub len: usize,
    /// Fixed sample seed. When absent the tensor is regenerated for every
    /// experiment seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_synth_len() -> usize {
    DEFAULT_SYNTH_LEN
}

impl TensorSource {
    pub fn synth(dist: DistSpec, len: usize) -> Self {
        TensorSource::Synth(SynthSource { dist, len, seed: None })
    }

    pub fn label(&self) -> String {
        match self {
            TensorSource::File(p) => p.display().to_string(),
            TensorSource::Synth(s) => s.dist.to_string(),
        }
    }

    /// Load or generate the tensor. `salt` separates sources that share a
    /// distribution.
    pub fn resolve(&self, seed: u64, salt: u64) -> Result<TensorView> {
        match self {
            TensorSource::File(p) => load_tensor(p),
            TensorSource::Synth(s) => synth_tensor(s.dist, s.len, s.seed.unwrap_or_else(|| derive_seed(seed, salt))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LobcqMethod {
    /// The `seed` field is replaced by the experiment seed of each row.
    #[serde(flatten)]
    pub config: QuantConfig,
    /// Round codewords to integers and go through the bit stream. When
    /// false the calibrated real-valued codebooks are applied directly.
    #[serde(default = "yes")]
    pub freeze: bool,
}

fn yes() -> bool {
    true
}

impl From<QuantConfig> for LobcqMethod {
    fn from(config: QuantConfig) -> Self {
        Self { config, freeze: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Lobcq(LobcqMethod),
    Baseline(BaselineSpec),
    /// One Lloyd-Max quantizer fitted to the whole tensor.
    Lloydmax { bits: u32 },
    /// Round to a number format under a single per-tensor scale.
    Format(NumberFormat),
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::Lobcq(m) => {
                let c = &m.config;
                let mut s = format!(
                    "lobcq-lb{}-la{}-nc{}-b{}",
                    c.block_len, c.array_len, c.num_codebooks, c.bits
                );
                if !m.freeze {
                    s.push_str("-float");
                }
                s
            }
            Method::Baseline(b) => b.name.clone(),
            Method::Lloydmax { bits } => format!("lloydmax-b{bits}"),
            Method::Format(f) => format!("{f}-pertensor"),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Method::Lobcq(m) => m.config.validate(),
            Method::Baseline(b) => ScalarGrid::new(b.scalar_format).map(|_| ()),
            Method::Lloydmax { bits } if !(1..=16).contains(bits) => {
                Err(Error::InvalidExperiment(format!("lloydmax bits must lie in 1..=16, got {bits}")))
            }
            Method::Lloydmax { .. } => Ok(()),
            Method::Format(f) => ScalarGrid::new(*f).map(|_| ()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationMode {
    /// Calibrate one family per seed on the calibration source.
    #[default]
    Universal,
    /// Calibrate on every tensor separately.
    Layerwise,
}

impl fmt::Display for CalibrationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CalibrationMode::Universal => "universal",
            CalibrationMode::Layerwise => "layerwise",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub dataset: Vec<TensorSource>,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub calibration_mode: CalibrationMode,
    /// Universal-mode calibration tensor; a gaussian with outliers of
    /// [`DEFAULT_CALIBRATION_LEN`] scalars when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration_source: Option<TensorSource>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl Experiment {
    pub fn new(dataset: Vec<TensorSource>, methods: Vec<Method>) -> Self {
        Self {
            dataset,
            methods,
            calibration_mode: CalibrationMode::default(),
            calibration_source: None,
            seeds: default_seeds(),
            output: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let e: Experiment = serde_json::from_str(text).map_err(|e| Error::InvalidExperiment(e.to_string()))?;
        e.validate()?;
        Ok(e)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.is_empty() {
            return Err(Error::InvalidExperiment("dataset is empty".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidExperiment("no methods given".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidExperiment("no seeds given".into()));
        }
        for m in &self.methods {
            m.validate()?;
        }
        Ok(())
    }

    fn calibration_source(&self) -> TensorSource {
        self.calibration_source
            .clone()
            .unwrap_or_else(|| TensorSource::synth(DistSpec::DEFAULT_OUTLIERS, DEFAULT_CALIBRATION_LEN))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub tensor: String,
    pub method: String,
    pub seed: u64,
    pub nmse: f64,
    pub bits_per_scalar: f64,
    /// Exact bits per scalar as a reduced fraction, e.g. `37/8`.
    pub bits_exact: String,
    pub stream_bytes: Option<u64>,
    pub calib_iterations: Option<usize>,
    pub j_trace: Vec<f64>,
    pub j_monotone: Option<bool>,
    /// FNV-1a hash of the family, as 16 hex digits.
    pub family_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub rows: usize,
    pub median_nmse: f64,
    pub bits_per_scalar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub calibration_mode: CalibrationMode,
    /// Sorted by dataset position, then method position, then seed.
    pub rows: Vec<ReportRow>,
    pub summary: Vec<MethodSummary>,
}

impl EvalReport {
    /// Rows of one method, in report order.
    pub fn method_rows<'a>(&'a self, method: &'a str) -> impl Iterator<Item = &'a ReportRow> + 'a {
        self.rows.iter().filter(move |r| r.method == method)
    }
}

/// Median of a nonempty sample; the mean of the two middle values for an
/// even count.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn ratio_string(r: Ratio<u64>) -> String {
    if *r.denom() == 1 {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

struct Fitted {
    family: CodebookFamily,
    trace: CalibTrace,
}

fn fit(cal: crate::calib::Calibration, freeze: bool) -> Fitted {
    let family = if freeze { freeze_family(&cal.family) } else { cal.family };
    Fitted {
        family,
        trace: cal.trace,
    }
}

fn lobcq_row(t: &TensorView, m: &LobcqMethod, fitted: &Fitted) -> Result<(Vec<f32>, ReportRow)> {
    let cfg = &m.config;
    let report = effective_bitwidth(cfg, Some(t.len()))?;
    let (recon, stream_bytes) = if m.freeze {
        let enc = encode(t, &fitted.family, cfg)?;
        debug_assert_eq!(Some(enc.payload_bits()), report.measured_stream_bits);
        let bytes = enc.to_bytes().len() as u64;
        (decode(&enc, &fitted.family)?.data().to_vec(), Some(bytes))
    } else {
        (fake_quantize(t, &fitted.family, cfg)?, None)
    };
    let bits = report.effective_bits_per_scalar;
    let row = ReportRow {
        tensor: String::new(),
        method: String::new(),
        seed: 0,
        nmse: 0.0,
        bits_per_scalar: ratio_to_f64(bits),
        bits_exact: ratio_string(bits),
        stream_bytes,
        calib_iterations: Some(fitted.trace.iterations_run),
        j_trace: std::iter::once(fitted.trace.initial_j).chain(fitted.trace.j.iter().copied()).collect(),
        j_monotone: Some(fitted.trace.is_monotone(1e-9)),
        family_hash: Some(format!("{:016x}", fitted.family.hash())),
    };
    Ok((recon, row))
}

fn plain_row(bits: Ratio<u64>) -> ReportRow {
    ReportRow {
        tensor: String::new(),
        method: String::new(),
        seed: 0,
        nmse: 0.0,
        bits_per_scalar: ratio_to_f64(bits),
        bits_exact: ratio_string(bits),
        stream_bytes: None,
        calib_iterations: None,
        j_trace: Vec::new(),
        j_monotone: None,
        family_hash: None,
    }
}

/// Per-tensor Lloyd-Max reconstruction and its iteration count.
pub fn lloydmax_pertensor(t: &TensorView, bits: u32) -> Result<(Vec<f32>, usize)> {
    let data: Vec<f64> = t.data().iter().map(|&x| x as f64).collect();
    let init = quantile_init(&data, bits)?;
    let fit = lloyd_max(&data, bits, &init, &LloydMaxOptions::default())?;
    let lv = fit.levels.as_slice();
    let recon = assign(&data, &fit.levels)
        .indices
        .into_iter()
        .map(|k| lv[k] as f32)
        .collect();
    Ok((recon, fit.iterations))
}

/// Round every scalar to `fmt` under one scale mapping the tensor maximum
/// to the largest level.
pub fn format_pertensor(t: &TensorView, fmt: NumberFormat) -> Result<Vec<f32>> {
    let grid = ScalarGrid::new(fmt)?;
    let data: Vec<f64> = t.data().iter().map(|&x| x as f64).collect();
    if t.max_abs() == 0.0 {
        return Ok(vec![0.0; t.len()]);
    }
    let s = compute_scale(&data, fmt);
    Ok(data.iter().map(|&x| grid.quantize(x, s) as f32).collect())
}

fn run_row(
    t: &TensorView,
    method: &Method,
    fitted: Option<&Fitted>,
) -> Result<ReportRow> {
    let (recon, mut row) = match method {
        Method::Lobcq(m) => lobcq_row(t, m, fitted.expect("lobcq rows are fitted"))?,
        Method::Baseline(spec) => {
            let (recon, report) = quantize_baseline(t, spec)?;
            let mut row = plain_row(report.effective_bits_per_scalar);
            row.stream_bytes = report.measured_stream_bits.map(|b| b.div_ceil(8));
            (recon.data().to_vec(), row)
        }
        Method::Lloydmax { bits } => {
            let (recon, iters) = lloydmax_pertensor(t, *bits)?;
            let mut row = plain_row(Ratio::from_integer(*bits as u64));
            row.calib_iterations = Some(iters);
            (recon, row)
        }
        Method::Format(f) => (format_pertensor(t, *f)?, plain_row(Ratio::from_integer(f.bits() as u64))),
    };
    row.nmse = nmse_slices(t.data(), &recon)?;
    Ok(row)
}

/// Run every (tensor, method, seed) row of `e`.
pub fn run_experiment(e: &Experiment) -> Result<EvalReport> {
    e.validate()?;
    let nt = e.dataset.len();
    // tensors[s][i]: dataset entry i under seed index s.
    let tensors: Vec<Vec<TensorView>> = e
        .seeds
        .iter()
        .map(|&seed| {
            e.dataset
                .iter()
                .enumerate()
                .map(|(i, src)| src.resolve(seed, i as u64))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    // Universal families: one per (lobcq method, seed).
    let mut universal: Vec<Vec<Option<Fitted>>> = Vec::new();
    if e.calibration_mode == CalibrationMode::Universal {
        let src = e.calibration_source();
        for &seed in &e.seeds {
            let cal_tensor = src.resolve(seed, u64::MAX)?;
            let fitted = e
                .methods
                .iter()
                .map(|m| match m {
                    Method::Lobcq(lm) => {
                        let cfg = lm.config.with_seed(seed);
                        let blocks = normalize_blocks(&cal_tensor, &cfg)?.calibration_set()?;
                        Ok(Some(fit(calibrate(&blocks, &cfg, &CalibOptions::default())?, lm.freeze)))
                    }
                    _ => Ok(None),
                })
                .collect::<Result<Vec<_>>>()?;
            universal.push(fitted);
        }
    }

    let jobs: Vec<(usize, usize, usize)> = (0..nt)
        .flat_map(|i| (0..e.methods.len()).flat_map(move |m| (0..e.seeds.len()).map(move |s| (i, m, s))))
        .collect();
    let rows: Vec<ReportRow> = jobs
        .par_iter()
        .map(|&(i, m, s)| {
            let t = &tensors[s][i];
            let method = &e.methods[m];
            let seed = e.seeds[s];
            let local;
            let fitted = match (method, e.calibration_mode) {
                (Method::Lobcq(_), CalibrationMode::Universal) => universal[s][m].as_ref(),
                (Method::Lobcq(lm), CalibrationMode::Layerwise) => {
                    let cfg = lm.config.with_seed(seed);
                    local = fit(calibrate_tensor(t, &cfg, &CalibOptions::default())?, lm.freeze);
                    Some(&local)
                }
                _ => None,
            };
            let mut row = run_row(t, method, fitted)?;
            if row.j_monotone == Some(false) {
                log::warn!("non-monotone calibration trace: {} / {} / seed {seed}", t.name(), method.label());
            }
            row.tensor = e.dataset[i].label();
            row.method = method.label();
            row.seed = seed;
            Ok(row)
        })
        .collect::<Result<_>>()?;

    let summary = e
        .methods
        .iter()
        .map(|m| {
            let label = m.label();
            let mine: Vec<&ReportRow> = rows.iter().filter(|r| r.method == label).collect();
            let nmse: Vec<f64> = mine.iter().map(|r| r.nmse).collect();
            MethodSummary {
                method: label,
                rows: mine.len(),
                median_nmse: median(&nmse),
                bits_per_scalar: mine[0].bits_per_scalar,
            }
        })
        .collect();
    Ok(EvalReport {
        calibration_mode: e.calibration_mode,
        rows,
        summary,
    })
}

/// Grid of LO-BCQ geometries to sweep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub block_lens: Vec<usize>,
    pub array_lens: Vec<usize>,
    pub num_codebooks: Vec<usize>,
    pub bits: u32,
}

impl Default for SweepGrid {
    /// The `L_b = 8` part of the published configuration table.
    fn default() -> Self {
        Self {
            block_lens: vec![8],
            array_lens: vec![64, 32, 16],
            num_codebooks: vec![2, 4, 8, 16],
            bits: 4,
        }
    }
}

impl SweepGrid {
    pub fn cells(&self) -> Vec<QuantConfig> {
        let mut out = Vec::new();
        for &lb in &self.block_lens {
            for &la in &self.array_lens {
                for &nc in &self.num_codebooks {
                    out.push(QuantConfig::new(lb, la, nc, self.bits));
                }
            }
        }
        out
    }
}

/// Published bits per scalar of LO-BCQ configurations with `B = 4`,
/// as `(L_b, L_A, N_c, bits)`.
pub const PUBLISHED_BITWIDTHS: [(usize, usize, usize, f64); 21] = [
    (8, 64, 2, 4.25),
    (8, 64, 4, 4.375),
    (8, 64, 8, 4.5),
    (8, 64, 16, 4.625),
    (8, 32, 2, 4.375),
    (8, 32, 4, 4.5),
    (8, 32, 8, 4.625),
    (8, 32, 16, 4.75),
    (8, 16, 2, 4.625),
    (8, 16, 4, 4.75),
    (8, 16, 8, 4.875),
    (8, 16, 16, 5.0),
    (4, 64, 2, 4.375),
    (4, 64, 4, 4.625),
    (4, 32, 2, 4.5),
    (4, 32, 4, 4.75),
    (4, 16, 2, 4.75),
    (4, 16, 4, 5.0),
    (2, 64, 2, 4.625),
    (2, 32, 2, 4.75),
    (2, 16, 2, 5.0),
];

pub fn published_bitwidth(cfg: &QuantConfig) -> Option<f64> {
    if cfg.bits != 4 || cfg.scale_bits != 8 {
        return None;
    }
    PUBLISHED_BITWIDTHS
        .iter()
        .find(|&&(lb, la, nc, _)| (lb, la, nc) == (cfg.block_len, cfg.array_len, cfg.num_codebooks))
        .map(|&(.., b)| b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub block_len: usize,
    pub array_len: usize,
    pub num_codebooks: usize,
    pub bits_exact: String,
    pub bits_per_scalar: f64,
    pub published: Option<f64>,
    pub matches_published: Option<bool>,
    /// Layerwise NMSE on the sweep tensor, when one is given.
    pub nmse: Option<f64>,
}

/// Bitwidth of every grid cell, and NMSE on `data` when given.
pub fn sweep_configs(grid: &SweepGrid, data: Option<&TensorView>, seed: u64) -> Result<Vec<SweepRow>> {
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(Error::InvalidExperiment("sweep grid is empty".into()));
    }
    for cfg in &cells {
        cfg.validate()?;
    }
    cells
        .iter()
        .map(|cfg| {
            let bits = effective_bitwidth(cfg, None)?.effective_bits_per_scalar;
            let value = ratio_to_f64(bits);
            let published = published_bitwidth(cfg);
            let nmse = match data {
                Some(t) => {
                    let cfg = cfg.with_seed(seed);
                    let fitted = fit(calibrate_tensor(t, &cfg, &CalibOptions::default())?, true);
                    Some(lobcq_row(t, &LobcqMethod::from(cfg), &fitted).and_then(|(r, _)| nmse_slices(t.data(), &r))?)
                }
                None => None,
            };
            Ok(SweepRow {
                block_len: cfg.block_len,
                array_len: cfg.array_len,
                num_codebooks: cfg.num_codebooks,
                bits_exact: ratio_string(bits),
                bits_per_scalar: value,
                published,
                matches_published: published.map(|p| p == value),
                nmse,
            })
        })
        .collect()
}

/// Calibrate `N_c = target` codebooks starting from a converged smaller
/// family plus K-means++ seeds for the rest.
pub fn calibrate_nested(t: &TensorView, small: &CodebookFamily, cfg: &QuantConfig) -> Result<crate::calib::Calibration> {
    let opts = CalibOptions {
        init: InitMethod::Warm(small.clone()),
        ..CalibOptions::default()
    };
    calibrate_tensor(t, cfg, &opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            _ => Err(Error::InvalidExperiment(format!("unknown report format {s:?}"))),
        }
    }
}

impl ReportFormat {
    /// Guess from a file extension, defaulting to JSON.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => ReportFormat::Csv,
            Some("md") => ReportFormat::Markdown,
            _ => ReportFormat::Json,
        }
    }
}

/// Six significant digits, `%g` style.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return x.to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..6).contains(&exp) {
        let s = format!("{:.*}", (5 - exp).max(0) as usize, x);
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let s = format!("{x:.5e}");
        let (mant, e) = s.split_once('e').expect("exponent form");
        let mant = if mant.contains('.') {
            mant.trim_end_matches('0').trim_end_matches('.')
        } else {
            mant
        };
        format!("{mant}e{e}")
    }
}

pub const REPORT_COLUMNS: [&str; 11] = [
    "tensor",
    "method",
    "seed",
    "nmse",
    "bits_per_scalar",
    "bits_exact",
    "stream_bytes",
    "calib_iterations",
    "final_j",
    "j_monotone",
    "family_hash",
];

fn row_fields(r: &ReportRow) -> Vec<String> {
    let opt = |o: Option<String>| o.unwrap_or_default();
    vec![
        r.tensor.clone(),
        r.method.clone(),
        r.seed.to_string(),
        sig6(r.nmse),
        sig6(r.bits_per_scalar),
        r.bits_exact.clone(),
        opt(r.stream_bytes.map(|b| b.to_string())),
        opt(r.calib_iterations.map(|n| n.to_string())),
        opt(r.j_trace.last().map(|&j| sig6(j))),
        opt(r.j_monotone.map(|b| b.to_string())),
        opt(r.family_hash.clone()),
    ]
}

pub const SWEEP_COLUMNS: [&str; 8] = [
    "block_len",
    "array_len",
    "num_codebooks",
    "bits_exact",
    "bits_per_scalar",
    "published",
    "matches_published",
    "nmse",
];

fn sweep_fields(r: &SweepRow) -> Vec<String> {
    vec![
        r.block_len.to_string(),
        r.array_len.to_string(),
        r.num_codebooks.to_string(),
        r.bits_exact.clone(),
        sig6(r.bits_per_scalar),
        r.published.map(sig6).unwrap_or_default(),
        r.matches_published.map(|b| b.to_string()).unwrap_or_default(),
        r.nmse.map(sig6).unwrap_or_default(),
    ]
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn render_table(header: &[&str], rows: &[Vec<String>], format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            let line = |fields: Vec<String>| fields.iter().map(|f| csv_field(f)).collect::<Vec<_>>().join(",");
            out.push_str(&line(header.iter().map(|h| h.to_string()).collect()));
            out.push_str("\r\n");
            for r in rows {
                out.push_str(&line(r.clone()));
                out.push_str("\r\n");
            }
        }
        ReportFormat::Markdown => {
            let line = |fields: &[String]| format!("| {} |\n", fields.join(" | "));
            let header: Vec<String> = header.iter().map(|h| h.to_string()).collect();
            out.push_str(&line(&header));
            out.push_str(&line(&vec!["---".to_string(); header.len()]));
            for r in rows {
                let escaped: Vec<String> = r.iter().map(|f| f.replace('|', "\\|")).collect();
                out.push_str(&line(&escaped));
            }
        }
        ReportFormat::Json => unreachable!("json is rendered through serde"),
    }
    out
}

pub fn render_report(r: &EvalReport, format: ReportFormat) -> Result<String> {
    if r.rows.is_empty() {
        return Err(Error::InvalidExperiment("report is empty".into()));
    }
    Ok(match format {
        ReportFormat::Json => serde_json::to_string_pretty(r)?,
        _ => render_table(&REPORT_COLUMNS, &r.rows.iter().map(row_fields).collect::<Vec<_>>(), format),
    })
}

pub fn render_sweep(rows: &[SweepRow], format: ReportFormat) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::InvalidExperiment("sweep is empty".into()));
    }
    Ok(match format {
        ReportFormat::Json => serde_json::to_string_pretty(rows)?,
        _ => render_table(&SWEEP_COLUMNS, &rows.iter().map(sweep_fields).collect::<Vec<_>>(), format),
    })
}

pub fn emit_report(r: &EvalReport, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, render_report(r, format)?)?;
    Ok(())
}
