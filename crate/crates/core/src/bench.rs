//! Experiment runner behind the `fimsim` binary.
//!
//! Every experiment is described by an [`ExperimentConfig`] and produces a
//! [`RunOutput`]: a deterministic main table (bit-identical for the same
//! config and seed at any thread count) plus a timing sidecar that holds
//! everything measured with a clock.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::bayesopt::{optimize, BoProblem, BoSettings};
use crate::error::{FimError, Result};
use crate::estimation::{
    build_problem, build_schedule_multi_with, build_schedule_single, evaluate_nmse, AngleGrid, MovementPattern,
    MultiLayout, NmseReport, PbfSource, ProtocolSchedule, RecoveryResult, SparseProblem,
};
use crate::interference::{expected_bounds, fringe_map, monte_carlo_bounds, pbf_only_objective, FringeAxes, Mode};
use crate::mc::{derive_seed, mean_stats, median, run_trials, MeanStats};
use crate::model::{Aperture, ChannelRealization, ChannelSpec, NoiseModel, PathSet, DEFAULT_WAVELENGTH};
use crate::recovery::{recover, Algorithm, RecoverySettings};

// seed streams; one per independent random quantity
const STREAM_CLOSED_FORM: u64 = 0x100;
const STREAM_BO_CHANNEL: u64 = 0x200;
const STREAM_BO_SEARCH: u64 = 0x300;
const STREAM_BOUNDS: u64 = 0x400;
const STREAM_EST_CHANNEL: u64 = 0x500;
const STREAM_EST_SCHEDULE: u64 = 0x501;
const STREAM_EST_NOISE: u64 = 0x502;
const STREAM_EST_CLUSTER: u64 = 0x503;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Experiment {
    Fringe,
    PowerVsPaths,
    Bounds,
    NmseVsQ,
    NmseVsSnr,
    Runtime,
}

impl Experiment {
    pub fn label(&self) -> &'static str {
        match self {
            Experiment::Fringe => "FRINGE",
            Experiment::PowerVsPaths => "POWER_VS_PATHS",
            Experiment::Bounds => "BOUNDS",
            Experiment::NmseVsQ => "NMSE_VS_Q",
            Experiment::NmseVsSnr => "NMSE_VS_SNR",
            Experiment::Runtime => "RUNTIME",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelParams {
    pub bs_paths: usize,
    pub user_paths: usize,
    pub elements: usize,
    pub sigma_alpha: f64,
    pub sigma_beta: f64,
    pub sigma_gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApertureParams {
    pub wavelength: f64,
    /// Half-width of the movable region in wavelengths.
    pub region_wavelengths: f64,
    /// Minimum element spacing in wavelengths.
    pub d_min_wavelengths: f64,
}

impl ApertureParams {
    pub fn aperture(&self) -> Result<Aperture> {
        Aperture::new(self.wavelength, self.region_wavelengths * self.wavelength, self.d_min_wavelengths * self.wavelength)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolParams {
    /// Subframes `Q` (multi-element schedules).
    pub subframes: usize,
    /// Slots per subframe: `T2` for multi-element, `T1` for one element.
    pub slots: usize,
    /// `None` is noiseless.
    pub snr_db: Option<f64>,
    /// Virtual angle grid points per axis.
    pub grid_points: usize,
    pub pbf: PbfSource,
}

/// One hop path of a hand-specified channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HopPath {
    pub gain: Complex64,
    pub theta: f64,
    pub phi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FringeSetup {
    pub bs: Vec<HopPath>,
    pub user: Vec<HopPath>,
    pub direct: Complex64,
    pub plane_resolution: usize,
    pub phase_resolution: usize,
    pub volume_spatial_resolution: usize,
    pub volume_phase_resolution: usize,
}

impl FringeSetup {
    fn hop(paths: &[HopPath]) -> Result<PathSet> {
        PathSet::new(
            paths.iter().map(|p| p.gain).collect(),
            paths.iter().map(|p| p.theta).collect(),
            paths.iter().map(|p| p.phi).collect(),
            1.0,
        )
    }

    pub fn channel(&self) -> Result<ChannelRealization> {
        ChannelRealization::from_paths(&Self::hop(&self.bs)?, &Self::hop(&self.user)?, self.direct)
    }

    /// Single-path setup with `theta_B = phi_B = -theta_U = -phi_U = sqrt(2)/2`
    /// and all gains `e^{j pi/4}`.
    pub fn fig2() -> Self {
        let c = std::f64::consts::FRAC_1_SQRT_2;
        let g = Complex64::from_polar(1.0, std::f64::consts::FRAC_PI_4);
        FringeSetup {
            bs: vec![HopPath { gain: g, theta: c, phi: c }],
            user: vec![HopPath { gain: g, theta: -c, phi: -c }],
            direct: g,
            ..Self::resolutions()
        }
    }

    /// Two BS paths and two user paths (four cascaded paths).
    pub fn fig3() -> Self {
        use std::f64::consts::PI;
        let s2 = 2f64.sqrt();
        let s3 = 3f64.sqrt();
        let s6 = 6f64.sqrt();
        FringeSetup {
            bs: vec![
                HopPath { gain: Complex64::from_polar(1.0, PI / 6.0), theta: s2 / 2.0, phi: s2 / 4.0 },
                HopPath { gain: Complex64::from_polar(1.0, PI / 3.0), theta: 0.5, phi: s6 / 4.0 },
            ],
            user: vec![
                HopPath { gain: Complex64::from_polar(1.0, PI / 4.0), theta: 0.0, phi: -s3 / 2.0 },
                HopPath { gain: Complex64::from_polar(1.0, PI / 2.0), theta: -1.0, phi: 0.0 },
            ],
            direct: Complex64::from_polar(1.0, PI / 4.0),
            ..Self::resolutions()
        }
    }

    fn resolutions() -> Self {
        FringeSetup {
            bs: Vec::new(),
            user: Vec::new(),
            direct: Complex64::new(0.0, 0.0),
            plane_resolution: FringeAxes::DEFAULT_SPATIAL,
            phase_resolution: FringeAxes::DEFAULT_PHASE,
            volume_spatial_resolution: 101,
            volume_phase_resolution: 181,
        }
    }
}

impl Default for FringeSetup {
    fn default() -> Self {
        Self::fig2()
    }
}

/// Declarative description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub channel: ChannelParams,
    pub aperture: ApertureParams,
    pub protocol: ProtocolParams,
    /// Values of the swept variable: P (power), Q or SNR in dB (NMSE),
    /// virtual array size `N * T2` (runtime). Unused by fringe and bounds.
    pub sweep: Vec<f64>,
    /// `(L, P, N)` triples for the bounds table.
    pub bound_cases: Vec<(usize, usize, usize)>,
    pub algorithms: Vec<Algorithm>,
    pub recovery: RecoverySettings,
    pub bo: BoSettings,
    pub fringe: FringeSetup,
    /// Monte Carlo trials (BO trials for the power experiment).
    pub trials: usize,
    /// Draws for closed-form quantities (power and bounds experiments).
    pub closed_form_trials: usize,
    /// Timed repetitions per runtime point; the median is reported.
    pub repetitions: usize,
    pub root_seed: u64,
    pub output_path: Option<String>,
}

impl ExperimentConfig {
    /// Defaults for `experiment` (the desk-scale versions of the benchmark setups).
    pub fn defaults_for(experiment: Experiment) -> Self {
        let mut cfg = ExperimentConfig {
            experiment,
            channel: ChannelParams {
                bs_paths: 4,
                user_paths: 4,
                elements: 16,
                sigma_alpha: 1.0,
                sigma_beta: 1.0,
                sigma_gamma: 1.0,
            },
            aperture: ApertureParams { wavelength: DEFAULT_WAVELENGTH, region_wavelengths: 3.0, d_min_wavelengths: 0.5 },
            protocol: ProtocolParams { subframes: 16, slots: 9, snr_db: Some(20.0), grid_points: 12, pbf: PbfSource::Random },
            sweep: Vec::new(),
            bound_cases: Vec::new(),
            algorithms: vec![Algorithm::Omp, Algorithm::Fista, Algorithm::Mfvsbl, Algorithm::Cmfvsbl],
            recovery: RecoverySettings { sparsity: 16, ..Default::default() },
            bo: BoSettings::default(),
            fringe: FringeSetup::fig2(),
            trials: 200,
            closed_form_trials: 10_000,
            repetitions: 5,
            root_seed: 0,
            output_path: None,
        };
        match experiment {
            Experiment::Fringe => {
                cfg.aperture.region_wavelengths = 2.0;
                cfg.trials = 1;
            }
            Experiment::PowerVsPaths => {
                cfg.channel = ChannelParams { bs_paths: 1, user_paths: 1, elements: 1, ..cfg.channel };
                cfg.aperture.region_wavelengths = 1.0;
                cfg.sweep = (1..=12).map(f64::from).collect();
                cfg.trials = 100;
            }
            Experiment::Bounds => {
                cfg.channel.elements = 1;
                for l in [1, 2, 4] {
                    for p in [1, 2, 4] {
                        for n in [1, 2] {
                            cfg.bound_cases.push((l, p, n));
                        }
                    }
                }
            }
            Experiment::NmseVsQ => {
                cfg.sweep = (1..=8).map(|q| f64::from(2 * q)).collect();
            }
            Experiment::NmseVsSnr => {
                cfg.sweep = (1..=6).map(|s| f64::from(5 * s)).collect();
            }
            Experiment::Runtime => {
                cfg.protocol.subframes = 12;
                cfg.sweep = vec![144.0, 324.0, 576.0];
                cfg.algorithms = Algorithm::ALL.to_vec();
                cfg.trials = 1;
            }
        }
        cfg
    }

    /// Parses a JSON config; fields not given take the defaults of its
    /// `experiment`.
    pub fn from_json(text: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(text).map_err(|e| FimError::Config(format!("config is not valid JSON: {e}")))?;
        let experiment = user
            .get("experiment")
            .ok_or_else(|| FimError::Config("config needs an \"experiment\" field".into()))?;
        let experiment: Experiment =
            serde_json::from_value(experiment.clone()).map_err(|e| FimError::Config(format!("unknown experiment: {e}")))?;
        let mut base = serde_json::to_value(Self::defaults_for(experiment)).expect("config serializes");
        merge(&mut base, &user);
        let cfg: Self = serde_json::from_value(base).map_err(|e| FimError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON, ignoring `output_path`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_path = None;
        let digest = Sha256::digest(serde_json::to_string(&c).expect("config serializes").as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FimError::Config(m));
        if self.trials == 0 || self.closed_form_trials == 0 || self.repetitions == 0 {
            return bad("trials, closed_form_trials and repetitions must be at least 1".into());
        }
        let ch = &self.channel;
        if ch.bs_paths == 0 || ch.user_paths == 0 || ch.elements == 0 {
            return bad("L, P and N must be at least 1".into());
        }
        for s in [ch.sigma_alpha, ch.sigma_beta, ch.sigma_gamma] {
            if !(s >= 0.0 && s.is_finite()) {
                return bad(format!("gain deviations must be finite and >= 0, got {s}"));
            }
        }
        self.aperture.aperture().map_err(|e| FimError::Config(e.to_string()))?;
        let needs_sweep = !matches!(self.experiment, Experiment::Fringe | Experiment::Bounds);
        if needs_sweep && self.sweep.is_empty() {
            return bad(format!("{} needs a non-empty sweep", self.experiment.label()));
        }
        let integral = |v: f64| v >= 1.0 && v.fract() == 0.0 && v < 1e9;
        match self.experiment {
            Experiment::PowerVsPaths | Experiment::NmseVsQ if !self.sweep.iter().all(|v| integral(*v)) => {
                return bad("path and subframe sweeps take positive integers".into());
            }
            Experiment::NmseVsSnr if !self.sweep.iter().all(|v| v.is_finite()) => {
                return bad("SNR sweep values must be finite".into());
            }
            Experiment::Runtime => {
                for v in &self.sweep {
                    runtime_side(*v, self.protocol.slots)?;
                }
            }
            Experiment::Bounds if self.bound_cases.iter().any(|&(l, p, n)| l == 0 || p == 0 || n == 0) => {
                return bad("bound cases need L, P, N >= 1".into());
            }
            _ => {}
        }
        if matches!(self.experiment, Experiment::NmseVsQ | Experiment::NmseVsSnr | Experiment::Runtime) {
            if self.algorithms.is_empty() {
                return bad("at least one algorithm is required".into());
            }
            let p = &self.protocol;
            if p.subframes == 0 || p.slots == 0 || p.grid_points == 0 {
                return bad("Q, slots and grid points must be at least 1".into());
            }
            if self.channel.elements > 1 && self.experiment != Experiment::Runtime {
                MultiLayout::for_elements(self.channel.elements).map_err(|e| FimError::Config(e.to_string()))?;
            }
            if p.snr_db.is_some_and(|s| !s.is_finite()) {
                return bad("snr_db must be finite (use null for noiseless)".into());
            }
        }
        self.recovery.sbl.validate().map_err(|e| FimError::Config(e.to_string()))?;
        Ok(())
    }
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Fig2,
    Fig3,
    Fig4a,
    Fig4b,
    Fig5,
    Fig6,
    Fig7,
}

impl Preset {
    pub const ALL: [Preset; 7] = [Preset::Fig2, Preset::Fig3, Preset::Fig4a, Preset::Fig4b, Preset::Fig5, Preset::Fig6, Preset::Fig7];

    pub fn label(&self) -> &'static str {
        match self {
            Preset::Fig2 => "fig2",
            Preset::Fig3 => "fig3",
            Preset::Fig4a => "fig4a",
            Preset::Fig4b => "fig4b",
            Preset::Fig5 => "fig5",
            Preset::Fig6 => "fig6",
            Preset::Fig7 => "fig7",
        }
    }

    pub fn config(&self) -> ExperimentConfig {
        match self {
            Preset::Fig2 => ExperimentConfig::defaults_for(Experiment::Fringe),
            Preset::Fig3 => {
                let mut c = ExperimentConfig::defaults_for(Experiment::Fringe);
                c.fringe = FringeSetup::fig3();
                c
            }
            Preset::Fig4a => ExperimentConfig::defaults_for(Experiment::PowerVsPaths),
            Preset::Fig4b => {
                let mut c = ExperimentConfig::defaults_for(Experiment::PowerVsPaths);
                c.channel.elements = 2;
                c
            }
            Preset::Fig5 => ExperimentConfig::defaults_for(Experiment::NmseVsQ),
            Preset::Fig6 => ExperimentConfig::defaults_for(Experiment::NmseVsSnr),
            Preset::Fig7 => ExperimentConfig::defaults_for(Experiment::Runtime),
        }
    }
}

impl FromStr for Preset {
    type Err = FimError;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.label() == s.to_ascii_lowercase())
            .ok_or_else(|| FimError::Config(format!("unknown preset '{s}'")))
    }
}

/// Column-oriented numeric table with `#`-prefixed metadata on export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub metadata: Vec<(String, String)>,
}

impl ResultTable {
    pub fn new(columns: Vec<String>) -> Self {
        ResultTable { columns, rows: Vec::new(), metadata: Vec::new() }
    }

    pub fn push_row(&mut self, row: Vec<f64>) {
        assert_eq!(row.len(), self.columns.len(), "row width");
        self.rows.push(row);
    }

    pub fn meta(&mut self, key: &str, value: impl ToString) {
        self.metadata.push((key.to_string(), value.to_string()));
    }

    pub fn metadata_value(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.metadata {
            let _ = writeln!(out, "# {k}: {v}");
        }
        out.push_str(&self.columns.join(","));
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// Inverse of [`ResultTable::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut metadata = Vec::new();
        let mut lines = text.lines();
        let header = loop {
            let line = lines.next().ok_or_else(|| FimError::Format("CSV has no header".into()))?;
            match line.strip_prefix("# ") {
                Some(m) => {
                    let (k, v) = m.split_once(": ").ok_or_else(|| FimError::Format(format!("bad metadata line '{line}'")))?;
                    metadata.push((k.to_string(), v.to_string()));
                }
                None => break line,
            }
        };
        let columns: Vec<String> = header.split(',').map(str::to_string).collect();
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let row: std::result::Result<Vec<f64>, _> = line.split(',').map(str::parse::<f64>).collect();
            let row = row.map_err(|e| FimError::Format(format!("bad CSV cell: {e}")))?;
            if row.len() != columns.len() {
                return Err(FimError::Format("ragged CSV row".into()));
            }
            rows.push(row);
        }
        Ok(ResultTable { columns, rows, metadata })
    }
}

fn stats_columns(prefix: &str, metric: &str) -> [String; 2] {
    [format!("{prefix}_{metric}_mean"), format!("{prefix}_{metric}_stderr")]
}

fn push_stats(row: &mut Vec<f64>, s: &MeanStats) {
    row.push(s.mean);
    row.push(s.stderr);
}

/// Main artifact of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub enum Artifact {
    Table(ResultTable),
    Json(Value),
}

impl Artifact {
    pub fn render(&self) -> String {
        match self {
            Artifact::Table(t) => t.to_csv(),
            Artifact::Json(v) => {
                let mut s = serde_json::to_string_pretty(v).expect("json renders");
                s.push('\n');
                s
            }
        }
    }

    pub fn table(&self) -> Option<&ResultTable> {
        match self {
            Artifact::Table(t) => Some(t),
            Artifact::Json(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub artifact: Artifact,
    /// Clock measurements; never part of the deterministic artifact.
    pub timing: ResultTable,
}

fn header(table: &mut ResultTable, cfg: &ExperimentConfig) {
    table.meta("experiment", cfg.experiment.label());
    table.meta("config_hash", cfg.hash());
    table.meta("root_seed", cfg.root_seed);
    table.meta("trials", cfg.trials);
    table.meta("generator", concat!("fimsim ", env!("CARGO_PKG_VERSION")));
}

fn timing_table(cfg: &ExperimentConfig, wall: f64) -> ResultTable {
    let mut t = ResultTable::new(Vec::new());
    t.meta("config_hash", cfg.hash());
    t.meta("wall_time_seconds", format!("{wall:.6}"));
    t
}

/// Fringe slices as CSV rows `slice,v,x,z,objective`: slice 0 is the
/// `(x, z)` plane at `v = 0`, slice 1 the phase sweep at `x = z = 0`.
/// The maxima of both slices and of a coarser `(v, x, z)` volume go into the
/// metadata.
pub fn run_fringe(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let start = Instant::now();
    let f = &cfg.fringe;
    let channel = f.channel()?;
    let ap = cfg.aperture.aperture()?;
    if !ap.region_bound.is_finite() {
        return Err(FimError::Config("fringe maps need a finite region".into()));
    }
    let plane = fringe_map(&channel, &ap, FringeAxes::Plane { phase: 0.0, resolution: f.plane_resolution })?;
    let line = fringe_map(&channel, &ap, FringeAxes::PhaseLine { x: 0.0, z: 0.0, resolution: f.phase_resolution })?;
    let volume = fringe_map(
        &channel,
        &ap,
        FringeAxes::Volume { spatial_resolution: f.volume_spatial_resolution, phase_resolution: f.volume_phase_resolution },
    )?;
    let mut t = ResultTable::new(["slice", "v", "x", "z", "objective"].map(String::from).to_vec());
    header(&mut t, cfg);
    t.meta("cascaded_paths", channel.num_paths());
    t.meta("upper_bound", format!("{:e}", (channel.direct().norm() + channel.gain_abs_sum()).powi(2)));
    t.meta("plane_max", format!("{:e}", plane.max.value));
    t.meta("plane_min", format!("{:e}", plane.min.value));
    t.meta("phase_line_max", format!("{:e}", line.max.value));
    t.meta("phase_line_min", format!("{:e}", line.min.value));
    t.meta("volume_max", format!("{:e}", volume.max.value));
    t.meta("volume_min", format!("{:e}", volume.min.value));
    for (slice, map) in [(0.0, &plane), (1.0, &line)] {
        for (iv, v) in map.v.iter().enumerate() {
            for (iz, z) in map.z.iter().enumerate() {
                for (ix, x) in map.x.iter().enumerate() {
                    t.push_row(vec![slice, *v, *x, *z, map.value(iv, iz, ix)]);
                }
            }
        }
    }
    Ok(RunOutput { artifact: Artifact::Table(t), timing: timing_table(cfg, start.elapsed().as_secs_f64()) })
}

/// Received power of PBF-only (closed form), EM-only and EM-PBF (both
/// Bayesian optimization) against the number of user paths `P`, with the
/// theoretical `E{f_PBF}` and `E{f_UB}` curves.
pub fn run_power_vs_paths(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let start = Instant::now();
    let ch = cfg.channel;
    let n = ch.elements;
    let ap = cfg.aperture.aperture()?;
    let mut columns = vec!["paths".to_string()];
    for name in ["pbf_only", "em_only", "em_pbf", "theory_pbf", "theory_ub"] {
        columns.extend(stats_columns(name, "power"));
    }
    let mut t = ResultTable::new(columns);
    header(&mut t, cfg);
    t.meta("closed_form_trials", cfg.closed_form_trials);
    t.meta("bo_budget", cfg.bo.budget);
    t.meta("elements", n);
    for &pv in &cfg.sweep {
        let p = pv as usize;
        let spec = ChannelSpec::new(ch.bs_paths, p, ch.sigma_alpha, ch.sigma_beta, ch.sigma_gamma);
        let closed = run_trials(cfg.closed_form_trials, |i| {
            spec.sample_seeded(derive_seed(cfg.root_seed, STREAM_CLOSED_FORM + p as u64, i as u64))
                .map(|c| pbf_only_objective(&c, n))
        });
        let closed: Vec<f64> = closed.into_iter().collect::<Result<_>>()?;
        let bo = run_trials(cfg.trials, |i| -> Result<(f64, f64)> {
            let channel = spec.sample_seeded(derive_seed(cfg.root_seed, STREAM_BO_CHANNEL + p as u64, i as u64))?;
            let mut out = [0.0; 2];
            for (k, mode) in [Mode::EmOnly, Mode::EmPbf].into_iter().enumerate() {
                let settings = BoSettings {
                    seed: derive_seed(cfg.root_seed, STREAM_BO_SEARCH + 16 * p as u64 + k as u64, i as u64),
                    ..cfg.bo.clone()
                };
                out[k] = optimize(&BoProblem::new(channel.clone(), ap, n, mode, settings)?)?.solution.objective;
            }
            Ok((out[0], out[1]))
        });
        let bo: Vec<(f64, f64)> = bo.into_iter().collect::<Result<_>>()?;
        let theory = expected_bounds(ch.bs_paths, p, n, ch.sigma_alpha, ch.sigma_beta, ch.sigma_gamma);
        let exact = |v: f64| MeanStats { mean: v, stderr: 0.0, count: 0 };
        let mut row = vec![pv];
        push_stats(&mut row, &mean_stats(&closed));
        push_stats(&mut row, &mean_stats(&bo.iter().map(|b| b.0).collect::<Vec<_>>()));
        push_stats(&mut row, &mean_stats(&bo.iter().map(|b| b.1).collect::<Vec<_>>()));
        push_stats(&mut row, &exact(theory.pbf));
        push_stats(&mut row, &exact(theory.upper));
        t.push_row(row);
    }
    Ok(RunOutput { artifact: Artifact::Table(t), timing: timing_table(cfg, start.elapsed().as_secs_f64()) })
}

/// Monte Carlo against closed-form expectations of `f_PBF(v*)` and `f_UB`.
pub fn run_bounds(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let start = Instant::now();
    let ch = cfg.channel;
    let mut columns: Vec<String> = ["bs_paths", "user_paths", "elements"].map(String::from).to_vec();
    for name in ["mc_pbf", "mc_ub", "theory_pbf", "theory_ub"] {
        columns.extend(stats_columns(name, "power"));
    }
    columns.push("violations".into());
    let mut t = ResultTable::new(columns);
    header(&mut t, cfg);
    t.meta("draws", cfg.closed_form_trials);
    let sig = (ch.sigma_alpha, ch.sigma_beta, ch.sigma_gamma);
    for (case, &(l, p, n)) in cfg.bound_cases.iter().enumerate() {
        let mc = monte_carlo_bounds(l, p, n, sig, cfg.closed_form_trials, derive_seed(cfg.root_seed, STREAM_BOUNDS, case as u64));
        let th = expected_bounds(l, p, n, sig.0, sig.1, sig.2);
        let mut row = vec![l as f64, p as f64, n as f64];
        push_stats(&mut row, &mc.pbf);
        push_stats(&mut row, &mc.upper);
        row.extend([th.pbf, 0.0, th.upper, 0.0, mc.violations as f64]);
        t.push_row(row);
    }
    Ok(RunOutput { artifact: Artifact::Table(t), timing: timing_table(cfg, start.elapsed().as_secs_f64()) })
}

/// One estimation instance: schedule, grid, channel and problem.
pub struct EstimationCase {
    pub schedule: ProtocolSchedule,
    pub channel: ChannelRealization,
    pub problem: SparseProblem,
}

fn runtime_side(size: f64, slots: usize) -> Result<usize> {
    let per = size / slots as f64;
    let side = per.sqrt().round() as usize;
    if side == 0 || (side * side * slots) as f64 != size || slots != 9 {
        return Err(FimError::Config(format!(
            "virtual array size {size} must equal 9 * side^2 with T2 = 9 (got T2 = {slots})"
        )));
    }
    Ok(side)
}

/// Builds trial `trial` of an estimation experiment with `q` subframes at
/// `snr_db` (`None` = noiseless), using the subarray layout `layout` (or the
/// config's element count).
pub fn estimation_case(
    cfg: &ExperimentConfig,
    layout: Option<MultiLayout>,
    q: usize,
    snr_db: Option<f64>,
    trial: u64,
) -> Result<EstimationCase> {
    let ch = cfg.channel;
    let p = cfg.protocol;
    let lam = cfg.aperture.wavelength;
    let root = cfg.root_seed;
    let (schedule, grid_points) = if layout.is_none() && ch.elements == 1 {
        let ap = cfg.aperture.aperture()?;
        (build_schedule_single(p.slots, &MovementPattern::Lattice, ap)?, p.grid_points)
    } else {
        let (layout, points) = match layout {
            Some(l) => (l, l.virtual_side()),
            None => (MultiLayout::for_elements(ch.elements)?, p.grid_points),
        };
        let region = (cfg.aperture.region_wavelengths * lam).max(layout.region_bound(lam));
        let ap = Aperture::new(lam, region, cfg.aperture.d_min_wavelengths * lam)?;
        let seed = derive_seed(root, STREAM_EST_SCHEDULE, trial);
        (build_schedule_multi_with(layout, q, p.slots, ap, p.pbf, seed)?, points)
    };
    let grid = AngleGrid::virtual_grid(grid_points, grid_points)?;
    let channel = ChannelSpec::new(ch.bs_paths, ch.user_paths, ch.sigma_alpha, ch.sigma_beta, ch.sigma_gamma)
        .on_grid(grid_points)
        .sample_seeded(derive_seed(root, STREAM_EST_CHANNEL, trial))?;
    let noise = match snr_db {
        Some(s) => NoiseModel::from_snr_db(s),
        None => NoiseModel::noiseless(),
    };
    let problem = build_problem(&schedule, &grid, &channel, noise, derive_seed(root, STREAM_EST_NOISE, trial))?;
    Ok(EstimationCase { schedule, channel, problem })
}

fn trial_settings(cfg: &ExperimentConfig, trial: u64) -> RecoverySettings {
    RecoverySettings { cluster_seed: derive_seed(cfg.root_seed, STREAM_EST_CLUSTER, trial), ..cfg.recovery }
}

/// Runs every configured algorithm on one case.
pub fn run_algorithms(
    cfg: &ExperimentConfig,
    case: &EstimationCase,
    trial: u64,
) -> Result<Vec<(RecoveryResult, NmseReport)>> {
    let settings = trial_settings(cfg, trial);
    cfg.algorithms
        .iter()
        .map(|a| {
            let r = recover(&case.problem, *a, &settings)?;
            let n = evaluate_nmse(&r, &case.channel, &case.problem)?;
            Ok((r, n))
        })
        .collect()
}

/// Cascaded and direct NMSE per algorithm against Q or SNR.
pub fn run_nmse_sweep(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let start = Instant::now();
    let (var, by_q) = match cfg.experiment {
        Experiment::NmseVsQ => ("subframes", true),
        Experiment::NmseVsSnr => ("snr_db", false),
        other => return Err(FimError::Config(format!("{} is not an NMSE sweep", other.label()))),
    };
    let mut columns = vec![var.to_string()];
    for a in &cfg.algorithms {
        columns.extend(stats_columns(a.label(), "cascaded_nmse"));
        columns.extend(stats_columns(a.label(), "direct_nmse"));
    }
    let mut t = ResultTable::new(columns);
    header(&mut t, cfg);
    match cfg.protocol.snr_db {
        Some(s) if by_q => t.meta("snr_db", s),
        None if by_q => t.meta("snr_db", "noiseless"),
        _ => t.meta("subframes", cfg.protocol.subframes),
    }
    for &x in &cfg.sweep {
        let (q, snr) = if by_q { (x as usize, cfg.protocol.snr_db) } else { (cfg.protocol.subframes, Some(x)) };
        let per_trial = run_trials(cfg.trials, |i| -> Result<Vec<NmseReport>> {
            let case = estimation_case(cfg, None, q, snr, i as u64)?;
            Ok(run_algorithms(cfg, &case, i as u64)?.into_iter().map(|(_, n)| n).collect())
        });
        let per_trial: Vec<Vec<NmseReport>> = per_trial.into_iter().collect::<Result<_>>()?;
        let mut row = vec![x];
        for k in 0..cfg.algorithms.len() {
            push_stats(&mut row, &mean_stats(&per_trial.iter().map(|r| r[k].cascaded).collect::<Vec<_>>()));
            push_stats(&mut row, &mean_stats(&per_trial.iter().map(|r| r[k].direct).collect::<Vec<_>>()));
        }
        t.push_row(row);
    }
    Ok(RunOutput { artifact: Artifact::Table(t), timing: timing_table(cfg, start.elapsed().as_secs_f64()) })
}

/// Wall time per algorithm against the virtual array size `N * T2`. The
/// main table holds the deterministic part (atoms, iterations, NMSE); median
/// wall times go to the timing table. Problem synthesis is not timed and
/// trials run sequentially so that timings do not compete for cores.
pub fn run_runtime(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let start = Instant::now();
    let mut columns = vec!["virtual_array_size".to_string(), "atoms".to_string()];
    let mut tcols = columns.clone();
    for a in &cfg.algorithms {
        columns.extend(stats_columns(a.label(), "iterations"));
        columns.extend(stats_columns(a.label(), "cascaded_nmse"));
        tcols.push(format!("{}_seconds_median", a.label()));
        tcols.push(format!("{}_seconds_per_iteration_median", a.label()));
    }
    let mut t = ResultTable::new(columns);
    header(&mut t, cfg);
    t.meta("subframes", cfg.protocol.subframes);
    t.meta("repetitions", cfg.repetitions);
    let mut timing = timing_table(cfg, 0.0);
    timing.columns = tcols;
    timing.meta("repetitions", cfg.repetitions);
    for &size in &cfg.sweep {
        let side = runtime_side(size, cfg.protocol.slots)?;
        let layout = MultiLayout { subarray_side: side, translations_per_axis: 3 };
        let na = cfg.algorithms.len();
        let mut iters = vec![Vec::new(); na];
        let mut nmse = vec![Vec::new(); na];
        let mut secs = vec![Vec::new(); na];
        let mut per_iter = vec![Vec::new(); na];
        let mut atoms = 0;
        for trial in 0..cfg.trials as u64 {
            let case = estimation_case(cfg, Some(layout), cfg.protocol.subframes, cfg.protocol.snr_db, trial)?;
            atoms = case.problem.atoms();
            let settings = trial_settings(cfg, trial);
            for (k, a) in cfg.algorithms.iter().enumerate() {
                let mut reps = Vec::with_capacity(cfg.repetitions);
                let mut last = None;
                for _ in 0..cfg.repetitions {
                    let t0 = Instant::now();
                    let r = recover(&case.problem, *a, &settings)?;
                    reps.push(t0.elapsed().as_secs_f64());
                    last = Some(r);
                }
                let r = last.expect("at least one repetition");
                let m = median(&reps);
                iters[k].push(r.iterations as f64);
                nmse[k].push(evaluate_nmse(&r, &case.channel, &case.problem)?.cascaded);
                secs[k].push(m);
                per_iter[k].push(m / r.iterations.max(1) as f64);
            }
        }
        let mut row = vec![size, atoms as f64];
        let mut trow = row.clone();
        for k in 0..na {
            push_stats(&mut row, &mean_stats(&iters[k]));
            push_stats(&mut row, &mean_stats(&nmse[k]));
            trow.push(median(&secs[k]));
            trow.push(median(&per_iter[k]));
        }
        t.push_row(row);
        timing.push_row(trow);
    }
    let wall = start.elapsed().as_secs_f64();
    timing.metadata.retain(|(k, _)| k != "wall_time_seconds");
    timing.meta("wall_time_seconds", format!("{wall:.6}"));
    Ok(RunOutput { artifact: Artifact::Table(t), timing })
}

/// Single estimation trial (trial index 0 at the configured Q and SNR) with
/// full recovery results as JSON. Wall times are moved to the timing table.
pub fn run_estimate(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let start = Instant::now();
    let case = estimation_case(cfg, None, cfg.protocol.subframes, cfg.protocol.snr_db, 0)?;
    let results = run_algorithms(cfg, &case, 0)?;
    let mut timing = timing_table(cfg, 0.0);
    timing.columns = cfg.algorithms.iter().map(|a| format!("{}_seconds", a.label())).collect();
    timing.push_row(results.iter().map(|(r, _)| r.wall_time).collect());
    let entries: Vec<Value> = results
        .into_iter()
        .map(|(mut r, n)| {
            r.wall_time = 0.0;
            serde_json::json!({ "result": r, "nmse": n })
        })
        .collect();
    let json = serde_json::json!({
        "experiment": "ESTIMATE",
        "config_hash": cfg.hash(),
        "root_seed": cfg.root_seed,
        "rows": case.problem.rows(),
        "atoms": case.problem.atoms(),
        "elements": case.schedule.elements(),
        "measurements": case.schedule.measurements(),
        "recoveries": entries,
    });
    timing.metadata.retain(|(k, _)| k != "wall_time_seconds");
    timing.meta("wall_time_seconds", format!("{:.6}", start.elapsed().as_secs_f64()));
    Ok(RunOutput { artifact: Artifact::Json(json), timing })
}

/// CLI subcommands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Fringe,
    Power,
    Bounds,
    Estimate,
    Nmse,
    Runtime,
}

impl Command {
    fn accepts(&self, e: Experiment) -> bool {
        match self {
            Command::Fringe => e == Experiment::Fringe,
            Command::Power => e == Experiment::PowerVsPaths,
            Command::Bounds => e == Experiment::Bounds,
            Command::Estimate | Command::Nmse => matches!(e, Experiment::NmseVsQ | Experiment::NmseVsSnr),
            Command::Runtime => e == Experiment::Runtime,
        }
    }

    fn default_experiment(&self) -> Experiment {
        match self {
            Command::Fringe => Experiment::Fringe,
            Command::Power => Experiment::PowerVsPaths,
            Command::Bounds => Experiment::Bounds,
            Command::Estimate | Command::Nmse => Experiment::NmseVsQ,
            Command::Runtime => Experiment::Runtime,
        }
    }
}

/// Command-line overrides applied on top of the preset or config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub trials: Option<usize>,
    pub repetitions: Option<usize>,
}

/// Resolves the effective config for `command`.
pub fn resolve_config(
    command: Command,
    preset: Option<Preset>,
    config_text: Option<&str>,
    overrides: &Overrides,
) -> Result<ExperimentConfig> {
    let mut cfg = match (preset, config_text) {
        (Some(_), Some(_)) => return Err(FimError::Config("--preset and --config are mutually exclusive".into())),
        (Some(p), None) => p.config(),
        (None, Some(text)) => ExperimentConfig::from_json(text)?,
        (None, None) => ExperimentConfig::defaults_for(command.default_experiment()),
    };
    if !command.accepts(cfg.experiment) {
        return Err(FimError::Config(format!("experiment {} cannot run under this subcommand", cfg.experiment.label())));
    }
    if let Some(s) = overrides.seed {
        cfg.root_seed = s;
    }
    if let Some(t) = overrides.trials {
        cfg.trials = t;
    }
    if let Some(r) = overrides.repetitions {
        cfg.repetitions = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(command: Command, cfg: &ExperimentConfig) -> Result<RunOutput> {
    match command {
        Command::Fringe => run_fringe(cfg),
        Command::Power => run_power_vs_paths(cfg),
        Command::Bounds => run_bounds(cfg),
        Command::Estimate => run_estimate(cfg),
        Command::Nmse => run_nmse_sweep(cfg),
        Command::Runtime => run_runtime(cfg),
    }
}

/// Config hash recorded in an existing output file, if any.
pub fn recorded_hash(text: &str) -> Option<String> {
    if let Ok(v) = serde_json::from_str::<Value>(text) {
        return v.get("config_hash").and_then(Value::as_str).map(str::to_string);
    }
    text.lines()
        .take_while(|l| l.starts_with('#'))
        .find_map(|l| l.strip_prefix("# config_hash: ").map(str::to_string))
}

/// Fails when `path` exists and was not produced by the config `hash`
/// (unless `force`).
pub fn check_overwrite(path: &Path, hash: &str, force: bool) -> Result<()> {
    if force || !path.exists() {
        return Ok(());
    }
    let old = std::fs::read_to_string(path)?;
    match recorded_hash(&old) {
        Some(h) if h == hash => Ok(()),
        Some(h) => Err(FimError::Config(format!(
            "{} was written by config {h}; refusing to overwrite without --force",
            path.display()
        ))),
        None => Err(FimError::Config(format!(
            "{} exists and carries no config hash; refusing to overwrite without --force",
            path.display()
        ))),
    }
}

/// Writes `content` to `path` after [`check_overwrite`].
pub fn write_checked(path: &Path, content: &str, hash: &str, force: bool) -> Result<()> {
    check_overwrite(path, hash, force)?;
    std::fs::write(path, content)?;
    Ok(())
}

/// Sidecar path for timing data: `<out>.timing.csv`.
pub fn timing_path(out: &Path) -> std::path::PathBuf {
    let mut s = out.as_os_str().to_os_string();
    s.push(".timing.csv");
    s.into()
}
