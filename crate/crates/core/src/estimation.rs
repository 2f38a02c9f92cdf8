//! Pilot schedules, measurement synthesis and the sparse-recovery problem.
//!
//! Both protocols are expressed the same way: `Q` geometry snapshots, each
//! held for `T2` slots with per-slot phase columns `W_q[:, t]`. The
//! single-element protocol is the special case `N = 1`, `T2 = 1`, `W = 1`
//! with `Q = T1` movements. Observation index is `q * T2 + t`.

use std::f64::consts::TAU;
use std::io::{Read, Write};

use base64::Engine;
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FimError, Result};
use crate::linalg::CMatrix;
use crate::mc::{rng_from_seed, splitmix64};
use crate::model::{complex_gaussian, virtual_grid_value, Aperture, ChannelRealization, FimGeometry, NoiseModel};

const MAGIC: &[u8; 8] = b"FIMSPRS1";
const ANGLE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    SingleElement,
    MultiElement,
}

/// How the per-subframe phase matrices are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PbfSource {
    Random,
    Dft,
    AllOnes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MovementPattern {
    /// Half-wavelength lattice scan, row-major, centered on the origin.
    Lattice,
    Custom { positions: Vec<(f64, f64)> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolSchedule {
    pub kind: ScheduleKind,
    pub aperture: Aperture,
    pub snapshots: Vec<FimGeometry>,
    /// One `N x T2` unit-modulus matrix per snapshot.
    pub pbf: Vec<CMatrix>,
    pub slots: usize,
}

impl ProtocolSchedule {
    pub fn elements(&self) -> usize {
        self.snapshots[0].len()
    }

    pub fn subframes(&self) -> usize {
        self.snapshots.len()
    }

    pub fn measurements(&self) -> usize {
        self.subframes() * self.slots
    }

    /// Distinct element positions visited over the schedule, sorted by
    /// `(z, x)`.
    pub fn virtual_positions(&self) -> Vec<(f64, f64)> {
        let mut pts: Vec<(f64, f64)> = self.snapshots.iter().flat_map(|g| g.positions().collect::<Vec<_>>()).collect();
        pts.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)));
        pts.dedup_by(|a, b| (a.0 - b.0).hypot(a.1 - b.1) < 1e-9 * self.aperture.wavelength);
        pts
    }
}

/// Centered `side x ceil(count/side)` lattice at pitch `pitch`, row-major.
fn centered_lattice(count: usize, side: usize, pitch: f64) -> Vec<(f64, f64)> {
    let rows = count.div_ceil(side);
    let cx = (side - 1) as f64 / 2.0;
    let cz = (rows - 1) as f64 / 2.0;
    (0..count).map(|i| (((i % side) as f64 - cx) * pitch, ((i / side) as f64 - cz) * pitch)).collect()
}

/// `T1` single-element movements forming a virtual array.
pub fn build_schedule_single(t1: usize, pattern: &MovementPattern, aperture: Aperture) -> Result<ProtocolSchedule> {
    if t1 == 0 {
        return Err(FimError::invalid("T1 must be at least 1"));
    }
    let positions = match pattern {
        MovementPattern::Lattice => {
            let side = (t1 as f64).sqrt().ceil() as usize;
            centered_lattice(t1, side, aperture.wavelength / 2.0)
        }
        MovementPattern::Custom { positions } => {
            if positions.len() != t1 {
                return Err(FimError::DimensionMismatch { what: "movement positions", expected: t1, got: positions.len() });
            }
            positions.clone()
        }
    };
    let snapshots = positions
        .into_iter()
        .map(|(x, z)| FimGeometry::new(vec![x], vec![z], aperture))
        .collect::<Result<Vec<_>>>()?;
    let one = CMatrix::from_element(1, 1, Complex64::new(1.0, 0.0));
    Ok(ProtocolSchedule { kind: ScheduleKind::SingleElement, aperture, pbf: vec![one; snapshots.len()], snapshots, slots: 1 })
}

/// Layout of the multi-element protocol: a square `side x side` subarray at
/// half-wavelength pitch, translated over a `translations x translations`
/// grid with step `side * lambda/2`, so the union is a
/// `(side * translations)`-square virtual array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiLayout {
    pub subarray_side: usize,
    pub translations_per_axis: usize,
}

impl MultiLayout {
    pub fn for_elements(n: usize) -> Result<Self> {
        let side = (n as f64).sqrt().round() as usize;
        if side * side != n || n == 0 {
            return Err(FimError::invalid(format!("multi-element layout needs a square element count, got {n}")));
        }
        Ok(MultiLayout { subarray_side: side, translations_per_axis: 3 })
    }

    pub fn virtual_side(&self) -> usize {
        self.subarray_side * self.translations_per_axis
    }

    pub fn translations(&self) -> usize {
        self.translations_per_axis * self.translations_per_axis
    }

    /// Smallest region bound (multiple of `lambda/2`) holding the virtual array.
    pub fn region_bound(&self, wavelength: f64) -> f64 {
        (self.virtual_side() as f64 / 2.0).ceil() * wavelength / 2.0
    }
}

fn pbf_matrix<R: Rng>(source: PbfSource, n: usize, t2: usize, rng: &mut R) -> CMatrix {
    match source {
        PbfSource::AllOnes => CMatrix::from_element(n, t2, Complex64::new(1.0, 0.0)),
        PbfSource::Dft => CMatrix::from_fn(n, t2, |r, c| Complex64::cis(-TAU * (r * (c % n)) as f64 / n as f64)),
        PbfSource::Random => {
            // column-major fill keeps the draw order independent of layout changes
            let mut m = CMatrix::zeros(n, t2);
            for c in 0..t2 {
                for r in 0..n {
                    m[(r, c)] = Complex64::cis(rng.random_range(0.0..TAU));
                }
            }
            m
        }
    }
}

/// Multi-element schedule with `Q` snapshots cycling through the layout's
/// translations.
pub fn build_schedule_multi(
    n: usize,
    q: usize,
    t2: usize,
    aperture: Aperture,
    pbf: PbfSource,
    seed: u64,
) -> Result<ProtocolSchedule> {
    build_schedule_multi_with(MultiLayout::for_elements(n)?, q, t2, aperture, pbf, seed)
}

pub fn build_schedule_multi_with(
    layout: MultiLayout,
    q: usize,
    t2: usize,
    aperture: Aperture,
    pbf: PbfSource,
    seed: u64,
) -> Result<ProtocolSchedule> {
    if q == 0 || t2 == 0 || layout.subarray_side == 0 || layout.translations_per_axis == 0 {
        return Err(FimError::invalid("Q, T2 and the layout sizes must be at least 1"));
    }
    let s = layout.subarray_side;
    let n = s * s;
    let half = aperture.wavelength / 2.0;
    let center = (layout.virtual_side() - 1) as f64 / 2.0;
    let mut rng = rng_from_seed(splitmix64(seed ^ 0x7062_665f_7365_6564));
    let mut snapshots = Vec::with_capacity(q);
    let mut mats = Vec::with_capacity(q);
    for qi in 0..q {
        let tr = qi % layout.translations();
        let (tx, tz) = (tr % layout.translations_per_axis, tr / layout.translations_per_axis);
        let mut x = Vec::with_capacity(n);
        let mut z = Vec::with_capacity(n);
        for e in 0..n {
            x.push(((tx * s + e % s) as f64 - center) * half);
            z.push(((tz * s + e / s) as f64 - center) * half);
        }
        snapshots.push(FimGeometry::new(x, z, aperture)?);
        mats.push(pbf_matrix(pbf, n, t2, &mut rng));
    }
    Ok(ProtocolSchedule { kind: ScheduleKind::MultiElement, aperture, snapshots, pbf: mats, slots: t2 })
}

/// Stacked observations `y[q*T2 + t] = sum_n W_q[n,t] c_{q,n} + gamma + noise`.
pub fn synthesize_measurements(
    schedule: &ProtocolSchedule,
    channel: &ChannelRealization,
    noise: NoiseModel,
    seed: u64,
) -> Vec<Complex64> {
    let mut rng = rng_from_seed(splitmix64(seed ^ 0x6e6f_6973_6521));
    let k = schedule.aperture.wavenumber();
    let mut y = Vec::with_capacity(schedule.measurements());
    for (g, w) in schedule.snapshots.iter().zip(&schedule.pbf) {
        let c = crate::model::element_responses_at(k, g.x(), g.z(), channel);
        for t in 0..schedule.slots {
            let mut v = channel.direct();
            for (ni, cn) in c.iter().enumerate() {
                v += w[(ni, t)] * cn;
            }
            y.push(v);
        }
    }
    if noise.variance > 0.0 {
        for v in &mut y {
            *v += complex_gaussian(&mut rng, noise.variance);
        }
    }
    y
}

/// Virtual-angle pairs indexing the dictionary columns, with exactly one
/// `(0, 0)` atom standing for the direct path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleGrid {
    pub angles: Vec<(f64, f64)>,
    pub direct_index: usize,
}

impl AngleGrid {
    pub fn from_pairs(angles: Vec<(f64, f64)>) -> Result<Self> {
        let zeros: Vec<usize> =
            (0..angles.len()).filter(|&i| angles[i].0.abs() < ANGLE_TOL && angles[i].1.abs() < ANGLE_TOL).collect();
        match zeros.as_slice() {
            [i] => Ok(AngleGrid { direct_index: *i, angles }),
            [] => Err(FimError::invalid("angle grid has no (0, 0) atom for the direct path")),
            _ => Err(FimError::invalid("angle grid has more than one (0, 0) atom")),
        }
    }

    /// Direct atom at index 0 followed by the `n_theta x n_phi` virtual grid
    /// (theta-major); a `(0, 0)` grid point is merged into the direct atom.
    pub fn virtual_grid(n_theta: usize, n_phi: usize) -> Result<Self> {
        if n_theta == 0 || n_phi == 0 {
            return Err(FimError::invalid("grid needs at least one point per axis"));
        }
        let mut angles = vec![(0.0, 0.0)];
        for i in 0..n_theta {
            for j in 0..n_phi {
                let (t, p) = (virtual_grid_value(n_theta, i), virtual_grid_value(n_phi, j));
                if t.abs() >= ANGLE_TOL || p.abs() >= ANGLE_TOL {
                    angles.push((t, p));
                }
            }
        }
        Self::from_pairs(angles)
    }

    pub fn len(&self) -> usize {
        self.angles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles.is_empty()
    }

    pub fn atom_index(&self, theta: f64, phi: f64) -> Option<usize> {
        self.angles.iter().position(|&(t, p)| (t - theta).abs() < ANGLE_TOL && (p - phi).abs() < ANGLE_TOL)
    }
}

/// Dictionary `Phi` (`Q*T2 x G`): cascaded columns `sum_n W_q[n,t] e^{jk(theta z + phi x)}`,
/// the direct column all ones.
pub fn build_dictionary(schedule: &ProtocolSchedule, grid: &AngleGrid) -> Result<CMatrix> {
    if grid.direct_index >= grid.len() {
        return Err(FimError::invalid("direct atom index outside the grid"));
    }
    for (g, w) in schedule.snapshots.iter().zip(&schedule.pbf) {
        if w.nrows() != g.len() || w.ncols() != schedule.slots {
            return Err(FimError::DimensionMismatch { what: "PBF matrix rows", expected: g.len(), got: w.nrows() });
        }
    }
    let m = schedule.measurements();
    let k = schedule.aperture.wavenumber();
    let mut phi = CMatrix::zeros(m, grid.len());
    for (col, &(theta, ph)) in grid.angles.iter().enumerate() {
        if col == grid.direct_index {
            phi.column_mut(col).fill(Complex64::new(1.0, 0.0));
            continue;
        }
        let mut row = 0;
        for (g, w) in schedule.snapshots.iter().zip(&schedule.pbf) {
            let a: Vec<Complex64> = g.positions().map(|(x, z)| Complex64::cis(k * (theta * z + ph * x))).collect();
            for t in 0..schedule.slots {
                phi[(row, col)] = a.iter().enumerate().map(|(n, an)| w[(n, t)] * an).sum();
                row += 1;
            }
        }
    }
    Ok(phi)
}

/// Sparse coefficient vector of an on-grid channel: `gamma` at the direct
/// atom, each cascaded gain added at its atom.
pub fn sparse_truth(channel: &ChannelRealization, grid: &AngleGrid) -> Result<Vec<Complex64>> {
    let mut xi = vec![Complex64::new(0.0, 0.0); grid.len()];
    xi[grid.direct_index] = channel.direct();
    let paths = channel.cascaded();
    for i in 0..paths.len() {
        let idx = grid.atom_index(paths.theta[i], paths.phi[i]).ok_or_else(|| {
            FimError::invalid(format!("path angle ({}, {}) is not on the grid", paths.theta[i], paths.phi[i]))
        })?;
        if idx == grid.direct_index {
            return Err(FimError::invalid("a cascaded path sits on the direct atom"));
        }
        xi[idx] += paths.gains[i];
    }
    Ok(xi)
}

/// `y = Phi xi + n` together with what is needed to score an estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseProblem {
    pub dictionary: CMatrix,
    pub observation: Vec<Complex64>,
    pub grid: AngleGrid,
    pub noise_variance: f64,
    pub seed: u64,
    pub wavelength: f64,
    /// Virtual aperture on which cascaded estimates are synthesized.
    pub virtual_positions: Vec<(f64, f64)>,
}

impl SparseProblem {
    pub fn new(
        dictionary: CMatrix,
        observation: Vec<Complex64>,
        grid: AngleGrid,
        noise_variance: f64,
        seed: u64,
        wavelength: f64,
        virtual_positions: Vec<(f64, f64)>,
    ) -> Result<Self> {
        if dictionary.ncols() != grid.len() {
            return Err(FimError::DimensionMismatch { what: "dictionary columns", expected: grid.len(), got: dictionary.ncols() });
        }
        if dictionary.nrows() != observation.len() {
            return Err(FimError::DimensionMismatch {
                what: "observation length",
                expected: dictionary.nrows(),
                got: observation.len(),
            });
        }
        if !(noise_variance >= 0.0) || !(wavelength > 0.0) {
            return Err(FimError::invalid("noise variance must be >= 0 and wavelength > 0"));
        }
        Ok(SparseProblem { dictionary, observation, grid, noise_variance, seed, wavelength, virtual_positions })
    }

    pub fn rows(&self) -> usize {
        self.dictionary.nrows()
    }

    pub fn atoms(&self) -> usize {
        self.dictionary.ncols()
    }

    pub fn column_norms(&self) -> Vec<f64> {
        (0..self.atoms()).map(|j| self.dictionary.column(j).norm()).collect()
    }

    /// Virtual-array response `sum_{g != direct} xi_g a(theta_g, phi_g)`.
    pub fn cascaded_response(&self, xi: &[Complex64]) -> Vec<Complex64> {
        let k = TAU / self.wavelength;
        self.virtual_positions
            .iter()
            .map(|&(x, z)| {
                xi.iter()
                    .enumerate()
                    .filter(|(g, c)| *g != self.grid.direct_index && c.norm_sqr() > 0.0)
                    .map(|(g, c)| {
                        let (t, p) = self.grid.angles[g];
                        c * Complex64::cis(k * (t * z + p * x))
                    })
                    .sum()
            })
            .collect()
    }

    fn header(&self, encoding: &str) -> Header {
        Header {
            version: 1,
            encoding: encoding.to_string(),
            rows: self.rows(),
            cols: self.atoms(),
            grid: self.grid.clone(),
            noise_variance: self.noise_variance,
            seed: self.seed,
            wavelength: self.wavelength,
            virtual_positions: self.virtual_positions.clone(),
            dictionary_b64: None,
            observation_b64: None,
        }
    }

    fn payload(&self) -> (Vec<u8>, Vec<u8>) {
        let mut dict = Vec::with_capacity(16 * self.rows() * self.atoms());
        for r in 0..self.rows() {
            for c in 0..self.atoms() {
                let v = self.dictionary[(r, c)];
                dict.extend_from_slice(&v.re.to_le_bytes());
                dict.extend_from_slice(&v.im.to_le_bytes());
            }
        }
        (dict, complex_bytes(&self.observation))
    }

    /// Magic, `u64` LE header length, JSON header, then the row-major
    /// dictionary and the observation as interleaved LE `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header("binary")).expect("header serializes");
        let (dict, obs) = self.payload();
        let mut out = Vec::with_capacity(16 + header.len() + dict.len() + obs.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&dict);
        out.extend_from_slice(&obs);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(FimError::Format("missing sparse-problem magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16usize.saturating_add(hlen)).ok_or_else(|| FimError::Format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        let rest = &bytes[16 + hlen..];
        let dict_len = 16 * header.rows * header.cols;
        if rest.len() != dict_len + 16 * header.rows {
            return Err(FimError::Format(format!(
                "payload has {} bytes, expected {}",
                rest.len(),
                dict_len + 16 * header.rows
            )));
        }
        header.assemble(&rest[..dict_len], &rest[dict_len..])
    }

    /// Same content as [`Self::to_bytes`] with the arrays base64-encoded inside the JSON.
    pub fn to_json(&self) -> String {
        let (dict, obs) = self.payload();
        let mut header = self.header("base64");
        let b64 = base64::engine::general_purpose::STANDARD;
        header.dictionary_b64 = Some(b64.encode(dict));
        header.observation_b64 = Some(b64.encode(obs));
        serde_json::to_string(&header).expect("header serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let header: Header = serde_json::from_str(text)?;
        let b64 = base64::engine::general_purpose::STANDARD;
        let decode = |s: &Option<String>, what: &str| -> Result<Vec<u8>> {
            let s = s.as_ref().ok_or_else(|| FimError::Format(format!("missing {what}")))?;
            b64.decode(s).map_err(|e| FimError::Format(format!("{what}: {e}")))
        };
        let dict = decode(&header.dictionary_b64, "dictionary_b64")?;
        let obs = decode(&header.observation_b64, "observation_b64")?;
        if dict.len() != 16 * header.rows * header.cols || obs.len() != 16 * header.rows {
            return Err(FimError::Format("array sizes do not match the header".into()));
        }
        header.assemble(&dict, &obs)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

fn complex_bytes(v: &[Complex64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 * v.len());
    for c in v {
        out.extend_from_slice(&c.re.to_le_bytes());
        out.extend_from_slice(&c.im.to_le_bytes());
    }
    out
}

fn read_complex(bytes: &[u8]) -> Vec<Complex64> {
    bytes
        .chunks_exact(16)
        .map(|c| {
            Complex64::new(
                f64::from_le_bytes(c[..8].try_into().expect("8 bytes")),
                f64::from_le_bytes(c[8..].try_into().expect("8 bytes")),
            )
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    encoding: String,
    rows: usize,
    cols: usize,
    grid: AngleGrid,
    noise_variance: f64,
    seed: u64,
    wavelength: f64,
    virtual_positions: Vec<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    dictionary_b64: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    observation_b64: Option<String>,
}

impl Header {
    fn assemble(self, dict: &[u8], obs: &[u8]) -> Result<SparseProblem> {
        if self.version != 1 {
            return Err(FimError::Format(format!("unsupported version {}", self.version)));
        }
        let vals = read_complex(dict);
        let dictionary = CMatrix::from_row_slice(self.rows, self.cols, &vals);
        let grid = AngleGrid::from_pairs(self.grid.angles)?;
        if grid.direct_index != self.grid.direct_index {
            return Err(FimError::Format("direct atom index disagrees with the grid".into()));
        }
        SparseProblem::new(
            dictionary,
            read_complex(obs),
            grid,
            self.noise_variance,
            self.seed,
            self.wavelength,
            self.virtual_positions,
        )
    }
}

/// Schedule + grid + channel -> problem, with measurements drawn from `seed`.
pub fn build_problem(
    schedule: &ProtocolSchedule,
    grid: &AngleGrid,
    channel: &ChannelRealization,
    noise: NoiseModel,
    seed: u64,
) -> Result<SparseProblem> {
    let dictionary = build_dictionary(schedule, grid)?;
    let y = synthesize_measurements(schedule, channel, noise, seed);
    SparseProblem::new(dictionary, y, grid.clone(), noise.variance, seed, schedule.aperture.wavelength, schedule.virtual_positions())
}

/// Output of a sparse-recovery algorithm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryResult {
    pub algorithm: String,
    pub xi_hat: Vec<Complex64>,
    pub support: Vec<usize>,
    pub direct_estimate: Complex64,
    pub cascaded_estimate: Vec<Complex64>,
    pub iterations: usize,
    pub converged: bool,
    pub wall_time: f64,
    /// Numerical diagnostics (regularized solves, pruning).
    #[serde(default)]
    pub notes: Vec<String>,
}

impl RecoveryResult {
    /// Derives support and channel estimates from `xi_hat`. The support is
    /// the set of nonzero coefficients.
    pub fn from_coefficients(
        algorithm: &str,
        problem: &SparseProblem,
        xi_hat: Vec<Complex64>,
        iterations: usize,
        converged: bool,
        wall_time: f64,
    ) -> Self {
        let support = (0..xi_hat.len()).filter(|&i| xi_hat[i].norm_sqr() > 0.0).collect();
        RecoveryResult {
            algorithm: algorithm.to_string(),
            direct_estimate: xi_hat[problem.grid.direct_index],
            cascaded_estimate: problem.cascaded_response(&xi_hat),
            support,
            xi_hat,
            iterations,
            converged,
            wall_time,
            notes: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmseReport {
    pub cascaded: f64,
    pub direct: f64,
}

/// NMSE of the cascaded virtual-array response and of the direct gain.
pub fn evaluate_nmse(result: &RecoveryResult, truth: &ChannelRealization, problem: &SparseProblem) -> Result<NmseReport> {
    let k = TAU / problem.wavelength;
    let paths = truth.cascaded();
    let h: Vec<Complex64> = problem
        .virtual_positions
        .iter()
        .map(|&(x, z)| (0..paths.len()).map(|i| paths.gains[i] * Complex64::cis(k * (paths.theta[i] * z + paths.phi[i] * x))).sum())
        .collect();
    if result.cascaded_estimate.len() != h.len() {
        return Err(FimError::DimensionMismatch { what: "cascaded estimate", expected: h.len(), got: result.cascaded_estimate.len() });
    }
    let energy: f64 = h.iter().map(|v| v.norm_sqr()).sum();
    if !(energy > 0.0) {
        return Err(FimError::UndefinedMetric("true cascaded channel has zero energy".into()));
    }
    let gamma = truth.direct();
    if gamma.norm_sqr() == 0.0 {
        return Err(FimError::UndefinedMetric("true direct gain is zero".into()));
    }
    let err: f64 = h.iter().zip(&result.cascaded_estimate).map(|(a, b)| (a - b).norm_sqr()).sum();
    Ok(NmseReport { cascaded: err / energy, direct: (result.direct_estimate - gamma).norm_sqr() / gamma.norm_sqr() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{least_squares_subset, mat_vec};
    use crate::model::{ChannelSpec, PathSet, DEFAULT_WAVELENGTH};

    const LAM: f64 = DEFAULT_WAVELENGTH;

    fn multi_aperture() -> Aperture {
        Aperture::half_wavelength(LAM, 3.0).unwrap()
    }

    fn default_multi(pbf: PbfSource, seed: u64) -> ProtocolSchedule {
        build_schedule_multi(16, 9, 9, multi_aperture(), pbf, seed).unwrap()
    }

    #[test]
    fn single_schedule_shapes() {
        let ap = multi_aperture();
        let s = build_schedule_single(1, &MovementPattern::Lattice, ap).unwrap();
        assert_eq!(s.snapshots[0].x(), &[0.0]);
        assert_eq!(s.snapshots[0].z(), &[0.0]);
        let s = build_schedule_single(144, &MovementPattern::Lattice, ap).unwrap();
        let v = s.virtual_positions();
        assert_eq!(v.len(), 144);
        let span_x = v.iter().map(|p| p.0).fold(f64::MIN, f64::max) - v.iter().map(|p| p.0).fold(f64::MAX, f64::min);
        assert!((span_x - 11.0 * LAM / 2.0).abs() < 1e-12);
        assert!(build_schedule_single(0, &MovementPattern::Lattice, ap).is_err());
        let far = MovementPattern::Custom { positions: vec![(4.0 * LAM, 0.0)] };
        assert!(build_schedule_single(1, &far, ap).is_err());
    }

    #[test]
    fn multi_schedule_forms_twelve_by_twelve() {
        let s = default_multi(PbfSource::Random, 1);
        let v = s.virtual_positions();
        assert_eq!(v.len(), 144);
        let mut xs: Vec<f64> = v.iter().map(|p| p.0).collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        assert_eq!(xs.len(), 12);
        for w in xs.windows(2) {
            assert!((w[1] - w[0] - LAM / 2.0).abs() < 1e-12);
        }
        for w in &s.pbf {
            assert!(w.iter().all(|e| (e.norm() - 1.0).abs() < 1e-12));
        }
        assert_eq!(default_multi(PbfSource::Random, 1).pbf, s.pbf);
        assert_ne!(default_multi(PbfSource::Random, 2).pbf, s.pbf);
        // Q beyond the translation count cycles
        let long = build_schedule_multi(16, 16, 9, multi_aperture(), PbfSource::Random, 1).unwrap();
        assert_eq!(long.snapshots[9], long.snapshots[0]);
        assert!(build_schedule_multi(16, 9, 9, Aperture::half_wavelength(LAM, 2.0).unwrap(), PbfSource::Random, 1).is_err());
    }

    #[test]
    fn zero_channel_gives_zero_measurements() {
        let s = default_multi(PbfSource::Random, 1);
        let ch = ChannelRealization::single_path(Complex64::new(0.0, 0.0), 0.1, 0.2, Complex64::new(0.0, 0.0)).unwrap();
        assert!(synthesize_measurements(&s, &ch, NoiseModel::noiseless(), 1).iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn all_ones_single_slot_is_plain_sum() {
        let s = build_schedule_multi(16, 9, 1, multi_aperture(), PbfSource::AllOnes, 0).unwrap();
        let ch = ChannelRealization::single_path(Complex64::new(0.3, -0.2), 1.0 / 12.0, -5.0 / 12.0, Complex64::new(1.0, 0.5)).unwrap();
        let y = synthesize_measurements(&s, &ch, NoiseModel::noiseless(), 0);
        let k = TAU / LAM;
        for (q, g) in s.snapshots.iter().enumerate() {
            let mut want = ch.direct();
            for (x, z) in g.positions() {
                want += Complex64::new(0.3, -0.2) * Complex64::cis(k * (z / 12.0 - 5.0 * x / 12.0));
            }
            assert!((y[q] - want).norm() < 1e-12);
        }
    }

    #[test]
    fn stacking_order_follows_slots() {
        let s = default_multi(PbfSource::Random, 3);
        let ch = ChannelSpec::new(2, 2, 1.0, 1.0, 1.0).on_grid(12).sample_seeded(5).unwrap();
        let y = synthesize_measurements(&s, &ch, NoiseModel::noiseless(), 0);
        // reversing the slot columns of every W_q reverses each block of T2
        let mut r = s.clone();
        for w in &mut r.pbf {
            let c = w.clone();
            for t in 0..9 {
                w.set_column(t, &c.column(8 - t));
            }
        }
        let yr = synthesize_measurements(&r, &ch, NoiseModel::noiseless(), 0);
        for q in 0..9 {
            for t in 0..9 {
                assert!((y[q * 9 + t] - yr[q * 9 + 8 - t]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn noise_has_requested_variance() {
        let s = build_schedule_single(10_000, &MovementPattern::Lattice, Aperture::half_wavelength(LAM, 30.0).unwrap()).unwrap();
        let ch = ChannelSpec::new(1, 1, 1.0, 1.0, 1.0).sample_seeded(1).unwrap();
        let clean = synthesize_measurements(&s, &ch, NoiseModel::noiseless(), 4);
        let noisy = synthesize_measurements(&s, &ch, NoiseModel::new(0.3).unwrap(), 4);
        let var: f64 = clean.iter().zip(&noisy).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>() / clean.len() as f64;
        assert!((var - 0.3).abs() / 0.3 < 0.05);
    }

    #[test]
    fn grid_contains_single_direct_atom() {
        let g = AngleGrid::virtual_grid(12, 12).unwrap();
        assert_eq!(g.len(), 145);
        assert_eq!(g.direct_index, 0);
        let odd = AngleGrid::virtual_grid(5, 5).unwrap();
        assert_eq!(odd.len(), 25);
        assert!(AngleGrid::from_pairs(vec![(0.1, 0.2)]).is_err());
        assert!(AngleGrid::from_pairs(vec![(0.0, 0.0), (0.0, 0.0)]).is_err());
    }

    #[test]
    fn dictionary_matches_linear_model() {
        let grid = AngleGrid::virtual_grid(12, 12).unwrap();
        for pbf in [PbfSource::Random, PbfSource::Dft, PbfSource::AllOnes] {
            let s = default_multi(pbf, 7);
            let phi = build_dictionary(&s, &grid).unwrap();
            assert!(phi.column(0).iter().all(|v| *v == Complex64::new(1.0, 0.0)));
            for seed in 0..5 {
                let ch = ChannelSpec::new(4, 4, 1.0, 1.0, 1.0).on_grid(12).sample_seeded(seed).unwrap();
                let xi = sparse_truth(&ch, &grid).unwrap();
                let y = synthesize_measurements(&s, &ch, NoiseModel::noiseless(), seed);
                let py = mat_vec(&phi, &xi);
                for (a, b) in y.iter().zip(&py) {
                    assert!((a - b).norm() < 1e-10);
                }
                if pbf == PbfSource::AllOnes {
                    // repeated slots leave only Q distinct rows
                    continue;
                }
                let support: Vec<usize> = (0..xi.len()).filter(|&i| xi[i].norm() > 0.0).collect();
                let (coef, _) = least_squares_subset(&phi, &support, &y).unwrap();
                let mut fit = vec![Complex64::new(0.0, 0.0); y.len()];
                for (c, &j) in coef.iter().zip(&support) {
                    for r in 0..y.len() {
                        fit[r] += phi[(r, j)] * c;
                    }
                }
                let resid: f64 = fit.iter().zip(&y).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
                assert!(resid < 1e-10, "{pbf:?} seed {seed}: {resid}");
            }
        }
    }

    #[test]
    fn cascaded_column_norms() {
        let grid = AngleGrid::virtual_grid(12, 12).unwrap();
        // single element: every cascaded column has norm sqrt(T1)
        let single = build_schedule_single(144, &MovementPattern::Lattice, multi_aperture()).unwrap();
        let phi = build_dictionary(&single, &grid).unwrap();
        for j in 0..grid.len() {
            assert!((phi.column(j).norm() - 12.0).abs() < 1e-9);
        }
        // all-ones multi-element: norm^2 = Q T2 |subarray factor|^2
        let s = build_schedule_multi(16, 9, 4, multi_aperture(), PbfSource::AllOnes, 0).unwrap();
        let phi = build_dictionary(&s, &grid).unwrap();
        let k = TAU / LAM;
        for j in 1..grid.len() {
            let (t, p) = grid.angles[j];
            let af: Complex64 = s.snapshots[0].positions().map(|(x, z)| Complex64::cis(k * (t * z + p * x))).sum();
            assert!((phi.column(j).norm_squared() - 36.0 * af.norm_sqr()).abs() < 1e-8);
        }
    }

    #[test]
    fn single_element_dictionary_is_manifold() {
        let ap = Aperture::half_wavelength(LAM, 3.0).unwrap();
        let s = build_schedule_single(144, &MovementPattern::Lattice, ap).unwrap();
        let grid = AngleGrid::virtual_grid(12, 12).unwrap();
        let phi = build_dictionary(&s, &grid).unwrap();
        let k = TAU / LAM;
        let (t, p) = grid.angles[20];
        for (r, g) in s.snapshots.iter().enumerate() {
            let want = Complex64::cis(k * (t * g.z()[0] + p * g.x()[0]));
            assert!((phi[(r, 20)] - want).norm() < 1e-12);
        }
    }

    fn sample_problem(seed: u64) -> (SparseProblem, ChannelRealization) {
        let s = default_multi(PbfSource::Random, seed);
        let grid = AngleGrid::virtual_grid(12, 12).unwrap();
        let ch = ChannelSpec::new(2, 2, 1.0, 1.0, 1.0).on_grid(12).sample_seeded(seed).unwrap();
        (build_problem(&s, &grid, &ch, NoiseModel::from_snr_db(10.0), seed).unwrap(), ch)
    }

    #[test]
    fn binary_and_json_round_trip_bit_exact() {
        let (p, _) = sample_problem(3);
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        let back = SparseProblem::from_bytes(&bytes).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.to_bytes(), bytes);
        let json = p.to_json();
        let back = SparseProblem::from_json(&json).unwrap();
        assert_eq!(back, p);
        assert!(SparseProblem::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(SparseProblem::from_bytes(b"NOTMAGIC").is_err());
    }

    #[test]
    fn nmse_extremes_and_recomputation() {
        let (p, ch) = sample_problem(4);
        let xi = sparse_truth(&ch, &p.grid).unwrap();
        let perfect = RecoveryResult::from_coefficients("truth", &p, xi.clone(), 0, true, 0.0);
        let r = evaluate_nmse(&perfect, &ch, &p).unwrap();
        assert!(r.cascaded < 1e-24 && r.direct == 0.0);
        let zero = RecoveryResult::from_coefficients("zero", &p, vec![Complex64::new(0.0, 0.0); p.atoms()], 0, true, 0.0);
        let r = evaluate_nmse(&zero, &ch, &p).unwrap();
        assert!((r.cascaded - 1.0).abs() < 1e-12 && (r.direct - 1.0).abs() < 1e-12);

        // perturb two atoms and recompute from the definition
        let mut est = xi.clone();
        est[0] += Complex64::new(0.1, 0.0);
        est[5] += Complex64::new(0.0, 0.2);
        let res = RecoveryResult::from_coefficients("p", &p, est, 0, true, 0.0);
        let r = evaluate_nmse(&res, &ch, &p).unwrap();
        let k = TAU / LAM;
        let (t5, p5) = p.grid.angles[5];
        let h_energy: f64 = p
            .virtual_positions
            .iter()
            .map(|&(x, z)| {
                let paths = ch.cascaded();
                (0..paths.len()).map(|i| paths.gains[i] * Complex64::cis(k * (paths.theta[i] * z + paths.phi[i] * x))).sum::<Complex64>().norm_sqr()
            })
            .sum();
        let err: f64 = p.virtual_positions.iter().map(|&(x, z)| (Complex64::new(0.0, 0.2) * Complex64::cis(k * (t5 * z + p5 * x))).norm_sqr()).sum();
        assert!((r.cascaded - err / h_energy).abs() < 1e-12);
        assert!((r.direct - 0.01 / ch.direct().norm_sqr()).abs() < 1e-12);
    }

    #[test]
    fn zero_truth_is_undefined() {
        let (p, _) = sample_problem(1);
        let zero = ChannelRealization::from_cascaded(
            PathSet { gains: vec![Complex64::new(0.0, 0.0)], theta: vec![0.5], phi: vec![0.5] },
            Complex64::new(1.0, 0.0),
            1,
            1,
        )
        .unwrap();
        let res = RecoveryResult::from_coefficients("z", &p, vec![Complex64::new(0.0, 0.0); p.atoms()], 0, true, 0.0);
        assert!(matches!(evaluate_nmse(&res, &zero, &p), Err(FimError::UndefinedMetric(_))));
    }
}
