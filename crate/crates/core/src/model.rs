//! Geometry, channel and forward model.
//!
//! Everything here is a pure function of immutable inputs. Path gains are
//! stored with the `1/sqrt(L*P)` normalization already applied, so the
//! cascaded channel of an `N`-element surface is
//!
//! ```text
//! h_cas = sum_{paths} gain * sum_n exp(j v_n) exp(j 2pi/lambda (theta z_n + phi x_n))
//! ```
//!
//! and the received power is `|h_cas + gamma|^2`.

use std::f64::consts::TAU;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FimError, Result};
use crate::mc::rng_from_seed;

/// 10 GHz carrier.
pub const DEFAULT_WAVELENGTH: f64 = 0.03;

/// Absolute slack (meters) used when checking region and spacing constraints.
pub const GEOMETRY_TOL: f64 = 1e-12;

/// Movement region, spacing constraint and carrier wavelength shared by all
/// element placements of one surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aperture {
    pub wavelength: f64,
    /// Half-width `R` of the square region `[-R, R]^2`. May be infinite.
    pub region_bound: f64,
    pub d_min: f64,
}

impl Aperture {
    pub fn new(wavelength: f64, region_bound: f64, d_min: f64) -> Result<Self> {
        if !(wavelength > 0.0 && wavelength.is_finite()) {
            return Err(FimError::invalid(format!("wavelength must be positive, got {wavelength}")));
        }
        if !(region_bound > 0.0) {
            return Err(FimError::invalid(format!("region bound must be positive, got {region_bound}")));
        }
        if !(d_min >= 0.0 && d_min.is_finite()) {
            return Err(FimError::invalid(format!("d_min must be non-negative, got {d_min}")));
        }
        Ok(Aperture { wavelength, region_bound, d_min })
    }

    /// Region of half-width `region_in_wavelengths * lambda` and half-wavelength
    /// minimum spacing.
    pub fn half_wavelength(wavelength: f64, region_in_wavelengths: f64) -> Result<Self> {
        Self::new(wavelength, region_in_wavelengths * wavelength, wavelength / 2.0)
    }

    pub fn wavenumber(&self) -> f64 {
        TAU / self.wavelength
    }

    pub fn contains(&self, x: f64, z: f64) -> bool {
        x.abs() <= self.region_bound + GEOMETRY_TOL && z.abs() <= self.region_bound + GEOMETRY_TOL
    }
}

impl Default for Aperture {
    fn default() -> Self {
        Aperture {
            wavelength: DEFAULT_WAVELENGTH,
            region_bound: DEFAULT_WAVELENGTH,
            d_min: DEFAULT_WAVELENGTH / 2.0,
        }
    }
}

/// Element coordinates on the x-z plane, validated against an [`Aperture`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FimGeometry {
    aperture: Aperture,
    x: Vec<f64>,
    z: Vec<f64>,
}

impl FimGeometry {
    pub fn new(x: Vec<f64>, z: Vec<f64>, aperture: Aperture) -> Result<Self> {
        if x.len() != z.len() {
            return Err(FimError::DimensionMismatch { what: "element z coordinates", expected: x.len(), got: z.len() });
        }
        if x.is_empty() {
            return Err(FimError::invalid("geometry needs at least one element"));
        }
        for (n, (&xn, &zn)) in x.iter().zip(&z).enumerate() {
            if !xn.is_finite() || !zn.is_finite() {
                return Err(FimError::invalid(format!("element {n} has a non-finite coordinate")));
            }
            if !aperture.contains(xn, zn) {
                return Err(FimError::invalid(format!(
                    "element {n} at ({xn}, {zn}) lies outside [-{R}, {R}]^2",
                    R = aperture.region_bound
                )));
            }
        }
        if let Some((a, b, d)) = spacing_violation(&x, &z, aperture.d_min) {
            return Err(FimError::invalid(format!(
                "elements {a} and {b} are {d} apart, below d_min = {}",
                aperture.d_min
            )));
        }
        Ok(FimGeometry { aperture, x, z })
    }

    /// A single element at the origin.
    pub fn origin(aperture: Aperture) -> Self {
        FimGeometry { aperture, x: vec![0.0], z: vec![0.0] }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn aperture(&self) -> &Aperture {
        &self.aperture
    }

    pub fn wavelength(&self) -> f64 {
        self.aperture.wavelength
    }

    pub fn positions(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.x.iter().copied().zip(self.z.iter().copied())
    }

    /// Smallest pairwise distance, `+inf` for a single element.
    pub fn min_spacing(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.len() {
            for j in (i + 1)..self.len() {
                best = best.min((self.x[i] - self.x[j]).hypot(self.z[i] - self.z[j]));
            }
        }
        best
    }
}

/// First pair closer than `d_min` (within [`GEOMETRY_TOL`]), if any.
pub fn spacing_violation(x: &[f64], z: &[f64], d_min: f64) -> Option<(usize, usize, f64)> {
    for i in 0..x.len() {
        for j in (i + 1)..x.len() {
            let d = (x[i] - x[j]).hypot(z[i] - z[j]);
            if d < d_min - GEOMETRY_TOL {
                return Some((i, j, d));
            }
        }
    }
    None
}

/// Per-element reflection phases, canonicalized into `[0, 2pi)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseVector {
    phases: Vec<f64>,
}

pub fn wrap_phase(v: f64) -> f64 {
    let w = v.rem_euclid(TAU);
    // rem_euclid can round up to exactly 2pi for tiny negative inputs
    if w >= TAU {
        0.0
    } else {
        w
    }
}

impl PhaseVector {
    pub fn new(phases: Vec<f64>) -> Result<Self> {
        if phases.iter().any(|p| !p.is_finite()) {
            return Err(FimError::invalid("phases must be finite"));
        }
        Ok(PhaseVector { phases: phases.into_iter().map(wrap_phase).collect() })
    }

    pub fn zeros(n: usize) -> Self {
        PhaseVector { phases: vec![0.0; n] }
    }

    pub fn uniform(n: usize, v: f64) -> Self {
        PhaseVector { phases: vec![wrap_phase(v); n] }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.phases
    }

    pub fn len(&self) -> usize {
        self.phases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }

    /// `exp(j v_n)` for every element.
    pub fn phasors(&self) -> Vec<Complex64> {
        self.phases.iter().map(|&v| Complex64::from_polar(1.0, v)).collect()
    }
}

/// Parallel lists of complex gains and virtual angles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSet {
    pub gains: Vec<Complex64>,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
}

impl PathSet {
    /// Validates lengths and that every angle lies in `[-bound, bound]`.
    pub fn new(gains: Vec<Complex64>, theta: Vec<f64>, phi: Vec<f64>, bound: f64) -> Result<Self> {
        if theta.len() != gains.len() {
            return Err(FimError::DimensionMismatch { what: "path elevations", expected: gains.len(), got: theta.len() });
        }
        if phi.len() != gains.len() {
            return Err(FimError::DimensionMismatch { what: "path azimuths", expected: gains.len(), got: phi.len() });
        }
        for (&t, &p) in theta.iter().zip(&phi) {
            if !(t.abs() <= bound + 1e-12) || !(p.abs() <= bound + 1e-12) {
                return Err(FimError::invalid(format!("virtual angle pair ({t}, {p}) outside [-{bound}, {bound}]")));
            }
        }
        if gains.iter().any(|g| !g.re.is_finite() || !g.im.is_finite()) {
            return Err(FimError::invalid("path gains must be finite"));
        }
        Ok(PathSet { gains, theta, phi })
    }

    pub fn len(&self) -> usize {
        self.gains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gains.is_empty()
    }
}

/// Cascaded BS-surface-user paths plus the direct BS-user gain.
///
/// Cascaded gains are `alpha_l * conj(beta_p) / sqrt(L*P)` and cascaded angles
/// are `theta_B,l - theta_U,p` (same for phi), stored `l`-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRealization {
    cascaded: PathSet,
    direct: Complex64,
    bs_paths: usize,
    user_paths: usize,
}

impl ChannelRealization {
    /// Builds the cascaded representation from the two hops.
    pub fn from_paths(bs: &PathSet, user: &PathSet, direct: Complex64) -> Result<Self> {
        if bs.is_empty() || user.is_empty() {
            return Err(FimError::invalid("each hop needs at least one path"));
        }
        for set in [bs, user] {
            PathSet::new(set.gains.clone(), set.theta.clone(), set.phi.clone(), 1.0)?;
        }
        let (l, p) = (bs.len(), user.len());
        let norm = 1.0 / ((l * p) as f64).sqrt();
        let mut gains = Vec::with_capacity(l * p);
        let mut theta = Vec::with_capacity(l * p);
        let mut phi = Vec::with_capacity(l * p);
        for li in 0..l {
            for pi in 0..p {
                gains.push(bs.gains[li] * user.gains[pi].conj() * norm);
                theta.push(bs.theta[li] - user.theta[pi]);
                phi.push(bs.phi[li] - user.phi[pi]);
            }
        }
        Ok(ChannelRealization {
            cascaded: PathSet { gains, theta, phi },
            direct,
            bs_paths: l,
            user_paths: p,
        })
    }

    /// Wraps already-normalized cascaded entries (`len == l * p`).
    pub fn from_cascaded(cascaded: PathSet, direct: Complex64, l: usize, p: usize) -> Result<Self> {
        if l == 0 || p == 0 {
            return Err(FimError::invalid("L and P must be at least 1"));
        }
        if cascaded.len() != l * p {
            return Err(FimError::DimensionMismatch { what: "cascaded entries", expected: l * p, got: cascaded.len() });
        }
        let cascaded = PathSet::new(cascaded.gains, cascaded.theta, cascaded.phi, 2.0)?;
        Ok(ChannelRealization { cascaded, direct, bs_paths: l, user_paths: p })
    }

    /// One cascaded path (`L = P = 1`).
    pub fn single_path(gain: Complex64, theta: f64, phi: f64, direct: Complex64) -> Result<Self> {
        Self::from_cascaded(PathSet { gains: vec![gain], theta: vec![theta], phi: vec![phi] }, direct, 1, 1)
    }

    pub fn cascaded(&self) -> &PathSet {
        &self.cascaded
    }

    pub fn direct(&self) -> Complex64 {
        self.direct
    }

    pub fn bs_paths(&self) -> usize {
        self.bs_paths
    }

    pub fn user_paths(&self) -> usize {
        self.user_paths
    }

    pub fn num_paths(&self) -> usize {
        self.cascaded.len()
    }

    pub fn with_direct(mut self, direct: Complex64) -> Self {
        self.direct = direct;
        self
    }

    /// Replaces the cascaded gains, keeping angles (used by the bilinearity checks).
    pub fn scale_gains(&self, c: Complex64) -> Self {
        let mut out = self.clone();
        for g in &mut out.cascaded.gains {
            *g *= c;
        }
        out
    }

    /// `sum` of cascaded gains (already normalized).
    pub fn gain_sum(&self) -> Complex64 {
        self.cascaded.gains.iter().sum()
    }

    /// `sum |gain|` of cascaded gains.
    pub fn gain_abs_sum(&self) -> f64 {
        self.cascaded.gains.iter().map(|g| g.norm()).sum()
    }
}

/// Receiver noise. SNR is `1 / variance` with unit pilots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub variance: f64,
}

impl NoiseModel {
    pub fn new(variance: f64) -> Result<Self> {
        if !(variance >= 0.0) {
            return Err(FimError::invalid(format!("noise variance must be >= 0, got {variance}")));
        }
        Ok(NoiseModel { variance })
    }

    pub fn noiseless() -> Self {
        NoiseModel { variance: 0.0 }
    }

    pub fn from_snr_db(snr_db: f64) -> Self {
        if snr_db.is_infinite() && snr_db > 0.0 {
            return Self::noiseless();
        }
        NoiseModel { variance: 10f64.powf(-snr_db / 10.0) }
    }

    pub fn snr_db(&self) -> f64 {
        -10.0 * self.variance.log10()
    }
}

#[inline]
fn plane_wave_phase(k: f64, theta: f64, phi: f64, x: f64, z: f64) -> f64 {
    k * (x * phi + z * theta)
}

/// Far-field planar manifold `a_N(theta, phi)` with `1/sqrt(N)` normalization.
pub fn array_manifold(geometry: &FimGeometry, theta: f64, phi: f64) -> Result<Vec<Complex64>> {
    if geometry.is_empty() {
        return Err(FimError::invalid("empty geometry"));
    }
    if !(theta.abs() <= 2.0) || !(phi.abs() <= 2.0) {
        return Err(FimError::invalid(format!("virtual angles ({theta}, {phi}) outside [-2, 2]")));
    }
    let k = geometry.aperture().wavenumber();
    let scale = 1.0 / (geometry.len() as f64).sqrt();
    Ok(geometry
        .positions()
        .map(|(x, z)| Complex64::from_polar(scale, plane_wave_phase(k, theta, phi, x, z)))
        .collect())
}

/// Per-element cascaded response `c_n = sum_paths gain * exp(j k (theta z_n + phi x_n))`
/// before the reflection phase is applied.
pub fn element_responses(geometry: &FimGeometry, channel: &ChannelRealization) -> Vec<Complex64> {
    element_responses_at(geometry.aperture().wavenumber(), geometry.x(), geometry.z(), channel)
}

pub(crate) fn element_responses_at(k: f64, x: &[f64], z: &[f64], channel: &ChannelRealization) -> Vec<Complex64> {
    let paths = channel.cascaded();
    x.iter()
        .zip(z)
        .map(|(&xn, &zn)| {
            paths
                .gains
                .iter()
                .zip(paths.theta.iter().zip(&paths.phi))
                .map(|(g, (&t, &p))| g * Complex64::cis(plane_wave_phase(k, t, p, xn, zn)))
                .sum()
        })
        .collect()
}

/// Cascaded channel `h_cas` for the given placement and phases.
pub fn cascaded_channel(geometry: &FimGeometry, phases: &PhaseVector, channel: &ChannelRealization) -> Result<Complex64> {
    if phases.len() != geometry.len() {
        return Err(FimError::DimensionMismatch { what: "phase vector", expected: geometry.len(), got: phases.len() });
    }
    Ok(element_responses(geometry, channel)
        .iter()
        .zip(phases.as_slice())
        .map(|(c, &v)| c * Complex64::cis(v))
        .sum())
}

/// Received power `|h_cas + gamma|^2` with unit pilot and no noise.
pub fn received_power(geometry: &FimGeometry, phases: &PhaseVector, channel: &ChannelRealization) -> Result<f64> {
    Ok((cascaded_channel(geometry, phases, channel)? + channel.direct()).norm_sqr())
}

/// Circularly-symmetric complex Gaussian with variance split over re/im.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Complex64 {
    if variance == 0.0 {
        return Complex64::new(0.0, 0.0);
    }
    let s = (variance / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(s * re, s * im)
}

/// Value of grid point `idx` on the `n`-point virtual-angle grid
/// `{-1 + (2 idx + 1)/n}`, which never contains 0 for even `n`.
pub fn virtual_grid_value(n: usize, idx: usize) -> f64 {
    (2.0 * idx as f64 + 1.0 - n as f64) / n as f64
}

/// How virtual angles are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AngleSource {
    /// Per-hop virtual angles uniform on `[-1, 1]`.
    Continuous,
    /// Cascaded angles land exactly on the `points_per_axis`-point grid of
    /// [`virtual_grid_value`] (aliased into `[-1, 1)`).
    OnGrid { points_per_axis: usize },
}

/// Statistical channel description.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub bs_paths: usize,
    pub user_paths: usize,
    pub sigma_alpha: f64,
    pub sigma_beta: f64,
    pub sigma_gamma: f64,
    pub angles: AngleSource,
}

impl ChannelSpec {
    pub fn new(l: usize, p: usize, sigma_alpha: f64, sigma_beta: f64, sigma_gamma: f64) -> Self {
        ChannelSpec { bs_paths: l, user_paths: p, sigma_alpha, sigma_beta, sigma_gamma, angles: AngleSource::Continuous }
    }

    pub fn on_grid(mut self, points_per_axis: usize) -> Self {
        self.angles = AngleSource::OnGrid { points_per_axis };
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.bs_paths == 0 || self.user_paths == 0 {
            return Err(FimError::invalid("L and P must be at least 1"));
        }
        for s in [self.sigma_alpha, self.sigma_beta, self.sigma_gamma] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(FimError::invalid(format!("gain deviations must be >= 0, got {s}")));
            }
        }
        if let AngleSource::OnGrid { points_per_axis } = self.angles {
            if points_per_axis == 0 {
                return Err(FimError::invalid("angle grid needs at least one point per axis"));
            }
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ChannelRealization {
        let (l, p) = (self.bs_paths, self.user_paths);
        let alpha: Vec<Complex64> = (0..l).map(|_| complex_gaussian(rng, self.sigma_alpha.powi(2))).collect();
        let beta: Vec<Complex64> = (0..p).map(|_| complex_gaussian(rng, self.sigma_beta.powi(2))).collect();
        let gamma = complex_gaussian(rng, self.sigma_gamma.powi(2));
        let norm = 1.0 / ((l * p) as f64).sqrt();
        let mut gains = Vec::with_capacity(l * p);
        let mut theta = Vec::with_capacity(l * p);
        let mut phi = Vec::with_capacity(l * p);
        match self.angles {
            AngleSource::Continuous => {
                let tb: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..=1.0)).collect();
                let pb: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..=1.0)).collect();
                let tu: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..=1.0)).collect();
                let pu: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..=1.0)).collect();
                for li in 0..l {
                    for pi in 0..p {
                        gains.push(alpha[li] * beta[pi].conj() * norm);
                        theta.push(tb[li] - tu[pi]);
                        phi.push(pb[li] - pu[pi]);
                    }
                }
            }
            AngleSource::OnGrid { points_per_axis: n } => {
                // BS angles on the cascaded grid, user angles on multiples of
                // 2/n; every difference aliases onto the cascaded grid.
                let tb: Vec<usize> = (0..l).map(|_| rng.random_range(0..n)).collect();
                let pb: Vec<usize> = (0..l).map(|_| rng.random_range(0..n)).collect();
                let tu: Vec<usize> = (0..p).map(|_| rng.random_range(0..n)).collect();
                let pu: Vec<usize> = (0..p).map(|_| rng.random_range(0..n)).collect();
                let diff = |a: usize, b: usize| (a as i64 - b as i64).rem_euclid(n as i64) as usize;
                for li in 0..l {
                    for pi in 0..p {
                        gains.push(alpha[li] * beta[pi].conj() * norm);
                        theta.push(virtual_grid_value(n, diff(tb[li], tu[pi])));
                        phi.push(virtual_grid_value(n, diff(pb[li], pu[pi])));
                    }
                }
            }
        }
        ChannelRealization {
            cascaded: PathSet { gains, theta, phi },
            direct: gamma,
            bs_paths: l,
            user_paths: p,
        }
    }

    pub fn sample_seeded(&self, seed: u64) -> Result<ChannelRealization> {
        self.validate()?;
        Ok(self.sample(&mut rng_from_seed(seed)))
    }
}

/// Draws a realization with continuous virtual angles.
pub fn sample_channel(
    l: usize,
    p: usize,
    sigma_alpha: f64,
    sigma_beta: f64,
    sigma_gamma: f64,
    rng_seed: u64,
) -> Result<ChannelRealization> {
    ChannelSpec::new(l, p, sigma_alpha, sigma_beta, sigma_gamma).sample_seeded(rng_seed)
}

/// Angle of a complex number, with `angle(0) = 0`.
pub fn angle(c: Complex64) -> f64 {
    if c.re == 0.0 && c.im == 0.0 {
        0.0
    } else {
        c.arg()
    }
}

/// Phase offset that aligns `from` onto `to`: `angle(to) - angle(from)` in `[0, 2pi)`.
pub fn alignment_phase(to: Complex64, from: Complex64) -> f64 {
    wrap_phase(angle(to) - angle(from))
}
