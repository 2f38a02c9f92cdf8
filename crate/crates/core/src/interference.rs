//! Received-power maximization in the three surface modes.
//!
//! * PBF-only: positions fixed, per-element phases free.
//! * EM-only: phases fixed at zero, element positions free inside the region.
//! * EM-PBF: both.
//!
//! Closed forms exist for a single cascaded path (any `N`) and for the
//! single-element two-path case; everything else goes through
//! [`crate::bayesopt`]. This module also carries the power upper bound, the
//! expected-power formulas under Rayleigh gains with their Monte Carlo
//! counterparts, and interference fringe maps.

use std::f64::consts::{PI, TAU};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{FimError, Result};
use crate::mc::{self, MeanStats};
use crate::model::{
    alignment_phase, angle, complex_gaussian, element_responses_at, received_power, Aperture, ChannelRealization,
    FimGeometry, PhaseVector, GEOMETRY_TOL,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    PbfOnly,
    EmOnly,
    EmPbf,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::PbfOnly, Mode::EmOnly, Mode::EmPbf];

    pub fn label(&self) -> &'static str {
        match self {
            Mode::PbfOnly => "pbf_only",
            Mode::EmOnly => "em_only",
            Mode::EmPbf => "em_pbf",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    ClosedForm,
    SquareSystem,
    BayesOpt,
    Exhaustive,
}

/// Placement and phases for one mode, with the objective re-evaluated from
/// the forward model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSolution {
    pub mode: Mode,
    pub phases: PhaseVector,
    pub geometry: FimGeometry,
    pub objective: f64,
    pub solver: SolverKind,
    /// Set when the optimal phase is undefined (e.g. vanishing cascaded sum)
    /// and an arbitrary choice was made.
    pub degenerate: bool,
}

impl ModeSolution {
    pub fn evaluate(
        mode: Mode,
        solver: SolverKind,
        geometry: FimGeometry,
        phases: PhaseVector,
        channel: &ChannelRealization,
    ) -> Result<Self> {
        let objective = received_power(&geometry, &phases, channel)?;
        Ok(ModeSolution { mode, phases, geometry, objective, solver, degenerate: false })
    }

    /// `|h_cas + gamma| - (|h_cas| + |gamma|)`, zero under perfect constructive
    /// interference.
    pub fn alignment_gap(&self, channel: &ChannelRealization) -> Result<f64> {
        let h = crate::model::cascaded_channel(&self.geometry, &self.phases, channel)?;
        Ok((h + channel.direct()).norm() - (h.norm() + channel.direct().norm()))
    }
}

/// Centered square lattice with pitch `max(lambda/2, d_min)`.
pub fn lattice_placement(n: usize, aperture: &Aperture) -> Result<FimGeometry> {
    if n == 0 {
        return Err(FimError::invalid("need at least one element"));
    }
    let pitch = (aperture.wavelength / 2.0).max(aperture.d_min);
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let half_span = pitch * (cols.max(rows) - 1) as f64 / 2.0;
    if half_span > aperture.region_bound + GEOMETRY_TOL {
        return Err(FimError::Infeasible(format!(
            "{rows}x{cols} lattice with pitch {pitch} does not fit in [-{R}, {R}]^2",
            R = aperture.region_bound
        )));
    }
    let mut x = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    for i in 0..n {
        let (r, c) = (i / cols, i % cols);
        x.push((c as f64 - (cols - 1) as f64 / 2.0) * pitch);
        z.push((r as f64 - (rows - 1) as f64 / 2.0) * pitch);
    }
    FimGeometry::new(x, z, *aperture)
}

/// Phases that align every element's single-path contribution onto the
/// direct path: `v_n = angle(gamma) - angle(gain) - k (theta z_n + phi x_n)`.
fn per_element_alignment(geometry: &FimGeometry, channel: &ChannelRealization) -> Result<PhaseVector> {
    let responses = crate::model::element_responses(geometry, channel);
    PhaseVector::new(responses.iter().map(|c| alignment_phase(channel.direct(), *c)).collect())
}

fn require_single_path(channel: &ChannelRealization) -> Result<()> {
    if channel.num_paths() != 1 {
        return Err(FimError::invalid(format!(
            "single-path solver needs L = P = 1, got {} cascaded paths",
            channel.num_paths()
        )));
    }
    Ok(())
}

/// Closed-form optimum for one cascaded path and `N` elements.
///
/// Every element satisfies `v_n + k (theta z_n + phi x_n) = angle(gamma) - angle(gain) + 2 pi k_n`.
/// PBF-only and EM-PBF use a half-wavelength lattice with compensating
/// phases; EM-only keeps `v = 0` and places elements on the alignment lines.
pub fn solve_multi_element_single_path(
    channel: &ChannelRealization,
    n: usize,
    aperture: &Aperture,
    mode: Mode,
) -> Result<ModeSolution> {
    require_single_path(channel)?;
    match mode {
        Mode::PbfOnly | Mode::EmPbf => {
            let geometry = lattice_placement(n, aperture)?;
            let phases = per_element_alignment(&geometry, channel)?;
            ModeSolution::evaluate(mode, SolverKind::ClosedForm, geometry, phases, channel)
        }
        Mode::EmOnly => {
            let paths = channel.cascaded();
            let (theta, phi) = (paths.theta[0], paths.phi[0]);
            let target = alignment_phase(channel.direct(), paths.gains[0]);
            let geometry = if theta == 0.0 && phi == 0.0 {
                // movement cannot rotate a zero-angle path
                let misalignment = target.min(TAU - target);
                if misalignment > 1e-12 && channel.direct().norm() > 0.0 && paths.gains[0].norm() > 0.0 {
                    return Err(FimError::Infeasible(
                        "cascaded path has zero virtual angles; element movement cannot align it".into(),
                    ));
                }
                lattice_placement(n, aperture)?
            } else {
                alignment_line_placement(n, aperture, theta, phi, target)?
            };
            ModeSolution::evaluate(mode, SolverKind::ClosedForm, geometry, PhaseVector::zeros(n), channel)
        }
    }
}

/// [`solve_multi_element_single_path`] for `N = 1`.
pub fn solve_single_element_single_path(
    channel: &ChannelRealization,
    aperture: &Aperture,
    mode: Mode,
) -> Result<ModeSolution> {
    solve_multi_element_single_path(channel, 1, aperture, mode)
}

/// Distance between adjacent constructive-interference lines of one path.
pub fn ridge_spacing(theta: f64, phi: f64, wavelength: f64) -> f64 {
    wavelength / theta.hypot(phi)
}

/// Places `n` elements on the lines `k (phi x + theta z) = target + 2 pi k_n`.
///
/// Lines are visited by increasing distance from the origin; on each line the
/// elements go at pitch `max(d_min, segment/n)` around the segment center,
/// skipping spots that would violate `d_min` against earlier lines.
pub fn alignment_line_placement(n: usize, aperture: &Aperture, theta: f64, phi: f64, target: f64) -> Result<FimGeometry> {
    let s = theta.hypot(phi);
    if s == 0.0 {
        return Err(FimError::DegenerateGeometry("zero virtual angles define no alignment line".into()));
    }
    let lam = aperture.wavelength;
    let r = aperture.region_bound;
    let d_min = aperture.d_min;
    // normal (x, z) and tangent of the line family
    let (nx, nz) = (phi / s, theta / s);
    let (tx, tz) = (-nz, nx);
    let spacing = lam / s;
    let base = spacing * target / TAU;

    let mut lines: Vec<(i64, f64)> = Vec::new();
    if r.is_finite() {
        let reach = r * (nx.abs() + nz.abs());
        let k_lo = ((-reach - base) / spacing).ceil() as i64;
        let k_hi = ((reach - base) / spacing).floor() as i64;
        for k in k_lo..=k_hi {
            lines.push((k, base + k as f64 * spacing));
        }
    } else {
        let k0 = (-base / spacing).round() as i64;
        lines.push((k0, base + k0 as f64 * spacing));
    }
    lines.sort_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(a.0.cmp(&b.0)));

    let mut xs: Vec<f64> = Vec::with_capacity(n);
    let mut zs: Vec<f64> = Vec::with_capacity(n);
    for &(_, d) in &lines {
        if xs.len() == n {
            break;
        }
        let (cx, cz) = (d * nx, d * nz);
        let (mut t_lo, mut t_hi) = (f64::NEG_INFINITY, f64::INFINITY);
        if r.is_finite() {
            for (c, t) in [(cx, tx), (cz, tz)] {
                if t.abs() < 1e-15 {
                    if c.abs() > r {
                        t_lo = f64::INFINITY;
                    }
                } else {
                    let (a, b) = ((-r - c) / t, (r - c) / t);
                    t_lo = t_lo.max(a.min(b));
                    t_hi = t_hi.min(a.max(b));
                }
            }
            if !(t_lo <= t_hi) {
                continue;
            }
        }
        let remaining = n - xs.len();
        let (length, step) = if r.is_finite() {
            let len = t_hi - t_lo;
            (len, d_min.max(len / n as f64).max(f64::MIN_POSITIVE))
        } else {
            let step = if d_min > 0.0 { d_min } else { lam / 2.0 };
            t_lo = -step * (remaining as f64 - 1.0) / 2.0;
            t_hi = -t_lo;
            (t_hi - t_lo, step)
        };
        let fit = ((length / step).floor() as usize + 1).min(remaining);
        let mut t = t_lo + ((length - step * (fit as f64 - 1.0)) / 2.0).max(0.0);
        while xs.len() < n && t <= t_hi + GEOMETRY_TOL {
            // first conflicting earlier element, if any
            let blocker = xs.iter().zip(&zs).find_map(|(&qx, &qz)| {
                let off = qx * nx + qz * nz - d;
                if off.abs() >= d_min {
                    return None;
                }
                let half = (d_min * d_min - off * off).sqrt();
                let tq = qx * tx + qz * tz;
                ((t - tq).abs() < half - GEOMETRY_TOL).then_some(tq + half)
            });
            match blocker {
                Some(next) => t = next + GEOMETRY_TOL,
                None => {
                    let px = (cx + t * tx).clamp(-r, r);
                    let pz = (cz + t * tz).clamp(-r, r);
                    xs.push(px);
                    zs.push(pz);
                    t += step;
                }
            }
        }
    }
    if xs.len() < n {
        let binding = if lines.is_empty() { "region (no alignment line crosses it)" } else { "d_min packing along alignment lines" };
        return Err(FimError::Infeasible(format!(
            "placed only {} of {n} elements; binding constraint: {binding}",
            xs.len()
        )));
    }
    FimGeometry::new(xs, zs, *aperture)
}

/// Single-element EM solution for exactly two cascaded paths by solving
///
/// ```text
/// k (theta_i z + phi_i x) = angle(gamma) - angle(gain_i) + 2 pi k_i,   i = 1, 2
/// ```
///
/// over the integer pairs `(k_1, k_2)` whose solution lies in the region, and
/// keeping the one closest to the origin. An infinite region bound returns
/// the globally closest solution.
pub fn solve_single_element_two_paths_em(channel: &ChannelRealization, aperture: &Aperture) -> Result<ModeSolution> {
    let paths = channel.cascaded();
    if paths.len() != 2 {
        return Err(FimError::invalid(format!("two-path solver needs L*P = 2, got {}", paths.len())));
    }
    let lam = aperture.wavelength;
    let r = aperture.region_bound;
    // rows (phi_i, theta_i) act on (x, z)
    let (a11, a12, a21, a22) = (paths.phi[0], paths.theta[0], paths.phi[1], paths.theta[1]);
    let det = a11 * a22 - a12 * a21;
    let scale = a11.hypot(a12) * a21.hypot(a22);
    if !(det.abs() > 1e-12 * scale.max(1e-300)) {
        return Err(FimError::DegenerateGeometry("cascaded angle pairs are parallel; square system is singular".into()));
    }
    let inv = |b1: f64, b2: f64| ((a22 * b1 - a12 * b2) / det, (-a21 * b1 + a11 * b2) / det);
    let c1 = wrap_pm_pi(angle(channel.direct()) - angle(paths.gains[0]));
    let c2 = wrap_pm_pi(angle(channel.direct()) - angle(paths.gains[1]));
    let p0 = inv(lam * c1 / TAU, lam * c2 / TAU);
    let b1 = inv(lam, 0.0);
    let b2 = inv(0.0, lam);
    let lattice = Lattice2::reduced(p0, b1, b2);

    let best = if r.is_finite() {
        let mut best: Option<(f64, f64)> = None;
        lattice.for_each_in_ball(2f64.sqrt() * r, |x, z| {
            if x.abs() <= r && z.abs() <= r && better(&best, x, z) {
                best = Some((x, z));
            }
        })?;
        match best {
            Some(p) => p,
            None => {
                let (x, z) = lattice.closest_to_origin()?;
                let dx = (x.abs() - r).max(0.0);
                let dz = (z.abs() - r).max(0.0);
                return Err(FimError::Infeasible(format!(
                    "no (k1, k2) solution inside [-{r}, {r}]^2; nearest solution ({x}, {z}) is {} m outside",
                    dx.hypot(dz)
                )));
            }
        }
    } else {
        lattice.closest_to_origin()?
    };
    let geometry = FimGeometry::new(vec![best.0.clamp(-r, r)], vec![best.1.clamp(-r, r)], *aperture)?;
    ModeSolution::evaluate(Mode::EmOnly, SolverKind::SquareSystem, geometry, PhaseVector::zeros(1), channel)
}

fn better(best: &Option<(f64, f64)>, x: f64, z: f64) -> bool {
    match best {
        None => true,
        Some((bx, bz)) => {
            let (d, bd) = (x.hypot(z), bx.hypot(*bz));
            d < bd || (d == bd && (x, z) < (*bx, *bz))
        }
    }
}

fn wrap_pm_pi(v: f64) -> f64 {
    let w = crate::model::wrap_phase(v);
    if w > PI {
        w - TAU
    } else {
        w
    }
}

/// Affine 2-D lattice `p0 + i b1 + j b2` with a Lagrange-Gauss reduced basis.
struct Lattice2 {
    p0: (f64, f64),
    b1: (f64, f64),
    b2: (f64, f64),
}

impl Lattice2 {
    fn reduced(p0: (f64, f64), mut b1: (f64, f64), mut b2: (f64, f64)) -> Self {
        let dot = |a: (f64, f64), b: (f64, f64)| a.0 * b.0 + a.1 * b.1;
        if dot(b1, b1) > dot(b2, b2) {
            std::mem::swap(&mut b1, &mut b2);
        }
        for _ in 0..1000 {
            let mu = (dot(b1, b2) / dot(b1, b1)).round();
            b2 = (b2.0 - mu * b1.0, b2.1 - mu * b1.1);
            if dot(b2, b2) >= dot(b1, b1) {
                break;
            }
            std::mem::swap(&mut b1, &mut b2);
        }
        Lattice2 { p0, b1, b2 }
    }

    /// Calls `f(x, z)` for every lattice point within `radius` of the origin.
    fn for_each_in_ball(&self, radius: f64, mut f: impl FnMut(f64, f64)) -> Result<()> {
        let dot = |a: (f64, f64), b: (f64, f64)| a.0 * b.0 + a.1 * b.1;
        let n1 = dot(self.b1, self.b1).sqrt();
        let e1 = (self.b1.0 / n1, self.b1.1 / n1);
        let mu = dot(self.b2, e1);
        let b2s = (self.b2.0 - mu * e1.0, self.b2.1 - mu * e1.1);
        let n2 = dot(b2s, b2s).sqrt();
        let e2 = (b2s.0 / n2, b2s.1 / n2);
        let p0_1 = dot(self.p0, e1);
        let p0_2 = dot(self.p0, e2);
        let j_lo = ((-radius - p0_2) / n2).ceil() as i64;
        let j_hi = ((radius - p0_2) / n2).floor() as i64;
        let span_j = (j_hi - j_lo + 1).max(0) as f64;
        let span_i = 2.0 * radius / n1 + 1.0;
        if span_j * span_i > 4.0e6 {
            return Err(FimError::Infeasible("solution lattice too dense to enumerate in the region".into()));
        }
        for j in j_lo..=j_hi {
            let off = p0_1 + j as f64 * mu;
            let i_lo = ((-radius - off) / n1).ceil() as i64;
            let i_hi = ((radius - off) / n1).floor() as i64;
            for i in i_lo..=i_hi {
                let x = self.p0.0 + i as f64 * self.b1.0 + j as f64 * self.b2.0;
                let z = self.p0.1 + i as f64 * self.b1.1 + j as f64 * self.b2.1;
                if x.hypot(z) <= radius * (1.0 + 1e-12) {
                    f(x, z);
                }
            }
        }
        Ok(())
    }

    fn closest_to_origin(&self) -> Result<(f64, f64)> {
        // Babai rounding gives an upper bound on the search radius
        let det = self.b1.0 * self.b2.1 - self.b1.1 * self.b2.0;
        let ci = -(self.p0.0 * self.b2.1 - self.p0.1 * self.b2.0) / det;
        let cj = -(self.b1.0 * self.p0.1 - self.b1.1 * self.p0.0) / det;
        let (ci, cj) = (ci.round(), cj.round());
        let bx = self.p0.0 + ci * self.b1.0 + cj * self.b2.0;
        let bz = self.p0.1 + ci * self.b1.1 + cj * self.b2.1;
        let mut best: Option<(f64, f64)> = None;
        self.for_each_in_ball(bx.hypot(bz) * (1.0 + 1e-9) + 1e-300, |x, z| {
            if better(&best, x, z) {
                best = Some((x, z));
            }
        })?;
        Ok(best.unwrap_or((bx, bz)))
    }
}

/// PBF-only optimum of the position-free objective
/// `|e^{jv} N sum(gain) + gamma|^2` with a common phase on all elements.
///
/// The returned geometry co-locates all elements at the origin (with
/// `d_min = 0`), which is the placement under which that objective is the
/// physical received power.
pub fn pbf_only_optimum(channel: &ChannelRealization, n: usize, wavelength: f64) -> Result<ModeSolution> {
    if n == 0 {
        return Err(FimError::invalid("need at least one element"));
    }
    let sum = channel.gain_sum();
    let degenerate = sum.norm() == 0.0;
    let v = if degenerate { 0.0 } else { alignment_phase(channel.direct(), sum) };
    let aperture = Aperture::new(wavelength, wavelength, 0.0)?;
    let geometry = FimGeometry::new(vec![0.0; n], vec![0.0; n], aperture)?;
    let mut sol = ModeSolution::evaluate(Mode::PbfOnly, SolverKind::ClosedForm, geometry, PhaseVector::uniform(n, v), channel)?;
    sol.degenerate = degenerate;
    Ok(sol)
}

/// `(|gamma| + N |sum gain|)^2`: the PBF-only optimum value.
pub fn pbf_only_objective(channel: &ChannelRealization, n: usize) -> f64 {
    (channel.direct().norm() + n as f64 * channel.gain_sum().norm()).powi(2)
}

/// `(|gamma| + N sum |gain|)^2`: no placement or phase profile can exceed it.
pub fn upper_bound(channel: &ChannelRealization, n: usize) -> f64 {
    (channel.direct().norm() + n as f64 * channel.gain_abs_sum()).powi(2)
}

/// Per-realization comparison of the PBF optimum and the upper bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub upper_bound: f64,
    pub pbf_optimum: f64,
    pub expectations: Option<ExpectedBounds>,
}

pub fn bound_report(channel: &ChannelRealization, n: usize) -> BoundReport {
    BoundReport { upper_bound: upper_bound(channel, n), pbf_optimum: pbf_only_objective(channel, n), expectations: None }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpectedBounds {
    /// `E{f_PBF(v*)}`
    pub pbf: f64,
    /// `E{f_UB}`
    pub upper: f64,
}

/// Expected PBF-only optimum and expected upper bound for Rayleigh gains
/// `alpha ~ CN(0, sa^2)`, `beta ~ CN(0, sb^2)`, `gamma ~ CN(0, sg^2)`.
pub fn expected_bounds(l: usize, p: usize, n: usize, sa: f64, sb: f64, sg: f64) -> ExpectedBounds {
    let nf = n as f64;
    let pi_root_pi = PI * PI.sqrt();
    let cross = sg * sa * sb;
    let pbf = sg * sg + pi_root_pi * nf / 4.0 * cross + nf * nf * sa * sa * sb * sb;
    let lp = (l * p) as f64;
    let upper = sg * sg
        + pi_root_pi * lp.sqrt() * nf / 4.0 * cross
        + nf * nf * (1.0 + PI * (l as f64 - 1.0) / 4.0) * (1.0 + PI * (p as f64 - 1.0) / 4.0) * sa * sa * sb * sb;
    ExpectedBounds { pbf, upper }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloBounds {
    pub pbf: MeanStats,
    pub upper: MeanStats,
    /// Fraction of draws where `f_PBF > f_UB` (must be 0).
    pub violations: usize,
}

const MC_BLOCK: usize = 4096;

/// Sample means of `f_PBF(v*)` and `f_UB` over `draws` channel draws.
/// Angles do not enter either quantity, so only gains are drawn.
pub fn monte_carlo_bounds(
    l: usize,
    p: usize,
    n: usize,
    sigmas: (f64, f64, f64),
    draws: usize,
    root_seed: u64,
) -> MonteCarloBounds {
    let (sa, sb, sg) = sigmas;
    let blocks = draws.div_ceil(MC_BLOCK);
    let norm = 1.0 / ((l * p) as f64).sqrt();
    let nf = n as f64;
    let per_block = mc::run_trials(blocks, |b| {
        let mut rng = mc::trial_rng(root_seed, 0x6f75_6e64, b as u64);
        let count = MC_BLOCK.min(draws - b * MC_BLOCK);
        let mut pbf = Vec::with_capacity(count);
        let mut ub = Vec::with_capacity(count);
        let mut viol = 0usize;
        let mut alpha = vec![Complex64::new(0.0, 0.0); l];
        let mut beta = vec![Complex64::new(0.0, 0.0); p];
        for _ in 0..count {
            alpha.iter_mut().for_each(|a| *a = complex_gaussian(&mut rng, sa * sa));
            beta.iter_mut().for_each(|v| *v = complex_gaussian(&mut rng, sb * sb));
            let gamma = complex_gaussian(&mut rng, sg * sg).norm();
            let mut sum = Complex64::new(0.0, 0.0);
            let mut abs_sum = 0.0;
            for a in &alpha {
                for b in &beta {
                    let g = a * b.conj();
                    sum += g;
                    abs_sum += g.norm();
                }
            }
            let f_pbf = (gamma + nf * norm * sum.norm()).powi(2);
            let f_ub = (gamma + nf * norm * abs_sum).powi(2);
            if f_pbf > f_ub * (1.0 + 1e-12) {
                viol += 1;
            }
            pbf.push(f_pbf);
            ub.push(f_ub);
        }
        (pbf, ub, viol)
    });
    let mut pbf = Vec::with_capacity(draws);
    let mut ub = Vec::with_capacity(draws);
    let mut violations = 0;
    for (a, b, v) in per_block {
        pbf.extend(a);
        ub.extend(b);
        violations += v;
    }
    MonteCarloBounds { pbf: mc::mean_stats(&pbf), upper: mc::mean_stats(&ub), violations }
}

/// Which slice of `f(v, x, z)` to sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FringeAxes {
    /// `(x, z)` plane over `[-R, R]^2` at a fixed phase.
    Plane { phase: f64, resolution: usize },
    /// Phase sweep over `[0, 2 pi]` at a fixed position.
    PhaseLine { x: f64, z: f64, resolution: usize },
    /// Full `(v, x, z)` grid.
    Volume { spatial_resolution: usize, phase_resolution: usize },
}

impl FringeAxes {
    pub const DEFAULT_SPATIAL: usize = 201;
    pub const DEFAULT_PHASE: usize = 721;

    pub fn default_plane() -> Self {
        FringeAxes::Plane { phase: 0.0, resolution: Self::DEFAULT_SPATIAL }
    }

    pub fn default_phase_line() -> Self {
        FringeAxes::PhaseLine { x: 0.0, z: 0.0, resolution: Self::DEFAULT_PHASE }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extremum {
    pub value: f64,
    pub v: f64,
    pub x: f64,
    pub z: f64,
}

/// Objective samples on a `(v, z, x)` grid, stored with `x` fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FringeMap {
    pub axes: FringeAxes,
    pub v: Vec<f64>,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub values: Vec<f64>,
    pub max: Extremum,
    pub min: Extremum,
}

impl FringeMap {
    pub fn value(&self, iv: usize, iz: usize, ix: usize) -> f64 {
        self.values[(iv * self.z.len() + iz) * self.x.len() + ix]
    }

    /// One row per grid point: `v,x,z,objective`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("v,x,z,objective\n");
        for (iv, v) in self.v.iter().enumerate() {
            for (iz, z) in self.z.iter().enumerate() {
                for (ix, x) in self.x.iter().enumerate() {
                    out.push_str(&format!("{v:.17e},{x:.17e},{z:.17e},{:.17e}\n", self.value(iv, iz, ix)));
                }
            }
        }
        out
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Samples the single-element objective `|e^{jv} c(x, z) + gamma|^2`.
pub fn fringe_map(channel: &ChannelRealization, aperture: &Aperture, axes: FringeAxes) -> Result<FringeMap> {
    let r = aperture.region_bound;
    let (v, x, z) = match axes {
        FringeAxes::Plane { phase, resolution } => {
            if resolution == 0 {
                return Err(FimError::invalid("zero-resolution spatial axis"));
            }
            if !r.is_finite() {
                return Err(FimError::invalid("plane maps need a finite region"));
            }
            (vec![phase], linspace(-r, r, resolution), linspace(-r, r, resolution))
        }
        FringeAxes::PhaseLine { x, z, resolution } => {
            if resolution == 0 {
                return Err(FimError::invalid("zero-resolution phase axis"));
            }
            let v = if resolution == 1 { vec![0.0] } else { linspace(0.0, TAU, resolution) };
            (v, vec![x], vec![z])
        }
        FringeAxes::Volume { spatial_resolution, phase_resolution } => {
            if spatial_resolution == 0 || phase_resolution == 0 {
                return Err(FimError::invalid("zero-resolution axis"));
            }
            if !r.is_finite() {
                return Err(FimError::invalid("volume maps need a finite region"));
            }
            let v = if phase_resolution == 1 { vec![0.0] } else { linspace(0.0, TAU, phase_resolution) };
            (v, linspace(-r, r, spatial_resolution), linspace(-r, r, spatial_resolution))
        }
    };
    let k = aperture.wavenumber();
    let gamma = channel.direct();
    // responses on the spatial grid, z-major
    let mut xs = Vec::with_capacity(x.len() * z.len());
    let mut zs = Vec::with_capacity(x.len() * z.len());
    for &zz in &z {
        for &xx in &x {
            xs.push(xx);
            zs.push(zz);
        }
    }
    let responses = element_responses_at(k, &xs, &zs, channel);
    let mut values = Vec::with_capacity(v.len() * responses.len());
    let mut max = Extremum { value: f64::NEG_INFINITY, v: 0.0, x: 0.0, z: 0.0 };
    let mut min = Extremum { value: f64::INFINITY, v: 0.0, x: 0.0, z: 0.0 };
    for &vv in &v {
        let rot = Complex64::cis(vv);
        for (i, c) in responses.iter().enumerate() {
            let f = (rot * c + gamma).norm_sqr();
            values.push(f);
            if f > max.value {
                max = Extremum { value: f, v: vv, x: xs[i], z: zs[i] };
            }
            if f < min.value {
                min = Extremum { value: f, v: vv, x: xs[i], z: zs[i] };
            }
        }
    }
    Ok(FringeMap { axes, v, x, z, values, max, min })
}
