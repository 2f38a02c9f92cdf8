//! Constrained Bayesian optimization of element positions and phases.
//!
//! A Gaussian process with a squared-exponential kernel models the received
//! power; candidates are chosen by expected improvement. Spacing violations
//! are never evaluated: infeasible candidates are discarded, not repaired.

use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FimError, Result};
use crate::interference::{Mode, ModeSolution, SolverKind};
use crate::mc::{rng_from_seed, TrialRng};
use crate::model::{
    alignment_phase, element_responses_at, spacing_violation, Aperture, ChannelRealization, FimGeometry, PhaseVector,
};

const MAX_JITTER: f64 = 1e-4;
const LENGTH_MULTIPLIERS: [f64; 5] = [1.0, 0.5, std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::SQRT_2, 2.0];

/// Squared-exponential kernel `s2 * exp(-0.5 * sum ((a_d - b_d) / l_d)^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub length_scales: Vec<f64>,
    pub signal_variance: f64,
}

/// GP regression state with a constant mean equal to the sample mean.
///
/// The Cholesky factor of the correlation matrix is stored packed by rows so
/// that forward solves and rank-1 extensions touch contiguous memory.
#[derive(Debug, Clone)]
pub struct GpSurrogate {
    kernel: Kernel,
    base_jitter: f64,
    jitter: f64,
    points: Vec<Vec<f64>>,
    scaled: Vec<Vec<f64>>,
    values: Vec<f64>,
    mean: f64,
    chol: Vec<f64>,
    alpha: Vec<f64>,
}

fn row_offset(i: usize) -> usize {
    i * (i + 1) / 2
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl GpSurrogate {
    pub fn new(kernel: Kernel, jitter: f64) -> Result<Self> {
        if kernel.length_scales.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(FimError::invalid("length-scales must be positive and finite"));
        }
        if !(kernel.signal_variance > 0.0 && kernel.signal_variance.is_finite()) {
            return Err(FimError::invalid("signal variance must be positive and finite"));
        }
        if !(jitter >= 0.0) {
            return Err(FimError::invalid("jitter must be non-negative"));
        }
        Ok(GpSurrogate {
            kernel,
            base_jitter: jitter,
            jitter,
            points: Vec::new(),
            scaled: Vec::new(),
            values: Vec::new(),
            mean: 0.0,
            chol: Vec::new(),
            alpha: Vec::new(),
        })
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Jitter actually used after escalation.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn mean_level(&self) -> f64 {
        self.mean
    }

    fn scale(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.kernel.length_scales).map(|(x, l)| x / l).collect()
    }

    /// Replaces all observations and refactors from scratch.
    pub fn fit(&mut self, points: Vec<Vec<f64>>, values: Vec<f64>) -> Result<()> {
        if points.is_empty() || points.len() != values.len() {
            return Err(FimError::invalid("need at least one observation and one value per point"));
        }
        let d = self.kernel.length_scales.len();
        if points.iter().any(|p| p.len() != d) {
            return Err(FimError::DimensionMismatch { what: "observation point", expected: d, got: points[0].len() });
        }
        if values.iter().chain(points.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(FimError::invalid("observations must be finite"));
        }
        self.points = points;
        self.values = values;
        self.refactor()
    }

    fn refactor(&mut self) -> Result<()> {
        self.scaled = self.points.iter().map(|p| self.scale(p)).collect();
        let n = self.points.len();
        let mut jitter = self.base_jitter;
        loop {
            if let Some(chol) = self.factor(jitter) {
                self.chol = chol;
                self.jitter = jitter;
                break;
            }
            jitter = if jitter == 0.0 { 1e-12 } else { jitter * 10.0 };
            if jitter > MAX_JITTER {
                return Err(FimError::Conditioning(format!(
                    "GP correlation matrix of {n} points not positive definite at jitter {MAX_JITTER}"
                )));
            }
        }
        self.update_alpha();
        Ok(())
    }

    fn factor(&self, jitter: f64) -> Option<Vec<f64>> {
        let n = self.scaled.len();
        let mut l = vec![0.0; row_offset(n)];
        for i in 0..n {
            let oi = row_offset(i);
            for j in 0..=i {
                let oj = row_offset(j);
                let mut s = if i == j { 1.0 + jitter } else { (-0.5 * sq_dist(&self.scaled[i], &self.scaled[j])).exp() };
                for k in 0..j {
                    s -= l[oi + k] * l[oj + k];
                }
                if i == j {
                    if !(s > 0.0) {
                        return None;
                    }
                    l[oi + i] = s.sqrt();
                } else {
                    l[oi + j] = s / l[oj + j];
                }
            }
        }
        Some(l)
    }

    fn forward(&self, b: &mut [f64]) {
        for i in 0..b.len() {
            let o = row_offset(i);
            let row = &self.chol[o..o + i];
            let s: f64 = row.iter().zip(&b[..i]).map(|(l, v)| l * v).sum();
            b[i] = (b[i] - s) / self.chol[o + i];
        }
    }

    fn backward(&self, b: &mut [f64]) {
        for i in (0..b.len()).rev() {
            let o = row_offset(i);
            b[i] /= self.chol[o + i];
            let xi = b[i];
            for (j, l) in self.chol[o..o + i].iter().enumerate() {
                b[j] -= l * xi;
            }
        }
    }

    fn update_alpha(&mut self) {
        let n = self.values.len() as f64;
        self.mean = crate::mc::pairwise_sum(&self.values) / n;
        let mut a: Vec<f64> = self.values.iter().map(|v| v - self.mean).collect();
        self.forward(&mut a);
        self.backward(&mut a);
        self.alpha = a;
    }

    /// Adds one observation with an O(n^2) extension of the factor, falling
    /// back to a full refactor (with jitter escalation) when it loses
    /// definiteness.
    pub fn add(&mut self, point: Vec<f64>, value: f64) -> Result<()> {
        if point.len() != self.kernel.length_scales.len() {
            return Err(FimError::DimensionMismatch {
                what: "observation point",
                expected: self.kernel.length_scales.len(),
                got: point.len(),
            });
        }
        if !value.is_finite() || point.iter().any(|v| !v.is_finite()) {
            return Err(FimError::invalid("observations must be finite"));
        }
        let s = self.scale(&point);
        let mut row: Vec<f64> = self.scaled.iter().map(|q| (-0.5 * sq_dist(q, &s)).exp()).collect();
        self.forward(&mut row);
        let diag = 1.0 + self.jitter - row.iter().map(|v| v * v).sum::<f64>();
        self.points.push(point);
        self.values.push(value);
        if diag > 1e-3 * self.jitter.max(1e-12) && !self.chol.is_empty() {
            self.scaled.push(s);
            self.chol.extend_from_slice(&row);
            self.chol.push(diag.sqrt());
            self.update_alpha();
            Ok(())
        } else {
            self.refactor()
        }
    }

    /// Posterior mean and variance at `x`.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let s = self.scale(x);
        let mut c: Vec<f64> = self.scaled.iter().map(|q| (-0.5 * sq_dist(q, &s)).exp()).collect();
        let mu = self.mean + c.iter().zip(&self.alpha).map(|(a, b)| a * b).sum::<f64>();
        self.forward(&mut c);
        let explained: f64 = c.iter().map(|v| v * v).sum();
        let var = self.kernel.signal_variance * (1.0 - explained);
        (mu, if var < 0.0 { 0.0 } else { var })
    }

    pub fn expected_improvement(&self, x: &[f64], best: f64) -> f64 {
        let (mu, var) = self.predict(x);
        expected_improvement(mu, var.sqrt(), best)
    }

    /// Profile negative log likelihood with the signal variance at its
    /// closed-form maximizer; returns `(nll, s2_hat)`.
    fn profile_nll(&self) -> (f64, f64) {
        let n = self.values.len() as f64;
        let quad: f64 = self.values.iter().zip(&self.alpha).map(|(y, a)| (y - self.mean) * a).sum();
        let s2 = (quad / n).max(1e-300);
        let logdet: f64 = (0..self.values.len()).map(|i| self.chol[row_offset(i) + i].ln()).sum();
        (0.5 * n * s2.ln() + logdet, s2)
    }

    /// Grid search over length-scale multipliers, one dimension group at a
    /// time, followed by the closed-form signal variance.
    pub fn refit_hyperparameters(&mut self, groups: &[Vec<usize>], bounds: &[(f64, f64)]) -> Result<()> {
        if self.values.len() < 2 {
            return Ok(());
        }
        for group in groups.iter().filter(|g| !g.is_empty()) {
            let start: Vec<f64> = self.kernel.length_scales.clone();
            let mut best: Option<(f64, f64)> = None;
            for m in LENGTH_MULTIPLIERS {
                for &d in group {
                    self.kernel.length_scales[d] = (start[d] * m).clamp(bounds[d].0, bounds[d].1);
                }
                if self.refactor().is_err() {
                    continue;
                }
                let (nll, _) = self.profile_nll();
                if best.is_none_or(|(b, _)| nll < b - 1e-9 * b.abs()) {
                    best = Some((nll, m));
                }
            }
            let m = best.map_or(1.0, |(_, m)| m);
            for &d in group {
                self.kernel.length_scales[d] = (start[d] * m).clamp(bounds[d].0, bounds[d].1);
            }
            self.refactor()?;
        }
        let (_, s2) = self.profile_nll();
        let floor = 1e-12 * (1.0 + self.values.iter().map(|v| v * v).fold(0.0, f64::max));
        self.kernel.signal_variance = s2.max(floor);
        Ok(())
    }
}

/// Fits a GP to `points`/`values`.
pub fn gp_fit(kernel: Kernel, jitter: f64, points: Vec<Vec<f64>>, values: Vec<f64>) -> Result<GpSurrogate> {
    let mut gp = GpSurrogate::new(kernel, jitter)?;
    gp.fit(points, values)?;
    Ok(gp)
}

pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / TAU.sqrt()
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Expected improvement for maximization; zero when `sd = 0`.
pub fn expected_improvement(mean: f64, sd: f64, best: f64) -> f64 {
    if !(sd > 0.0) {
        return 0.0;
    }
    let z = (mean - best) / sd;
    ((mean - best) * normal_cdf(z) + sd * normal_pdf(z)).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimKind {
    Position,
    Phase,
}

/// Box plus element-spacing constraint. Position coordinates, when present,
/// are laid out as `[x_1..x_N, z_1..z_N]` at the start of the vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub kinds: Vec<DimKind>,
    pub names: Vec<String>,
    pub elements: usize,
    pub d_min: f64,
}

impl SearchSpace {
    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    fn positioned(&self) -> bool {
        self.kinds.iter().filter(|k| **k == DimKind::Position).count() == 2 * self.elements && self.elements > 0
    }

    pub fn feasible(&self, p: &[f64]) -> bool {
        if p.len() != self.dim() || p.iter().zip(self.lower.iter().zip(&self.upper)).any(|(v, (lo, hi))| !(v >= lo && v <= hi)) {
            return false;
        }
        if self.positioned() && self.elements >= 2 {
            let n = self.elements;
            return spacing_violation(&p[..n], &p[n..2 * n], self.d_min).is_none();
        }
        true
    }

    fn width(&self, d: usize) -> f64 {
        self.upper[d] - self.lower[d]
    }

    fn groups(&self) -> Vec<Vec<usize>> {
        let pos = (0..self.dim()).filter(|&d| self.kinds[d] == DimKind::Position).collect();
        let ph = (0..self.dim()).filter(|&d| self.kinds[d] == DimKind::Phase).collect();
        vec![pos, ph]
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.dim()).map(|d| self.lower[d] + self.width(d) * rng.random::<f64>()).collect()
    }

    fn latin_hypercube<R: Rng>(&self, m: usize, rng: &mut R) -> Vec<Vec<f64>> {
        let mut pts = vec![vec![0.0; self.dim()]; m];
        for d in 0..self.dim() {
            let mut strata: Vec<usize> = (0..m).collect();
            for i in (1..m).rev() {
                strata.swap(i, rng.random_range(0..=i));
            }
            for (i, s) in strata.into_iter().enumerate() {
                pts[i][d] = self.lower[d] + self.width(d) * (s as f64 + rng.random::<f64>()) / m as f64;
            }
        }
        pts
    }

    /// Deterministic packings tried when random sampling cannot find a
    /// feasible design: square lattice then hexagonal.
    fn structured_packings<R: Rng>(&self, rng: &mut R) -> Vec<Vec<f64>> {
        if !self.positioned() {
            return Vec::new();
        }
        let n = self.elements;
        let (xl, xu, zl, zu) = (self.lower[0], self.upper[0], self.lower[n], self.upper[n]);
        let (cx, cz) = ((xl + xu) / 2.0, (zl + zu) / 2.0);
        let pitch = self.d_min.max(1e-12);
        let mut out = Vec::new();
        for hex in [false, true] {
            let row_pitch = if hex { pitch * 3f64.sqrt() / 2.0 } else { pitch };
            let side = (n as f64).sqrt().ceil() as i64 + 2;
            let mut cand: Vec<(f64, f64)> = Vec::new();
            for r in -side..=side {
                let shift = if hex && r.rem_euclid(2) == 1 { pitch / 2.0 } else { 0.0 };
                for c in -side..=side {
                    cand.push((cx + c as f64 * pitch + shift, cz + r as f64 * row_pitch));
                }
            }
            cand.retain(|&(x, z)| x >= xl && x <= xu && z >= zl && z <= zu);
            cand.sort_by(|a, b| (a.0 - cx).hypot(a.1 - cz).total_cmp(&(b.0 - cx).hypot(b.1 - cz)));
            if cand.len() < n {
                continue;
            }
            let mut p = self.sample(rng);
            for (i, (x, z)) in cand.into_iter().take(n).enumerate() {
                p[i] = x;
                p[n + i] = z;
            }
            if self.feasible(&p) {
                out.push(p);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseHandling {
    /// Phases are search variables (`3N` dimensions for EM-PBF).
    Searched,
    /// Phases are set to their per-element closed-form optimum for each
    /// candidate placement, leaving `2N` search dimensions.
    Profiled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoSettings {
    pub budget: usize,
    pub seed: u64,
    /// Defaults to `max(5, 2 * dimension)`.
    pub initial_design: Option<usize>,
    pub refit_every: usize,
    pub random_candidates: usize,
    pub local_starts: usize,
    pub local_evaluations: usize,
    pub jitter: f64,
    pub phase_handling: PhaseHandling,
    /// Feasible points evaluated before the random design.
    pub warm_start: Vec<Vec<f64>>,
}

impl Default for BoSettings {
    fn default() -> Self {
        BoSettings {
            budget: 200,
            seed: 0,
            initial_design: None,
            refit_every: 10,
            random_candidates: 64,
            local_starts: 3,
            local_evaluations: 40,
            jitter: 1e-10,
            phase_handling: PhaseHandling::Searched,
            warm_start: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub value: f64,
    pub best_value: f64,
    pub point: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoRun {
    pub names: Vec<String>,
    pub trace: Vec<TraceRow>,
    pub best_point: Vec<f64>,
    pub best_value: f64,
    pub initial_design: usize,
    pub kernel: Kernel,
}

impl BoRun {
    /// `iteration,value,best_value,<coordinates>` with one row per evaluation.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iteration,value,best_value");
        for n in &self.names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for row in &self.trace {
            out.push_str(&format!("{},{:.17e},{:.17e}", row.iteration, row.value, row.best_value));
            for v in &row.point {
                out.push_str(&format!(",{v:.17e}"));
            }
            out.push('\n');
        }
        out
    }
}

fn initial_kernel(space: &SearchSpace, values: &[f64]) -> Kernel {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Kernel {
        length_scales: (0..space.dim()).map(|d| space.width(d) / 4.0).collect(),
        signal_variance: if var > 0.0 { var } else { 1.0 },
    }
}

struct Acquisition<'a> {
    space: &'a SearchSpace,
    gp: &'a GpSurrogate,
    best: f64,
    scored: Vec<(Vec<f64>, f64)>,
}

impl Acquisition<'_> {
    fn score(&mut self, p: Vec<f64>) -> f64 {
        let ei = self.gp.expected_improvement(&p, self.best);
        self.scored.push((p, ei));
        ei
    }

    fn argmax(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, (_, ei)) in self.scored.iter().enumerate() {
            if best.is_none_or(|b| *ei > self.scored[b].1) {
                best = Some(i);
            }
        }
        best
    }

    /// Compass search on EI from `start`, discarding infeasible moves.
    fn local_ascent(&mut self, start: Vec<f64>, budget: usize) {
        let d = self.space.dim();
        let mut x = start;
        let mut fx = self.score(x.clone());
        let mut step: Vec<f64> = (0..d).map(|i| 0.05 * self.space.width(i)).collect();
        let mut used = 1;
        let mut halvings = 0;
        while used < budget && halvings < 4 {
            let mut improved = false;
            for i in 0..d {
                for sign in [1.0, -1.0] {
                    if used >= budget {
                        break;
                    }
                    let mut y = x.clone();
                    y[i] = (y[i] + sign * step[i]).clamp(self.space.lower[i], self.space.upper[i]);
                    if y[i] == x[i] || !self.space.feasible(&y) {
                        continue;
                    }
                    used += 1;
                    let fy = self.score(y.clone());
                    if fy > fx {
                        x = y;
                        fx = fy;
                        improved = true;
                        break;
                    }
                }
            }
            if !improved {
                step.iter_mut().for_each(|s| *s *= 0.5);
                halvings += 1;
            }
        }
    }
}

fn random_feasible(space: &SearchSpace, rng: &mut TrialRng, attempts: usize) -> Option<Vec<f64>> {
    (0..attempts).map(|_| space.sample(rng)).find(|p| space.feasible(p))
}

/// Maximizes `f` over `space` under `settings.budget` evaluations.
pub fn maximize(space: &SearchSpace, mut f: impl FnMut(&[f64]) -> f64, settings: &BoSettings) -> Result<BoRun> {
    let dim = space.dim();
    if dim == 0 || space.upper.len() != dim || space.kinds.len() != dim {
        return Err(FimError::invalid("search space dimensions are inconsistent"));
    }
    if (0..dim).any(|d| !(space.width(d) > 0.0 && space.width(d).is_finite())) {
        return Err(FimError::invalid("search box must be bounded with positive widths"));
    }
    let design = settings.initial_design.unwrap_or((2 * dim).max(5));
    if design == 0 || settings.budget < design {
        return Err(FimError::invalid(format!("budget {} is smaller than the initial design {design}", settings.budget)));
    }
    if space.positioned() && space.elements >= 2 {
        let n = space.elements;
        let diag = space.width(0).hypot(space.width(n));
        if space.d_min > diag {
            return Err(FimError::Infeasible(format!(
                "d_min {} exceeds the region diagonal {diag}; {n} elements cannot be packed",
                space.d_min
            )));
        }
    }
    let mut rng = rng_from_seed(settings.seed);

    let mut points: Vec<Vec<f64>> = Vec::with_capacity(settings.budget);
    for w in &settings.warm_start {
        if !space.feasible(w) {
            return Err(FimError::invalid("warm-start point violates the constraints"));
        }
        if points.len() < design {
            points.push(w.clone());
        }
    }
    for _ in 0..200 {
        if points.len() >= design {
            break;
        }
        let need = design - points.len();
        for p in space.latin_hypercube(need, &mut rng) {
            if space.feasible(&p) {
                points.push(p);
            }
        }
    }
    if points.len() < design {
        points.extend(space.structured_packings(&mut rng));
        points.truncate(design);
    }
    if points.is_empty() {
        return Err(FimError::Infeasible(format!(
            "no feasible placement of {} elements with spacing {} found in the region",
            space.elements, space.d_min
        )));
    }

    let mut trace = Vec::with_capacity(settings.budget);
    let mut values = Vec::with_capacity(settings.budget);
    let mut best = f64::NEG_INFINITY;
    let mut record = |p: &[f64], v: f64, trace: &mut Vec<TraceRow>, values: &mut Vec<f64>| {
        best = best.max(v);
        values.push(v);
        trace.push(TraceRow { iteration: values.len(), value: v, best_value: best, point: p.to_vec() });
    };
    for p in &points {
        let v = f(p);
        if !v.is_finite() {
            return Err(FimError::Conditioning("objective returned a non-finite value".into()));
        }
        record(p, v, &mut trace, &mut values);
    }
    let initial_design = points.len();
    let bounds: Vec<(f64, f64)> = (0..dim).map(|d| (space.width(d) / 100.0, space.width(d) * 10.0)).collect();
    let mut gp = gp_fit(initial_kernel(space, &values), settings.jitter, points.clone(), values.clone())?;
    let groups = space.groups();
    let mut last_refit = 0;

    while values.len() < settings.budget {
        if settings.refit_every > 0 && values.len() >= last_refit + settings.refit_every {
            gp.refit_hyperparameters(&groups, &bounds)?;
            last_refit = values.len();
        }
        let incumbent = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut acq = Acquisition { space, gp: &gp, best: incumbent, scored: Vec::new() };
        let mut randoms = 0;
        for _ in 0..settings.random_candidates * 20 {
            if randoms == settings.random_candidates {
                break;
            }
            let p = space.sample(&mut rng);
            if space.feasible(&p) {
                acq.score(p);
                randoms += 1;
            }
        }
        let mut order: Vec<usize> = (0..acq.scored.len()).collect();
        order.sort_by(|&a, &b| acq.scored[b].1.total_cmp(&acq.scored[a].1).then(a.cmp(&b)));
        let mut starts: Vec<Vec<f64>> = order.iter().take(settings.local_starts).map(|&i| acq.scored[i].0.clone()).collect();
        starts.push(points[best_idx_of(&values)].clone());
        for s in starts {
            acq.local_ascent(s, settings.local_evaluations);
        }
        let pick = match acq.argmax() {
            Some(i) if acq.scored[i].1 > 0.0 && !is_duplicate(&gp, &points, &acq.scored[i].0) => Some(acq.scored[i].0.clone()),
            _ => None,
        };
        let candidate = match pick {
            Some(p) => p,
            None => match random_feasible(space, &mut rng, 10_000) {
                Some(p) => p,
                None => points[best_idx_of(&values)].clone(),
            },
        };
        let v = f(&candidate);
        if !v.is_finite() {
            return Err(FimError::Conditioning("objective returned a non-finite value".into()));
        }
        record(&candidate, v, &mut trace, &mut values);
        points.push(candidate.clone());
        gp.add(candidate, v)?;
    }
    let bi = best_idx_of(&values);
    Ok(BoRun {
        names: space.names.clone(),
        best_point: points[bi].clone(),
        best_value: values[bi],
        trace,
        initial_design,
        kernel: gp.kernel().clone(),
    })
}

fn best_idx_of(values: &[f64]) -> usize {
    let mut b = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[b] {
            b = i;
        }
    }
    b
}

fn is_duplicate(gp: &GpSurrogate, points: &[Vec<f64>], p: &[f64]) -> bool {
    let ls = &gp.kernel().length_scales;
    points.iter().any(|q| q.iter().zip(p).zip(ls).map(|((a, b), l)| ((a - b) / l).powi(2)).sum::<f64>() < 1e-16)
}

/// Received-power maximization for one channel, mode and element count.
#[derive(Debug, Clone)]
pub struct BoProblem {
    pub channel: ChannelRealization,
    pub aperture: Aperture,
    pub elements: usize,
    pub mode: Mode,
    pub settings: BoSettings,
    fixed: Option<FimGeometry>,
}

#[derive(Debug, Clone)]
pub struct BoOutcome {
    pub solution: ModeSolution,
    pub run: BoRun,
}

impl BoProblem {
    pub fn new(channel: ChannelRealization, aperture: Aperture, elements: usize, mode: Mode, settings: BoSettings) -> Result<Self> {
        if elements == 0 {
            return Err(FimError::invalid("need at least one element"));
        }
        if !aperture.region_bound.is_finite() {
            return Err(FimError::invalid("Bayesian optimization needs a finite region"));
        }
        let fixed = match mode {
            Mode::PbfOnly => Some(crate::interference::lattice_placement(elements, &aperture)?),
            _ => None,
        };
        Ok(BoProblem { channel, aperture, elements, mode, settings, fixed })
    }

    fn profiled(&self) -> bool {
        self.mode == Mode::EmPbf && self.settings.phase_handling == PhaseHandling::Profiled
    }

    pub fn dimension(&self) -> usize {
        match self.mode {
            Mode::PbfOnly => self.elements,
            Mode::EmOnly => 2 * self.elements,
            Mode::EmPbf if self.profiled() => 2 * self.elements,
            Mode::EmPbf => 3 * self.elements,
        }
    }

    pub fn search_space(&self) -> SearchSpace {
        let n = self.elements;
        let r = self.aperture.region_bound;
        let mut space = SearchSpace {
            lower: Vec::new(),
            upper: Vec::new(),
            kinds: Vec::new(),
            names: Vec::new(),
            elements: 0,
            d_min: self.aperture.d_min,
        };
        if self.mode != Mode::PbfOnly {
            space.elements = n;
            for axis in ["x", "z"] {
                for i in 1..=n {
                    space.lower.push(-r);
                    space.upper.push(r);
                    space.kinds.push(DimKind::Position);
                    space.names.push(format!("{axis}_{i}"));
                }
            }
        }
        if self.mode == Mode::PbfOnly || (self.mode == Mode::EmPbf && !self.profiled()) {
            for i in 1..=n {
                space.lower.push(0.0);
                // phases live on [0, 2pi); the closed end is never sampled in practice
                space.upper.push(TAU * (1.0 - f64::EPSILON));
                space.kinds.push(DimKind::Phase);
                space.names.push(format!("v_{i}"));
            }
        }
        space
    }

    fn positions<'a>(&'a self, p: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        let n = self.elements;
        match &self.fixed {
            Some(g) => (g.x(), g.z()),
            None => (&p[..n], &p[n..2 * n]),
        }
    }

    /// Objective at a parameter vector (no constraint checks).
    pub fn evaluate(&self, p: &[f64]) -> f64 {
        let (x, z) = self.positions(p);
        let c = element_responses_at(self.aperture.wavenumber(), x, z, &self.channel);
        let gamma = self.channel.direct();
        match self.mode {
            Mode::EmOnly => (c.iter().sum::<num_complex::Complex64>() + gamma).norm_sqr(),
            Mode::EmPbf if self.profiled() => (gamma.norm() + c.iter().map(|v| v.norm()).sum::<f64>()).powi(2),
            _ => {
                let off = if self.fixed.is_some() { 0 } else { 2 * self.elements };
                let h: num_complex::Complex64 =
                    c.iter().zip(&p[off..]).map(|(ci, v)| ci * num_complex::Complex64::cis(*v)).sum();
                (h + gamma).norm_sqr()
            }
        }
    }

    pub fn decode(&self, p: &[f64]) -> Result<(FimGeometry, PhaseVector)> {
        let (x, z) = self.positions(p);
        let geometry = FimGeometry::new(x.to_vec(), z.to_vec(), self.aperture)?;
        let phases = match self.mode {
            Mode::EmOnly => PhaseVector::zeros(self.elements),
            Mode::EmPbf if self.profiled() => {
                let c = element_responses_at(self.aperture.wavenumber(), x, z, &self.channel);
                PhaseVector::new(c.iter().map(|ci| alignment_phase(self.channel.direct(), *ci)).collect())?
            }
            _ => {
                let off = if self.fixed.is_some() { 0 } else { 2 * self.elements };
                PhaseVector::new(p[off..off + self.elements].to_vec())?
            }
        };
        Ok((geometry, phases))
    }
}

/// Runs BO on `problem` and returns the best feasible evaluated point.
pub fn optimize(problem: &BoProblem) -> Result<BoOutcome> {
    let space = problem.search_space();
    let run = maximize(&space, |p| problem.evaluate(p), &problem.settings)?;
    let (geometry, phases) = problem.decode(&run.best_point)?;
    let solution = ModeSolution::evaluate(problem.mode, SolverKind::BayesOpt, geometry, phases, &problem.channel)?;
    Ok(BoOutcome { solution, run })
}
