//! Sparse recovery over a [`SparseProblem`]: the variational SBL family
//! (full, mean-field and clustered mean-field) plus OMP and FISTA baselines.
//!
//! All SBL variants share the Gamma hyperprior updates
//!
//! ```text
//! E{rho_i}    = (a + 1/2) / ((|mu_i|^2 + Sigma_ii)/2 + b)
//! E{sigma^-2} = (c + G/2) / ((||y - Phi mu||^2 + Tr(Phi^H Phi Sigma))/2 + d)
//! ```
//!
//! and differ only in how the coefficient posterior is factorized.

use std::str::FromStr;
use std::time::Instant;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FimError, Result};
use crate::estimation::{RecoveryResult, SparseProblem};
use crate::linalg::{axpy, block_posterior, col, dot_h, gram_block, least_squares_subset, mat_h_vec, norm_sqr, spectral_norm_sqr};
use crate::mc::rng_from_seed;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SblHyperparams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    /// Absolute pruning threshold on `E{rho}` (clustered variant only).
    /// `None` selects the relative rule driven by `prune_ratio`.
    pub prune_threshold_rho: Option<f64>,
    /// Relative rule: prune atom `i` once
    /// `E{rho_i} > prune_ratio * E{sigma^-2} * ||phi_i||^2`, i.e. once its
    /// prior precision dominates what the data can say about it.
    pub prune_ratio: f64,
    /// No pruning during the first iterations, while the noise precision
    /// estimate is still far from its fixed point.
    pub prune_after: usize,
    pub recluster_every: usize,
}

impl Default for SblHyperparams {
    fn default() -> Self {
        SblHyperparams {
            a: 1e-6,
            b: 1e-6,
            c: 1e-6,
            d: 1e-6,
            max_iterations: 400,
            tolerance: 1e-8,
            prune_threshold_rho: None,
            prune_ratio: 0.1,
            prune_after: 20,
            recluster_every: 20,
        }
    }
}

impl SblHyperparams {
    pub fn without_pruning(mut self) -> Self {
        self.prune_threshold_rho = Some(f64::INFINITY);
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("a", self.a), ("b", self.b), ("c", self.c), ("d", self.d), ("tolerance", self.tolerance)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(FimError::invalid(format!("hyperparameter {name} must be positive, got {v}")));
            }
        }
        if self.prune_threshold_rho.is_some_and(|t| !(t > 0.0)) || !(self.prune_ratio > 0.0) {
            return Err(FimError::invalid("pruning thresholds must be positive"));
        }
        Ok(())
    }

    /// Largest value the `rho` update can produce: `(a + 1/2) / b`.
    pub fn rho_ceiling(&self) -> f64 {
        (self.a + 0.5) / self.b
    }

    pub fn pruning_enabled(&self) -> bool {
        self.prune_threshold_rho != Some(f64::INFINITY) && self.prune_ratio.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SblVariant {
    /// Joint Gaussian posterior over all coefficients.
    Full,
    /// Fully factorized posterior, ascending scalar sweep.
    MeanField,
    /// Factorized over K-means clusters of atoms; `clusters = None` uses
    /// `round(sqrt(active atoms))`.
    Clustered { clusters: Option<usize>, seed: u64 },
}

/// Partition of atoms into clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub num_clusters: usize,
    /// Atom indices that were clustered, ascending.
    pub atoms: Vec<usize>,
    /// Cluster id of each entry of `atoms`; ids are ordered by their
    /// smallest member.
    pub assignment: Vec<usize>,
    pub feature_description: String,
}

impl ClusterAssignment {
    /// Members of each cluster, ascending, in cluster-id order.
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_clusters];
        for (&a, &c) in self.atoms.iter().zip(&self.assignment) {
            out[c].push(a);
        }
        out
    }

    fn canonical(atoms: Vec<usize>, raw: Vec<usize>, feature_description: &str) -> Self {
        // relabel by first appearance over ascending atoms
        let mut map: Vec<Option<usize>> = vec![None; raw.iter().copied().max().map_or(0, |m| m + 1)];
        let mut next = 0;
        let assignment = raw
            .iter()
            .map(|&r| {
                *map[r].get_or_insert_with(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect();
        ClusterAssignment { num_clusters: next, atoms, assignment, feature_description: feature_description.to_string() }
    }
}

const FEATURES: &str = "rows of |Phi_n^H Phi_n| (column-normalized absolute Gram) restricted to the clustered atoms";

/// Normalized absolute Gram `|phi_i^H phi_j| / (||phi_i|| ||phi_j||)`, row-major `G x G`.
fn coherence(problem: &SparseProblem) -> Vec<f64> {
    let g = problem.atoms();
    let norms = problem.column_norms();
    let mut out = vec![0.0; g * g];
    for i in 0..g {
        for j in i..g {
            let v = if norms[i] > 0.0 && norms[j] > 0.0 {
                dot_h(col(&problem.dictionary, i), col(&problem.dictionary, j)).norm() / (norms[i] * norms[j])
            } else {
                0.0
            };
            out[i * g + j] = v;
            out[j * g + i] = v;
        }
    }
    out
}

fn kmeans_on(coh: &[f64], g: usize, atoms: &[usize], d: usize, seed: u64) -> Result<ClusterAssignment> {
    let n = atoms.len();
    if d == 0 || d > n {
        return Err(FimError::invalid(format!("cluster count {d} must lie in 1..={n} (active atoms)")));
    }
    if d == 1 {
        return Ok(ClusterAssignment::canonical(atoms.to_vec(), vec![0; n], FEATURES));
    }
    if d == n {
        return Ok(ClusterAssignment::canonical(atoms.to_vec(), (0..n).collect(), FEATURES));
    }
    let feat = |i: usize, f: usize| coh[atoms[i] * g + atoms[f]];
    let dist = |i: usize, c: &[f64]| -> f64 { (0..n).map(|f| (feat(i, f) - c[f]).powi(2)).sum() };
    let mut rng = rng_from_seed(seed);
    // k-means++ seeding
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(d);
    let first = rng.random_range(0..n);
    centers.push((0..n).map(|f| feat(first, f)).collect());
    let mut best_d: Vec<f64> = (0..n).map(|i| dist(i, &centers[0])).collect();
    while centers.len() < d {
        let total: f64 = best_d.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, w) in best_d.iter().enumerate() {
                if u < *w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c: Vec<f64> = (0..n).map(|f| feat(pick, f)).collect();
        for (i, bd) in best_d.iter_mut().enumerate() {
            *bd = bd.min(dist(i, &c));
        }
        centers.push(c);
    }
    let mut assign = vec![usize::MAX; n];
    for _ in 0..100 {
        let mut changed = false;
        let mut dists = vec![0.0; n];
        for i in 0..n {
            let (mut bc, mut bd) = (0, f64::INFINITY);
            for (c, center) in centers.iter().enumerate() {
                let dd = dist(i, center);
                if dd < bd {
                    bc = c;
                    bd = dd;
                }
            }
            dists[i] = bd;
            if assign[i] != bc {
                assign[i] = bc;
                changed = true;
            }
        }
        // reseed empty clusters from the farthest point
        let mut counts = vec![0usize; d];
        assign.iter().for_each(|&c| counts[c] += 1);
        for c in 0..d {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|&i| counts[assign[i]] > 1)
                    .fold(None, |acc: Option<usize>, i| match acc {
                        Some(b) if dists[b] >= dists[i] => Some(b),
                        _ => Some(i),
                    })
                    .expect("some cluster has two members");
                counts[assign[far]] -= 1;
                assign[far] = c;
                counts[c] = 1;
                dists[far] = 0.0;
                changed = true;
            }
        }
        for (c, center) in centers.iter_mut().enumerate() {
            center.iter_mut().for_each(|v| *v = 0.0);
            for i in (0..n).filter(|&i| assign[i] == c) {
                for (f, v) in center.iter_mut().enumerate() {
                    *v += feat(i, f);
                }
            }
            center.iter_mut().for_each(|v| *v /= counts[c] as f64);
        }
        if !changed {
            break;
        }
    }
    Ok(ClusterAssignment::canonical(atoms.to_vec(), assign, FEATURES))
}

/// K-means partition of all atoms into `d` clusters.
pub fn kmeans_cluster(problem: &SparseProblem, d: usize, seed: u64) -> Result<ClusterAssignment> {
    let atoms: Vec<usize> = (0..problem.atoms()).collect();
    kmeans_on(&coherence(problem), problem.atoms(), &atoms, d, seed)
}

/// Per-iteration SBL solver state.
pub struct SblEngine<'p> {
    problem: &'p SparseProblem,
    hyper: SblHyperparams,
    variant: SblVariant,
    col_norm_sq: Vec<f64>,
    phi_h_y: Vec<Complex64>,
    full_gram: Vec<Complex64>,
    coherence: Vec<f64>,
    clusters: Vec<Vec<usize>>,
    cluster_grams: Vec<Vec<Complex64>>,
    clustered_active: Vec<bool>,
    mu: Vec<Complex64>,
    cov_diag: Vec<f64>,
    rho: Vec<f64>,
    noise_prec: f64,
    active: Vec<bool>,
    pruning: bool,
    iteration: usize,
    max_jitter: f64,
    last_change: f64,
}

impl<'p> SblEngine<'p> {
    pub fn new(problem: &'p SparseProblem, hyper: SblHyperparams, variant: SblVariant) -> Result<Self> {
        hyper.validate()?;
        let g = problem.atoms();
        if g == 0 || problem.rows() == 0 {
            return Err(FimError::invalid("empty sparse problem"));
        }
        let y_energy = norm_sqr(&problem.observation);
        let noise_prec = if y_energy > 0.0 { problem.rows() as f64 / y_energy } else { 1.0 };
        let rho = vec![1.0; g];
        let pruning = matches!(variant, SblVariant::Clustered { .. }) && hyper.pruning_enabled();
        let col_norm_sq = (0..g).map(|j| norm_sqr(col(&problem.dictionary, j))).collect();
        let all: Vec<usize> = (0..g).collect();
        let mut engine = SblEngine {
            problem,
            hyper,
            variant,
            col_norm_sq,
            phi_h_y: mat_h_vec(&problem.dictionary, &problem.observation),
            full_gram: if variant == SblVariant::Full { gram_block(&problem.dictionary, &all) } else { Vec::new() },
            coherence: Vec::new(),
            clusters: Vec::new(),
            cluster_grams: Vec::new(),
            clustered_active: vec![true; g],
            mu: vec![ZERO; g],
            cov_diag: vec![0.0; g],
            rho,
            noise_prec,
            active: vec![true; g],
            pruning,
            iteration: 0,
            max_jitter: 0.0,
            last_change: f64::INFINITY,
        };
        if let SblVariant::Clustered { clusters, .. } = variant {
            if clusters == Some(0) || clusters.is_some_and(|d| d > g) {
                return Err(FimError::invalid(format!("cluster count must lie in 1..={g}")));
            }
            if !matches!(clusters, Some(1)) && clusters != Some(g) {
                engine.coherence = coherence(problem);
            }
            engine.recluster()?;
        }
        Ok(engine)
    }

    pub fn mean(&self) -> &[Complex64] {
        &self.mu
    }

    pub fn cov_diag(&self) -> &[f64] {
        &self.cov_diag
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn noise_precision(&self) -> f64 {
        self.noise_prec
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn clusters(&self) -> &[Vec<usize>] {
        &self.clusters
    }

    /// Current pruning threshold for atom `i` (infinite when pruning is off).
    pub fn prune_threshold(&self, i: usize) -> f64 {
        if !self.pruning {
            return f64::INFINITY;
        }
        match self.hyper.prune_threshold_rho {
            Some(t) => t,
            None => self.hyper.prune_ratio * self.noise_prec * self.col_norm_sq[i],
        }
    }

    fn active_atoms(&self) -> Vec<usize> {
        (0..self.active.len()).filter(|&i| self.active[i]).collect()
    }

    fn recluster(&mut self) -> Result<()> {
        let SblVariant::Clustered { clusters, seed } = self.variant else { return Ok(()) };
        let atoms = self.active_atoms();
        if atoms.is_empty() {
            self.clusters.clear();
            self.cluster_grams.clear();
            return Ok(());
        }
        let d = clusters.unwrap_or_else(|| ((atoms.len() as f64).sqrt().round() as usize).max(1)).min(atoms.len());
        let parts = if d == 1 {
            vec![atoms.clone()]
        } else if d == atoms.len() {
            atoms.iter().map(|&a| vec![a]).collect()
        } else {
            kmeans_on(&self.coherence, self.problem.atoms(), &atoms, d, seed)?.clusters()
        };
        self.set_clusters(parts);
        self.clustered_active = self.active.clone();
        Ok(())
    }

    fn set_clusters(&mut self, parts: Vec<Vec<usize>>) {
        self.cluster_grams = parts.iter().map(|c| gram_block(&self.problem.dictionary, c)).collect();
        self.clusters = parts;
    }

    fn residual(&self) -> Vec<Complex64> {
        let mut r = self.problem.observation.clone();
        for (j, m) in self.mu.iter().enumerate() {
            if *m != ZERO {
                axpy(-*m, col(&self.problem.dictionary, j), &mut r);
            }
        }
        r
    }

    /// One full iteration: coefficient posterior, then `rho`, then noise
    /// precision, then pruning. Returns the relative change of the mean.
    pub fn step(&mut self) -> Result<f64> {
        let mu_old = self.mu.clone();
        let phi = &self.problem.dictionary;
        let sigma = self.noise_prec;
        let trace = match self.variant {
            SblVariant::Full => {
                let bp = block_posterior(&self.full_gram, &self.rho, sigma, &self.phi_h_y)?;
                self.max_jitter = self.max_jitter.max(bp.jitter);
                self.mu = bp.mean;
                self.cov_diag = bp.cov_diag;
                bp.trace_gram_cov
            }
            SblVariant::MeanField => {
                let mut r = self.residual();
                let mut trace = 0.0;
                for i in 0..self.mu.len() {
                    let c = col(phi, i);
                    let s = 1.0 / (sigma * self.col_norm_sq[i] + self.rho[i]);
                    axpy(self.mu[i], c, &mut r);
                    let m = dot_h(c, &r) * (sigma * s);
                    axpy(-m, c, &mut r);
                    self.mu[i] = m;
                    self.cov_diag[i] = s;
                    trace += self.col_norm_sq[i] * s;
                }
                trace
            }
            SblVariant::Clustered { .. } => {
                let mut r = self.residual();
                let mut trace = 0.0;
                let n_active = self.active.iter().filter(|a| **a).count();
                for (members, gram) in self.clusters.iter().zip(&self.cluster_grams) {
                    let rk = if members.len() == n_active {
                        self.problem.observation.clone()
                    } else {
                        let mut rk = r.clone();
                        for &j in members {
                            axpy(self.mu[j], col(phi, j), &mut rk);
                        }
                        rk
                    };
                    let rhs: Vec<Complex64> = members.iter().map(|&j| dot_h(col(phi, j), &rk)).collect();
                    let rho_k: Vec<f64> = members.iter().map(|&j| self.rho[j]).collect();
                    let bp = block_posterior(gram, &rho_k, sigma, &rhs)?;
                    self.max_jitter = self.max_jitter.max(bp.jitter);
                    r = rk;
                    for (t, &j) in members.iter().enumerate() {
                        self.mu[j] = bp.mean[t];
                        self.cov_diag[j] = bp.cov_diag[t];
                        axpy(-bp.mean[t], col(phi, j), &mut r);
                    }
                    trace += bp.trace_gram_cov;
                }
                trace
            }
        };
        let h = self.hyper;
        for i in 0..self.rho.len() {
            if self.active[i] {
                self.rho[i] = (h.a + 0.5) / ((self.mu[i].norm_sqr() + self.cov_diag[i]) / 2.0 + h.b);
            }
        }
        let g = self.problem.atoms() as f64;
        let res = norm_sqr(&self.residual());
        self.noise_prec = (h.c + g / 2.0) / ((res + trace) / 2.0 + h.d);
        self.iteration += 1;

        if self.pruning {
            let mut pruned = false;
            for i in 0..self.rho.len() {
                // the direct path is always present, so its atom is never a pruning candidate
                if i != self.problem.grid.direct_index
                    && self.iteration > h.prune_after
                    && self.active[i]
                    && self.rho[i] > self.prune_threshold(i)
                {
                    self.active[i] = false;
                    self.mu[i] = ZERO;
                    self.cov_diag[i] = 0.0;
                    pruned = true;
                }
            }
            if pruned {
                let parts: Vec<Vec<usize>> = self
                    .clusters
                    .iter()
                    .map(|c| c.iter().copied().filter(|&j| self.active[j]).collect::<Vec<_>>())
                    .filter(|c| !c.is_empty())
                    .collect();
                self.set_clusters(parts);
            }
            if h.recluster_every > 0 && self.iteration.is_multiple_of(h.recluster_every) && self.active != self.clustered_active {
                self.recluster()?;
            }
        }

        let old = norm_sqr(&mu_old).sqrt();
        let diff = self.mu.iter().zip(&mu_old).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
        self.last_change = if old > 0.0 {
            diff / old
        } else if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        Ok(self.last_change)
    }

    pub fn run(mut self, label: &str) -> Result<RecoveryResult> {
        let start = Instant::now();
        let mut converged = false;
        while self.iteration < self.hyper.max_iterations {
            let change = self.step()?;
            if !self.active.iter().any(|a| *a) {
                break;
            }
            if change < self.hyper.tolerance {
                converged = true;
                break;
            }
        }
        let iterations = self.iteration;
        let pruned = self.active.iter().filter(|a| !**a).count();
        let mut result =
            RecoveryResult::from_coefficients(label, self.problem, self.mu, iterations, converged, start.elapsed().as_secs_f64());
        if pruned == result.xi_hat.len() {
            result.notes.push("all atoms pruned; empty model".into());
        } else if pruned > 0 {
            result.notes.push(format!("pruned {pruned} atoms"));
        }
        if self.max_jitter > 0.0 {
            result.notes.push(format!("posterior needed diagonal loading up to {:e}", self.max_jitter));
        }
        Ok(result)
    }
}

/// Joint-posterior variational SBL.
pub fn vsbl(problem: &SparseProblem, hyper: &SblHyperparams) -> Result<RecoveryResult> {
    SblEngine::new(problem, *hyper, SblVariant::Full)?.run("vsbl")
}

/// Mean-field variational SBL (scalar updates, no matrix inverse).
pub fn mfvsbl(problem: &SparseProblem, hyper: &SblHyperparams) -> Result<RecoveryResult> {
    SblEngine::new(problem, *hyper, SblVariant::MeanField)?.run("mfvsbl")
}

/// Clustered mean-field variational SBL with pruning.
pub fn cmfvsbl(problem: &SparseProblem, hyper: &SblHyperparams, clusters: Option<usize>, seed: u64) -> Result<RecoveryResult> {
    SblEngine::new(problem, *hyper, SblVariant::Clustered { clusters, seed })?.run("cmfvsbl")
}

/// Orthogonal matching pursuit with column-normalized selection and a
/// least-squares refit after each pick.
pub fn omp(problem: &SparseProblem, sparsity: usize) -> Result<RecoveryResult> {
    let start = Instant::now();
    let phi = &problem.dictionary;
    let norms = problem.column_norms();
    let y = &problem.observation;
    let y_norm = norm_sqr(y).sqrt();
    let mut support: Vec<usize> = Vec::new();
    let mut coef: Vec<Complex64> = Vec::new();
    let mut r = y.clone();
    let mut loaded = false;
    for _ in 0..sparsity.min(problem.atoms()) {
        if norm_sqr(&r).sqrt() <= 1e-13 * y_norm {
            break;
        }
        let mut best: Option<(usize, f64)> = None;
        for j in 0..problem.atoms() {
            if norms[j] == 0.0 || support.contains(&j) {
                continue;
            }
            let score = dot_h(col(phi, j), &r).norm() / norms[j];
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((j, score));
            }
        }
        let Some((j, _)) = best else { break };
        support.push(j);
        let (c, l) = least_squares_subset(phi, &support, y)?;
        loaded |= l;
        coef = c;
        r = y.clone();
        for (c, &s) in coef.iter().zip(&support) {
            axpy(-*c, col(phi, s), &mut r);
        }
    }
    let mut xi = vec![ZERO; problem.atoms()];
    for (c, &s) in coef.iter().zip(&support) {
        xi[s] = *c;
    }
    let iterations = support.len();
    let mut result = RecoveryResult::from_coefficients("omp", problem, xi, iterations, true, start.elapsed().as_secs_f64());
    if loaded {
        result.notes.push("rank-deficient support; regularized least squares used".into());
    }
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FistaOptions {
    /// Absolute regularization weight; `None` uses
    /// `lambda_ratio * ||Phi_n^H y||_inf`.
    pub lambda: Option<f64>,
    pub lambda_ratio: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    /// Run on unit-norm columns and rescale the result.
    pub normalize: bool,
}

impl Default for FistaOptions {
    fn default() -> Self {
        FistaOptions { lambda: None, lambda_ratio: 0.05, max_iterations: 400, tolerance: 1e-8, normalize: true }
    }
}

fn soft_threshold(v: Complex64, t: f64) -> Complex64 {
    let n = v.norm();
    if n <= t {
        ZERO
    } else {
        v * ((n - t) / n)
    }
}

/// Objective history of a FISTA run (non-increasing by construction).
#[derive(Debug, Clone, PartialEq)]
pub struct FistaTrace {
    pub objective: Vec<f64>,
    pub restarts: usize,
    pub lambda: f64,
}

/// Accelerated proximal gradient on `1/2 ||y - Phi xi||^2 + lambda ||xi||_1`
/// with step `1/||Phi||_2^2` and a monotone restart safeguard.
pub fn fista_traced(problem: &SparseProblem, opts: &FistaOptions) -> Result<(RecoveryResult, FistaTrace)> {
    let start = Instant::now();
    let g = problem.atoms();
    let scale: Vec<f64> = if opts.normalize {
        problem.column_norms().iter().map(|n| if *n > 0.0 { 1.0 / n } else { 0.0 }).collect()
    } else {
        vec![1.0; g]
    };
    let a = problem.dictionary.clone() * nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        g,
        scale.iter().map(|s| Complex64::new(*s, 0.0)),
    ));
    let y = &problem.observation;
    let aty = mat_h_vec(&a, y);
    let lambda = match opts.lambda {
        Some(l) => l,
        None => opts.lambda_ratio * aty.iter().map(|v| v.norm()).fold(0.0, f64::max),
    };
    if !(lambda > 0.0) {
        return Err(FimError::invalid("FISTA needs lambda > 0"));
    }
    let lip = spectral_norm_sqr(&a, 100) * (1.0 + 1e-6);
    if lip == 0.0 {
        let r = RecoveryResult::from_coefficients("fista", problem, vec![ZERO; g], 0, true, 0.0);
        return Ok((r, FistaTrace { objective: vec![], restarts: 0, lambda }));
    }
    let step = 1.0 / lip;
    let objective = |z: &[Complex64]| -> f64 {
        let mut r = y.clone();
        for (j, v) in z.iter().enumerate() {
            if *v != ZERO {
                axpy(-*v, col(&a, j), &mut r);
            }
        }
        0.5 * norm_sqr(&r) + lambda * z.iter().map(|v| v.norm()).sum::<f64>()
    };
    let prox_step = |w: &[Complex64]| -> Vec<Complex64> {
        let mut r = y.clone();
        for (j, v) in w.iter().enumerate() {
            if *v != ZERO {
                axpy(-*v, col(&a, j), &mut r);
            }
        }
        let grad = mat_h_vec(&a, &r);
        w.iter().zip(&grad).map(|(wi, gi)| soft_threshold(wi + gi * step, lambda * step)).collect()
    };
    let mut z = vec![ZERO; g];
    let mut w = z.clone();
    let mut t = 1.0f64;
    let mut f = objective(&z);
    let mut history = vec![f];
    let mut restarts = 0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        iterations += 1;
        let mut cand = prox_step(&w);
        let mut fc = objective(&cand);
        let mut t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        if fc > f {
            restarts += 1;
            cand = prox_step(&z);
            fc = objective(&cand);
            t_next = 1.0;
            if fc > f {
                // a plain proximal step cannot increase the objective beyond rounding
                cand = z.clone();
                fc = f;
            }
        }
        let diff: f64 = cand.iter().zip(&z).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
        let zn = norm_sqr(&z).sqrt();
        let momentum = (t - 1.0) / t_next;
        w = cand.iter().zip(&z).map(|(c, o)| c + (c - o) * momentum).collect();
        z = cand;
        t = t_next;
        f = fc;
        history.push(f);
        if (zn > 0.0 && diff / zn < opts.tolerance) || (zn == 0.0 && diff == 0.0) {
            converged = true;
            break;
        }
    }
    let xi: Vec<Complex64> = z.iter().zip(&scale).map(|(v, s)| v * *s).collect();
    let result = RecoveryResult::from_coefficients("fista", problem, xi, iterations, converged, start.elapsed().as_secs_f64());
    Ok((result, FistaTrace { objective: history, restarts, lambda }))
}

pub fn fista(problem: &SparseProblem, opts: &FistaOptions) -> Result<RecoveryResult> {
    Ok(fista_traced(problem, opts)?.0)
}

/// Least-squares refit on the support of `result`.
pub fn debias(problem: &SparseProblem, result: &RecoveryResult) -> Result<RecoveryResult> {
    let start = Instant::now();
    let (coef, loaded) = least_squares_subset(&problem.dictionary, &result.support, &problem.observation)?;
    let mut xi = vec![ZERO; problem.atoms()];
    for (c, &s) in coef.iter().zip(&result.support) {
        xi[s] = *c;
    }
    let label = format!("{}_debiased", result.algorithm);
    let mut out = RecoveryResult::from_coefficients(
        &label,
        problem,
        xi,
        result.iterations,
        result.converged,
        result.wall_time + start.elapsed().as_secs_f64(),
    );
    out.notes = result.notes.clone();
    if loaded {
        out.notes.push("rank-deficient support; regularized least squares used".into());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Omp,
    Fista,
    Vsbl,
    Mfvsbl,
    Cmfvsbl,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [Algorithm::Omp, Algorithm::Fista, Algorithm::Vsbl, Algorithm::Mfvsbl, Algorithm::Cmfvsbl];

    pub fn label(&self) -> &'static str {
        match self {
            Algorithm::Omp => "omp",
            Algorithm::Fista => "fista",
            Algorithm::Vsbl => "vsbl",
            Algorithm::Mfvsbl => "mfvsbl",
            Algorithm::Cmfvsbl => "cmfvsbl",
        }
    }
}

impl FromStr for Algorithm {
    type Err = FimError;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.label() == s.to_ascii_lowercase())
            .ok_or_else(|| FimError::invalid(format!("unknown algorithm '{s}'")))
    }
}

/// Settings shared by every algorithm in [`recover`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecoverySettings {
    pub sbl: SblHyperparams,
    /// OMP iteration count.
    pub sparsity: usize,
    pub fista: FistaOptions,
    /// FISTA result is refit on its support.
    pub fista_debias: bool,
    pub clusters: Option<usize>,
    pub cluster_seed: u64,
}

impl Default for RecoverySettings {
    fn default() -> Self {
        RecoverySettings {
            sbl: SblHyperparams::default(),
            sparsity: 17,
            fista: FistaOptions::default(),
            fista_debias: false,
            clusters: None,
            cluster_seed: 0,
        }
    }
}

pub fn recover(problem: &SparseProblem, algorithm: Algorithm, settings: &RecoverySettings) -> Result<RecoveryResult> {
    match algorithm {
        Algorithm::Omp => omp(problem, settings.sparsity),
        Algorithm::Fista => {
            let r = fista(problem, &settings.fista)?;
            if settings.fista_debias {
                debias(problem, &r)
            } else {
                Ok(r)
            }
        }
        Algorithm::Vsbl => vsbl(problem, &settings.sbl),
        Algorithm::Mfvsbl => mfvsbl(problem, &settings.sbl),
        Algorithm::Cmfvsbl => cmfvsbl(problem, &settings.sbl, settings.clusters, settings.cluster_seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::{build_problem, build_schedule_multi, evaluate_nmse, sparse_truth, AngleGrid, PbfSource};
    use crate::linalg::CMatrix;
    use crate::model::{complex_gaussian, Aperture, ChannelSpec, NoiseModel, DEFAULT_WAVELENGTH};

    fn raw_problem(phi: CMatrix, y: Vec<Complex64>) -> SparseProblem {
        let g = phi.ncols();
        let mut angles = vec![(0.0, 0.0)];
        angles.extend((1..g).map(|i| (i as f64 * 1e-3, 0.5)));
        SparseProblem::new(phi, y, AngleGrid::from_pairs(angles).unwrap(), 0.0, 0, 1.0, vec![(0.0, 0.0)]).unwrap()
    }

    fn random_problem(m: usize, g: usize, seed: u64) -> SparseProblem {
        let mut rng = rng_from_seed(seed);
        let phi = CMatrix::from_fn(m, g, |_, _| complex_gaussian(&mut rng, 1.0));
        let mut xi = vec![ZERO; g];
        for _ in 0..6 {
            xi[rng.random_range(0..g)] = complex_gaussian(&mut rng, 1.0);
        }
        let mut y = crate::linalg::mat_vec(&phi, &xi);
        y.iter_mut().for_each(|v| *v += complex_gaussian(&mut rng, 0.01));
        raw_problem(phi, y)
    }

    fn fim_problem(seed: u64, snr_db: f64, q: usize) -> (SparseProblem, crate::model::ChannelRealization) {
        let lam = DEFAULT_WAVELENGTH;
        let s = build_schedule_multi(16, q, 9, Aperture::half_wavelength(lam, 3.0).unwrap(), PbfSource::Random, seed).unwrap();
        let grid = AngleGrid::virtual_grid(12, 12).unwrap();
        let ch = ChannelSpec::new(4, 4, 1.0, 1.0, 1.0).on_grid(12).sample_seeded(seed).unwrap();
        (build_problem(&s, &grid, &ch, NoiseModel::from_snr_db(snr_db), seed).unwrap(), ch)
    }

    #[test]
    fn zero_observation_keeps_mean_zero_and_rho_growing() {
        let p = raw_problem(CMatrix::identity(6, 6), vec![ZERO; 6]);
        for variant in [SblVariant::Full, SblVariant::MeanField, SblVariant::Clustered { clusters: Some(2), seed: 0 }] {
            let mut e = SblEngine::new(&p, SblHyperparams::default().without_pruning(), variant).unwrap();
            let mut prev = e.rho().to_vec();
            for _ in 0..10 {
                e.step().unwrap();
                assert!(e.mean().iter().all(|m| *m == ZERO));
                assert!(e.rho().iter().zip(&prev).all(|(a, b)| a > b));
                prev = e.rho().to_vec();
            }
        }
    }

    #[test]
    fn orthonormal_one_sparse_is_recovered() {
        let phi = CMatrix::identity(2, 2);
        let y = vec![ZERO, Complex64::new(0.7, -0.2)];
        let p = raw_problem(phi, y);
        for r in [vsbl(&p, &SblHyperparams::default()).unwrap(), mfvsbl(&p, &SblHyperparams::default()).unwrap()] {
            // residual shrinkage is rho/sigma with sigma ~ 1e5 at convergence
            assert!((r.xi_hat[1] - Complex64::new(0.7, -0.2)).norm() < 1e-4, "{:?}", r.xi_hat);
            assert!(r.xi_hat[0].norm() < 1e-6);
        }
        let r = omp(&p, 1).unwrap();
        assert_eq!(r.support, vec![1]);
        assert_eq!(r.iterations, 1);
        assert!((r.xi_hat[1] - Complex64::new(0.7, -0.2)).norm() < 1e-15);
        assert!(omp(&p, 0).unwrap().xi_hat.iter().all(|v| *v == ZERO));
    }

    #[test]
    fn deterministic_runs() {
        let p = random_problem(20, 50, 1);
        let h = SblHyperparams { max_iterations: 30, ..Default::default() };
        assert_eq!(vsbl(&p, &h).unwrap().xi_hat, vsbl(&p, &h).unwrap().xi_hat);
        assert_eq!(cmfvsbl(&p, &h, None, 3).unwrap().xi_hat, cmfvsbl(&p, &h, None, 3).unwrap().xi_hat);
    }

    #[test]
    fn orthogonal_dictionary_mean_field_matches_full() {
        let mut rng = rng_from_seed(2);
        let phi = CMatrix::identity(8, 8) * Complex64::new(1.5, 0.0);
        let y: Vec<Complex64> = (0..8).map(|i| if i % 3 == 0 { complex_gaussian(&mut rng, 1.0) } else { complex_gaussian(&mut rng, 1e-4) }).collect();
        let p = raw_problem(phi, y);
        let h = SblHyperparams::default();
        let a = vsbl(&p, &h).unwrap();
        let b = mfvsbl(&p, &h).unwrap();
        for (x, z) in a.xi_hat.iter().zip(&b.xi_hat) {
            assert!((x - z).norm() < 1e-6);
        }
    }

    #[test]
    fn single_atom_variants_agree() {
        let phi = CMatrix::from_fn(5, 1, |r, _| Complex64::new(r as f64 + 1.0, 0.5));
        let y: Vec<Complex64> = (0..5).map(|r| Complex64::new(0.3 * (r as f64 + 1.0), 0.2)).collect();
        let p = raw_problem(phi, y);
        let h = SblHyperparams { max_iterations: 40, ..Default::default() };
        let a = vsbl(&p, &h).unwrap();
        let b = mfvsbl(&p, &h).unwrap();
        assert!((a.xi_hat[0] - b.xi_hat[0]).norm() < 1e-12);
    }

    #[test]
    fn rho_update_matches_formula() {
        let p = random_problem(15, 30, 4);
        let mut e = SblEngine::new(&p, SblHyperparams::default(), SblVariant::Full).unwrap();
        for _ in 0..3 {
            e.step().unwrap();
            for i in 0..30 {
                let want = (1e-6 + 0.5) / ((e.mean()[i].norm_sqr() + e.cov_diag()[i]) / 2.0 + 1e-6);
                assert!((e.rho()[i] - want).abs() <= 1e-12 * want);
                assert!(e.cov_diag()[i] > 0.0);
            }
            assert!(e.noise_precision() > 0.0);
        }
    }

    fn iterates_match(p: &SparseProblem, a: SblVariant, b: SblVariant) -> f64 {
        let h = SblHyperparams::default().without_pruning();
        let mut ea = SblEngine::new(p, h, a).unwrap();
        let mut eb = SblEngine::new(p, h, b).unwrap();
        let mut worst = 0.0f64;
        for _ in 0..50 {
            ea.step().unwrap();
            eb.step().unwrap();
            for (x, z) in ea.mean().iter().zip(eb.mean()) {
                worst = worst.max((x - z).norm());
            }
        }
        worst
    }

    #[test]
    fn clustered_reduces_to_full_and_mean_field() {
        for seed in 0..3 {
            let p = random_problem(40, 120, seed);
            assert!(iterates_match(&p, SblVariant::Full, SblVariant::Clustered { clusters: Some(1), seed }) < 1e-8);
            assert!(iterates_match(&p, SblVariant::MeanField, SblVariant::Clustered { clusters: Some(120), seed }) < 1e-8);
        }
    }

    #[test]
    fn kmeans_trivial_and_block_cases() {
        let p = random_problem(10, 12, 0);
        let all = kmeans_cluster(&p, 12, 0).unwrap();
        assert!(all.clusters().iter().all(|c| c.len() == 1));
        let one = kmeans_cluster(&p, 1, 0).unwrap();
        assert_eq!(one.clusters(), vec![(0..12).collect::<Vec<_>>()]);
        assert!(kmeans_cluster(&p, 13, 0).is_err());

        // two coherent groups living on disjoint rows
        let mut rng = rng_from_seed(1);
        let base_a: Vec<Complex64> = (0..5).map(|_| complex_gaussian(&mut rng, 1.0)).collect();
        let base_b: Vec<Complex64> = (0..5).map(|_| complex_gaussian(&mut rng, 1.0)).collect();
        let groups = [0, 1, 0, 1, 1, 0, 0, 1];
        let phi = CMatrix::from_fn(10, 8, |r, c| {
            let noise = complex_gaussian(&mut rng, 0.01);
            match (groups[c], r < 5) {
                (0, true) => base_a[r] + noise,
                (1, false) => base_b[r - 5] + noise,
                _ => ZERO,
            }
        });
        let p = raw_problem(phi, vec![ZERO; 10]);
        let c = kmeans_cluster(&p, 2, 7).unwrap();
        let want: Vec<Vec<usize>> = vec![vec![0, 2, 5, 6], vec![1, 3, 4, 7]];
        assert_eq!(c.clusters(), want);
    }

    #[test]
    fn fista_zero_and_orthogonal_lasso() {
        let mut rng = rng_from_seed(3);
        let phi = CMatrix::identity(6, 6);
        let y: Vec<Complex64> = (0..6).map(|_| complex_gaussian(&mut rng, 1.0)).collect();
        let p = raw_problem(phi, y.clone());
        let big = y.iter().map(|v| v.norm()).fold(0.0, f64::max);
        let opts = FistaOptions { lambda: Some(big), normalize: false, ..Default::default() };
        assert!(fista(&p, &opts).unwrap().xi_hat.iter().all(|v| *v == ZERO));
        let lam = 0.4;
        let opts = FistaOptions { lambda: Some(lam), normalize: false, tolerance: 1e-14, max_iterations: 2000, ..Default::default() };
        let (r, trace) = fista_traced(&p, &opts).unwrap();
        for (x, v) in r.xi_hat.iter().zip(&y) {
            assert!((x - soft_threshold(*v, lam)).norm() < 1e-8);
        }
        for w in trace.objective.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn fista_objective_monotone_on_coherent_problem() {
        let p = random_problem(20, 60, 9);
        let (_, trace) = fista_traced(&p, &FistaOptions { max_iterations: 300, ..Default::default() }).unwrap();
        for w in trace.objective.windows(2) {
            assert!(w[1] <= w[0] + 1e-12 * w[0].abs());
        }
    }

    #[test]
    fn noiseless_fim_problem_is_recovered() {
        let (p, ch) = fim_problem(11, f64::INFINITY, 16);
        let truth = sparse_truth(&ch, &p.grid).unwrap();
        let k = truth.iter().filter(|v| v.norm() > 0.0).count();
        let settings = RecoverySettings { sparsity: k, fista_debias: true, ..Default::default() };
        for alg in Algorithm::ALL {
            let r = recover(&p, alg, &settings).unwrap();
            let n = evaluate_nmse(&r, &ch, &p).unwrap();
            let limit = if alg == Algorithm::Fista { 1e-4 } else { 1e-6 };
            assert!(n.cascaded < limit && n.direct < limit, "{alg:?}: {n:?}");
        }
    }

    #[test]
    fn pruning_spares_true_atoms() {
        for seed in 0..5 {
            let (p, ch) = fim_problem(seed, f64::INFINITY, 16);
            let truth = sparse_truth(&ch, &p.grid).unwrap();
            let mut e = SblEngine::new(&p, SblHyperparams::default(), SblVariant::Clustered { clusters: None, seed }).unwrap();
            let mut steps = 0;
            while steps < 400 && e.step().unwrap() >= 1e-8 {
                steps += 1;
            }
            for (i, t) in truth.iter().enumerate() {
                if t.norm() > 0.0 {
                    assert!(e.active()[i], "seed {seed}: true atom {i} pruned");
                }
            }
        }
    }

    #[test]
    fn recovery_result_json_has_pairs() {
        let p = random_problem(10, 20, 2);
        let r = omp(&p, 3).unwrap();
        let js = r.to_json();
        let v: serde_json::Value = serde_json::from_str(&js).unwrap();
        assert!(v["xi_hat"][0].is_array());
        assert_eq!(v["xi_hat"][0].as_array().unwrap().len(), 2);
        let back: RecoveryResult = serde_json::from_str(&js).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn algorithm_names_parse() {
        for a in Algorithm::ALL {
            assert_eq!(a.label().parse::<Algorithm>().unwrap(), a);
        }
        assert!("bogus".parse::<Algorithm>().is_err());
    }
}
