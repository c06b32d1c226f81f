//! Least-squares Monte-Carlo solver for the adjoint equations.
//!
//! The adjoints `p_q` and `p_V` are approximated backward in time by ridge
//! regression of one-step targets on basis functions of the current state,
//! separately within bundles of paths sorted by inflow. A relaxed Picard
//! loop alternates these backward sweeps with forward simulation under the
//! control they induce.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use crate::dynamics::{
    admissible_range, env_penalty, simulate_controlled, ControlledEnsemble, InitialControl, ObjectiveSpec, Policy,
    ReservoirSpec, StateTriple,
};
use crate::error::{ensure, Error, Result};
use crate::jump_process::{simulate_inflow_paths, InflowEnsemble, InflowModel};

/// Largest basis size.
pub const MAX_FEATURES: usize = 7;

/// Relative spread below which a feature column is treated as constant.
const CONSTANT_COLUMN_TOL: f64 = 1e-10;

/// Residuals beyond this are treated as divergence.
const DIVERGENCE_LIMIT: f64 = 1e100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum BasisId {
    /// `1, Q, q, V`
    Lq,
    /// `Lq` and `max(q_env - q, 0)`
    Nlq1,
    /// `Nlq1`, `Q max(q_env - q, 0)` and `V max(q_env - q, 0)`
    Nlq2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisSet {
    pub id: BasisId,
    pub q_env: f64,
}

impl BasisSet {
    pub fn new(id: BasisId, q_env: f64) -> Self {
        Self { id, q_env }
    }

    pub fn len(&self) -> usize {
        match self.id {
            BasisId::Lq => 4,
            BasisId::Nlq1 => 5,
            BasisId::Nlq2 => 7,
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Writes the features of `s` into `out` and returns their count.
    #[inline]
    pub fn fill(&self, s: &StateTriple, out: &mut [f64; MAX_FEATURES]) -> usize {
        out[0] = 1.0;
        out[1] = s.inflow;
        out[2] = s.outflow;
        out[3] = s.volume;
        if self.id == BasisId::Lq {
            return 4;
        }
        let hinge = (self.q_env - s.outflow).max(0.0);
        out[4] = hinge;
        if self.id == BasisId::Nlq1 {
            return 5;
        }
        out[5] = s.inflow * hinge;
        out[6] = s.volume * hinge;
        7
    }

    #[inline]
    fn dot(&self, coef: &[f64], s: &StateTriple) -> f64 {
        let mut phi = [0.0; MAX_FEATURES];
        let k = self.fill(s, &mut phi);
        coef[..k].iter().zip(&phi[..k]).map(|(c, f)| c * f).sum()
    }
}

/// Feature vector of `state`.
pub fn eval_basis(basis: &BasisSet, state: &StateTriple) -> Vec<f64> {
    let mut phi = [0.0; MAX_FEATURES];
    let k = basis.fill(state, &mut phi);
    phi[..k].to_vec()
}

/// Paths sorted by a rank statistic and cut into equal consecutive groups.
#[derive(Debug, Clone, PartialEq)]
pub struct BundlePartition {
    /// Cell boundaries, ascending, one fewer than the bundle count.
    pub boundaries: Vec<f64>,
    order: Vec<u32>,
    bundle_size: usize,
}

impl BundlePartition {
    pub fn bundle_count(&self) -> usize {
        self.boundaries.len() + 1
    }

    /// Path indices of bundle `k`, in ascending rank order.
    pub fn members(&self, k: usize) -> &[u32] {
        &self.order[k * self.bundle_size..(k + 1) * self.bundle_size]
    }
}

/// Sorts paths by `psi` (ties by path index) and splits them into `bundles`
/// groups of equal size. Boundaries are midpoints of adjacent group edges.
pub fn build_bundles(psi: &[f64], bundles: usize) -> Result<BundlePartition> {
    let paths = psi.len();
    if bundles == 0 || paths == 0 || paths % bundles != 0 {
        return Err(Error::IndivisibleEnsemble { paths, bundles });
    }
    let mut order: Vec<u32> = (0..paths as u32).collect();
    order.sort_by(|&x, &y| psi[x as usize].total_cmp(&psi[y as usize]));
    let size = paths / bundles;
    let boundaries = (1..bundles)
        .map(|k| {
            let lo = psi[order[k * size - 1] as usize];
            let hi = psi[order[k * size] as usize];
            0.5 * (lo + hi)
        })
        .collect();
    Ok(BundlePartition { boundaries, order, bundle_size: size })
}

/// Index of the right-closed cell containing `psi`.
#[inline]
pub fn locate_bundle(boundaries: &[f64], psi: f64) -> usize {
    boundaries.partition_point(|&b| b < psi)
}

/// Partitions on `psi = Q` for steps `0..n`, with a single bundle at `t_0`.
pub fn inflow_partitions(inflow: &InflowEnsemble, bundles: usize) -> Result<Vec<BundlePartition>> {
    (0..inflow.steps)
        .into_par_iter()
        .map(|i| build_bundles(inflow.at_step(i), if i == 0 { 1 } else { bundles }))
        .collect()
}

/// Preconditioned conjugate gradient for `(X'X + lambda I) beta = X'y` given
/// the Gram matrix `xtx` (row-major `k x k`) and `xty`. The preconditioner is
/// a Cholesky factor of the diagonally scaled system, falling back to the
/// diagonal alone when the factorization breaks down. Stops when the
/// recurrence residual falls below `1e-12` relative to `X'y`; at most `10 k`
/// iterations.
pub fn ridge_solve(xtx: &[f64], xty: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let k = xty.len();
    ensure(lambda >= 0.0, "lambda", || format!("must be >= 0, got {lambda}"))?;
    ensure(xtx.len() == k * k, "xtx", || "Gram matrix shape mismatch".into())?;
    let tol = 1e-12;
    let cap = 10 * k;
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    let b_norm = norm(xty);
    let mut x = vec![0.0; k];
    if b_norm == 0.0 {
        return Ok(x);
    }
    if !b_norm.is_finite() || xtx.iter().any(|v| !v.is_finite()) {
        return Err(Error::CgStalled { residual: f64::NAN, iterations: 0 });
    }
    let precond = Preconditioner::new(xtx, lambda, k);

    let mut r = xty.to_vec();
    let mut z = precond.apply(&r);
    let mut p = z.clone();
    let mut ap = vec![0.0; k];
    let mut rz = dot(&r, &z);
    let mut residual = 1.0;
    for iteration in 1..=cap {
        for row in 0..k {
            ap[row] = lambda * p[row] + (0..k).map(|c| xtx[row * k + c] * p[c]).sum::<f64>();
        }
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::CgStalled { residual, iterations: iteration });
        }
        let alpha = rz / pap;
        for j in 0..k {
            x[j] += alpha * p[j];
            r[j] -= alpha * ap[j];
        }
        residual = norm(&r) / b_norm;
        if residual <= tol {
            return Ok(x);
        }
        z = precond.apply(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for j in 0..k {
            p[j] = z[j] + beta * p[j];
        }
    }
    Err(Error::CgStalled { residual, iterations: cap })
}

/// Diagonal scaling followed by an optional Cholesky factor of the scaled matrix.
struct Preconditioner {
    scale: Vec<f64>,
    chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
}

impl Preconditioner {
    fn new(xtx: &[f64], lambda: f64, k: usize) -> Self {
        let scale: Vec<f64> = (0..k)
            .map(|r| {
                let d = xtx[r * k + r] + lambda;
                if d > 0.0 {
                    d.sqrt().recip()
                } else {
                    1.0
                }
            })
            .collect();
        let scaled = nalgebra::DMatrix::from_fn(k, k, |r, c| {
            let v = xtx[r * k + c] + if r == c { lambda } else { 0.0 };
            v * scale[r] * scale[c]
        });
        let chol = nalgebra::Cholesky::new(scaled).filter(|ch| {
            let l = ch.l_dirty();
            (0..k).all(|i| l[(i, i)].is_finite() && l[(i, i)] > 0.0)
        });
        Self { scale, chol }
    }

    fn apply(&self, r: &[f64]) -> Vec<f64> {
        let scaled = nalgebra::DVector::from_iterator(r.len(), r.iter().zip(&self.scale).map(|(v, s)| v * s));
        let solved = match &self.chol {
            Some(ch) => ch.solve(&scaled),
            None => scaled,
        };
        solved.iter().zip(&self.scale).map(|(v, s)| v * s).collect()
    }
}

/// Ridge regression of `targets` on the rows of `features` (`S x K`). A
/// leading all-ones column is treated as an intercept and handled by
/// [`intercept_ridge`].
pub fn ridge_regress(features: &[Vec<f64>], targets: &[f64], lambda: f64) -> Result<Vec<f64>> {
    ensure(features.len() == targets.len(), "targets", || "one target per feature row is required".into())?;
    let k = features.first().map_or(0, |r| r.len());
    ensure(features.iter().all(|r| r.len() == k), "features", || "ragged feature matrix".into())?;
    if k > 0 && k <= MAX_FEATURES && features.iter().all(|r| r[0] == 1.0) {
        let rows: Vec<[f64; MAX_FEATURES]> = features
            .iter()
            .map(|r| {
                let mut row = [0.0; MAX_FEATURES];
                row[..k].copy_from_slice(r);
                row
            })
            .collect();
        return Ok(intercept_ridge(&rows, k, &[targets], lambda)?.remove(0));
    }
    let mut xtx = vec![0.0; k * k];
    let mut xty = vec![0.0; k];
    for (row, &y) in features.iter().zip(targets) {
        for r in 0..k {
            xty[r] += row[r] * y;
            for c in 0..k {
                xtx[r * k + c] += row[r] * row[c];
            }
        }
    }
    ridge_solve(&xtx, &xty, lambda)
}

/// Ridge regression with an intercept in column 0 for several target vectors
/// sharing the same rows. Features are centered and scaled to unit norm (the
/// intercept column to `1 / sqrt(S)`) and the penalty `lambda |gamma|^2` acts
/// on the coefficients of these standardized columns, so `lambda` is measured
/// against a unit-diagonal Gram matrix whatever the raw feature magnitudes.
/// Coefficients are returned for the raw features.
pub fn intercept_ridge(
    rows: &[[f64; MAX_FEATURES]],
    k: usize,
    targets: &[&[f64]],
    lambda: f64,
) -> Result<Vec<Vec<f64>>> {
    ensure(lambda >= 0.0, "lambda", || format!("must be >= 0, got {lambda}"))?;
    ensure((1..=MAX_FEATURES).contains(&k), "k", || format!("must be in 1..={MAX_FEATURES}"))?;
    ensure(targets.iter().all(|t| t.len() == rows.len()), "targets", || {
        "one target per feature row is required".into()
    })?;
    ensure(!rows.is_empty(), "rows", || "at least one row is required".into())?;
    let count = rows.len() as f64;
    let mut mean = [0.0; MAX_FEATURES];
    for row in rows {
        for j in 1..k {
            mean[j] += row[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut cov = vec![0.0; k * k];
    for row in rows {
        for r in 1..k {
            let dr = row[r] - mean[r];
            for c in r..k {
                cov[r * k + c] += dr * (row[c] - mean[c]);
            }
        }
    }
    // A column whose spread is at rounding level relative to its mean is
    // constant and carries no information beyond the intercept.
    let live: Vec<bool> = (0..k)
        .map(|j| {
            j == 0 || {
                let sd = (cov[j * k + j] / count).sqrt();
                sd.is_finite() && sd > CONSTANT_COLUMN_TOL * mean[j].abs()
            }
        })
        .collect();
    let scale: Vec<f64> = (0..k)
        .map(|j| {
            let d = if j == 0 { count } else { cov[j * k + j] }.sqrt();
            if live[j] && d > 0.0 && d.is_finite() {
                d
            } else {
                1.0
            }
        })
        .collect();
    let mut gram = vec![0.0; k * k];
    gram[0] = count / (scale[0] * scale[0]);
    for r in 1..k {
        for c in r..k {
            if !(live[r] && live[c]) {
                continue;
            }
            let v = cov[r * k + c] / (scale[r] * scale[c]);
            gram[r * k + c] = v;
            gram[c * k + r] = v;
        }
    }
    targets
        .iter()
        .map(|y| {
            let mut rhs = vec![0.0; k];
            for (row, &yv) in rows.iter().zip(y.iter()) {
                rhs[0] += yv;
                for j in 1..k {
                    rhs[j] += (row[j] - mean[j]) * yv;
                }
            }
            for j in 0..k {
                rhs[j] = if live[j] { rhs[j] / scale[j] } else { 0.0 };
            }
            let gamma = ridge_solve(&gram, &rhs, lambda)?;
            let mut beta: Vec<f64> = (0..k).map(|j| gamma[j] / scale[j]).collect();
            beta[0] -= (1..k).map(|j| mean[j] * beta[j]).sum::<f64>();
            Ok(beta)
        })
        .collect()
}

/// Per-bundle coefficients of `p_q` and `p_V` at one time node.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSurface {
    pub boundaries: Vec<f64>,
    /// Row-major `bundles x K`.
    pub coef_q: Vec<f64>,
    pub coef_v: Vec<f64>,
}

impl StepSurface {
    fn zero(k: usize) -> Self {
        Self { boundaries: Vec::new(), coef_q: vec![0.0; k], coef_v: vec![0.0; k] }
    }

    pub fn bundle_count(&self) -> usize {
        self.boundaries.len() + 1
    }
}

/// Regression approximation of the adjoints on every grid node; the last
/// node carries the zero terminal data.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionSurface {
    pub basis: BasisSet,
    pub lambda: f64,
    pub h: f64,
    pub steps: Vec<StepSurface>,
}

impl RegressionSurface {
    pub fn zero(basis: BasisSet, lambda: f64, h: f64, n: usize) -> Self {
        Self { basis, lambda, h, steps: (0..=n).map(|_| StepSurface::zero(basis.len())).collect() }
    }

    /// `(p_q, p_V)` at node `i`.
    pub fn predict(&self, i: usize, s: &StateTriple) -> (f64, f64) {
        let step = &self.steps[i];
        let k = self.basis.len();
        let b = locate_bundle(&step.boundaries, s.inflow);
        (self.basis.dot(&step.coef_q[b * k..(b + 1) * k], s), self.basis.dot(&step.coef_v[b * k..(b + 1) * k], s))
    }

    /// Coefficient of feature `feature` in `p_q` for bundle `bundle` at every node.
    pub fn q_coefficient_series(&self, feature: usize, bundle: usize) -> Vec<f64> {
        let k = self.basis.len();
        self.steps.iter().map(|s| s.coef_q[bundle.min(s.bundle_count() - 1) * k + feature]).collect()
    }

    /// CSV: `step,bundle,boundary_lo,boundary_hi,q_0..,v_0..`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let k = self.basis.len();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["step".to_string(), "bundle".into(), "boundary_lo".into(), "boundary_hi".into()];
        header.extend((0..k).map(|j| format!("q_{j}")));
        header.extend((0..k).map(|j| format!("v_{j}")));
        w.write_record(&header)?;
        for (i, step) in self.steps.iter().enumerate() {
            for b in 0..step.bundle_count() {
                let lo = if b == 0 { f64::NEG_INFINITY } else { step.boundaries[b - 1] };
                let hi = step.boundaries.get(b).copied().unwrap_or(f64::INFINITY);
                let mut row = vec![i.to_string(), b.to_string(), crate::format_float(lo), crate::format_float(hi)];
                row.extend(step.coef_q[b * k..(b + 1) * k].iter().map(|&c| crate::format_float(c)));
                row.extend(step.coef_v[b * k..(b + 1) * k].iter().map(|&c| crate::format_float(c)));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Backward sweep over a simulated ensemble. At node `i` the targets
///
/// ```text
/// y_V = (p_V[i+1](X[i+1]) - w2 (V - V̂) h) / (1 + delta h)
/// y_q = (p_q[i+1](X[i+1]) - (w1 (q - Q) + j'(q)) h - h y_V) / (1 + delta h)
/// ```
///
/// are regressed on features of `X[i]` within each bundle of `partitions[i]`.
pub fn backward_pass(
    ens: &ControlledEnsemble,
    obj: &ObjectiveSpec,
    v_max: f64,
    basis: &BasisSet,
    lambda: f64,
    partitions: &[BundlePartition],
) -> Result<RegressionSurface> {
    let n = ens.steps;
    let h = ens.h;
    ensure(partitions.len() >= n, "partitions", || format!("need {n} step partitions, got {}", partitions.len()))?;
    let k = basis.len();
    let disc = 1.0 / (1.0 + obj.delta * h);
    let mut surface = RegressionSurface::zero(*basis, lambda, h, n);
    let mut y_q = vec![0.0; ens.paths];
    let mut y_v = vec![0.0; ens.paths];

    for i in (0..n).rev() {
        let target = obj.target_at(ens.time(i), v_max);
        {
            let next = &surface.steps[i + 1];
            (&mut y_q[..], &mut y_v[..]).into_par_iter().enumerate().for_each(|(p, (yq, yv))| {
                let s = ens.state(p, i);
                let s1 = ens.state(p, i + 1);
                let b = locate_bundle(&next.boundaries, s1.inflow);
                let pq1 = basis.dot(&next.coef_q[b * k..(b + 1) * k], &s1);
                let pv1 = basis.dot(&next.coef_v[b * k..(b + 1) * k], &s1);
                let v_part = pv1 - obj.w2 * (s.volume - target) * h;
                let (_, dj) = env_penalty(s.outflow, obj.w4, obj.q_env);
                *yv = disc * v_part;
                *yq = disc * (pq1 - (obj.w1 * (s.outflow - s.inflow) + dj) * h - h * disc * v_part);
            });
        }

        let part = &partitions[i];
        let fits: Vec<(Vec<f64>, Vec<f64>)> = (0..part.bundle_count())
            .into_par_iter()
            .map(|b| {
                let members = part.members(b);
                let mut rows = vec![[0.0; MAX_FEATURES]; members.len()];
                let mut tq = Vec::with_capacity(members.len());
                let mut tv = Vec::with_capacity(members.len());
                for (row, &p) in rows.iter_mut().zip(members) {
                    let p = p as usize;
                    basis.fill(&ens.state(p, i), row);
                    tq.push(y_q[p]);
                    tv.push(y_v[p]);
                }
                let mut fit = intercept_ridge(&rows, k, &[&tq, &tv], lambda)?;
                let v = fit.pop().unwrap_or_default();
                let q = fit.pop().unwrap_or_default();
                Ok((q, v))
            })
            .collect::<Result<_>>()?;

        let step = &mut surface.steps[i];
        step.boundaries = part.boundaries.clone();
        step.coef_q = fits.iter().flat_map(|f| f.0.iter().copied()).collect();
        step.coef_v = fits.iter().flat_map(|f| f.1.iter().copied()).collect();
    }
    Ok(surface)
}

/// Feedback policy `a = proj(pi(X) . phi(X))` with per-(step, bundle)
/// coefficients `pi`, projected onto the admissible range.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedPolicy {
    pub basis: BasisSet,
    pub spec: ReservoirSpec,
    pub boundaries: Vec<Vec<f64>>,
    /// Row-major `bundles x K` per step.
    pub coef: Vec<Vec<f64>>,
}

impl RelaxedPolicy {
    pub fn zero(basis: BasisSet, spec: ReservoirSpec, n: usize) -> Self {
        Self { basis, spec, boundaries: vec![Vec::new(); n], coef: vec![vec![0.0; basis.len()]; n] }
    }

    /// `pi <- r pi + (1 - r) beta_q / w3` for every step and bundle.
    pub fn relax(&mut self, surface: &RegressionSurface, r: f64, w3: f64) {
        for (i, coef) in self.coef.iter_mut().enumerate() {
            let step = &surface.steps[i];
            if coef.len() != step.coef_q.len() {
                *coef = vec![0.0; step.coef_q.len()];
            }
            for (c, beta) in coef.iter_mut().zip(&step.coef_q) {
                *c = r * *c + (1.0 - r) * beta / w3;
            }
            self.boundaries[i] = step.boundaries.clone();
        }
    }

    /// Unprojected acceleration at node `i`.
    pub fn raw(&self, i: usize, s: &StateTriple) -> f64 {
        let k = self.basis.len();
        let b = locate_bundle(&self.boundaries[i], s.inflow);
        self.basis.dot(&self.coef[i][b * k..(b + 1) * k], s)
    }
}

impl Policy for RelaxedPolicy {
    fn accel(&self, step: usize, _t: f64, s: &StateTriple) -> f64 {
        if step >= self.coef.len() {
            return 0.0;
        }
        admissible_range(s.outflow, &self.spec).project(self.raw(step, s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PicardConfig {
    pub epsilon: f64,
    pub relax_weight: f64,
    pub max_iter: usize,
    pub lambda: f64,
    pub bundle_count: usize,
}

impl Default for PicardConfig {
    fn default() -> Self {
        Self { epsilon: 1e-6, relax_weight: 0.5, max_iter: 200, lambda: 1e-8, bundle_count: 1 }
    }
}

impl PicardConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.epsilon > 0.0, "epsilon", || format!("must be > 0, got {}", self.epsilon))?;
        ensure(self.relax_weight > 0.0 && self.relax_weight < 1.0, "relax_weight", || {
            format!("must lie in (0, 1), got {}", self.relax_weight)
        })?;
        ensure(self.max_iter >= 1, "max_iter", || "must be >= 1".into())?;
        ensure(self.lambda >= 0.0, "lambda", || format!("must be >= 0, got {}", self.lambda))?;
        ensure(self.bundle_count >= 1, "bundle_count", || "must be >= 1".into())
    }
}

/// Grid and solver settings of one LSMC run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LsmcNumerics {
    pub h: f64,
    pub steps: usize,
    pub paths: usize,
    pub basis: BasisId,
    pub picard: PicardConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// `|p_q(t_0, X_0)|` change against the previous iterate.
    pub residual: f64,
    pub p_q0: f64,
    pub wall_time_s: f64,
}

/// Converged result of [`picard_solve`].
#[derive(Debug, Clone)]
pub struct PicardOutcome {
    pub policy: RelaxedPolicy,
    pub surface: RegressionSurface,
    pub log: Vec<IterationRecord>,
    /// Inflow paths shared by every iteration.
    pub inflow: Arc<InflowEnsemble>,
}

pub fn write_iteration_log<W: Write>(log: &[IterationRecord], out: W) -> Result<()> {
    serde_json::to_writer_pretty(out, log).map_err(|e| Error::Io(e.to_string()))
}

/// Relaxed Picard iteration starting from zero surfaces. Every iteration
/// reuses the same inflow paths and bundle partitions; it stops once
/// `p_q` at the deterministic initial state changes by at most `epsilon`.
pub fn picard_solve(
    model: &InflowModel,
    spec: &ReservoirSpec,
    obj: &ObjectiveSpec,
    init: InitialControl,
    numerics: &LsmcNumerics,
    seed: u64,
) -> Result<PicardOutcome> {
    spec.validate()?;
    obj.validate()?;
    let cfg = numerics.picard;
    cfg.validate()?;
    let n = numerics.steps;
    let basis = BasisSet::new(numerics.basis, obj.q_env);
    let inflow = Arc::new(simulate_inflow_paths(model, numerics.h, n, numerics.paths, seed)?);
    let partitions = inflow_partitions(&inflow, cfg.bundle_count)?;
    let x0 = StateTriple::new(model.q0, init.outflow, init.volume);

    let mut policy = RelaxedPolicy::zero(basis, *spec, n);
    let mut previous = 0.0;
    let mut log = Vec::new();
    let start = Instant::now();
    for iteration in 1..=cfg.max_iter {
        let ens = simulate_controlled(&policy, inflow.clone(), spec, init.outflow, init.volume);
        let surface = match backward_pass(&ens, obj, spec.v_max, &basis, cfg.lambda, &partitions) {
            Ok(s) => s,
            // Non-finite regression data means the forward states diverged.
            Err(Error::CgStalled { residual, .. }) if !residual.is_finite() => {
                log.push(IterationRecord {
                    iteration,
                    residual: f64::INFINITY,
                    p_q0: f64::NAN,
                    wall_time_s: start.elapsed().as_secs_f64(),
                });
                break;
            }
            Err(e) => return Err(e),
        };
        drop(ens);
        let p_q0 = surface.predict(0, &x0).0;
        let residual = (p_q0 - previous).abs();
        log.push(IterationRecord { iteration, residual, p_q0, wall_time_s: start.elapsed().as_secs_f64() });
        policy.relax(&surface, cfg.relax_weight, obj.w3);
        if residual <= cfg.epsilon {
            return Ok(PicardOutcome { policy, surface, log, inflow });
        }
        if !(residual < DIVERGENCE_LIMIT) {
            break;
        }
        previous = p_q0;
    }
    let history: Vec<f64> = log.iter().map(|r| r.residual).collect();
    Err(Error::NoConvergence { iterations: log.len(), last: history.last().copied().unwrap_or(f64::NAN), history })
}

/// `((1/n) sum_i |num_i - ref_i|^p)^(1/p)`.
pub fn coefficient_error(numeric: &[f64], reference: &[f64], p: u32) -> Result<f64> {
    ensure(numeric.len() == reference.len() && !numeric.is_empty(), "numeric", || {
        "series must be non-empty and of equal length".into()
    })?;
    ensure(p == 1 || p == 2, "p", || format!("must be 1 or 2, got {p}"))?;
    let n = numeric.len() as f64;
    let sum: f64 = numeric.iter().zip(reference).map(|(a, b)| (a - b).abs().powi(p as i32)).sum();
    Ok((sum / n).powf(1.0 / p as f64))
}

/// `log2(e_coarse / e_fine)`.
pub fn convergence_rate(e_coarse: f64, e_fine: f64) -> f64 {
    (e_coarse / e_fine).log2()
}

/// Cross-sectional statistics of one grid node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStatistics {
    pub t: f64,
    /// Fraction of paths per volume bin on `[0, v_max]`.
    pub volume_histogram: Vec<f64>,
    pub volume_mean: f64,
    pub volume_std: f64,
    /// `Pr(q in [edges[k], edges[k+1]))`.
    pub outflow_band_probability: Vec<f64>,
}

/// Per-node volume histogram, volume mean and deviation, and outflow band
/// probabilities.
pub fn ensemble_statistics(
    ens: &ControlledEnsemble,
    bins: usize,
    band_edges: &[f64],
    v_max: f64,
) -> Result<Vec<StepStatistics>> {
    ensure(bins >= 1, "bins", || "must be >= 1".into())?;
    ensure(band_edges.windows(2).all(|w| w[0] < w[1]), "band_edges", || "must increase strictly".into())?;
    let s = ens.paths as f64;
    Ok((0..=ens.steps)
        .into_par_iter()
        .map(|i| {
            let vol = ens.volume_at(i);
            let q = ens.outflow_at(i);
            let mut hist = vec![0.0; bins];
            for &v in vol {
                let b = ((v / v_max) * bins as f64).floor().clamp(0.0, (bins - 1) as f64);
                hist[b as usize] += 1.0 / s;
            }
            let mean = vol.iter().sum::<f64>() / s;
            let var = vol.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s;
            let bands = band_edges
                .windows(2)
                .map(|w| q.iter().filter(|&&x| x >= w[0] && x < w[1]).count() as f64 / s)
                .collect();
            StepStatistics {
                t: ens.time(i),
                volume_histogram: hist,
                volume_mean: mean,
                volume_std: var.sqrt(),
                outflow_band_probability: bands,
            }
        })
        .collect())
}
