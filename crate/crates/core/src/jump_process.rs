//! Clustered-jump inflow dynamics.
//!
//! The inflow follows a continuous-state branching process with immigration
//! (CBI) whose jumps are driven by a tempered-stable kernel
//!
//! ```text
//! dQ = rho (Q_min - Q) dt + jumps,   jump intensity  Q * rho * a * z^(-1-alpha) * exp(-b z) dz
//! ```
//!
//! so that large inflows excite further jumps. This module samples the
//! tempered-stable increments, simulates the process on an explicit Euler grid
//! and evaluates the exact stationary moments.

use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;
use std::f64::consts::PI;

use crate::error::{ensure, Error, Result};

/// Default number of consecutive rejections tolerated by the sampler.
pub const DEFAULT_RETRY_CAP: u64 = 1_000_000;

/// Largest `-ln(acceptance probability)` handled in a single accept-reject
/// block. Bigger jump masses are split into independent pieces.
const MAX_LOG_REJECTION: f64 = 1.0;

/// Paths simulated per parallel work item.
const PATH_CHUNK: usize = 256;

/// Parameters of the tempered-stable Lévy kernel `a z^(-1-alpha) e^(-b z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperedStableParams {
    pub alpha: f64,
    pub a: f64,
    pub b: f64,
}

impl TemperedStableParams {
    /// `a = 0` is admitted as the jump-free limit.
    pub fn new(alpha: f64, a: f64, b: f64) -> Result<Self> {
        ensure(alpha > 0.0 && alpha < 1.0, "alpha", || format!("must lie in (0, 1), got {alpha}"))?;
        ensure(a >= 0.0 && a.is_finite(), "a", || format!("must be >= 0, got {a}"))?;
        ensure(b > 0.0 && b.is_finite(), "b", || format!("must be > 0, got {b}"))?;
        Ok(Self { alpha, a, b })
    }

    /// `M_k = a b^(alpha-k) Gamma(k-alpha)`.
    pub fn moment(&self, k: u32) -> f64 {
        tempering_moment(self, k)
    }

    pub fn m1(&self) -> f64 {
        self.moment(1)
    }
}

/// `M_k = ∫ z^k a z^(-1-alpha) e^(-b z) dz = a b^(alpha-k) Gamma(k-alpha)`.
pub fn tempering_moment(ts: &TemperedStableParams, k: u32) -> f64 {
    assert!(k >= 1, "tempering moments are defined for k >= 1");
    let k = k as f64;
    ts.a * ts.b.powf(ts.alpha - k) * gamma(k - ts.alpha)
}

/// CBI inflow model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InflowModel {
    /// Minimum inflow `Q_min` (m³/s).
    pub q_min: f64,
    /// Recession rate (1/h).
    pub rho: f64,
    /// Initial inflow `Q_0` (m³/s).
    pub q0: f64,
    pub ts: TemperedStableParams,
    /// When false the per-step jump mass is `a Q h` instead of `rho a Q h`.
    pub jump_scale_includes_rho: bool,
}

impl InflowModel {
    pub fn new(q_min: f64, rho: f64, ts: TemperedStableParams) -> Result<Self> {
        ensure(q_min > 0.0, "q_min", || format!("must be > 0, got {q_min}"))?;
        ensure(rho > 0.0, "rho", || format!("must be > 0, got {rho}"))?;
        Ok(Self { q_min, rho, q0: q_min, ts, jump_scale_includes_rho: true })
    }

    pub fn with_initial(mut self, q0: f64) -> Result<Self> {
        ensure(q0 >= 0.0, "q0", || format!("must be >= 0, got {q0}"))?;
        self.q0 = q0;
        Ok(self)
    }

    pub fn one_minus_m1(&self) -> f64 {
        1.0 - self.ts.m1()
    }

    pub fn is_stationary(&self) -> bool {
        self.rho * self.one_minus_m1() > 0.0
    }

    /// Lévy-density coefficient of the jump increment accumulated over `h`
    /// hours from inflow level `q`.
    pub fn jump_mass(&self, q: f64, h: f64) -> f64 {
        let base = self.ts.a * q * h;
        if self.jump_scale_includes_rho {
            self.rho * base
        } else {
            base
        }
    }

    /// Deterministic part of one explicit Euler step.
    #[inline]
    pub fn drift_step(&self, q: f64, h: f64) -> f64 {
        // Clamped so that rho*h > 1 cannot produce a negative inflow.
        (q + self.rho * h * (self.q_min - q)).max(0.0)
    }
}

/// Counter-based RNG stream for one Monte-Carlo path.
pub fn path_rng(seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    rng
}

/// One-sided stable variate with Laplace transform `exp(-s^alpha)`
/// (Kanter's representation).
fn unit_positive_stable<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> f64 {
    let u: f64 = PI * rng.sample::<f64, _>(Open01);
    let e: f64 = rng.sample(Exp1);
    let ln = (alpha * u).sin().ln() - u.sin().ln() / alpha
        + (1.0 - alpha) / alpha * (((1.0 - alpha) * u).sin().ln() - e.ln());
    ln.exp()
}

/// Accept-reject sampler for tempered-stable increments `TS(alpha, c, b)`
/// whose Lévy density is `c z^(-1-alpha) e^(-b z)`.
#[derive(Debug, Clone, Copy)]
pub struct TemperedStableSampler {
    alpha: f64,
    b: f64,
    /// `Gamma(1-alpha) / alpha`
    stable_norm: f64,
    b_pow_alpha: f64,
    retry_cap: u64,
}

impl TemperedStableSampler {
    pub fn new(alpha: f64, b: f64) -> Result<Self> {
        ensure(alpha > 0.0 && alpha < 1.0, "alpha", || format!("must lie in (0, 1), got {alpha}"))?;
        ensure(b > 0.0, "b", || format!("must be > 0, got {b}"))?;
        Ok(Self {
            alpha,
            b,
            stable_norm: gamma(1.0 - alpha) / alpha,
            b_pow_alpha: b.powf(alpha),
            retry_cap: DEFAULT_RETRY_CAP,
        })
    }

    pub fn with_retry_cap(mut self, cap: u64) -> Self {
        self.retry_cap = cap.max(1);
        self
    }

    /// Draws one increment with Lévy-density coefficient `c >= 0`.
    ///
    /// A stable proposal `X` with Lévy density `c z^(-1-alpha)` is accepted
    /// with probability `exp(-b X)`. The acceptance rate is
    /// `exp(-c Gamma(1-alpha) b^alpha / alpha)`; when that exponent exceeds
    /// one, the mass `c` is split into equal independent pieces (the law is
    /// infinitely divisible) so each block keeps a usable acceptance rate.
    pub fn sample<R: Rng + ?Sized>(&self, c: f64, rng: &mut R) -> Result<f64> {
        if c == 0.0 {
            return Ok(0.0);
        }
        ensure(c > 0.0 && c.is_finite(), "c", || format!("jump mass must be finite and >= 0, got {c}"))?;
        let log_rejection = c * self.stable_norm * self.b_pow_alpha;
        let pieces = (log_rejection / MAX_LOG_REJECTION).ceil().max(1.0);
        let scale = (c / pieces * self.stable_norm).powf(1.0 / self.alpha);
        let mut total = 0.0;
        for _ in 0..pieces as u64 {
            total += self.accept_reject(scale, rng)?;
        }
        Ok(total)
    }

    fn accept_reject<R: Rng + ?Sized>(&self, scale: f64, rng: &mut R) -> Result<f64> {
        for _ in 0..self.retry_cap {
            let x = scale * unit_positive_stable(self.alpha, rng);
            let u: f64 = rng.random();
            if u < (-self.b * x).exp() {
                return Ok(x);
            }
        }
        Err(Error::RetryExhausted { attempts: self.retry_cap })
    }
}

/// Convenience wrapper around [`TemperedStableSampler`].
pub fn sample_tempered_stable<R: Rng + ?Sized>(alpha: f64, c: f64, b: f64, rng: &mut R) -> Result<f64> {
    TemperedStableSampler::new(alpha, b)?.sample(c, rng)
}

/// Inflow ensemble on a uniform grid, stored step-major.
#[derive(Debug, Clone, PartialEq)]
pub struct InflowEnsemble {
    pub paths: usize,
    pub steps: usize,
    pub h: f64,
    values: Vec<f64>,
}

impl InflowEnsemble {
    #[inline]
    pub fn get(&self, path: usize, step: usize) -> f64 {
        self.values[step * self.paths + path]
    }

    /// All paths at grid node `step`.
    pub fn at_step(&self, step: usize) -> &[f64] {
        &self.values[step * self.paths..(step + 1) * self.paths]
    }

    pub fn path(&self, path: usize) -> Vec<f64> {
        (0..=self.steps).map(|i| self.get(path, i)).collect()
    }

    pub fn raw(&self) -> &[f64] {
        &self.values
    }
}

fn check_grid(h: f64, n: usize, paths: usize) -> Result<()> {
    ensure(h > 0.0 && h.is_finite(), "h", || format!("must be > 0, got {h}"))?;
    ensure(n >= 1, "n", || "at least one step is required".into())?;
    ensure(paths >= 1, "paths", || "at least one path is required".into())
}

/// Runs one path, handing each grid value to `visit`.
fn run_path(
    model: &InflowModel,
    sampler: Option<&TemperedStableSampler>,
    h: f64,
    n: usize,
    seed: u64,
    path: usize,
    mut visit: impl FnMut(usize, f64),
) -> Result<()> {
    let mut rng = path_rng(seed, path as u64);
    let mut q = model.q0;
    visit(0, q);
    for i in 0..n {
        let z = match sampler {
            Some(s) => s.sample(model.jump_mass(q, h), &mut rng)?,
            None => 0.0,
        };
        q = model.drift_step(q, h) + z;
        visit(i + 1, q);
    }
    Ok(())
}

fn sampler_for(model: &InflowModel) -> Result<Option<TemperedStableSampler>> {
    if model.ts.a == 0.0 {
        Ok(None)
    } else {
        TemperedStableSampler::new(model.ts.alpha, model.ts.b).map(Some)
    }
}

/// Simulates `paths` inflow trajectories of `n` explicit Euler steps:
/// `Q[i+1] = Q[i] + rho h (Q_min - Q[i]) + Z[i]`, `Z[i] ~ TS(alpha, rho a Q[i] h, b)`.
///
/// Path `p` always consumes RNG stream `p`, so the result does not depend on
/// the number of worker threads.
pub fn simulate_inflow_paths(model: &InflowModel, h: f64, n: usize, paths: usize, seed: u64) -> Result<InflowEnsemble> {
    check_grid(h, n, paths)?;
    let sampler = sampler_for(model)?;
    let chunks: Vec<Vec<Vec<f64>>> = (0..paths)
        .step_by(PATH_CHUNK)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|start| {
            (start..(start + PATH_CHUNK).min(paths))
                .map(|p| {
                    let mut row = vec![0.0; n + 1];
                    run_path(model, sampler.as_ref(), h, n, seed, p, |i, q| row[i] = q)?;
                    Ok(row)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut values = vec![0.0; paths * (n + 1)];
    for (chunk_idx, chunk) in chunks.iter().enumerate() {
        for (offset, row) in chunk.iter().enumerate() {
            let p = chunk_idx * PATH_CHUNK + offset;
            for (i, &q) in row.iter().enumerate() {
                values[i * paths + p] = q;
            }
        }
    }
    Ok(InflowEnsemble { paths, steps: n, h, values })
}

/// Terminal values `Q[n]` of the same paths [`simulate_inflow_paths`] would
/// produce, without storing the grid.
pub fn simulate_inflow_endpoints(model: &InflowModel, h: f64, n: usize, paths: usize, seed: u64) -> Result<Vec<f64>> {
    check_grid(h, n, paths)?;
    let sampler = sampler_for(model)?;
    (0..paths)
        .into_par_iter()
        .map(|p| {
            let mut last = 0.0;
            run_path(model, sampler.as_ref(), h, n, seed, p, |_, q| last = q)?;
            Ok(last)
        })
        .collect()
}

/// Stationary moments of a distribution; `kur` is the excess kurtosis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentSet {
    pub ave: f64,
    pub sta: f64,
    pub ske: f64,
    pub kur: f64,
}

impl MomentSet {
    pub fn as_array(&self) -> [f64; 4] {
        [self.ave, self.sta, self.ske, self.kur]
    }

    /// Relative deviation of `self` from `reference`, component-wise.
    pub fn relative_error(&self, reference: &MomentSet) -> [f64; 4] {
        let a = self.as_array();
        let r = reference.as_array();
        std::array::from_fn(|i| (a[i] - r[i]) / r[i])
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, j| acc * (n - j) as f64 / (j + 1) as f64)
}

/// Stationary raw moments `E[Q^k]`, `k = 1..=k_max`.
///
/// From the generator applied to `Q^k`, the stationary balance reads
/// `k (1 - M1) E[Q^k] = k Q_min E[Q^(k-1)] + sum_{j=2..k} C(k,j) M_j E[Q^(k-j+1)]`,
/// which only involves lower moments, so the moments follow recursively.
pub fn stationary_raw_moments(model: &InflowModel, k_max: usize) -> Result<Vec<f64>> {
    ensure(k_max >= 1, "k_max", || "must be >= 1".into())?;
    let one_minus_m1 = model.one_minus_m1();
    if !(one_minus_m1 > 0.0) {
        return Err(Error::NonStationary { one_minus_m1 });
    }
    let m: Vec<f64> = (0..=k_max as u32).map(|j| if j < 2 { 0.0 } else { model.ts.moment(j) }).collect();
    // raw[k] = E[Q^k], raw[0] = 1
    let mut raw = vec![1.0; k_max + 1];
    for k in 1..=k_max {
        let mut rhs = k as f64 * model.q_min * raw[k - 1];
        for j in 2..=k {
            rhs += binomial(k, j) * m[j] * raw[k - j + 1];
        }
        raw[k] = rhs / (k as f64 * one_minus_m1);
    }
    raw.remove(0);
    Ok(raw)
}

/// Converts the first four raw moments to (Ave, Sta, Ske, excess Kur).
pub fn moments_from_raw(raw: &[f64]) -> Result<MomentSet> {
    ensure(raw.len() >= 4, "raw", || "four raw moments are required".into())?;
    let (m, e2, e3, e4) = (raw[0], raw[1], raw[2], raw[3]);
    let var = e2 - m * m;
    if !(var > 1e-14 * m * m.max(1.0)) {
        return Err(Error::DegenerateDistribution);
    }
    let c3 = e3 - 3.0 * m * e2 + 2.0 * m.powi(3);
    let c4 = e4 - 4.0 * m * e3 + 6.0 * m * m * e2 - 3.0 * m.powi(4);
    let sta = var.sqrt();
    Ok(MomentSet { ave: m, sta, ske: c3 / (var * sta), kur: c4 / (var * var) - 3.0 })
}

/// Stationary (Ave, Sta, Ske, excess Kur) of the inflow.
pub fn stationary_moment_summary(model: &InflowModel) -> Result<MomentSet> {
    moments_from_raw(&stationary_raw_moments(model, 4)?)
}

/// Decay rate of the stationary autocorrelation, `rho_c = (1 - M1) rho`.
pub fn autocorrelation_decay_rate(model: &InflowModel) -> f64 {
    model.one_minus_m1() * model.rho
}
