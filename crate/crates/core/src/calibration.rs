//! Parameter identification from hourly series: moment matching for the jump
//! kernel, an autocorrelation fit for the recession rate, and a linear
//! operation rule for the outflow.

use argmin::core::{CostFunction, Executor};
use argmin::solver::neldermead::NelderMead;
use chrono::NaiveDateTime;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{ensure, Error, Result};
use crate::jump_process::{stationary_moment_summary, InflowModel, MomentSet, TemperedStableParams};

/// Hourly observations. Missing values are NaN; volume is in scaled units
/// (m³ / 3600).
#[derive(Debug, Clone, PartialEq)]
pub struct HourlySeries {
    pub timestamps: Vec<NaiveDateTime>,
    pub inflow: Vec<f64>,
    pub outflow: Option<Vec<f64>>,
    pub volume: Option<Vec<f64>>,
}

impl HourlySeries {
    pub fn new(
        timestamps: Vec<NaiveDateTime>,
        inflow: Vec<f64>,
        outflow: Option<Vec<f64>>,
        volume: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = timestamps.len();
        ensure(inflow.len() == n, "inflow", || "length differs from timestamps".into())?;
        for (name, col) in [("outflow", &outflow), ("volume", &volume)] {
            if let Some(c) = col {
                ensure(c.len() == n, name, || "length differs from timestamps".into())?;
            }
        }
        ensure(timestamps.windows(2).all(|w| w[0] < w[1]), "timestamps", || "must increase strictly".into())?;
        for (name, col) in [("inflow", Some(&inflow)), ("outflow", outflow.as_ref())] {
            if let Some(c) = col {
                ensure(c.iter().all(|x| !(*x < 0.0)), name, || "negative discharge".into())?;
            }
        }
        Ok(Self { timestamps, inflow, outflow, volume })
    }

    /// Inflow-only series on consecutive hours starting at the epoch.
    pub fn from_inflow(inflow: Vec<f64>) -> Result<Self> {
        let start = chrono::DateTime::UNIX_EPOCH.naive_utc();
        let timestamps = (0..inflow.len()).map(|k| start + chrono::Duration::hours(k as i64)).collect();
        Self::new(timestamps, inflow, None, None)
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    /// Maximal index ranges of consecutive hours on which every listed
    /// column is finite.
    pub fn segments(&self, columns: &[&[f64]]) -> Vec<std::ops::Range<usize>> {
        let valid = |k: usize| columns.iter().all(|c| c[k].is_finite());
        let mut out = Vec::new();
        let mut start: Option<usize> = None;
        for k in 0..self.len() {
            let joined =
                k > 0 && start.is_some() && self.timestamps[k] - self.timestamps[k - 1] == chrono::Duration::hours(1);
            if !valid(k) {
                if let Some(s) = start.take() {
                    out.push(s..k);
                }
                continue;
            }
            match start {
                Some(s) if !joined => {
                    out.push(s..k);
                    start = Some(k);
                }
                None => start = Some(k),
                _ => {}
            }
        }
        if let Some(s) = start {
            out.push(s..self.len());
        }
        out
    }

    /// Number of gaps (missing values or skipped hours) splitting the series.
    pub fn gap_count(&self) -> usize {
        self.segments(&[&self.inflow]).len().saturating_sub(1)
    }
}

/// Population mean, standard deviation, skewness and excess kurtosis.
pub fn sample_moments(values: &[f64]) -> Result<MomentSet> {
    let xs: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if xs.len() < 2 {
        return Err(Error::InsufficientData("at least two observations are required".into()));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for x in &xs {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    let (m2, m3, m4) = (m2 / n, m3 / n, m4 / n);
    if !(m2 > 1e-14 * mean * mean.max(1.0)) || m2 == 0.0 {
        return Err(Error::DegenerateDistribution);
    }
    Ok(MomentSet { ave: mean, sta: m2.sqrt(), ske: m3 / m2.powf(1.5), kur: m4 / (m2 * m2) - 3.0 })
}

/// Moments of the observed inflow.
pub fn empirical_moments(series: &HourlySeries) -> Result<MomentSet> {
    sample_moments(&series.inflow)
}

/// Restarts of the simplex search.
pub const FIT_RESTARTS: usize = 20;

/// Best objectives above this are reported as infeasible.
pub const FEASIBILITY_LIMIT: f64 = 0.05;

/// Objective assigned to non-stationary or otherwise invalid parameters.
const INFEASIBLE_COST: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperedStableFit {
    pub params: TemperedStableParams,
    /// Sum of squared relative moment errors.
    pub objective: f64,
    pub model: MomentSet,
}

struct MomentMismatch {
    target: [f64; 4],
    q_min: f64,
}

impl MomentMismatch {
    fn decode(p: &[f64]) -> (f64, f64, f64) {
        (1.0 / (1.0 + (-p[0]).exp()), p[1].exp(), p[2].exp())
    }

    fn moments(&self, p: &[f64]) -> Option<(TemperedStableParams, MomentSet)> {
        let (alpha, a, b) = Self::decode(p);
        let ts = TemperedStableParams::new(alpha, a, b).ok()?;
        let model = InflowModel::new(self.q_min, 1.0, ts).ok()?;
        let m = stationary_moment_summary(&model).ok()?;
        m.as_array().iter().all(|x| x.is_finite()).then_some((ts, m))
    }

    fn value(&self, p: &[f64]) -> f64 {
        match self.moments(p) {
            Some((_, m)) => m.as_array().iter().zip(&self.target).map(|(x, t)| ((x - t) / t).powi(2)).sum(),
            None => INFEASIBLE_COST,
        }
    }
}

impl CostFunction for MomentMismatch {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        Ok(self.value(p))
    }
}

/// Stationary random starting point in the unconstrained coordinates.
fn starting_point(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let alpha: f64 = rng.random_range(0.3..0.97);
    let b: f64 = 10f64.powf(rng.random_range(-4.0..0.0));
    let m1: f64 = rng.random_range(0.1..0.99);
    let a = m1 / (b.powf(alpha - 1.0) * gamma(1.0 - alpha));
    vec![(alpha / (1.0 - alpha)).ln(), a.ln(), b.ln()]
}

fn simplex_search(problem: MomentMismatch, start: Vec<f64>) -> Option<(Vec<f64>, f64)> {
    let mut vertices = vec![start.clone()];
    for j in 0..start.len() {
        let mut v = start.clone();
        v[j] += 0.3;
        vertices.push(v);
    }
    let solver = NelderMead::new(vertices).with_sd_tolerance(1e-15).ok()?;
    let res = Executor::new(problem, solver).configure(|s| s.max_iters(4000)).run().ok()?;
    let state = res.state();
    Some((state.best_param.clone()?, state.best_cost))
}

/// Moment matching of `(alpha, a, b)` with `Q_min` fixed. Minimizes the sum
/// of squared relative errors of (Ave, Sta, Ske, Kur) by simplex search in
/// logit/log coordinates from [`FIT_RESTARTS`] random stationary starts.
pub fn fit_tempered_stable(empirical: &MomentSet, q_min: f64, seed: u64) -> Result<TemperedStableFit> {
    ensure(q_min > 0.0, "q_min", || format!("must be > 0, got {q_min}"))?;
    let target = empirical.as_array();
    ensure(target.iter().all(|x| x.is_finite() && *x != 0.0), "empirical", || {
        "moments must be finite and nonzero".into()
    })?;
    let best = (0..FIT_RESTARTS)
        .into_par_iter()
        .filter_map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let start = starting_point(&mut rng);
            let (p, _) = simplex_search(MomentMismatch { target, q_min }, start)?;
            // Polish from the best vertex with a fresh simplex.
            let (p, c) = simplex_search(MomentMismatch { target, q_min }, p)?;
            Some((k, p, c))
        })
        .min_by(|x, y| x.2.total_cmp(&y.2).then(x.0.cmp(&y.0)));

    let Some((_, p, cost)) = best else {
        return Err(Error::InfeasibleFit { best: f64::INFINITY });
    };
    let problem = MomentMismatch { target, q_min };
    match problem.moments(&p) {
        Some((params, model)) if cost <= FEASIBILITY_LIMIT => Ok(TemperedStableFit { params, objective: cost, model }),
        _ => Err(Error::InfeasibleFit { best: cost }),
    }
}

/// Default number of lags in the autocorrelation fit.
pub const DEFAULT_MAX_LAG: usize = 72;

/// Lags that must have positive autocorrelation.
pub const DEFAULT_MIN_LAGS: usize = 5;

/// Sample autocorrelation at lags `1..=max_lag` pooled over `segments`,
/// using only within-segment pairs.
pub fn pooled_autocorrelation(segments: &[&[f64]], max_lag: usize) -> Result<Vec<f64>> {
    let n: usize = segments.iter().map(|s| s.len()).sum();
    if n < 2 {
        return Err(Error::InsufficientData("autocorrelation needs data".into()));
    }
    let mean = segments.iter().flat_map(|s| s.iter()).sum::<f64>() / n as f64;
    let var = segments.iter().flat_map(|s| s.iter()).map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    if !(var > 0.0) {
        return Err(Error::DegenerateDistribution);
    }
    (1..=max_lag)
        .map(|lag| {
            let (sum, count) = segments
                .iter()
                .filter(|s| s.len() > lag)
                .map(|s| {
                    let sum: f64 = s.iter().zip(&s[lag..]).map(|(a, b)| (a - mean) * (b - mean)).sum();
                    (sum, s.len() - lag)
                })
                .fold((0.0, 0usize), |acc, x| (acc.0 + x.0, acc.1 + x.1));
            if count == 0 {
                return Err(Error::InsufficientData(format!("no pairs at lag {lag}")));
            }
            Ok(sum / count as f64 / var)
        })
        .collect()
}

/// Decay rate of `acf(tau) = exp(-rho_c tau)` by least squares on
/// `ln acf` through the origin, over lags up to the first nonpositive value.
pub fn fit_decay_rate(acf: &[f64], min_lags: usize) -> Result<f64> {
    let usable = acf.iter().position(|&r| !(r > 0.0)).unwrap_or(acf.len());
    if usable < min_lags.max(1) {
        return Err(Error::NonPositiveAcf { lag: usable + 1, min_lags });
    }
    let (num, den) = acf[..usable].iter().enumerate().fold((0.0, 0.0), |(n, d), (k, r)| {
        let tau = (k + 1) as f64;
        (n + tau * r.ln(), d + tau * tau)
    });
    Ok(-num / den)
}

/// Autocorrelation decay rate of hourly segments.
pub fn fit_acf_rate_segments(segments: &[&[f64]], max_lag: usize, min_lags: usize) -> Result<f64> {
    fit_decay_rate(&pooled_autocorrelation(segments, max_lag)?, min_lags)
}

/// Autocorrelation decay rate (1/h) of the observed inflow.
pub fn fit_acf_rate(series: &HourlySeries, max_lag: usize, min_lags: usize) -> Result<f64> {
    let segs: Vec<&[f64]> = series.segments(&[&series.inflow]).into_iter().map(|r| &series.inflow[r]).collect();
    fit_acf_rate_segments(&segs, max_lag, min_lags)
}

/// `rho = rho_c / (1 - M1)`.
pub fn recession_from_acf(rho_c: f64, m1: f64) -> Result<f64> {
    ensure(m1 < 1.0, "m1", || format!("must be < 1, got {m1}"))?;
    Ok(rho_c / (1.0 - m1))
}

/// `q[k+1] = max(0, q[k] + (c1 + c_inflow Q[k] + c_outflow q[k] + c_volume V[k]) h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperationRule {
    pub c1: f64,
    #[serde(rename = "cQ")]
    pub c_inflow: f64,
    #[serde(rename = "cq")]
    pub c_outflow: f64,
    /// Per scaled volume unit.
    #[serde(rename = "cV")]
    pub c_volume: f64,
    pub r_squared: f64,
}

impl OperationRule {
    /// Volume coefficient per physical m³.
    pub fn c_volume_per_m3(&self) -> f64 {
        self.c_volume / crate::dynamics::VOLUME_SCALE
    }

    #[inline]
    fn next(&self, q: f64, inflow: f64, volume: f64, h: f64) -> f64 {
        (q + (self.c1 + self.c_inflow * inflow + self.c_outflow * q + self.c_volume * volume) * h).max(0.0)
    }
}

/// Outflow trajectory generated by `rule` from `q0` along observed inflow
/// and volume.
pub fn simulate_rule(rule: &OperationRule, inflow: &[f64], volume: &[f64], q0: f64, h: f64) -> Vec<f64> {
    let n = inflow.len().min(volume.len());
    let mut q = Vec::with_capacity(n);
    if n == 0 {
        return q;
    }
    q.push(q0);
    for k in 0..n - 1 {
        let next = rule.next(q[k], inflow[k], volume[k], h);
        q.push(next);
    }
    q
}

/// Least-squares fit of the operation rule. Rows with observed
/// `q[k+1] = 0` are excluded; R² compares the rule's simulated trajectory
/// (restarted at each segment start) with the observed outflow.
pub fn fit_operation_rule(series: &HourlySeries, h: f64) -> Result<OperationRule> {
    let (Some(q), Some(v)) = (series.outflow.as_ref(), series.volume.as_ref()) else {
        return Err(Error::InsufficientData("outflow and volume are required".into()));
    };
    ensure(h > 0.0, "h", || format!("must be > 0, got {h}"))?;
    let big_q = &series.inflow;
    let segments = series.segments(&[big_q, q, v]);

    let mut rows: Vec<[f64; 4]> = Vec::new();
    let mut ys = Vec::new();
    for seg in &segments {
        for k in seg.start..seg.end.saturating_sub(1) {
            if q[k + 1] > 0.0 {
                rows.push([1.0, big_q[k], q[k], v[k]]);
                ys.push((q[k + 1] - q[k]) / h);
            }
        }
    }
    if rows.len() < 4 {
        return Err(Error::InsufficientData(format!("{} usable transitions", rows.len())));
    }

    // Column scaling keeps the rank decision independent of units.
    let scale: Vec<f64> =
        (0..4).map(|c| rows.iter().map(|r| r[c].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE)).collect();
    let x = DMatrix::from_fn(rows.len(), 4, |r, c| rows[r][c] / scale[c]);
    let y = DVector::from_vec(ys);
    let svd = x.svd(true, true);
    let smax = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|&&s| s > 1e-10 * smax).count();
    if rank < 4 {
        return Err(Error::RankDeficient { rank, columns: 4 });
    }
    let beta = svd.solve(&y, 1e-10 * smax).map_err(|e| Error::InsufficientData(e.to_string()))?;
    let mut rule = OperationRule {
        c1: beta[0] / scale[0],
        c_inflow: beta[1] / scale[1],
        c_outflow: beta[2] / scale[2],
        c_volume: beta[3] / scale[3],
        r_squared: f64::NAN,
    };

    let mut observed = Vec::new();
    let mut simulated = Vec::new();
    for seg in &segments {
        let sim = simulate_rule(&rule, &big_q[seg.clone()], &v[seg.clone()], q[seg.start], h);
        observed.extend_from_slice(&q[seg.clone()]);
        simulated.extend(sim);
    }
    let mean = observed.iter().sum::<f64>() / observed.len() as f64;
    let sst: f64 = observed.iter().map(|o| (o - mean).powi(2)).sum();
    let sse: f64 = observed.iter().zip(&simulated).map(|(o, s)| (o - s).powi(2)).sum();
    rule.r_squared = if sst > 0.0 { 1.0 - sse / sst } else { f64::NAN };
    Ok(rule)
}

/// Moment-matching summary for reporting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub q_min: f64,
    pub params: TemperedStableParams,
    pub objective: f64,
    pub m1: f64,
    pub empirical: MomentSet,
    pub model: MomentSet,
    /// (model - empirical) / empirical for Ave, Sta, Ske, Kur.
    pub relative_error: [f64; 4],
    pub rho_c: Option<f64>,
    pub rho: Option<f64>,
}

impl CalibrationReport {
    pub fn new(q_min: f64, empirical: MomentSet, fit: &TemperedStableFit, rho_c: Option<f64>) -> Self {
        let m1 = fit.params.m1();
        Self {
            q_min,
            params: fit.params,
            objective: fit.objective,
            m1,
            empirical,
            model: fit.model,
            relative_error: fit.model.relative_error(&empirical),
            rho_c,
            rho: rho_c.and_then(|r| recession_from_acf(r, m1).ok()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_moments() {
        let m = sample_moments(&[0.0, 2.0]).unwrap();
        assert_eq!((m.ave, m.sta, m.ske, m.kur), (1.0, 1.0, 0.0, -2.0));
        assert!(matches!(sample_moments(&[3.0; 10]), Err(Error::DegenerateDistribution)));
    }

    #[test]
    fn segments_split_on_gaps() {
        let mut s = HourlySeries::from_inflow(vec![1.0, 2.0, f64::NAN, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(s.segments(&[&s.inflow]), vec![0..2, 3..6]);
        s.timestamps[5] += chrono::Duration::hours(1);
        assert_eq!(s.segments(&[&s.inflow]), vec![0..2, 3..5, 5..6]);
        assert_eq!(s.gap_count(), 2);
    }

    #[test]
    fn exact_exponential_acf() {
        let acf: Vec<f64> = (1..=72).map(|k| (-0.028 * k as f64).exp()).collect();
        assert!((fit_decay_rate(&acf, 5).unwrap() - 0.028).abs() < 1e-12);
        let bad = [0.5, 0.2, -0.1, 0.3, 0.2, 0.1];
        assert!(matches!(fit_decay_rate(&bad, 5), Err(Error::NonPositiveAcf { lag: 3, .. })));
    }

    #[test]
    fn recession_examples() {
        assert!((recession_from_acf(0.028, 1.0 - 0.095).unwrap() - 0.294_736_8).abs() < 1e-6);
        assert_eq!(recession_from_acf(0.3, 0.0).unwrap(), 0.3);
    }

    #[test]
    fn rule_examples() {
        let zero = OperationRule { c1: 0.0, c_inflow: 0.0, c_outflow: 0.0, c_volume: 0.0, r_squared: 1.0 };
        assert_eq!(simulate_rule(&zero, &[1.0; 4], &[1.0; 4], 3.0, 1.0), vec![3.0; 4]);
        let up = OperationRule { c1: 1.0, ..zero };
        assert_eq!(simulate_rule(&up, &[0.0; 2], &[0.0; 2], 1.0, 1.0), vec![1.0, 2.0]);
        let down = OperationRule { c1: -50.0, ..zero };
        assert_eq!(simulate_rule(&down, &[0.0; 3], &[0.0; 3], 1.0, 1.0), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn constant_data_is_rank_deficient() {
        let n = 20;
        let mut s = HourlySeries::from_inflow(vec![3.0; n]).unwrap();
        s.outflow = Some(vec![2.0; n]);
        s.volume = Some(vec![100.0; n]);
        assert!(matches!(fit_operation_rule(&s, 1.0), Err(Error::RankDeficient { .. })));
    }
}
