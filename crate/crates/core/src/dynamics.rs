//! Controlled reservoir dynamics: state stepping, admissible controls,
//! target-volume profiles, running cost and policy-driven ensembles.
//!
//! Volumes are stored in scaled units (m³ / 3600) so that `dV = (Q - q) dt`
//! with discharges in m³/s and time in hours.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::{self, Read, Write};
use std::sync::Arc;

use crate::error::{ensure, Result};
use crate::jump_process::{simulate_inflow_paths, InflowEnsemble, InflowModel};

/// Seconds per hour; physical m³ divided by this gives scaled volume.
pub const VOLUME_SCALE: f64 = 3600.0;

/// Nominal reservoir capacity in scaled units (6e7 m³ / 3600).
pub const NOMINAL_V_MAX: f64 = 6.0e7 / VOLUME_SCALE;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateTriple {
    /// Inflow `Q` (m³/s).
    pub inflow: f64,
    /// Outflow `q` (m³/s).
    pub outflow: f64,
    /// Scaled volume `V`.
    pub volume: f64,
}

impl StateTriple {
    pub fn new(inflow: f64, outflow: f64, volume: f64) -> Self {
        Self { inflow, outflow, volume }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReservoirSpec {
    pub v_max: f64,
    pub q_max: f64,
    /// Acceleration cap; `f64::INFINITY` removes the bound.
    pub a_max: f64,
    pub constrained: bool,
}

impl Default for ReservoirSpec {
    fn default() -> Self {
        Self { v_max: NOMINAL_V_MAX, q_max: 120.0, a_max: 100.0, constrained: true }
    }
}

impl ReservoirSpec {
    pub fn validate(&self) -> Result<()> {
        ensure(self.v_max > 0.0, "v_max", || format!("must be > 0, got {}", self.v_max))?;
        ensure(self.q_max > 0.0, "q_max", || format!("must be > 0, got {}", self.q_max))?;
        ensure(self.a_max > 0.0, "a_max", || format!("must be > 0, got {}", self.a_max))
    }

    /// The unconstrained, unbounded-control setting of the exact LQ solution.
    pub fn unconstrained(v_max: f64) -> Self {
        Self { v_max, q_max: f64::INFINITY, a_max: f64::INFINITY, constrained: false }
    }
}

/// Target volume profile. Levels and amplitudes are fractions of `v_max`,
/// windows are fractions of the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TargetProfile {
    Constant {
        level: f64,
    },
    Sine {
        level: f64,
        amplitude: f64,
    },
    Cosine {
        level: f64,
        amplitude: f64,
    },
    SuddenDecrease {
        level: f64,
        amplitude: f64,
        window: [f64; 2],
    },
    SuddenIncrease {
        level: f64,
        amplitude: f64,
        window: [f64; 2],
    },
    /// Piecewise-linear in time; `times` in hours, `volumes` in scaled units.
    Table {
        times: Vec<f64>,
        volumes: Vec<f64>,
    },
}

impl Default for TargetProfile {
    fn default() -> Self {
        TargetProfile::Constant { level: 0.5 }
    }
}

impl TargetProfile {
    pub fn sine() -> Self {
        TargetProfile::Sine { level: 0.5, amplitude: 0.25 }
    }

    pub fn cosine() -> Self {
        TargetProfile::Cosine { level: 0.5, amplitude: 0.25 }
    }

    pub fn sudden_decrease() -> Self {
        TargetProfile::SuddenDecrease { level: 0.5, amplitude: 0.25, window: [0.25, 0.75] }
    }

    pub fn sudden_increase() -> Self {
        TargetProfile::SuddenIncrease { level: 0.5, amplitude: 0.25, window: [0.25, 0.75] }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, TargetProfile::Constant { .. })
    }

    pub fn validate(&self) -> Result<()> {
        if let TargetProfile::Table { times, volumes } = self {
            ensure(!times.is_empty() && times.len() == volumes.len(), "target", || {
                "table needs matching, non-empty time and volume columns".into()
            })?;
            ensure(times.windows(2).all(|w| w[0] < w[1]), "target", || "table times must increase strictly".into())?;
        }
        Ok(())
    }
}

/// `V̂_t` in scaled units.
pub fn target_volume(profile: &TargetProfile, t: f64, horizon: f64, v_max: f64) -> f64 {
    let inside = |w: &[f64; 2]| t > w[0] * horizon && t < w[1] * horizon;
    match profile {
        TargetProfile::Constant { level } => level * v_max,
        TargetProfile::Sine { level, amplitude } => (level + amplitude * (2.0 * PI * t / horizon).sin()) * v_max,
        TargetProfile::Cosine { level, amplitude } => (level + amplitude * (2.0 * PI * t / horizon).cos()) * v_max,
        TargetProfile::SuddenDecrease { level, amplitude, window } => {
            (level - if inside(window) { *amplitude } else { 0.0 }) * v_max
        }
        TargetProfile::SuddenIncrease { level, amplitude, window } => {
            (level + if inside(window) { *amplitude } else { 0.0 }) * v_max
        }
        TargetProfile::Table { times, volumes } => interpolate(times, volumes, t),
    }
}

fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let k = xs.partition_point(|&v| v <= x);
    if k == 0 {
        return ys[0];
    }
    if k == xs.len() {
        return ys[ys.len() - 1];
    }
    let (x0, x1) = (xs[k - 1], xs[k]);
    ys[k - 1] + (ys[k] - ys[k - 1]) * (x - x0) / (x1 - x0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
    /// Discount rate (1/h).
    pub delta: f64,
    /// Environmental flow threshold `q_env` (m³/s).
    pub q_env: f64,
    /// Horizon `T` (h).
    pub horizon: f64,
    pub target: TargetProfile,
}

impl ObjectiveSpec {
    /// Nominal weights for a reservoir of capacity `v_max`, LQ form (`w4 = 0`).
    pub fn nominal(v_max: f64, horizon: f64) -> Self {
        Self {
            w1: 1.0,
            w2: 4.0 / v_max,
            w3: 2000.0,
            w4: 0.0,
            delta: 0.5,
            q_env: 5.0,
            horizon,
            target: TargetProfile::default(),
        }
    }

    /// Nominal weights with the environmental-flow penalty switched on.
    pub fn nominal_nonlinear(v_max: f64, horizon: f64, target: TargetProfile) -> Self {
        Self { w4: 1.0, target, ..Self::nominal(v_max, horizon) }
    }

    pub fn validate(&self) -> Result<()> {
        // Zero tracking weights give the zero-cost problem.
        ensure(self.w1 >= 0.0, "w1", || format!("must be >= 0, got {}", self.w1))?;
        ensure(self.w2 >= 0.0, "w2", || format!("must be >= 0, got {}", self.w2))?;
        ensure(self.w3 > 0.0, "w3", || format!("must be > 0, got {}", self.w3))?;
        ensure(self.w4 >= 0.0, "w4", || format!("must be >= 0, got {}", self.w4))?;
        ensure(self.delta > 0.0, "delta", || format!("must be > 0, got {}", self.delta))?;
        ensure(self.horizon > 0.0, "horizon", || format!("must be > 0, got {}", self.horizon))?;
        self.target.validate()
    }

    pub fn is_lq(&self) -> bool {
        self.w4 == 0.0
    }

    pub fn target_at(&self, t: f64, v_max: f64) -> f64 {
        target_volume(&self.target, t, self.horizon, v_max)
    }
}

/// `j(q) = (w4/2) max(q_env - q, 0)^2` and its derivative.
pub fn env_penalty(q: f64, w4: f64, q_env: f64) -> (f64, f64) {
    let gap = (q_env - q).max(0.0);
    (0.5 * w4 * gap * gap, -w4 * gap)
}

/// Nonnegative running cost; the objective integrand is its negation.
pub fn running_cost(state: &StateTriple, a: f64, target: f64, obj: &ObjectiveSpec) -> f64 {
    let dq = state.inflow - state.outflow;
    let dv = state.volume - target;
    let (j, _) = env_penalty(state.outflow, obj.w4, obj.q_env);
    0.5 * obj.w1 * dq * dq + 0.5 * obj.w2 * dv * dv + 0.5 * obj.w3 * a * a + j
}

/// Closed interval of admissible accelerations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlRange {
    pub lo: f64,
    pub hi: f64,
}

impl ControlRange {
    pub fn contains(&self, a: f64) -> bool {
        a >= self.lo && a <= self.hi
    }

    pub fn project(&self, a: f64) -> f64 {
        a.max(self.lo).min(self.hi)
    }
}

/// Admissible accelerations at outflow `q`.
pub fn admissible_range(q: f64, spec: &ReservoirSpec) -> ControlRange {
    let a = spec.a_max;
    if spec.constrained {
        if q >= spec.q_max {
            return ControlRange { lo: -a, hi: 0.0 };
        }
        if q <= 0.0 {
            return ControlRange { lo: 0.0, hi: a };
        }
    }
    ControlRange { lo: -a, hi: a }
}

/// Projection of the unconstrained maximiser `p_q / w3` onto `range`.
pub fn clip_control(p_q: f64, w3: f64, range: ControlRange) -> f64 {
    range.project(p_q / w3)
}

/// Projects a volume onto `[0, v_max]` in constrained mode.
#[inline]
pub fn project_volume(v: f64, spec: &ReservoirSpec) -> f64 {
    if spec.constrained {
        v.max(0.0).min(spec.v_max)
    } else {
        v
    }
}

/// Controlled part of one explicit Euler step, given the next inflow.
/// Returns `(q', V', projection residual)`.
#[inline]
fn controlled_step(state: &StateTriple, a: f64, h: f64, spec: &ReservoirSpec) -> (f64, f64, f64) {
    let mut q = state.outflow + a * h;
    if spec.constrained {
        q = q.max(0.0).min(spec.q_max);
    }
    let v_raw = state.volume + (state.inflow - state.outflow) * h;
    let v = project_volume(v_raw, spec);
    (q, v, v - v_raw)
}

/// One explicit Euler step of the full state with jump increment `z`.
pub fn step_forward(
    state: &StateTriple,
    a: f64,
    z: f64,
    h: f64,
    model: &InflowModel,
    spec: &ReservoirSpec,
) -> (StateTriple, f64) {
    let inflow = model.drift_step(state.inflow, h) + z;
    let (outflow, volume, residual) = controlled_step(state, a, h, spec);
    (StateTriple { inflow, outflow, volume }, residual)
}

/// Feedback rule mapping `(step, t, state)` to an acceleration.
pub trait Policy: Sync {
    fn accel(&self, step: usize, t: f64, state: &StateTriple) -> f64;
}

impl<F> Policy for F
where
    F: Fn(usize, f64, &StateTriple) -> f64 + Sync,
{
    fn accel(&self, step: usize, t: f64, state: &StateTriple) -> f64 {
        self(step, t, state)
    }
}

/// Policy that never accelerates.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroPolicy;

impl Policy for ZeroPolicy {
    fn accel(&self, _: usize, _: f64, _: &StateTriple) -> f64 {
        0.0
    }
}

/// Simulated controlled ensemble, stored step-major (`[step * paths + path]`).
#[derive(Debug, Clone)]
pub struct ControlledEnsemble {
    pub paths: usize,
    pub steps: usize,
    pub h: f64,
    pub inflow: Arc<InflowEnsemble>,
    outflow: Vec<f64>,
    volume: Vec<f64>,
    /// `steps` controls per path; the last node carries none.
    accel: Vec<f64>,
    /// Paths on the volume boundary at each node `0..=steps`.
    pub boundary_touches: Vec<usize>,
    /// Accumulated projection residual per path.
    pub residual_totals: Vec<f64>,
}

impl ControlledEnsemble {
    #[inline]
    pub fn state(&self, path: usize, step: usize) -> StateTriple {
        let k = step * self.paths + path;
        StateTriple { inflow: self.inflow.get(path, step), outflow: self.outflow[k], volume: self.volume[k] }
    }

    #[inline]
    pub fn accel(&self, path: usize, step: usize) -> f64 {
        self.accel[step * self.paths + path]
    }

    pub fn outflow_at(&self, step: usize) -> &[f64] {
        &self.outflow[step * self.paths..(step + 1) * self.paths]
    }

    pub fn volume_at(&self, step: usize) -> &[f64] {
        &self.volume[step * self.paths..(step + 1) * self.paths]
    }

    pub fn accel_at(&self, step: usize) -> &[f64] {
        &self.accel[step * self.paths..(step + 1) * self.paths]
    }

    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.h
    }

    /// Largest per-node fraction of paths on the volume boundary.
    pub fn max_touch_fraction(&self) -> f64 {
        self.boundary_touches.iter().map(|&c| c as f64 / self.paths as f64).fold(0.0, f64::max)
    }

    /// Long-format CSV: `path_id,step,t,Q,q,V,a` (`a` empty at the last node).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["path_id", "step", "t", "Q", "q", "V", "a"])?;
        for p in 0..self.paths {
            for i in 0..=self.steps {
                let s = self.state(p, i);
                let a = if i < self.steps { crate::format_float(self.accel(p, i)) } else { String::new() };
                w.write_record([
                    p.to_string(),
                    i.to_string(),
                    crate::format_float(self.time(i)),
                    crate::format_float(s.inflow),
                    crate::format_float(s.outflow),
                    crate::format_float(s.volume),
                    a,
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Binary block: header of two little-endian u64 (`paths`, `steps + 1`),
    /// then for each of `Q, q, V, a` a row-major path-by-step array of
    /// little-endian f64 (`a` padded with NaN at the last node).
    pub fn write_binary<W: Write>(&self, mut out: W) -> io::Result<()> {
        let nodes = self.steps + 1;
        out.write_all(&(self.paths as u64).to_le_bytes())?;
        out.write_all(&(nodes as u64).to_le_bytes())?;
        for field in 0..4 {
            for p in 0..self.paths {
                for i in 0..nodes {
                    let s = self.state(p, i);
                    let x = match field {
                        0 => s.inflow,
                        1 => s.outflow,
                        2 => s.volume,
                        _ if i < self.steps => self.accel(p, i),
                        _ => f64::NAN,
                    };
                    out.write_all(&x.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }
}

/// Reads the block written by [`ControlledEnsemble::write_binary`] as four
/// path-major arrays `(Q, q, V, a)` plus `(paths, nodes)`.
pub fn read_binary<R: Read>(mut input: R) -> io::Result<(usize, usize, [Vec<f64>; 4])> {
    let mut word = [0u8; 8];
    input.read_exact(&mut word)?;
    let paths = u64::from_le_bytes(word) as usize;
    input.read_exact(&mut word)?;
    let nodes = u64::from_le_bytes(word) as usize;
    let mut fields: [Vec<f64>; 4] = Default::default();
    for field in fields.iter_mut() {
        field.reserve(paths * nodes);
        for _ in 0..paths * nodes {
            input.read_exact(&mut word)?;
            field.push(f64::from_le_bytes(word));
        }
    }
    Ok((paths, nodes, fields))
}

/// Drives `policy` along precomputed inflow paths starting from outflow `q0`
/// and volume `v0`. Policy output is projected onto the admissible range.
pub fn simulate_controlled<P: Policy + ?Sized>(
    policy: &P,
    inflow: Arc<InflowEnsemble>,
    spec: &ReservoirSpec,
    q0: f64,
    v0: f64,
) -> ControlledEnsemble {
    let (paths, steps, h) = (inflow.paths, inflow.steps, inflow.h);
    let mut outflow = vec![0.0; paths * (steps + 1)];
    let mut volume = vec![0.0; paths * (steps + 1)];
    let mut accel = vec![0.0; paths * steps];
    let mut boundary_touches = vec![0usize; steps + 1];
    let mut residual_totals = vec![0.0; paths];

    let q_start = if spec.constrained { q0.max(0.0).min(spec.q_max) } else { q0 };
    let v_start = project_volume(v0, spec);
    outflow[..paths].fill(q_start);
    volume[..paths].fill(v_start);
    let on_boundary = |v: f64| spec.constrained && (v <= 0.0 || v >= spec.v_max);
    boundary_touches[0] = if on_boundary(v_start) { paths } else { 0 };

    for i in 0..steps {
        let t = i as f64 * h;
        let (head, tail) = outflow.split_at_mut((i + 1) * paths);
        let q_now = &head[i * paths..];
        let q_next = &mut tail[..paths];
        let (vhead, vtail) = volume.split_at_mut((i + 1) * paths);
        let v_now = &vhead[i * paths..];
        let v_next = &mut vtail[..paths];
        let q_in = inflow.at_step(i);
        let a_now = &mut accel[i * paths..(i + 1) * paths];

        let touches: usize = (q_next, v_next, a_now, &mut residual_totals[..])
            .into_par_iter()
            .enumerate()
            .map(|(p, (qn, vn, an, res))| {
                let s = StateTriple { inflow: q_in[p], outflow: q_now[p], volume: v_now[p] };
                let a = admissible_range(s.outflow, spec).project(policy.accel(i, t, &s));
                let (q, v, r) = controlled_step(&s, a, h, spec);
                *an = a;
                *qn = q;
                *vn = v;
                *res += r;
                usize::from(on_boundary(v))
            })
            .sum();
        boundary_touches[i + 1] = touches;
    }

    ControlledEnsemble { paths, steps, h, inflow, outflow, volume, accel, boundary_touches, residual_totals }
}

/// Initial outflow and volume of a controlled run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialControl {
    pub outflow: f64,
    pub volume: f64,
}

/// Simulates `paths` controlled trajectories over `n` steps of size `h`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_ensemble<P: Policy + ?Sized>(
    policy: &P,
    model: &InflowModel,
    spec: &ReservoirSpec,
    init: InitialControl,
    h: f64,
    n: usize,
    paths: usize,
    seed: u64,
) -> Result<ControlledEnsemble> {
    spec.validate()?;
    let inflow = Arc::new(simulate_inflow_paths(model, h, n, paths, seed)?);
    Ok(simulate_controlled(policy, inflow, spec, init.outflow, init.volume))
}

/// Monte-Carlo estimate of the discounted objective (nonpositive):
/// path average of `sum_i exp(-delta t_i) (-cost_i) h`.
pub fn evaluate_objective(ens: &ControlledEnsemble, obj: &ObjectiveSpec, v_max: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..ens.steps {
        let t = ens.time(i);
        let target = obj.target_at(t, v_max);
        let discount = (-obj.delta * t).exp();
        let step_sum: f64 = (0..ens.paths).map(|p| running_cost(&ens.state(p, i), ens.accel(p, i), target, obj)).sum();
        total -= discount * step_sum * ens.h;
    }
    total / ens.paths as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jump_process::TemperedStableParams;

    fn no_jumps() -> InflowModel {
        InflowModel::new(0.5, 0.295, TemperedStableParams::new(0.5, 0.0, 1.0).unwrap()).unwrap()
    }

    #[test]
    fn target_examples() {
        let v = NOMINAL_V_MAX;
        let t = 1000.0;
        assert!((target_volume(&TargetProfile::sine(), t / 4.0, t, v) - 0.75 * v).abs() < 1e-9);
        assert!((target_volume(&TargetProfile::sudden_decrease(), t / 2.0, t, v) - 0.25 * v).abs() < 1e-9);
        assert!((target_volume(&TargetProfile::cosine(), 0.0, t, v) - 0.75 * v).abs() < 1e-9);
        assert_eq!(target_volume(&TargetProfile::sudden_increase(), 0.25 * t, t, v), 0.5 * v);
        let table = TargetProfile::Table { times: vec![0.0, 10.0], volumes: vec![100.0, 200.0] };
        assert_eq!(target_volume(&table, 2.5, t, v), 125.0);
        assert_eq!(target_volume(&table, 50.0, t, v), 200.0);
    }

    #[test]
    fn penalty_examples() {
        assert_eq!(env_penalty(5.0, 1.0, 5.0), (0.0, 0.0));
        assert_eq!(env_penalty(0.0, 1.0, 5.0), (12.5, -5.0));
        assert_eq!(env_penalty(10.0, 1.0, 5.0), (0.0, 0.0));
    }

    #[test]
    fn cost_examples() {
        let obj = ObjectiveSpec::nominal(NOMINAL_V_MAX, 100.0);
        let target = 0.5 * NOMINAL_V_MAX;
        let s = StateTriple::new(2.0, 1.0, target);
        assert_eq!(running_cost(&StateTriple::new(1.0, 1.0, target), 0.0, target, &obj), 0.0);
        assert_eq!(running_cost(&s, 0.0, target, &obj), 0.5);
        let base = running_cost(&s, 0.0, target, &obj);
        let one = running_cost(&s, 1.0, target, &obj) - base;
        let two = running_cost(&s, 2.0, target, &obj) - base;
        assert!((two - 4.0 * one).abs() < 1e-9);
    }

    #[test]
    fn admissible_examples() {
        let spec = ReservoirSpec::default();
        assert_eq!(admissible_range(0.0, &spec), ControlRange { lo: 0.0, hi: 100.0 });
        assert_eq!(admissible_range(120.0, &spec), ControlRange { lo: -100.0, hi: 0.0 });
        assert_eq!(admissible_range(50.0, &spec), ControlRange { lo: -100.0, hi: 100.0 });
        let free = ReservoirSpec::unconstrained(NOMINAL_V_MAX);
        let r = admissible_range(-5.0, &free);
        assert!(r.lo == f64::NEG_INFINITY && r.hi == f64::INFINITY);
        assert_eq!(clip_control(-10.0, 2000.0, admissible_range(0.0, &spec)), 0.0);
        assert_eq!(clip_control(10.0, 2000.0, admissible_range(120.0, &spec)), 0.0);
        assert_eq!(clip_control(1000.0, 2000.0, admissible_range(3.0, &spec)), 0.5);
    }

    #[test]
    fn step_examples() {
        let model = no_jumps();
        let spec = ReservoirSpec { v_max: 16666.7, ..Default::default() };
        let (s, r) = step_forward(&StateTriple::new(15.0, 5.0, 16660.0), 0.0, 0.0, 1.0, &model, &spec);
        assert_eq!(s.volume, 16666.7);
        assert!((r + 3.3).abs() < 1e-9);
        let free = ReservoirSpec::unconstrained(16666.7);
        let (s, r) = step_forward(&StateTriple::new(0.0, 10.0, 5.0), 0.0, 0.0, 1.0, &model, &free);
        assert_eq!((s.volume, r), (-5.0, 0.0));
        let (s, _) = step_forward(&StateTriple::new(1.0, 2.0, 5.0), 0.5, 0.0, 1.0, &model, &spec);
        assert_eq!(s.outflow, 2.5);
    }

    #[test]
    fn zero_policy_without_jumps() {
        let model = no_jumps().with_initial(5.0).unwrap();
        let spec = ReservoirSpec::default();
        let init = InitialControl { outflow: 0.5, volume: 1000.0 };
        let ens = simulate_ensemble(&ZeroPolicy, &model, &spec, init, 1.0, 10, 3, 1).unwrap();
        let mut v = 1000.0;
        let mut q = 5.0;
        for i in 0..10 {
            assert_eq!(ens.state(2, i).outflow, 0.5);
            assert!((ens.state(2, i).volume - v).abs() < 1e-9);
            v += q - 0.5;
            q += 0.295 * (0.5 - q);
        }
    }

    #[test]
    fn objective_single_step() {
        let model = no_jumps().with_initial(2.0).unwrap();
        let spec = ReservoirSpec::default();
        let mut obj = ObjectiveSpec::nominal(spec.v_max, 0.5);
        obj.target = TargetProfile::Constant { level: 0.5 };
        let init = InitialControl { outflow: 1.0, volume: 0.5 * spec.v_max + 10.0 };
        let policy = |_: usize, _: f64, _: &StateTriple| 0.1;
        let ens = simulate_ensemble(&policy, &model, &spec, init, 0.5, 1, 1, 0).unwrap();
        let cost = 0.5 * 1.0 + 0.5 * obj.w2 * 100.0 + 0.5 * 2000.0 * 0.01;
        assert!((evaluate_objective(&ens, &obj, spec.v_max) + cost * 0.5).abs() < 1e-9);
    }

    #[test]
    fn binary_round_trip() {
        let model = no_jumps().with_initial(3.0).unwrap();
        let spec = ReservoirSpec::default();
        let init = InitialControl { outflow: 1.0, volume: 500.0 };
        let policy = |i: usize, _: f64, _: &StateTriple| i as f64 * 0.01;
        let ens = simulate_ensemble(&policy, &model, &spec, init, 1.0, 4, 2, 0).unwrap();
        let mut buf = Vec::new();
        ens.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 4 * 2 * 5 * 8);
        let (paths, nodes, fields) = read_binary(&buf[..]).unwrap();
        assert_eq!((paths, nodes), (2, 5));
        assert_eq!(fields[2][5 + 3], ens.state(1, 3).volume);
        assert_eq!(fields[3][2], ens.accel(0, 2));
        assert!(fields[3][4].is_nan());
    }
}
