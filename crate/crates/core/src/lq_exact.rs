//! Exact solution of the linear-quadratic case.
//!
//! In the unconstrained problem with `j = 0` and unbounded acceleration the
//! adjoints are affine in the state,
//!
//! ```text
//! p_Q = A Q + B q + C V + D
//! p_q = E Q + F q + G V + I
//! p_V = J Q + K q + L V + O
//! ```
//!
//! with coefficients solving a Riccati system backward from zero terminal
//! data. The system is marched with explicit Euler in reversed time.

use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::dynamics::{ObjectiveSpec, StateTriple};
use crate::error::{ensure, Error, Result};
use crate::jump_process::InflowModel;

/// Default magnitude above which the coefficients are declared blown up.
pub const DEFAULT_BLOW_UP_CAP: f64 = 1e12;

/// Coefficients of the affine adjoint representation at one time node.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct RiccatiCoefficients {
    pub A: f64,
    pub B: f64,
    pub C: f64,
    pub D: f64,
    pub E: f64,
    pub F: f64,
    pub G: f64,
    pub I: f64,
    pub J: f64,
    pub K: f64,
    pub L: f64,
    pub O: f64,
}

pub const COEFFICIENT_NAMES: [&str; 12] = ["A", "B", "C", "D", "E", "F", "G", "I", "J", "K", "L", "O"];

impl RiccatiCoefficients {
    pub fn to_array(&self) -> [f64; 12] {
        [self.A, self.B, self.C, self.D, self.E, self.F, self.G, self.I, self.J, self.K, self.L, self.O]
    }

    fn lerp(&self, other: &Self, w: f64) -> Self {
        let a = self.to_array();
        let b = other.to_array();
        let c: [f64; 12] = std::array::from_fn(|k| a[k] + w * (b[k] - a[k]));
        Self {
            A: c[0],
            B: c[1],
            C: c[2],
            D: c[3],
            E: c[4],
            F: c[5],
            G: c[6],
            I: c[7],
            J: c[8],
            K: c[9],
            L: c[10],
            O: c[11],
        }
    }

    fn first_exceeding(&self, cap: f64) -> Option<&'static str> {
        self.to_array().iter().position(|x| !(x.abs() <= cap)).map(|k| COEFFICIENT_NAMES[k])
    }
}

/// Form of the jump-compensator term in the `D` equation; the two agree
/// whenever `E = B` and `J = C`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DEquationVariant {
    /// `-rho M1 (A + B + C)`
    #[default]
    Printed,
    /// `-rho M1 (A + E + J)`
    Compensator,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiccatiOptions {
    pub blow_up_cap: f64,
    pub d_equation_variant: DEquationVariant,
}

impl Default for RiccatiOptions {
    fn default() -> Self {
        Self { blow_up_cap: DEFAULT_BLOW_UP_CAP, d_equation_variant: DEquationVariant::Printed }
    }
}

/// Coefficients on the uniform grid `t_k = k dt`, `k = 0..=n`, `t_n = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiTable {
    pub dt: f64,
    pub horizon: f64,
    pub times: Vec<f64>,
    pub coefficients: Vec<RiccatiCoefficients>,
}

impl RiccatiTable {
    /// Linearly interpolated coefficients at `t`.
    pub fn at(&self, t: f64) -> Result<RiccatiCoefficients> {
        let eps = 1e-9 * self.horizon.max(1.0);
        if !(t >= -eps && t <= self.horizon + eps) {
            return Err(Error::OutOfHorizon { t, horizon: self.horizon });
        }
        let n = self.coefficients.len() - 1;
        let x = (t / self.dt).clamp(0.0, n as f64);
        let k = (x.floor() as usize).min(n);
        if k == n {
            return Ok(self.coefficients[n]);
        }
        Ok(self.coefficients[k].lerp(&self.coefficients[k + 1], x - k as f64))
    }

    /// Coefficients at grid node `k`.
    pub fn node(&self, k: usize) -> &RiccatiCoefficients {
        &self.coefficients[k]
    }

    /// CSV with header `t,A,...,O`, nine significant digits.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t"];
        header.extend(COEFFICIENT_NAMES);
        w.write_record(&header)?;
        for (t, c) in self.times.iter().zip(&self.coefficients) {
            let mut row = vec![crate::format_float(*t)];
            row.extend(c.to_array().iter().map(|&x| crate::format_float(x)));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Time-independent ingredients of the right-hand side.
struct Rates {
    w1: f64,
    w2: f64,
    inv_w3: f64,
    delta: f64,
    /// `rho (1 - M1)`
    rho_c: f64,
    rho_qmin: f64,
    rho_m1: f64,
}

impl Rates {
    fn new(model: &InflowModel, obj: &ObjectiveSpec) -> Self {
        let m1 = model.ts.m1();
        Self {
            w1: obj.w1,
            w2: obj.w2,
            inv_w3: 1.0 / obj.w3,
            delta: obj.delta,
            rho_c: model.rho * (1.0 - m1),
            rho_qmin: model.rho * model.q_min,
            rho_m1: model.rho * m1,
        }
    }

    /// Time derivatives of the `(E, F, G, I, J, L, O)` block with `K = G`.
    fn reduced(&self, x: &RiccatiCoefficients, v_hat: f64) -> [f64; 7] {
        let r = self;
        let RiccatiCoefficients { E, F, G, I, J, L, O, .. } = *x;
        [
            -r.w1 + (r.rho_c + r.delta) * E + J - G - r.inv_w3 * E * F,
            r.w1 + r.delta * F + 2.0 * G - r.inv_w3 * F * F,
            r.delta * G + L - r.inv_w3 * F * G,
            -r.rho_qmin * E + r.delta * I + O - r.inv_w3 * F * I,
            (r.rho_c + r.delta) * J - L - r.inv_w3 * E * G,
            r.w2 + r.delta * L - r.inv_w3 * G * G,
            -r.rho_qmin * J - r.w2 * v_hat + r.delta * O - r.inv_w3 * G * I,
        ]
    }

    /// Time derivatives of `A` and `D` given the other coefficients.
    fn a_d(&self, x: &RiccatiCoefficients, variant: DEquationVariant) -> [f64; 2] {
        let r = self;
        let RiccatiCoefficients { A, B, C, D, E, I, J, O, .. } = *x;
        let jump = match variant {
            DEquationVariant::Printed => A + B + C,
            DEquationVariant::Compensator => A + E + J,
        };
        [
            r.w1 + (2.0 * r.rho_c + r.delta) * A - 2.0 * C - r.inv_w3 * B * B,
            -r.rho_qmin * A + (r.rho_c + r.delta) * D - O - r.inv_w3 * B * I - r.rho_m1 * jump,
        ]
    }

    /// All twelve time derivatives without assuming any symmetry.
    fn full(&self, x: &RiccatiCoefficients, v_hat: f64, variant: DEquationVariant) -> [f64; 12] {
        let r = self;
        let RiccatiCoefficients { A, B, C, D, E, F, G, I, J, K, L, O } = *x;
        let jump = match variant {
            DEquationVariant::Printed => A + B + C,
            DEquationVariant::Compensator => A + E + J,
        };
        [
            r.w1 + (2.0 * r.rho_c + r.delta) * A - J - C - r.inv_w3 * B * E,
            -r.w1 + (r.rho_c + r.delta) * B + C - K - r.inv_w3 * B * F,
            (r.rho_c + r.delta) * C - L - r.inv_w3 * B * G,
            -r.rho_qmin * A + (r.rho_c + r.delta) * D - O - r.inv_w3 * B * I - r.rho_m1 * jump,
            -r.w1 + (r.rho_c + r.delta) * E + J - G - r.inv_w3 * E * F,
            r.w1 + r.delta * F + K + G - r.inv_w3 * F * F,
            r.delta * G + L - r.inv_w3 * F * G,
            -r.rho_qmin * E + r.delta * I + O - r.inv_w3 * F * I,
            (r.rho_c + r.delta) * J - L - r.inv_w3 * E * K,
            r.delta * K + L - r.inv_w3 * K * F,
            r.w2 + r.delta * L - r.inv_w3 * G * K,
            -r.rho_qmin * J - r.w2 * v_hat + r.delta * O - r.inv_w3 * I * K,
        ]
    }
}

fn grid(horizon: f64, dt: f64) -> Result<usize> {
    ensure(dt > 0.0 && dt.is_finite(), "dt", || format!("must be > 0, got {dt}"))?;
    ensure(horizon > 0.0, "horizon", || format!("must be > 0, got {horizon}"))?;
    let n = (horizon / dt).round();
    ensure((n * dt - horizon).abs() <= 1e-9 * horizon && n >= 1.0, "dt", || {
        format!("must divide the horizon {horizon} into whole steps")
    })?;
    Ok(n as usize)
}

fn march(
    obj: &ObjectiveSpec,
    v_max: f64,
    dt: f64,
    opts: &RiccatiOptions,
    mut step: impl FnMut(&RiccatiCoefficients, f64) -> RiccatiCoefficients,
) -> Result<RiccatiTable> {
    obj.validate()?;
    let n = grid(obj.horizon, dt)?;
    let mut coefficients = vec![RiccatiCoefficients::default(); n + 1];
    for k in (0..n).rev() {
        let t_next = (k + 1) as f64 * dt;
        let v_hat = obj.target_at(t_next, v_max);
        let x = step(&coefficients[k + 1], v_hat);
        if let Some(name) = x.first_exceeding(opts.blow_up_cap) {
            return Err(Error::BlowUp { time: k as f64 * dt, coefficient: name, cap: opts.blow_up_cap });
        }
        coefficients[k] = x;
    }
    Ok(RiccatiTable { dt, horizon: obj.horizon, times: (0..=n).map(|k| k as f64 * dt).collect(), coefficients })
}

/// Integrates the reduced `(E, F, G, I, J, L, O)` block backward from zero
/// terminal data, then recovers `B = E`, `C = J`, `K = G` and marches `A`, `D`
/// alongside. The target is evaluated at the node being stepped from.
pub fn solve_riccati(
    model: &InflowModel,
    obj: &ObjectiveSpec,
    v_max: f64,
    dt: f64,
    opts: &RiccatiOptions,
) -> Result<RiccatiTable> {
    let rates = Rates::new(model, obj);
    march(obj, v_max, dt, opts, |x, v_hat| {
        let d = rates.reduced(x, v_hat);
        let ad = rates.a_d(x, opts.d_equation_variant);
        let e = x.E - dt * d[0];
        let j = x.J - dt * d[4];
        let g = x.G - dt * d[2];
        RiccatiCoefficients {
            A: x.A - dt * ad[0],
            B: e,
            C: j,
            D: x.D - dt * ad[1],
            E: e,
            F: x.F - dt * d[1],
            G: g,
            I: x.I - dt * d[3],
            J: j,
            K: g,
            L: x.L - dt * d[5],
            O: x.O - dt * d[6],
        }
    })
}

/// Integrates all twelve coefficient equations independently, with no
/// symmetry imposed. Used to check `E = B`, `J = C`, `K = G`.
pub fn solve_riccati_full(
    model: &InflowModel,
    obj: &ObjectiveSpec,
    v_max: f64,
    dt: f64,
    opts: &RiccatiOptions,
) -> Result<RiccatiTable> {
    let rates = Rates::new(model, obj);
    march(obj, v_max, dt, opts, |x, v_hat| {
        let d = rates.full(x, v_hat, opts.d_equation_variant);
        let c = x.to_array();
        let y: [f64; 12] = std::array::from_fn(|k| c[k] - dt * d[k]);
        RiccatiCoefficients {
            A: y[0],
            B: y[1],
            C: y[2],
            D: y[3],
            E: y[4],
            F: y[5],
            G: y[6],
            I: y[7],
            J: y[8],
            K: y[9],
            L: y[10],
            O: y[11],
        }
    })
}

/// `(p_Q, p_q, p_V)` at time `t` and `state`.
pub fn lq_adjoints(table: &RiccatiTable, t: f64, state: &StateTriple) -> Result<(f64, f64, f64)> {
    let c = table.at(t)?;
    let (q_in, q, v) = (state.inflow, state.outflow, state.volume);
    Ok((
        c.A * q_in + c.B * q + c.C * v + c.D,
        c.E * q_in + c.F * q + c.G * v + c.I,
        c.J * q_in + c.K * q + c.L * v + c.O,
    ))
}

/// Jump sensitivities `(A z, E z, J z)`.
pub fn lq_theta(table: &RiccatiTable, t: f64, z: f64) -> Result<(f64, f64, f64)> {
    ensure(z >= 0.0, "z", || format!("jump size must be >= 0, got {z}"))?;
    let c = table.at(t)?;
    Ok((c.A * z, c.E * z, c.J * z))
}

/// `clip(p_q / w3, -a_cap, a_cap)`.
pub fn lq_optimal_accel(table: &RiccatiTable, t: f64, state: &StateTriple, w3: f64, a_cap: f64) -> Result<f64> {
    ensure(w3 > 0.0, "w3", || format!("must be > 0, got {w3}"))?;
    let (_, p_q, _) = lq_adjoints(table, t, state)?;
    Ok((p_q / w3).clamp(-a_cap, a_cap))
}

/// Feedback policy `a = clip(p_q / w3)` read off a Riccati table on the
/// simulation grid.
pub struct LqPolicy<'a> {
    pub table: &'a RiccatiTable,
    pub w3: f64,
    pub a_cap: f64,
}

impl crate::dynamics::Policy for LqPolicy<'_> {
    fn accel(&self, _step: usize, t: f64, state: &StateTriple) -> f64 {
        lq_optimal_accel(self.table, t, state, self.w3, self.a_cap).unwrap_or(0.0)
    }
}
