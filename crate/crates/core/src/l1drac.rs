//! Sampled-data adaptive rejection controller: a process predictor, a
//! piecewise-constant adaptation law on a Ts grid, matched-component
//! extraction through the input operator, and an exact-discretized low-pass
//! filter.
//!
//! The feedback it produces is added on top of a base policy; the total
//! plant input is base(x) + u. The adaptation estimate is held constant on
//! each [i Ts, (i+1) Ts) and is zero on [0, Ts).

use crate::dynamics::SystemBundle;
use crate::error::{Error, Result};
use crate::numerics::{nullspace_basis, Matrix, Vector};
use crate::policy::Policy;
use crate::simulate::Partition;
use serde::{Deserialize, Serialize};

/// Sign variant of the adaptation coefficient lambda_s (1 - e^{s})^{-1}.
/// `Verbatim` uses s = +lambda_s Ts (negative coefficient, pairs with the
/// predictor's -lambda_s error feedback); `NegatedExponent` uses
/// s = -lambda_s Ts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdaptationSign {
    #[default]
    Verbatim,
    NegatedExponent,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct L1Config {
    /// filter bandwidth, rad/s
    pub omega: f64,
    /// adaptation sampling period, s
    pub ts: f64,
    /// predictor gain, 1/s
    pub lambda_s: f64,
    pub sign_variant: AdaptationSign,
}

impl Default for L1Config {
    fn default() -> Self {
        L1Config {
            omega: 20.0,
            ts: 0.01,
            lambda_s: 10.0,
            sign_variant: AdaptationSign::Verbatim,
        }
    }
}

impl L1Config {
    pub fn validate(&self, dt_sub: f64) -> Result<()> {
        if !(self.omega > 0.0 && self.ts > 0.0 && self.lambda_s > 0.0) {
            return Err(Error::ContractViolation(
                "l1 parameters must be positive".into(),
            ));
        }
        let ratio = self.ts / dt_sub;
        if (ratio - ratio.round()).abs() > 1e-6 || ratio < 1.0 - 1e-9 {
            return Err(Error::ContractViolation(format!(
                "sampling period {} is not an integer multiple of the substep {dt_sub}",
                self.ts
            )));
        }
        Ok(())
    }

    /// The piecewise-constant law's gain on the sampled predictor error.
    pub fn adaptation_coefficient(&self) -> f64 {
        let s = match self.sign_variant {
            AdaptationSign::Verbatim => self.lambda_s * self.ts,
            AdaptationSign::NegatedExponent => -self.lambda_s * self.ts,
        };
        self.lambda_s / (1.0 - s.exp())
    }
}

/// Matched-component extractor: the top m rows of [g | g_perp]^{-1}, so that
/// theta_ad g = I_m and theta_ad g_perp = 0.
pub fn theta_ad(g: &Matrix) -> Result<Matrix> {
    let n = g.rows();
    let m = g.cols();
    let g_perp = nullspace_basis(g)?;
    let g_bar = g.hcat(&g_perp);
    let inv = g_bar.solve(&Matrix::identity(n))?;
    Ok(Matrix::from_fn(m, n, |i, j| inv.get(i, j)))
}

/// Controller state advanced substep by substep.
#[derive(Clone, Debug)]
pub struct L1State {
    /// predictor estimate of the measured state
    pub y_hat: Vector,
    /// full adaptation estimate, constant on the current sampling interval
    pub lambda_hat: Vector,
    /// matched coefficients theta_ad * lambda_hat, the filter input
    pub lambda_hat_matched: Vector,
    /// filter output (the additive control)
    pub u: Vector,
}

impl L1State {
    /// Fresh state at the measured initial condition.
    pub fn new(x0: &Vector, input_dim: usize) -> Self {
        L1State {
            y_hat: x0.clone(),
            lambda_hat: Vector::zeros(x0.dim()),
            lambda_hat_matched: Vector::zeros(input_dim),
            u: Vector::zeros(input_dim),
        }
    }
}

/// One explicit-Euler substep of the predictor
/// y_hat' = -lambda_s (y_hat - y) + f(t, y) + g(t) u_applied + lambda_hat.
///
/// `applied_input` is the total input driving the plant (base policy plus
/// the filter output). Modeling only the filter output would make the
/// adaptation read the base policy as uncertainty and cancel it.
pub fn predictor_step(
    state: &mut L1State,
    sys: &SystemBundle,
    y: &Vector,
    t: f64,
    dt: f64,
    config: &L1Config,
    applied_input: &Vector,
) {
    let mut rate = state.y_hat.sub(y).scale(-config.lambda_s);
    rate.axpy(1.0, &sys.f(t, y));
    rate.axpy(1.0, &sys.g(t).matvec(applied_input));
    rate.axpy(1.0, &state.lambda_hat);
    state.y_hat.axpy(dt, &rate);
}

/// Piecewise-constant adaptation at t = i Ts: both estimates refresh from
/// the sampled predictor error and hold until t + Ts. At i = 0 the law
/// returns zeros.
pub fn adaptation_update(
    state: &mut L1State,
    y: &Vector,
    t: f64,
    config: &L1Config,
    theta: &Matrix,
) -> Result<()> {
    let i = (t / config.ts).round();
    if (t - i * config.ts).abs() > 1e-6 * config.ts {
        return Err(Error::ContractViolation(format!(
            "adaptation time {t} is not on the Ts = {} grid",
            config.ts
        )));
    }
    if i < 1.0 {
        state.lambda_hat = Vector::zeros(state.lambda_hat.dim());
        state.lambda_hat_matched = Vector::zeros(state.lambda_hat_matched.dim());
        return Ok(());
    }
    let coeff = config.adaptation_coefficient();
    state.lambda_hat = state.y_hat.sub(y).scale(coeff);
    state.lambda_hat_matched = theta.matvec(&state.lambda_hat);
    Ok(())
}

/// Exact exponential discretization of u' = -omega u - omega lambda_matched
/// over one substep with the filter input held constant.
pub fn filter_step(state: &mut L1State, dt: f64, config: &L1Config) {
    let decay = (-config.omega * dt).exp();
    for i in 0..state.u.dim() {
        state.u[i] = decay * state.u[i] - (1.0 - decay) * state.lambda_hat_matched[i];
    }
}

/// One controller substep at measurement (t, y): adaptation when t is on the
/// Ts grid, then predictor and filter. `base_input` is the mid-level policy
/// output at y; the plant applies base_input + (returned u). Returns the
/// additive control.
pub fn l1_control(
    state: &mut L1State,
    sys: &SystemBundle,
    y: &Vector,
    t: f64,
    dt: f64,
    config: &L1Config,
    base_input: &Vector,
) -> Result<Vector> {
    let i = (t / config.ts).round();
    if (t - i * config.ts).abs() <= 1e-6 * config.ts.min(dt) {
        let theta = theta_ad(&sys.g(t))?;
        adaptation_update(state, y, i * config.ts, config, &theta)?;
    }
    let applied = base_input.add(&state.u);
    predictor_step(state, sys, y, t, dt, config, &applied);
    filter_step(state, dt, config);
    Ok(state.u.clone())
}

/// Controller trace row sampled at partition knots.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: f64,
    pub y_hat: Vector,
    pub lambda_hat: Vector,
    pub u: Vector,
}

/// What the controller records as it runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceMode {
    Off,
    Knots,
    EverySubstep,
}

/// Ready-to-use feedback for the SDE integrator: total input
/// base(x) + u_l1. One instance drives exactly one trajectory.
pub struct L1Controller<'a> {
    base: &'a dyn Policy,
    sys: &'a SystemBundle,
    config: L1Config,
    partition: Partition,
    state: Option<L1State>,
    trace_mode: TraceMode,
    pub trace: Vec<TraceRow>,
}

impl<'a> L1Controller<'a> {
    pub fn new(
        base: &'a dyn Policy,
        sys: &'a SystemBundle,
        config: L1Config,
        partition: Partition,
    ) -> Result<Self> {
        config.validate(partition.dt_sub())?;
        Ok(L1Controller {
            base,
            sys,
            config,
            partition,
            state: None,
            trace_mode: TraceMode::Off,
            trace: Vec::new(),
        })
    }

    pub fn with_trace(mut self, mode: TraceMode) -> Self {
        self.trace_mode = mode;
        self
    }

    pub fn state(&self) -> Option<&L1State> {
        self.state.as_ref()
    }

    /// Substep callback for `integrate_sde`. A trace row at time t carries
    /// y_hat(t), u(t), and the adaptation estimate holding on [t, t+dt).
    pub fn control(&mut self, t: f64, x: &Vector) -> Vector {
        if self.state.is_none() {
            self.state = Some(L1State::new(x, self.sys.input_dim));
        }
        let dt = self.partition.dt_sub();
        let state = self.state.as_mut().expect("initialized above");
        let i = (t / self.config.ts).round();
        if (t - i * self.config.ts).abs() <= 1e-6 * self.config.ts.min(dt) {
            if let Ok(theta) = theta_ad(&self.sys.g(t)) {
                let _ = adaptation_update(state, x, i * self.config.ts, &self.config, &theta);
            }
        }
        let record = match self.trace_mode {
            TraceMode::Off => false,
            TraceMode::EverySubstep => true,
            TraceMode::Knots => self.partition.knot_index(t).is_ok(),
        };
        if record {
            self.trace.push(TraceRow {
                t,
                y_hat: state.y_hat.clone(),
                lambda_hat: state.lambda_hat.clone(),
                u: state.u.clone(),
            });
        }
        let base = self.base.evaluate(x);
        let applied = base.add(&state.u);
        predictor_step(state, self.sys, x, t, dt, &self.config, &applied);
        filter_step(state, dt, &self.config);
        let mut u = base;
        u.axpy(1.0, &state.u);
        u
    }

    /// Trace CSV `t,yhat1..n,lambdahat1..n,u1..m`.
    pub fn trace_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        let n = self.sys.state_dim;
        let m = self.sys.input_dim;
        let mut header = String::from("t");
        for i in 1..=n {
            header.push_str(&format!(",yhat{i}"));
        }
        for i in 1..=n {
            header.push_str(&format!(",lambdahat{i}"));
        }
        for i in 1..=m {
            header.push_str(&format!(",u{i}"));
        }
        writeln!(w, "{header}")?;
        for row in &self.trace {
            let mut line = format!("{}", row.t);
            for v in row.y_hat.as_slice() {
                line.push_str(&format!(",{v}"));
            }
            for v in row.lambda_hat.as_slice() {
                line.push_str(&format!(",{v}"));
            }
            for v in row.u.as_slice() {
                line.push_str(&format!(",{v}"));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Drift-uncertainty bound inflated to absorb a policy-shift perturbation
/// with value gap psi0 at the origin and Lipschitz gap l_gap:
/// ||g (pi_hat - pi*)(x)|| <= delta_g sqrt(psi0^2 + l_gap^2) sqrt(1+||x||^2).
pub fn inflated_delta_mu(delta_mu: f64, delta_g: f64, psi0: f64, l_gap: f64) -> f64 {
    delta_mu + delta_g * (psi0 * psi0 + l_gap * l_gap).sqrt()
}
