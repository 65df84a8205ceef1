//! Imitation-gap estimators with Monte Carlo error bars, the gap
//! decomposition on shared samples, incremental-stability bound checks, and
//! contraction certification.

use crate::dynamics::SystemBundle;
use crate::error::{Error, Result};
use crate::l1drac::{L1Config, L1Controller};
use crate::numerics::{log_norm_2, Matrix, RngStream, Vector};
use crate::policy::{PerturbationSignal, Policy};
use crate::simulate::{integrate_ode, integrate_sde, InitialLaw, Partition, Trajectory};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Moment orders 2p reported alongside the mean gap (p = 1, 2, 3).
pub const MOMENT_ORDERS: [usize; 3] = [1, 2, 3];

/// How the closed-loop drift Jacobian is obtained for certification.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JacobianMode {
    /// 4th-order central differences (Richardson-extrapolated 2-point
    /// stencil) at step 1e-5.
    FiniteDifference,
    /// The bundle's analytic drift Jacobian.
    Analytic,
}

/// 4th-order central-difference Jacobian of the nominal drift.
pub fn fd_drift_jacobian(sys: &SystemBundle, t: f64, x: &Vector) -> Matrix {
    let n = sys.state_dim;
    let h = 1e-5;
    let mut jac = Matrix::zeros(n, n);
    for j in 0..n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        let mut xpp = x.clone();
        let mut xmm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        xpp[j] += 2.0 * h;
        xmm[j] -= 2.0 * h;
        let fp = sys.f(t, &xp);
        let fm = sys.f(t, &xm);
        let fpp = sys.f(t, &xpp);
        let fmm = sys.f(t, &xmm);
        for i in 0..n {
            jac.set(i, j, (8.0 * (fp[i] - fm[i]) - (fpp[i] - fmm[i])) / (12.0 * h));
        }
    }
    jac
}

/// Certify the closed-loop contraction rate: probe log_norm_2 of
/// d/dx [f(t,x) + g(t) pi(x)] at random (t, x) and return
/// lambda = -max mu. Fails with the worst probe when the max is
/// non-negative.
pub fn certify_contraction(
    sys: &SystemBundle,
    policy: &dyn Policy,
    probe_radius: f64,
    probes: usize,
    horizon: f64,
    stream: RngStream,
    mode: JacobianMode,
) -> Result<f64> {
    if probes < 10_000 {
        return Err(Error::ContractViolation(
            "contraction certification needs at least 1e4 probes".into(),
        ));
    }
    let n = sys.state_dim;
    let mut cursor = stream.cursor();
    let mut worst: Option<(f64, Vector, f64)> = None;
    for i in 0..probes {
        let t = horizon * cursor.next().abs().fract();
        let raw = Vector((0..n).map(|_| cursor.next()).collect());
        let nrm = raw.norm().max(1e-12);
        // radii biased toward the boundary plus a few interior shells
        let r = probe_radius * ((i % 10) as f64 + 1.0) / 10.0;
        let x = raw.scale(r / nrm);
        let jac_f = match mode {
            JacobianMode::FiniteDifference => fd_drift_jacobian(sys, t, &x),
            JacobianMode::Analytic => match sys.drift_jacobian() {
                Some(j) => j(t, &x),
                None => {
                    return Err(Error::ContractViolation(
                        "bundle has no analytic drift Jacobian".into(),
                    ))
                }
            },
        };
        let closed = jac_f.add(&sys.g(t).matmul(&policy.state_jacobian(&x)));
        let mu = log_norm_2(&closed)?;
        if worst.as_ref().map_or(true, |w| mu > w.2) {
            worst = Some((t, x, mu));
        }
    }
    let (t, state, mu) = worst.expect("at least one probe");
    if mu >= 0.0 {
        return Err(Error::CertificationFailed {
            t,
            state: state.0,
            log_norm: mu,
        });
    }
    Ok(-mu)
}

/// Free parameter of the incremental-stability bound; lambda_theta
/// = 2 lambda - theta delta_g^2 must stay positive.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DeltaIssParams {
    pub lambda: f64,
    pub theta: f64,
    pub delta_g: f64,
    pub lambda_theta: f64,
}

impl DeltaIssParams {
    pub fn new(lambda: f64, theta: f64, delta_g: f64) -> Result<Self> {
        let upper = 2.0 * lambda / (delta_g * delta_g);
        if !(theta > 0.0 && theta < upper) {
            return Err(Error::ContractViolation(format!(
                "theta {theta} outside (0, {upper})"
            )));
        }
        Ok(DeltaIssParams {
            lambda,
            theta,
            delta_g,
            lambda_theta: 2.0 * lambda - theta * delta_g * delta_g,
        })
    }
}

/// 20 log-spaced admissible theta values spanning (0.01, 0.99) of the open
/// interval (0, 2 lambda / delta_g^2).
pub fn theta_grid(lambda: f64, delta_g: f64) -> Vec<f64> {
    let upper = 2.0 * lambda / (delta_g * delta_g);
    let lo = 0.01 * upper;
    let hi = 0.99 * upper;
    (0..20)
        .map(|i| lo * (hi / lo).powf(i as f64 / 19.0))
        .collect()
}

/// Both sides of the incremental bound at one knot.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DeltaIssRow {
    pub t: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
}

/// Integrate the perturbed (xi1, sigma) and unperturbed (xi2) nominal
/// closed loops under the expert and evaluate
///   lhs = ||y_t - x_t||,
///   rhs = e^{-lambda_theta t / 2} ||xi1 - xi2||
///         + sqrt((1 - e^{-lambda_theta t}) / (theta lambda_theta)) sup||sigma||
/// at every knot. A negative margin is a falsification event, returned as
/// data.
pub fn delta_iss_check(
    sys: &SystemBundle,
    expert: &dyn Policy,
    perturbation: &PerturbationSignal,
    xi1: &Vector,
    xi2: &Vector,
    params: &DeltaIssParams,
    partition: &Partition,
) -> Result<Vec<DeltaIssRow>> {
    let perturbed = integrate_ode(
        sys,
        &|x: &Vector| expert.evaluate(x),
        Some(perturbation.values()),
        xi1,
        partition,
    )?;
    let reference = integrate_ode(sys, &|x: &Vector| expert.evaluate(x), None, xi2, partition)?;
    if perturbed.is_diverged() || reference.is_diverged() {
        return Err(Error::ContractViolation(
            "nominal rollout diverged during bound check".into(),
        ));
    }
    let dxi = xi1.sub(xi2).norm();
    let sup_input = perturbation.max_norm();
    let gain = 1.0 / (params.theta * params.lambda_theta).sqrt();
    let rows = (0..=partition.k)
        .map(|j| {
            let t = partition.knot(j);
            let lhs = perturbed.states[j].sub(&reference.states[j]).norm();
            let rhs = (-params.lambda_theta * t / 2.0).exp() * dxi
                + gain * (1.0 - (-params.lambda_theta * t).exp()).sqrt() * sup_input;
            DeltaIssRow {
                t,
                lhs,
                rhs,
                margin: rhs - lhs,
            }
        })
        .collect();
    Ok(rows)
}

/// How initial pairs (xi, xi_bar) are coupled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CouplingMode {
    /// xi_bar = xi, both from the primary law.
    Synchronous,
    /// independent draws: xi from the primary law, xi_bar from the
    /// secondary one.
    Product,
    /// xi_bar = scale * xi + shift (comonotone image of the primary law).
    Shifted { shift: Vec<f64>, scale: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingSpec {
    pub mode: CouplingMode,
    pub d_law: InitialLaw,
    /// secondary marginal; only meaningful under `Product`
    pub d_bar_law: Option<InitialLaw>,
}

/// Index offset separating xi_bar draws from xi draws under product
/// coupling.
const PRODUCT_INDEX_OFFSET: u64 = 1 << 32;

impl CouplingSpec {
    pub fn synchronous(d_law: InitialLaw) -> Self {
        CouplingSpec {
            mode: CouplingMode::Synchronous,
            d_law,
            d_bar_law: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.d_law.validate()?;
        if let Some(law) = &self.d_bar_law {
            law.validate()?;
        }
        if matches!(self.mode, CouplingMode::Product) && self.d_bar_law.is_none() {
            return Err(Error::ContractViolation(
                "product coupling needs a secondary law".into(),
            ));
        }
        Ok(())
    }

    /// Pair number `index` under `master_seed`.
    pub fn draw_pair(&self, master_seed: u64, index: u64) -> (Vector, Vector) {
        let xi = self.d_law.sample(master_seed, index);
        let xi_bar = match &self.mode {
            CouplingMode::Synchronous => xi.clone(),
            CouplingMode::Product => self
                .d_bar_law
                .as_ref()
                .expect("validated")
                .sample(master_seed, index + PRODUCT_INDEX_OFFSET),
            CouplingMode::Shifted { shift, scale } => {
                let mut v = xi.scale(*scale);
                v.axpy(1.0, &Vector::from_slice(shift));
                v
            }
        };
        (xi, xi_bar)
    }
}

/// Per-knot gap statistics between paired rollouts. Diverged pairs are
/// excluded from the means and counted per knot.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GapReport {
    pub times: Vec<f64>,
    pub gap_mean: Vec<f64>,
    pub gap_se: Vec<f64>,
    /// 2p-th root of the 2p-th moment per knot, one row per entry of
    /// `p_orders`
    pub moments: Vec<Vec<f64>>,
    pub p_orders: Vec<usize>,
    /// pairs missing (diverged) at each knot
    pub diverged: Vec<usize>,
    pub ensemble_size: usize,
    pub max_gap: f64,
    pub argmax_knot: usize,
}

impl GapReport {
    /// Mean-gap curve maximum; NaN knots (no survivors) are skipped.
    pub fn max_over_knots(&self) -> f64 {
        self.max_gap
    }

    pub fn max_moment(&self, order_index: usize) -> f64 {
        self.moments[order_index]
            .iter()
            .cloned()
            .filter(|v| v.is_finite())
            .fold(0.0, f64::max)
    }

    pub fn total_diverged(&self) -> usize {
        self.diverged.last().copied().unwrap_or(0)
    }

    /// CSV `t,gap_mean,gap_se,p2_moment,p4_moment,p6_moment,diverged_count`.
    pub fn to_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "t,gap_mean,gap_se,p2_moment,p4_moment,p6_moment,diverged_count"
        )?;
        for j in 0..self.times.len() {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                self.times[j],
                self.gap_mean[j],
                self.gap_se[j],
                self.moments[0][j],
                self.moments[1][j],
                self.moments[2][j],
                self.diverged[j]
            )?;
        }
        Ok(())
    }

    /// JSON summary with the max-over-knots values and metadata.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "max_gap": self.max_gap,
            "argmax_t": self.times.get(self.argmax_knot),
            "max_p2_moment": self.max_moment(0),
            "max_p4_moment": self.max_moment(1),
            "max_p6_moment": self.max_moment(2),
            "ensemble_size": self.ensemble_size,
            "diverged_count": self.total_diverged(),
        })
    }
}

/// Build the per-knot statistics for ||comparison - reference|| over pairs.
pub fn gap_report_from_pairs(
    reference: &[Trajectory],
    comparison: &[Trajectory],
    partition: &Partition,
) -> GapReport {
    assert_eq!(reference.len(), comparison.len());
    let n_pairs = reference.len();
    let mut times = Vec::with_capacity(partition.k + 1);
    let mut gap_mean = Vec::with_capacity(partition.k + 1);
    let mut gap_se = Vec::with_capacity(partition.k + 1);
    let mut moments = vec![Vec::with_capacity(partition.k + 1); MOMENT_ORDERS.len()];
    let mut diverged = Vec::with_capacity(partition.k + 1);
    let mut max_gap = f64::NEG_INFINITY;
    let mut argmax_knot = 0;
    for j in 0..=partition.k {
        times.push(partition.knot(j));
        let mut gaps = Vec::with_capacity(n_pairs);
        for (r, c) in reference.iter().zip(comparison) {
            if r.alive_at(j) && c.alive_at(j) {
                gaps.push(c.states[j].sub(&r.states[j]).norm());
            }
        }
        diverged.push(n_pairs - gaps.len());
        if gaps.is_empty() {
            gap_mean.push(f64::NAN);
            gap_se.push(f64::NAN);
            for m in moments.iter_mut() {
                m.push(f64::NAN);
            }
            continue;
        }
        let nf = gaps.len() as f64;
        let mean = gaps.iter().sum::<f64>() / nf;
        let var = if gaps.len() > 1 {
            gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (nf - 1.0)
        } else {
            0.0
        };
        gap_mean.push(mean);
        gap_se.push((var / nf).sqrt());
        for (mi, &p) in MOMENT_ORDERS.iter().enumerate() {
            let pw = 2 * p as i32;
            let m = gaps.iter().map(|g| g.powi(pw)).sum::<f64>() / nf;
            moments[mi].push(m.powf(1.0 / pw as f64));
        }
        if mean > max_gap {
            max_gap = mean;
            argmax_knot = j;
        }
    }
    GapReport {
        times,
        gap_mean,
        gap_se,
        moments,
        p_orders: MOMENT_ORDERS.to_vec(),
        diverged,
        ensemble_size: n_pairs,
        max_gap,
        argmax_knot,
    }
}

/// Per-path max-over-knots gap; None when either path diverged.
pub fn per_path_max_gaps(
    reference: &[Trajectory],
    comparison: &[Trajectory],
) -> Vec<Option<f64>> {
    reference
        .iter()
        .zip(comparison)
        .map(|(r, c)| {
            if r.is_diverged() || c.is_diverged() {
                return None;
            }
            Some(
                r.states
                    .iter()
                    .zip(&c.states)
                    .map(|(a, b)| b.sub(a).norm())
                    .fold(0.0, f64::max),
            )
        })
        .collect()
}

/// Policy-shift gap: paired nominal rollouts under pi_hat and the expert
/// from identical initial conditions.
pub fn policy_gap(
    pi_hat: &dyn Policy,
    expert: &dyn Policy,
    sys: &SystemBundle,
    initial_states: &[Vector],
    partition: &Partition,
) -> Result<GapReport> {
    let pairs: Vec<(Trajectory, Trajectory)> = initial_states
        .par_iter()
        .map(|xi| {
            let hat = integrate_ode(sys, &|x: &Vector| pi_hat.evaluate(x), None, xi, partition)?;
            let star = integrate_ode(sys, &|x: &Vector| expert.evaluate(x), None, xi, partition)?;
            Ok((star, hat))
        })
        .collect::<Result<Vec<_>>>()?;
    let (reference, comparison): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    Ok(gap_report_from_pairs(&reference, &comparison, partition))
}

/// Paired rollouts for one uncertain-vs-nominal comparison: per sample i,
/// a nominal ODE under `reference_policy` from xi and an SDE under
/// base + optional additive controller from xi_bar with Brownian stream i.
fn paired_uncertain_rollouts(
    base: &dyn Policy,
    reference_policy: &dyn Policy,
    l1: Option<&L1Config>,
    sys: &SystemBundle,
    coupling: &CouplingSpec,
    ensemble_size: usize,
    partition: &Partition,
    master_seed: u64,
) -> Result<(Vec<Trajectory>, Vec<Trajectory>)> {
    coupling.validate()?;
    if let Some(config) = l1 {
        config.validate(partition.dt_sub())?;
    }
    let pairs: Vec<(Trajectory, Trajectory)> = (0..ensemble_size)
        .into_par_iter()
        .map(|i| {
            let (xi, xi_bar) = coupling.draw_pair(master_seed, i as u64);
            let nominal = integrate_ode(
                sys,
                &|x: &Vector| reference_policy.evaluate(x),
                None,
                &xi,
                partition,
            )?;
            let stream = RngStream::new(master_seed, i as u64);
            let uncertain = match l1 {
                Some(config) => {
                    let mut ctrl = L1Controller::new(base, sys, *config, *partition)?;
                    let mut cb = |t: f64, x: &Vector| ctrl.control(t, x);
                    integrate_sde(sys, &mut cb, &xi_bar, partition, stream)?
                }
                None => {
                    let mut cb = |_t: f64, x: &Vector| base.evaluate(x);
                    integrate_sde(sys, &mut cb, &xi_bar, partition, stream)?
                }
            };
            Ok((nominal, uncertain))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(pairs.into_iter().unzip())
}

/// Uncertainty-induced gap: uncertain rollouts under base (+ additive
/// controller) against nominal rollouts under the same base policy.
#[allow(clippy::too_many_arguments)]
pub fn uncertainty_gap(
    base: &dyn Policy,
    l1: Option<&L1Config>,
    sys: &SystemBundle,
    coupling: &CouplingSpec,
    ensemble_size: usize,
    partition: &Partition,
    master_seed: u64,
) -> Result<GapReport> {
    if ensemble_size < 30 {
        return Err(Error::ContractViolation(
            "uncertainty gap needs at least 30 samples for error bars".into(),
        ));
    }
    let (reference, comparison) = paired_uncertain_rollouts(
        base,
        base,
        l1,
        sys,
        coupling,
        ensemble_size,
        partition,
        master_seed,
    )?;
    Ok(gap_report_from_pairs(&reference, &comparison, partition))
}

/// Total gap: uncertain rollouts under base (+ additive controller) against
/// nominal expert rollouts.
#[allow(clippy::too_many_arguments)]
pub fn total_gap(
    base: &dyn Policy,
    expert: &dyn Policy,
    l1: Option<&L1Config>,
    sys: &SystemBundle,
    coupling: &CouplingSpec,
    ensemble_size: usize,
    partition: &Partition,
    master_seed: u64,
) -> Result<GapReport> {
    if ensemble_size < 30 {
        return Err(Error::ContractViolation(
            "total gap needs at least 30 samples for error bars".into(),
        ));
    }
    let (reference, comparison) = paired_uncertain_rollouts(
        base,
        expert,
        l1,
        sys,
        coupling,
        ensemble_size,
        partition,
        master_seed,
    )?;
    Ok(gap_report_from_pairs(&reference, &comparison, partition))
}

/// Empirical max-over-knots 2p-th root of the 2p-th moment of state norms.
pub fn moment_bound(trajectories: &[Trajectory], p: usize) -> Result<f64> {
    if trajectories.is_empty() || p < 1 {
        return Err(Error::ContractViolation(
            "moment bound needs a non-empty ensemble and p >= 1".into(),
        ));
    }
    let k = trajectories[0].partition.k;
    let pw = 2 * p as i32;
    let mut max = 0.0f64;
    for j in 0..=k {
        let alive: Vec<f64> = trajectories
            .iter()
            .filter(|t| t.alive_at(j))
            .map(|t| t.states[j].norm().powi(pw))
            .collect();
        if alive.is_empty() {
            continue;
        }
        let m = (alive.iter().sum::<f64>() / alive.len() as f64).powf(1.0 / pw as f64);
        max = max.max(m);
    }
    Ok(max)
}

/// Shared-sample rollouts for the three comparison scenarios plus the
/// expert reference. Scenario (ii) and (iii) share Brownian streams, so the
/// contrast between them is driven by the controller alone.
pub struct ScenarioPaths {
    pub expert_nominal: Vec<Trajectory>,
    pub tasil_nominal: Vec<Trajectory>,
    pub uncertain_tasil: Vec<Trajectory>,
    pub uncertain_drip: Vec<Trajectory>,
}

#[allow(clippy::too_many_arguments)]
pub fn run_scenarios(
    tasil: &dyn Policy,
    expert: &dyn Policy,
    l1: &L1Config,
    sys: &SystemBundle,
    coupling: &CouplingSpec,
    ensemble_size: usize,
    partition: &Partition,
    master_seed: u64,
) -> Result<ScenarioPaths> {
    coupling.validate()?;
    l1.validate(partition.dt_sub())?;
    let rows: Vec<(Trajectory, Trajectory, Trajectory, Trajectory)> = (0..ensemble_size)
        .into_par_iter()
        .map(|i| {
            let (xi, xi_bar) = coupling.draw_pair(master_seed, i as u64);
            let star =
                integrate_ode(sys, &|x: &Vector| expert.evaluate(x), None, &xi, partition)?;
            let hat = integrate_ode(sys, &|x: &Vector| tasil.evaluate(x), None, &xi, partition)?;
            let stream = RngStream::new(master_seed, i as u64);
            let mut plain = |_t: f64, x: &Vector| tasil.evaluate(x);
            let unc_tasil = integrate_sde(sys, &mut plain, &xi_bar, partition, stream)?;
            let mut ctrl = L1Controller::new(tasil, sys, *l1, *partition)?;
            let mut cb = |t: f64, x: &Vector| ctrl.control(t, x);
            let unc_drip = integrate_sde(sys, &mut cb, &xi_bar, partition, stream)?;
            Ok((star, hat, unc_tasil, unc_drip))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut paths = ScenarioPaths {
        expert_nominal: Vec::with_capacity(ensemble_size),
        tasil_nominal: Vec::with_capacity(ensemble_size),
        uncertain_tasil: Vec::with_capacity(ensemble_size),
        uncertain_drip: Vec::with_capacity(ensemble_size),
    };
    for (a, b, c, d) in rows {
        paths.expert_nominal.push(a);
        paths.tasil_nominal.push(b);
        paths.uncertain_tasil.push(c);
        paths.uncertain_drip.push(d);
    }
    Ok(paths)
}

/// Largest violation of the pathwise triangle inequality
/// ||X - x*|| <= ||x_hat - x*|| + ||X - x_hat|| over shared samples,
/// evaluated at every knot where all three paths are alive. Exact up to
/// rounding by construction.
pub fn decomposition_violation(paths: &ScenarioPaths) -> f64 {
    let mut worst = f64::NEG_INFINITY;
    for i in 0..paths.expert_nominal.len() {
        let star = &paths.expert_nominal[i];
        let hat = &paths.tasil_nominal[i];
        let x = &paths.uncertain_drip[i];
        let k = star.partition.k;
        for j in 0..=k {
            if !(star.alive_at(j) && hat.alive_at(j) && x.alive_at(j)) {
                continue;
            }
            let total = x.states[j].sub(&star.states[j]).norm();
            let pol = hat.states[j].sub(&star.states[j]).norm();
            let unc = x.states[j].sub(&hat.states[j]).norm();
            worst = worst.max(total - (pol + unc));
        }
    }
    worst
}
