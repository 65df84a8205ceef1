//! Training data generation and the first-order imitation trainer.
//!
//! The loss per expert trajectory is
//!   1/2 ( max_t ||psi_t||  +  max_t ||d_x psi_t|| )
//! with psi the policy mismatch along the expert rollout and the max taken
//! over the partition knots excluding T. The hard max is optionally smoothed
//! with a normalized log-sum-exp so early gradients stay informative; the
//! smoothed value never exceeds the hard max and trails it by at most
//! log(k)/beta.

use crate::error::{Error, Result};
use crate::numerics::{sym_eig, Matrix, RngStream, Vector};
use crate::policy::{MlpPolicy, Policy};
use crate::simulate::{integrate_ode, InitialLaw, Partition, Trajectory};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Expert rollouts at the partition knots. Expert actions are recomputed
/// from states on demand rather than stored.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub trajectories: Vec<Trajectory>,
    pub initial_law: InitialLaw,
    pub partition: Partition,
    pub master_seed: u64,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

/// n expert rollouts on the nominal system from i.i.d. initial draws.
/// The initial law must have compact support; a diverged expert rollout is
/// a hard error since it contradicts the contraction certificate.
pub fn generate_training_data(
    sys: &crate::dynamics::SystemBundle,
    expert: &dyn Policy,
    initial_law: &InitialLaw,
    n: usize,
    partition: &Partition,
    master_seed: u64,
) -> Result<TrainingSet> {
    if n < 1 {
        return Err(Error::ContractViolation("need n >= 1 trajectories".into()));
    }
    initial_law.validate()?;
    if !initial_law.has_compact_support() {
        return Err(Error::ContractViolation(
            "training initial law must have compact support".into(),
        ));
    }
    let trajectories: Vec<Trajectory> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = initial_law.sample(master_seed, i as u64);
            let traj = integrate_ode(sys, &|x: &Vector| expert.evaluate(x), None, &xi, partition)?;
            if traj.is_diverged() {
                return Err(Error::ExpertUnstable(format!(
                    "trajectory {i} diverged at knot {:?}",
                    traj.diverged_at
                )));
            }
            Ok(traj)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingSet {
        trajectories,
        initial_law: initial_law.clone(),
        partition: *partition,
        master_seed,
    })
}

/// Aggregation over knots: exact max, or (1/beta) log mean exp(beta v).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Smoothing {
    HardMax,
    LogSumExp { beta: f64 },
}

/// Matrix norm used on the Jacobian mismatch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum JacNorm {
    #[default]
    Operator2,
    Frobenius,
}

/// Which loss terms participate; `ValueOnly` is the behavioral-cloning
/// baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Full,
    ValueOnly,
}

/// Loss diagnostics. The per-trajectory terms are always the hard max;
/// `mean_loss` uses the requested smoothing (they coincide under `HardMax`).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TasilLossReport {
    pub per_traj_value: Vec<f64>,
    pub per_traj_jac: Vec<f64>,
    pub value_argmax: Vec<usize>,
    pub jac_argmax: Vec<usize>,
    pub mean_loss: f64,
    pub mean_value_term: f64,
    pub mean_jac_term: f64,
}

/// Aggregate a knot series per the smoothing mode.
pub fn smooth_aggregate(values: &[f64], smoothing: Smoothing) -> f64 {
    match smoothing {
        Smoothing::HardMax => values.iter().cloned().fold(0.0, f64::max),
        Smoothing::LogSumExp { beta } => {
            let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mean_exp = values
                .iter()
                .map(|v| ((v - max) * beta).exp())
                .sum::<f64>()
                / values.len() as f64;
            max + mean_exp.ln() / beta
        }
    }
}

/// Softmax weights d agg / d v_t for the chosen aggregation.
fn aggregate_weights(values: &[f64], smoothing: Smoothing) -> Vec<f64> {
    match smoothing {
        Smoothing::HardMax => {
            let mut w = vec![0.0; values.len()];
            let mut arg = 0;
            for (i, v) in values.iter().enumerate() {
                if *v > values[arg] {
                    arg = i;
                }
            }
            w[arg] = 1.0;
            w
        }
        Smoothing::LogSumExp { beta } => {
            let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = values.iter().map(|v| ((v - max) * beta).exp()).collect();
            let z: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / z).collect()
        }
    }
}

fn matrix_norm(e: &Matrix, norm: JacNorm) -> f64 {
    match norm {
        JacNorm::Operator2 => e.op_norm_2(),
        JacNorm::Frobenius => e.frobenius_norm(),
    }
}

struct TrajTerms {
    value_norms: Vec<f64>,
    jac_norms: Vec<f64>,
    /// mismatch matrices, kept for the gradient pass
    mismatches: Vec<Matrix>,
}

fn trajectory_terms(
    pi_hat: &MlpPolicy,
    expert: &dyn Policy,
    traj: &Trajectory,
    jac_norm: JacNorm,
    mode: TrainMode,
) -> TrajTerms {
    let k = traj.partition.k;
    let mut value_norms = Vec::with_capacity(k);
    let mut jac_norms = Vec::with_capacity(k);
    let mut mismatches = Vec::with_capacity(k);
    for x in &traj.states[..k] {
        let psi = pi_hat.evaluate(x).sub(&expert.evaluate(x));
        value_norms.push(psi.norm());
        if mode == TrainMode::Full {
            let e = pi_hat.state_jacobian(x).sub(&expert.state_jacobian(x));
            jac_norms.push(matrix_norm(&e, jac_norm));
            mismatches.push(e);
        } else {
            jac_norms.push(0.0);
        }
    }
    TrajTerms {
        value_norms,
        jac_norms,
        mismatches,
    }
}

/// Evaluate the loss over the training set.
pub fn tasil_loss(
    pi_hat: &MlpPolicy,
    expert: &dyn Policy,
    set: &TrainingSet,
    smoothing: Smoothing,
    jac_norm: JacNorm,
    mode: TrainMode,
) -> Result<TasilLossReport> {
    if pi_hat.state_dim() != expert.state_dim() || pi_hat.input_dim() != expert.input_dim() {
        return Err(Error::ContractViolation(
            "policy dimensions do not match the expert".into(),
        ));
    }
    let terms: Vec<TrajTerms> = set
        .trajectories
        .par_iter()
        .map(|traj| trajectory_terms(pi_hat, expert, traj, jac_norm, mode))
        .collect();
    let n = terms.len() as f64;
    let mut report = TasilLossReport {
        per_traj_value: Vec::with_capacity(terms.len()),
        per_traj_jac: Vec::with_capacity(terms.len()),
        value_argmax: Vec::with_capacity(terms.len()),
        jac_argmax: Vec::with_capacity(terms.len()),
        mean_loss: 0.0,
        mean_value_term: 0.0,
        mean_jac_term: 0.0,
    };
    for t in &terms {
        let argmax = |v: &[f64]| {
            v.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0)
        };
        report
            .per_traj_value
            .push(t.value_norms.iter().cloned().fold(0.0, f64::max));
        report
            .per_traj_jac
            .push(t.jac_norms.iter().cloned().fold(0.0, f64::max));
        report.value_argmax.push(argmax(&t.value_norms));
        report.jac_argmax.push(argmax(&t.jac_norms));
        let v_agg = smooth_aggregate(&t.value_norms, smoothing);
        let j_agg = if mode == TrainMode::Full {
            smooth_aggregate(&t.jac_norms, smoothing)
        } else {
            0.0
        };
        report.mean_loss += 0.5 * (v_agg + j_agg) / n;
        report.mean_value_term += v_agg / n;
        report.mean_jac_term += j_agg / n;
    }
    Ok(report)
}

/// Loss and its exact parameter gradient in one pass.
///
/// The operator-norm subgradient at a knot is u1 v1^T (top singular pair of
/// the mismatch), so the parameter pullback is the Jacobian bilinear-form
/// reverse pass. The Frobenius subgradient contracts the full mismatch
/// matrix row by row through the same machinery.
pub fn loss_and_gradient(
    pi_hat: &MlpPolicy,
    expert: &dyn Policy,
    set: &TrainingSet,
    smoothing: Smoothing,
    jac_norm: JacNorm,
    mode: TrainMode,
) -> Result<(TasilLossReport, Vec<f64>)> {
    let report = tasil_loss(pi_hat, expert, set, smoothing, jac_norm, mode)?;
    let n_traj = set.trajectories.len();
    let p = pi_hat.net.param_count();
    let per_traj: Vec<Vec<f64>> = set
        .trajectories
        .par_iter()
        .map(|traj| {
            let mut grad = vec![0.0; p];
            let terms = trajectory_terms(pi_hat, expert, traj, jac_norm, mode);
            let w_val = aggregate_weights(&terms.value_norms, smoothing);
            let w_jac = aggregate_weights(&terms.jac_norms, smoothing);
            let k = traj.partition.k;
            for (t, x) in traj.states[..k].iter().enumerate() {
                let trace = pi_hat.net.forward_trace(x);
                // value term: d||psi||/dtheta = (psi/||psi||)^T dpi/dtheta
                let scale_v = 0.5 * w_val[t] / n_traj as f64;
                if scale_v != 0.0 && terms.value_norms[t] > 1e-300 {
                    let psi = pi_hat.evaluate(x).sub(&expert.evaluate(x));
                    let cot = psi.scale(1.0 / terms.value_norms[t]);
                    pi_hat.net.grad_value(&trace, &cot, scale_v, &mut grad);
                }
                if mode != TrainMode::Full {
                    continue;
                }
                let scale_j = 0.5 * w_jac[t] / n_traj as f64;
                if scale_j == 0.0 || terms.jac_norms[t] <= 1e-300 {
                    continue;
                }
                let e = &terms.mismatches[t];
                match jac_norm {
                    JacNorm::Operator2 => {
                        let gram = e.transpose().matmul(e);
                        let (w, vecs) = sym_eig(&gram).expect("gram is symmetric");
                        let (arg, &lam) = w
                            .iter()
                            .enumerate()
                            .max_by(|a, b| a.1.total_cmp(b.1))
                            .expect("non-empty spectrum");
                        let sigma = lam.max(0.0).sqrt();
                        if sigma <= 1e-300 {
                            continue;
                        }
                        let v1 = vecs.col(arg);
                        let u1 = e.matvec(&v1).scale(1.0 / sigma);
                        pi_hat
                            .net
                            .grad_jacobian_form(&trace, &u1, &v1, scale_j, &mut grad);
                    }
                    JacNorm::Frobenius => {
                        // d||E||_F/dJ = E/||E||_F, contracted row by row
                        let m = e.scale(1.0 / terms.jac_norms[t]);
                        for i in 0..m.rows() {
                            let u = Vector::basis(m.rows(), i);
                            let v = Vector::from_slice(m.row(i));
                            pi_hat
                                .net
                                .grad_jacobian_form(&trace, &u, &v, scale_j, &mut grad);
                        }
                    }
                }
            }
            grad
        })
        .collect();
    // fixed-order reduction for bit reproducibility
    let mut grad = vec![0.0; p];
    for g in &per_traj {
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += v;
        }
    }
    Ok((report, grad))
}

/// Gradient alone (the report is discarded).
pub fn loss_gradient(
    pi_hat: &MlpPolicy,
    expert: &dyn Policy,
    set: &TrainingSet,
    smoothing: Smoothing,
    jac_norm: JacNorm,
    mode: TrainMode,
) -> Result<Vec<f64>> {
    Ok(loss_and_gradient(pi_hat, expert, set, smoothing, jac_norm, mode)?.1)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub steps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// log-sum-exp sharpness annealed geometrically from start to end;
    /// ignored under `HardMax` smoothing
    pub beta_start: f64,
    pub beta_end: f64,
    pub use_hard_max: bool,
    pub jac_norm: JacNorm,
    pub mode: TrainMode,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-3,
            steps: 5000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            beta_start: 1.0,
            beta_end: 50.0,
            use_hard_max: false,
            jac_norm: JacNorm::Operator2,
            mode: TrainMode::Full,
        }
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub loss: f64,
    pub value_term: f64,
    pub jac_term: f64,
    pub grad_norm: f64,
    pub beta: f64,
}

pub struct TrainOutcome {
    pub policy: MlpPolicy,
    pub log: Vec<TrainLogRow>,
    /// hard-max loss of the returned (best) parameters
    pub best_loss: f64,
}

/// Adam loop on the smoothed loss; returns the parameters with the best
/// hard-max loss seen. Aborts on non-finite loss or gradient.
pub fn train_tasil(
    set: &TrainingSet,
    expert: &dyn Policy,
    widths: &[usize],
    config: &OptimizerConfig,
    init_stream: RngStream,
) -> Result<TrainOutcome> {
    let mut policy = crate::policy::mlp_policy(widths, init_stream);
    let p = policy.net.param_count();
    let mut params = policy.net.params();
    let mut m = vec![0.0; p];
    let mut v = vec![0.0; p];
    let mut log = Vec::with_capacity(config.steps);
    let mut best_loss = f64::INFINITY;
    let mut best_params = params.clone();
    let steps = config.steps.max(1);
    for step in 0..steps {
        let beta = if steps == 1 {
            config.beta_end
        } else {
            config.beta_start
                * (config.beta_end / config.beta_start).powf(step as f64 / (steps - 1) as f64)
        };
        let smoothing = if config.use_hard_max {
            Smoothing::HardMax
        } else {
            Smoothing::LogSumExp { beta }
        };
        let (report, grad) =
            loss_and_gradient(&policy, expert, set, smoothing, config.jac_norm, config.mode)?;
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !report.mean_loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::TrainingAborted(format!(
                "non-finite loss or gradient at step {step}"
            )));
        }
        // hard-max readout for best-parameter tracking
        let hard_value: f64 = report.per_traj_value.iter().sum::<f64>() / set.len() as f64;
        let hard_jac: f64 = report.per_traj_jac.iter().sum::<f64>() / set.len() as f64;
        let hard_loss = 0.5 * (hard_value + hard_jac);
        if hard_loss < best_loss {
            best_loss = hard_loss;
            best_params = params.clone();
        }
        log.push(TrainLogRow {
            step,
            loss: report.mean_loss,
            value_term: report.mean_value_term,
            jac_term: report.mean_jac_term,
            grad_norm,
            beta,
        });
        // Adam update
        let t = (step + 1) as f64;
        let b1 = config.adam_beta1;
        let b2 = config.adam_beta2;
        for i in 0..p {
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
            let m_hat = m[i] / (1.0 - b1.powf(t));
            let v_hat = v[i] / (1.0 - b2.powf(t));
            params[i] -= config.lr * m_hat / (v_hat.sqrt() + config.adam_eps);
        }
        policy.net.set_params(&params);
    }
    // final candidate
    let final_report = tasil_loss(
        &policy,
        expert,
        set,
        Smoothing::HardMax,
        config.jac_norm,
        config.mode,
    )?;
    let final_hard = 0.5
        * (final_report.per_traj_value.iter().sum::<f64>()
            + final_report.per_traj_jac.iter().sum::<f64>())
        / set.len() as f64;
    if final_hard < best_loss {
        best_loss = final_hard;
        best_params = params;
    }
    policy.net.set_params(&best_params);
    Ok(TrainOutcome {
        policy,
        log,
        best_loss,
    })
}

/// Write the training log as CSV `step,loss,value_term,jac_term,grad_norm`.
pub fn write_training_log<W: std::io::Write>(log: &[TrainLogRow], mut w: W) -> Result<()> {
    writeln!(w, "step,loss,value_term,jac_term,grad_norm")?;
    for row in log {
        writeln!(
            w,
            "{},{},{},{},{}",
            row.step, row.loss, row.value_term, row.jac_term, row.grad_norm
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{benchmark_h, benchmark_system_with, BenchmarkParams, SystemBundle};
    use crate::net::Mlp;
    use crate::policy::{expert_policy, ExpertPolicy, SignConvention};
    use std::sync::Arc;

    fn benchmark_setup(h_seed: u64) -> (SystemBundle, ExpertPolicy) {
        let params = BenchmarkParams::default();
        let h = Arc::new(benchmark_h(&params, h_seed));
        let sys = benchmark_system_with(&params, Arc::clone(&h));
        (sys, expert_policy(2.0, SignConvention::CancelH, h))
    }

    fn unit_box(n: usize) -> InitialLaw {
        InitialLaw::UniformBox {
            lo: vec![-1.0; n],
            hi: vec![1.0; n],
        }
    }

    #[test]
    fn training_data_decays_under_the_expert() {
        let (sys, expert) = benchmark_setup(1);
        let partition = Partition::new(10.0, 100, 10).unwrap();
        let set =
            generate_training_data(&sys, &expert, &unit_box(4), 20, &partition, 99).unwrap();
        assert_eq!(set.len(), 20);
        for traj in &set.trajectories {
            let first = traj.states.first().unwrap().norm();
            let last = traj.states.last().unwrap().norm();
            assert!(last < first, "expert rollout did not decay");
        }
    }

    #[test]
    fn point_mass_training_data_stays_near_the_origin() {
        // with the h-cancelling expert the closed loop is linear, so the
        // rollout from the origin never leaves it
        let (sys, expert) = benchmark_setup(1);
        let partition = Partition::new(2.0, 20, 5).unwrap();
        let law = InitialLaw::PointMass { at: vec![0.0; 4] };
        let set = generate_training_data(&sys, &expert, &law, 1, &partition, 3).unwrap();
        for x in &set.trajectories[0].states {
            assert!(x.norm() < 1e-12);
        }
    }

    #[test]
    fn training_data_is_seed_deterministic() {
        let (sys, expert) = benchmark_setup(1);
        let partition = Partition::new(2.0, 20, 5).unwrap();
        let a = generate_training_data(&sys, &expert, &unit_box(4), 5, &partition, 7).unwrap();
        let b = generate_training_data(&sys, &expert, &unit_box(4), 5, &partition, 7).unwrap();
        for (ta, tb) in a.trajectories.iter().zip(&b.trajectories) {
            assert_eq!(ta.states, tb.states);
        }
    }

    #[test]
    fn training_data_rejects_gaussian_law() {
        let (sys, expert) = benchmark_setup(1);
        let partition = Partition::new(1.0, 10, 5).unwrap();
        let law = InitialLaw::Gaussian {
            mean: vec![0.0; 4],
            std: vec![1.0; 4],
        };
        assert!(generate_training_data(&sys, &expert, &law, 3, &partition, 7).is_err());
    }

    #[test]
    fn destabilizing_expert_raises_expert_unstable() {
        let (sys, _) = benchmark_setup(1);
        let params = BenchmarkParams::default();
        let h = Arc::new(benchmark_h(&params, 1));
        // positive feedback: k_gain = -1 flips the sign of -Kx
        let bad = expert_policy(-10.0, SignConvention::CancelH, h);
        let partition = Partition::new(10.0, 100, 10).unwrap();
        let res = generate_training_data(&sys, &bad, &unit_box(4), 2, &partition, 7);
        assert!(matches!(res, Err(Error::ExpertUnstable(_))));
    }

    #[test]
    fn loss_zero_at_the_expert() {
        // an MLP cannot equal the expert exactly, so check with the expert
        // itself routed through the loss via an equal policy: zero-width
        // shortcut is the expert-vs-expert psi, exercised through
        // perturbation machinery in the policy module. Here: a policy whose
        // net reproduces a linear expert (h = 0, so pi* = -2x is linear).
        let params = BenchmarkParams::default();
        let h = Arc::new(Mlp::zeros(&params.h_widths));
        let sys = benchmark_system_with(&params, Arc::clone(&h));
        let expert = expert_policy(2.0, SignConvention::CancelH, h);
        let partition = Partition::new(1.0, 10, 5).unwrap();
        let set = generate_training_data(&sys, &expert, &unit_box(4), 3, &partition, 5).unwrap();
        // single affine layer matching -2x exactly
        let mut net = Mlp::zeros(&[4, 4]);
        *net.weight_mut(0) = Matrix::identity(4).scale(-2.0);
        let pi = MlpPolicy::new(net);
        let report = tasil_loss(
            &pi,
            &expert,
            &set,
            Smoothing::HardMax,
            JacNorm::Operator2,
            TrainMode::Full,
        )
        .unwrap();
        assert!(report.mean_loss < 1e-12, "loss = {}", report.mean_loss);
    }

    #[test]
    fn constant_offset_splits_into_value_term_only() {
        let params = BenchmarkParams::default();
        let h = Arc::new(Mlp::zeros(&params.h_widths));
        let sys = benchmark_system_with(&params, Arc::clone(&h));
        let expert = expert_policy(2.0, SignConvention::CancelH, h);
        let partition = Partition::new(1.0, 10, 5).unwrap();
        let set = generate_training_data(&sys, &expert, &unit_box(4), 4, &partition, 5).unwrap();
        let offset = Vector::from_slice(&[0.3, 0.0, -0.4, 0.0]);
        let mut net = Mlp::zeros(&[4, 4]);
        *net.weight_mut(0) = Matrix::identity(4).scale(-2.0);
        net.bias_mut(0).0.copy_from_slice(offset.as_slice());
        let pi = MlpPolicy::new(net);
        let report = tasil_loss(
            &pi,
            &expert,
            &set,
            Smoothing::HardMax,
            JacNorm::Operator2,
            TrainMode::Full,
        )
        .unwrap();
        assert!((report.mean_value_term - offset.norm()).abs() < 1e-12);
        assert!(report.mean_jac_term < 1e-12);
    }

    #[test]
    fn gradient_vanishes_at_the_global_minimum() {
        // exact-match parameters sit at loss zero; every subgradient is
        // skipped there, and a 1e-2 perturbation must leave the minimum
        let params = BenchmarkParams::default();
        let h = Arc::new(Mlp::zeros(&params.h_widths));
        let sys = benchmark_system_with(&params, Arc::clone(&h));
        let expert = expert_policy(2.0, SignConvention::CancelH, h);
        let partition = Partition::new(1.0, 10, 5).unwrap();
        let set = generate_training_data(&sys, &expert, &unit_box(4), 3, &partition, 5).unwrap();
        let mut net = Mlp::zeros(&[4, 4]);
        *net.weight_mut(0) = Matrix::identity(4).scale(-2.0);
        let pi = MlpPolicy::new(net);
        let smoothing = Smoothing::LogSumExp { beta: 10.0 };
        let (report, grad) = loss_and_gradient(
            &pi,
            &expert,
            &set,
            smoothing,
            JacNorm::Operator2,
            TrainMode::Full,
        )
        .unwrap();
        assert!(report.mean_loss < 1e-12);
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(grad_norm < 1e-8, "gradient at the minimum: {grad_norm}");
        // identifiability probe
        let stream = RngStream::new(9, 9);
        let mut cursor = stream.cursor();
        let mut perturbed = pi.clone();
        let mut p = perturbed.net.params();
        let dir: Vec<f64> = (0..p.len()).map(|_| cursor.next()).collect();
        let nrm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
        for (pi_, d) in p.iter_mut().zip(&dir) {
            *pi_ += 1e-2 * d / nrm;
        }
        perturbed.net.set_params(&p);
        let bumped = tasil_loss(
            &perturbed,
            &expert,
            &set,
            Smoothing::HardMax,
            JacNorm::Operator2,
            TrainMode::Full,
        )
        .unwrap();
        assert!(bumped.mean_loss > 0.0, "perturbed parameters still at zero loss");
    }

    #[test]
    fn hard_max_matches_brute_force_recomputation() {
        let (sys, expert) = benchmark_setup(4);
        let partition = Partition::new(1.0, 8, 5).unwrap();
        let set = generate_training_data(&sys, &expert, &unit_box(4), 3, &partition, 11).unwrap();
        let pi = crate::policy::mlp_policy(&[4, 8, 4], RngStream::new(13, 0));
        let report = tasil_loss(
            &pi,
            &expert,
            &set,
            Smoothing::HardMax,
            JacNorm::Operator2,
            TrainMode::Full,
        )
        .unwrap();
        let mut brute = 0.0;
        for traj in &set.trajectories {
            let mut vmax: f64 = 0.0;
            let mut jmax: f64 = 0.0;
            for x in &traj.states[..partition.k] {
                vmax = vmax.max(pi.evaluate(x).sub(&expert.evaluate(x)).norm());
                jmax = jmax.max(
                    pi.state_jacobian(x)
                        .sub(&expert.state_jacobian(x))
                        .op_norm_2(),
                );
            }
            brute += 0.5 * (vmax + jmax) / set.len() as f64;
        }
        assert!((report.mean_loss - brute).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_sandwich_around_hard_max() {
        let (sys, expert) = benchmark_setup(4);
        let partition = Partition::new(1.0, 16, 5).unwrap();
        let set = generate_training_data(&sys, &expert, &unit_box(4), 2, &partition, 3).unwrap();
        let pi = crate::policy::mlp_policy(&[4, 8, 4], RngStream::new(17, 0));
        for beta in [2.0, 10.0, 50.0] {
            let hard = tasil_loss(
                &pi,
                &expert,
                &set,
                Smoothing::HardMax,
                JacNorm::Operator2,
                TrainMode::Full,
            )
            .unwrap();
            let soft = tasil_loss(
                &pi,
                &expert,
                &set,
                Smoothing::LogSumExp { beta },
                JacNorm::Operator2,
                TrainMode::Full,
            )
            .unwrap();
            let slack = (partition.k as f64).ln() / beta; // value and jac terms each
            assert!(soft.mean_loss <= hard.mean_loss + 1e-12);
            assert!(soft.mean_loss >= hard.mean_loss - slack - 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (sys, expert) = benchmark_setup(8);
        let partition = Partition::new(0.5, 5, 4).unwrap();
        let set = generate_training_data(&sys, &expert, &unit_box(4), 2, &partition, 21).unwrap();
        let smoothing = Smoothing::LogSumExp { beta: 10.0 };
        for trial in 0..2 {
            let mut pi = crate::policy::mlp_policy(&[4, 8, 4], RngStream::new(31 + trial, 0));
            let (_, grad) = loss_and_gradient(
                &pi,
                &expert,
                &set,
                smoothing,
                JacNorm::Operator2,
                TrainMode::Full,
            )
            .unwrap();
            let p0 = pi.net.params();
            let h = 1e-5;
            let mut max_rel: f64 = 0.0;
            for idx in 0..p0.len() {
                let mut pp = p0.clone();
                pp[idx] += h;
                pi.net.set_params(&pp);
                let fp = tasil_loss(&pi, &expert, &set, smoothing, JacNorm::Operator2, TrainMode::Full)
                    .unwrap()
                    .mean_loss;
                pp[idx] -= 2.0 * h;
                pi.net.set_params(&pp);
                let fm = tasil_loss(&pi, &expert, &set, smoothing, JacNorm::Operator2, TrainMode::Full)
                    .unwrap()
                    .mean_loss;
                pi.net.set_params(&p0);
                let fd = (fp - fm) / (2.0 * h);
                let rel = (grad[idx] - fd).abs() / (1.0 + fd.abs());
                max_rel = max_rel.max(rel);
            }
            assert!(max_rel < 1e-4, "gradient max rel err {max_rel}");
        }
    }

    #[test]
    fn value_only_gradient_matches_full_value_part() {
        // with the jacobian term disabled the gradient must equal plain
        // backprop of the value norms
        let (sys, expert) = benchmark_setup(2);
        let partition = Partition::new(0.5, 4, 4).unwrap();
        let set = generate_training_data(&sys, &expert, &unit_box(4), 2, &partition, 2).unwrap();
        let pi = crate::policy::mlp_policy(&[4, 6, 4], RngStream::new(3, 0));
        let smoothing = Smoothing::LogSumExp { beta: 5.0 };
        let (_, g_bc) = loss_and_gradient(
            &pi,
            &expert,
            &set,
            smoothing,
            JacNorm::Operator2,
            TrainMode::ValueOnly,
        )
        .unwrap();
        // independent single-term recomputation
        let mut g_ref = vec![0.0; pi.net.param_count()];
        for traj in &set.trajectories {
            let norms: Vec<f64> = traj.states[..partition.k]
                .iter()
                .map(|x| pi.evaluate(x).sub(&expert.evaluate(x)).norm())
                .collect();
            let w = aggregate_weights(&norms, smoothing);
            for (t, x) in traj.states[..partition.k].iter().enumerate() {
                if norms[t] <= 0.0 {
                    continue;
                }
                let trace = pi.net.forward_trace(x);
                let cot = pi.evaluate(x).sub(&expert.evaluate(x)).scale(1.0 / norms[t]);
                pi.net.grad_value(
                    &trace,
                    &cot,
                    0.5 * w[t] / set.len() as f64,
                    &mut g_ref,
                );
            }
        }
        for (a, b) in g_bc.iter().zip(&g_ref) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn frobenius_gradient_matches_finite_differences() {
        let (sys, expert) = benchmark_setup(8);
        let partition = Partition::new(0.5, 4, 4).unwrap();
        let set = generate_training_data(&sys, &expert, &unit_box(4), 1, &partition, 9).unwrap();
        let smoothing = Smoothing::LogSumExp { beta: 8.0 };
        let mut pi = crate::policy::mlp_policy(&[4, 6, 4], RngStream::new(41, 0));
        let (_, grad) = loss_and_gradient(
            &pi,
            &expert,
            &set,
            smoothing,
            JacNorm::Frobenius,
            TrainMode::Full,
        )
        .unwrap();
        let p0 = pi.net.params();
        let h = 1e-5;
        for idx in (0..p0.len()).step_by(7) {
            let mut pp = p0.clone();
            pp[idx] += h;
            pi.net.set_params(&pp);
            let fp = tasil_loss(&pi, &expert, &set, smoothing, JacNorm::Frobenius, TrainMode::Full)
                .unwrap()
                .mean_loss;
            pp[idx] -= 2.0 * h;
            pi.net.set_params(&pp);
            let fm = tasil_loss(&pi, &expert, &set, smoothing, JacNorm::Frobenius, TrainMode::Full)
                .unwrap()
                .mean_loss;
            pi.net.set_params(&p0);
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (grad[idx] - fd).abs() / (1.0 + fd.abs()) < 1e-4,
                "frobenius grad mismatch at {idx}"
            );
        }
    }

    #[test]
    fn short_training_run_reduces_loss() {
        let (sys, expert) = benchmark_setup(6);
        let partition = Partition::new(2.0, 20, 5).unwrap();
        let set = generate_training_data(&sys, &expert, &unit_box(4), 5, &partition, 31).unwrap();
        let config = OptimizerConfig {
            steps: 300,
            lr: 3e-3,
            ..Default::default()
        };
        let out = train_tasil(&set, &expert, &[4, 16, 4], &config, RngStream::new(1, 1)).unwrap();
        let initial = out.log.first().unwrap().loss;
        assert!(
            out.best_loss < 0.5 * initial,
            "training stalled: {} -> {}",
            initial,
            out.best_loss
        );
    }

    #[test]
    fn training_is_seed_deterministic() {
        let (sys, expert) = benchmark_setup(6);
        let partition = Partition::new(1.0, 10, 5).unwrap();
        let set = generate_training_data(&sys, &expert, &unit_box(4), 3, &partition, 31).unwrap();
        let config = OptimizerConfig {
            steps: 20,
            ..Default::default()
        };
        let a = train_tasil(&set, &expert, &[4, 8, 4], &config, RngStream::new(2, 2)).unwrap();
        let b = train_tasil(&set, &expert, &[4, 8, 4], &config, RngStream::new(2, 2)).unwrap();
        assert_eq!(a.policy.net.params(), b.policy.net.params());
    }
}
