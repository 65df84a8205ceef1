//! Feedback policies: value and state-Jacobian contracts, the expert, the
//! policy-perturbation signals along rollouts, and sampled Lipschitz
//! estimates.

use crate::error::{Error, Result};
use crate::net::Mlp;
use crate::numerics::{Matrix, NormalCursor, RngStream, Vector};
use crate::simulate::{Partition, Trajectory};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::Arc;

/// State feedback with a Jacobian contract. Evaluation is pure; policies are
/// immutable once constructed.
pub trait Policy: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn evaluate(&self, x: &Vector) -> Vector;
    fn state_jacobian(&self, x: &Vector) -> Matrix;
}

/// Tanh MLP policy with analytic Jacobian and trainable parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MlpPolicy {
    pub net: Mlp,
}

impl MlpPolicy {
    pub fn new(net: Mlp) -> Self {
        MlpPolicy { net }
    }
}

impl Policy for MlpPolicy {
    fn state_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn input_dim(&self) -> usize {
        self.net.output_dim()
    }

    fn evaluate(&self, x: &Vector) -> Vector {
        self.net.forward(x)
    }

    fn state_jacobian(&self, x: &Vector) -> Matrix {
        self.net.state_jacobian(x)
    }
}

/// Fresh fully-connected tanh policy with N(0, 1/fan_in) weights.
pub fn mlp_policy(widths: &[usize], init_stream: RngStream) -> MlpPolicy {
    let mut cursor: NormalCursor = init_stream.cursor();
    MlpPolicy::new(Mlp::random(widths, &mut cursor))
}

/// Affine policy u = W x + b, mostly for oracles and baselines.
#[derive(Clone, Debug)]
pub struct AffinePolicy {
    pub w: Matrix,
    pub b: Vector,
}

impl AffinePolicy {
    pub fn linear(w: Matrix) -> Self {
        let b = Vector::zeros(w.rows());
        AffinePolicy { w, b }
    }

    pub fn constant(n: usize, b: Vector) -> Self {
        AffinePolicy {
            w: Matrix::zeros(b.dim(), n),
            b,
        }
    }
}

impl Policy for AffinePolicy {
    fn state_dim(&self) -> usize {
        self.w.cols()
    }

    fn input_dim(&self) -> usize {
        self.w.rows()
    }

    fn evaluate(&self, x: &Vector) -> Vector {
        let mut u = self.w.matvec(x);
        u.axpy(1.0, &self.b);
        u
    }

    fn state_jacobian(&self, _x: &Vector) -> Matrix {
        self.w.clone()
    }
}

/// Which sign h enters the expert with. `CancelH` removes the drift
/// nonlinearity through the input channel; `PaperLiteral` keeps the
/// literal minus sign.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SignConvention {
    #[default]
    CancelH,
    PaperLiteral,
}

/// Expert feedback pi*(x) = -K x +- h(x) with K = k_gain * I. Under
/// `CancelH` and the benchmark drift the closed loop is exactly
/// -(drift_gain_abs + input_gain * k_gain) x.
#[derive(Clone)]
pub struct ExpertPolicy {
    pub k_gain: f64,
    pub sign: SignConvention,
    h: Arc<Mlp>,
}

impl ExpertPolicy {
    pub fn h(&self) -> &Arc<Mlp> {
        &self.h
    }

    fn h_sign(&self) -> f64 {
        match self.sign {
            SignConvention::CancelH => 1.0,
            SignConvention::PaperLiteral => -1.0,
        }
    }
}

impl Policy for ExpertPolicy {
    fn state_dim(&self) -> usize {
        self.h.input_dim()
    }

    fn input_dim(&self) -> usize {
        self.h.output_dim()
    }

    fn evaluate(&self, x: &Vector) -> Vector {
        let mut u = x.scale(-self.k_gain);
        u.axpy(self.h_sign(), &self.h.forward(x));
        u
    }

    fn state_jacobian(&self, x: &Vector) -> Matrix {
        let mut j = self.h.state_jacobian(x).scale(self.h_sign());
        for i in 0..j.rows().min(j.cols()) {
            j.add_at(i, i, -self.k_gain);
        }
        j
    }
}

/// Expert around the benchmark's frozen h.
pub fn expert_policy(k_gain: f64, sign: SignConvention, h: Arc<Mlp>) -> ExpertPolicy {
    assert!(k_gain != 0.0 || sign == SignConvention::PaperLiteral || true);
    ExpertPolicy { k_gain, sign, h }
}

/// Base policy plus a constant offset; handy for perturbation oracles.
pub struct OffsetPolicy<P: Policy> {
    pub base: P,
    pub offset: Vector,
}

impl<P: Policy> Policy for OffsetPolicy<P> {
    fn state_dim(&self) -> usize {
        self.base.state_dim()
    }

    fn input_dim(&self) -> usize {
        self.base.input_dim()
    }

    fn evaluate(&self, x: &Vector) -> Vector {
        let mut u = self.base.evaluate(x);
        u.axpy(1.0, &self.offset);
        u
    }

    fn state_jacobian(&self, x: &Vector) -> Matrix {
        self.base.state_jacobian(x)
    }
}

/// Pointwise difference a - b of two policies over the same spaces.
pub struct DiffPolicy<'a> {
    pub a: &'a dyn Policy,
    pub b: &'a dyn Policy,
}

impl Policy for DiffPolicy<'_> {
    fn state_dim(&self) -> usize {
        self.a.state_dim()
    }

    fn input_dim(&self) -> usize {
        self.a.input_dim()
    }

    fn evaluate(&self, x: &Vector) -> Vector {
        self.a.evaluate(x).sub(&self.b.evaluate(x))
    }

    fn state_jacobian(&self, x: &Vector) -> Matrix {
        self.a.state_jacobian(x).sub(&self.b.state_jacobian(x))
    }
}

/// Piecewise-constant input signal on the partition intervals: one value per
/// knot of P_k(T) \ {T}.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSignal {
    pub partition: Partition,
    pub values: Vec<Vector>,
}

impl PerturbationSignal {
    pub fn zeros(partition: Partition, m: usize) -> Self {
        PerturbationSignal {
            partition,
            values: vec![Vector::zeros(m); partition.k],
        }
    }

    pub fn max_norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn values(&self) -> &[Vector] {
        &self.values
    }
}

fn check_rollout(traj: &Trajectory, partition_k: usize) -> Result<()> {
    if traj.is_diverged() || traj.states.len() != partition_k + 1 {
        return Err(Error::ContractViolation(
            "perturbation signals need a complete rollout over the partition".into(),
        ));
    }
    Ok(())
}

/// Policy shift along a rollout generated under `pi_hat`:
/// theta_t = pi_hat(x_t) - expert(x_t) at knots 0..k-1.
pub fn perturbation_theta(
    pi_hat: &dyn Policy,
    expert: &dyn Policy,
    traj: &Trajectory,
) -> Result<PerturbationSignal> {
    check_rollout(traj, traj.partition.k)?;
    let values = traj.states[..traj.partition.k]
        .iter()
        .map(|x| pi_hat.evaluate(x).sub(&expert.evaluate(x)))
        .collect();
    Ok(PerturbationSignal {
        partition: traj.partition,
        values,
    })
}

/// Policy shift along an expert rollout (the training-time signal):
/// psi_t = pi_hat(x_t) - expert(x_t), plus the state-Jacobian mismatch at
/// the same states.
pub fn perturbation_psi(
    pi_hat: &dyn Policy,
    expert: &dyn Policy,
    traj: &Trajectory,
) -> Result<(PerturbationSignal, Vec<Matrix>)> {
    check_rollout(traj, traj.partition.k)?;
    let mut values = Vec::with_capacity(traj.partition.k);
    let mut jac_mismatch = Vec::with_capacity(traj.partition.k);
    for x in &traj.states[..traj.partition.k] {
        values.push(pi_hat.evaluate(x).sub(&expert.evaluate(x)));
        jac_mismatch.push(pi_hat.state_jacobian(x).sub(&expert.state_jacobian(x)));
    }
    Ok((
        PerturbationSignal {
            partition: traj.partition,
            values,
        },
        jac_mismatch,
    ))
}

/// Sampled Lipschitz estimates with a 5% margin:
/// - `l_pi`: max operator norm of the state Jacobian over random states;
/// - `l_dpi`: max second-difference quotient of the first-order Taylor
///   remainder, 2 ||pi(y) - pi(x) - J(x)(y - x)|| / ||y - x||^2.
pub fn estimate_lipschitz(
    pi: &dyn Policy,
    radius: f64,
    samples: usize,
    stream: RngStream,
) -> (f64, f64) {
    assert!(samples >= 1000, "need at least 1e3 samples");
    let n = pi.state_dim();
    let mut cursor = stream.cursor();
    let sample_ball = |cursor: &mut NormalCursor| -> Vector {
        let raw = Vector((0..n).map(|_| cursor.next()).collect());
        let nrm = raw.norm();
        if nrm < 1e-12 {
            return Vector::zeros(n);
        }
        // uniform radius profile r = R u^(1/n)
        let u = (cursor.next().abs().fract()).max(1e-12);
        raw.scale(radius * u.powf(1.0 / n as f64) / nrm)
    };
    let mut l_pi = 0.0f64;
    let mut l_dpi = 0.0f64;
    for i in 0..samples {
        let x = sample_ball(&mut cursor);
        let jac = pi.state_jacobian(&x);
        l_pi = l_pi.max(jac.op_norm_2());
        // pair x with a displaced probe at a range of separations
        let scale = 10f64.powf(-3.0 + 3.0 * (i % 7) as f64 / 6.0); // 1e-3 .. 1
        let dir = sample_ball(&mut cursor);
        if dir.norm() < 1e-12 {
            continue;
        }
        let step = dir.scale(scale / dir.norm());
        let y = x.add(&step);
        let lin = {
            let mut v = pi.evaluate(&x);
            v.axpy(1.0, &jac.matvec(&step));
            v
        };
        let rem = pi.evaluate(&y).sub(&lin).norm();
        l_dpi = l_dpi.max(2.0 * rem / step.norm_sq());
    }
    (l_pi * 1.05, l_dpi * 1.05)
}

/// Checkpoint manifest stored next to the flat parameter blob.
#[derive(Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kind: String,
    pub widths: Vec<usize>,
    pub param_count: usize,
    pub init_seed: Option<u64>,
    pub bin_file: String,
}

/// Write `<path>.json` + `<path>.bin`: a JSON manifest and the parameters as
/// little-endian f64.
pub fn save_checkpoint(policy: &MlpPolicy, path: &Path, init_seed: Option<u64>) -> Result<()> {
    let params = policy.net.params();
    let bin_name = format!(
        "{}.bin",
        path.file_name()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::ContractViolation("bad checkpoint path".into()))?
    );
    let manifest = CheckpointManifest {
        kind: "mlp_tanh".into(),
        widths: policy.net.widths().to_vec(),
        param_count: params.len(),
        init_seed,
        bin_file: bin_name.clone(),
    };
    let json_path = path.with_extension("json");
    let bin_path = path.with_extension("bin");
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Serialization(e.to_string()))?,
    )?;
    let mut bytes = Vec::with_capacity(params.len() * 8);
    for p in &params {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    std::fs::write(&bin_path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<MlpPolicy> {
    let json_path = path.with_extension("json");
    let bin_path = path.with_extension("bin");
    let manifest: CheckpointManifest = serde_json::from_str(&std::fs::read_to_string(&json_path)?)
        .map_err(|e| Error::Serialization(e.to_string()))?;
    let bytes = std::fs::read(&bin_path)?;
    if bytes.len() != manifest.param_count * 8 {
        return Err(Error::Serialization(format!(
            "parameter blob has {} bytes, manifest says {}",
            bytes.len(),
            manifest.param_count * 8
        )));
    }
    let params: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut net = Mlp::zeros(&manifest.widths);
    net.set_params(&params);
    Ok(MlpPolicy::new(net))
}
