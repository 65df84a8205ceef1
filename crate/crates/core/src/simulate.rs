//! Time discretization and integration: classic RK4 for the deterministic
//! nominal processes, Euler-Maruyama for the uncertain SDE, and reproducible
//! ensemble rollouts.
//!
//! Divergence (state norm above [`DIVERGENCE_NORM`]) is a recorded outcome,
//! not an error: destabilization is one of the quantities the harness is
//! built to measure.

use crate::dynamics::{eval_nominal_drift, eval_true_drift, SystemBundle};
use crate::error::{Error, Result};
use crate::numerics::{RngStream, Vector};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// State norm beyond which a path is flagged as diverged and truncated.
pub const DIVERGENCE_NORM: f64 = 1e9;

/// Stream id offset for initial-condition draws, keeping them disjoint from
/// the per-trajectory Brownian streams (trajectory i uses stream_id i).
const INITIAL_LAW_STREAM_BASE: u64 = 1 << 63;

/// Uniform partition of [0, T] into k intervals, each integrated with
/// `substeps` integrator steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub horizon: f64,
    pub k: usize,
    pub substeps: usize,
}

impl Partition {
    pub fn new(horizon: f64, k: usize, substeps: usize) -> Result<Self> {
        if !(horizon > 0.0) || k < 1 || substeps < 1 {
            return Err(Error::ContractViolation(
                "partition requires horizon > 0, k >= 1, substeps >= 1".into(),
            ));
        }
        Ok(Partition {
            horizon,
            k,
            substeps,
        })
    }

    /// Knot spacing T/k.
    pub fn dt(&self) -> f64 {
        self.horizon / self.k as f64
    }

    /// Integrator step T/(k * substeps).
    pub fn dt_sub(&self) -> f64 {
        self.horizon / (self.k * self.substeps) as f64
    }

    pub fn knot(&self, j: usize) -> f64 {
        self.horizon * j as f64 / self.k as f64
    }

    pub fn knots(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.k).map(move |j| self.knot(j))
    }

    /// Index of the knot at time `t`, or an error if `t` is off the grid.
    pub fn knot_index(&self, t: f64) -> Result<usize> {
        let j = (t / self.dt()).round() as i64;
        if j < 0
            || j > self.k as i64
            || (t - self.knot(j as usize)).abs() > 1e-9 * self.horizon.max(1.0)
        {
            return Err(Error::ContractViolation(format!(
                "t = {t} is not a partition knot"
            )));
        }
        Ok(j as usize)
    }
}

/// Where a trajectory's randomness came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SeedProvenance {
    Deterministic,
    Stream { master_seed: u64, stream_id: u64 },
}

/// States at the partition knots plus the inputs applied at the start of
/// each interval. A diverged path is truncated: `states` holds knots
/// 0..diverged_at and `diverged_at` records the first missing knot.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Trajectory {
    pub partition: Partition,
    pub states: Vec<Vector>,
    pub inputs: Vec<Vector>,
    pub provenance: SeedProvenance,
    pub diverged_at: Option<usize>,
}

impl Trajectory {
    pub fn is_diverged(&self) -> bool {
        self.diverged_at.is_some()
    }

    /// State at knot j; None beyond a divergence truncation.
    pub fn state(&self, j: usize) -> Option<&Vector> {
        self.states.get(j)
    }

    /// True when the path still has a state at knot j.
    pub fn alive_at(&self, j: usize) -> bool {
        j < self.states.len()
    }

    /// CSV rows `t,x1..xn,u1..um`, one per knot.
    pub fn to_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.states.first().map_or(0, |s| s.dim());
        let m = self.inputs.first().map_or(0, |u| u.dim());
        let mut header = String::from("t");
        for i in 1..=n {
            header.push_str(&format!(",x{i}"));
        }
        for i in 1..=m {
            header.push_str(&format!(",u{i}"));
        }
        writeln!(w, "{header}")?;
        for (j, x) in self.states.iter().enumerate() {
            let mut row = format!("{}", self.partition.knot(j));
            for v in x.as_slice() {
                row.push_str(&format!(",{v}"));
            }
            if !self.inputs.is_empty() {
                for v in self.inputs[j.min(self.inputs.len() - 1)].as_slice() {
                    row.push_str(&format!(",{v}"));
                }
            }
            writeln!(w, "{row}")?;
        }
        Ok(())
    }
}

fn rk4_interval<F>(
    sys: &SystemBundle,
    policy: &F,
    extra: Option<&Vector>,
    t0: f64,
    x0: &Vector,
    dt_sub: f64,
    substeps: usize,
) -> Option<Vector>
where
    F: Fn(&Vector) -> Vector + ?Sized,
{
    // closed-loop field with the interval-constant extra input
    let field = |t: f64, x: &Vector| -> Result<Vector> {
        let mut u = policy(x);
        if let Some(e) = extra {
            u.axpy(1.0, e);
        }
        eval_nominal_drift(sys, t, x, &u)
    };
    let mut x = x0.clone();
    for s in 0..substeps {
        let t = t0 + s as f64 * dt_sub;
        let k1 = field(t, &x).ok()?;
        let mut x2 = x.clone();
        x2.axpy(0.5 * dt_sub, &k1);
        let k2 = field(t + 0.5 * dt_sub, &x2).ok()?;
        let mut x3 = x.clone();
        x3.axpy(0.5 * dt_sub, &k2);
        let k3 = field(t + 0.5 * dt_sub, &x3).ok()?;
        let mut x4 = x.clone();
        x4.axpy(dt_sub, &k3);
        let k4 = field(t + dt_sub, &x4).ok()?;
        for i in 0..x.dim() {
            x[i] += dt_sub / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if !x.is_finite() || x.norm() > DIVERGENCE_NORM {
            return None;
        }
    }
    Some(x)
}

/// Integrate the nominal closed loop x' = f(t,x) + g(t)(policy(x) + extra)
/// with classic RK4 at step dt/substeps. `extra_input`, when given, is held
/// constant on each partition interval (entry j applies on [t_j, t_{j+1})).
pub fn integrate_ode<F>(
    sys: &SystemBundle,
    policy: &F,
    extra_input: Option<&[Vector]>,
    x0: &Vector,
    partition: &Partition,
) -> Result<Trajectory>
where
    F: Fn(&Vector) -> Vector + ?Sized,
{
    if x0.dim() != sys.state_dim {
        return Err(Error::ContractViolation(format!(
            "x0 dimension {} != {}",
            x0.dim(),
            sys.state_dim
        )));
    }
    if let Some(extra) = extra_input {
        if extra.len() < partition.k {
            return Err(Error::ContractViolation(format!(
                "extra input has {} intervals, need {}",
                extra.len(),
                partition.k
            )));
        }
    }
    let dt_sub = partition.dt_sub();
    let mut states = Vec::with_capacity(partition.k + 1);
    let mut inputs = Vec::with_capacity(partition.k + 1);
    let mut x = x0.clone();
    let mut diverged_at = None;
    let record_input = |x: &Vector, j: usize| -> Vector {
        let mut u = policy(x);
        if let Some(extra) = extra_input {
            if j < partition.k {
                u.axpy(1.0, &extra[j]);
            }
        }
        u
    };
    if !x.is_finite() || x.norm() > DIVERGENCE_NORM {
        return Ok(Trajectory {
            partition: *partition,
            states,
            inputs,
            provenance: SeedProvenance::Deterministic,
            diverged_at: Some(0),
        });
    }
    states.push(x.clone());
    inputs.push(record_input(&x, 0));
    for j in 0..partition.k {
        let extra_j = extra_input.map(|e| &e[j]);
        match rk4_interval(
            sys,
            policy,
            extra_j,
            partition.knot(j),
            &x,
            dt_sub,
            partition.substeps,
        ) {
            Some(next) => {
                x = next;
                states.push(x.clone());
                inputs.push(record_input(&x, j + 1));
            }
            None => {
                diverged_at = Some(j + 1);
                states.truncate(j + 1);
                inputs.truncate(j + 1);
                break;
            }
        }
    }
    Ok(Trajectory {
        partition: *partition,
        states,
        inputs,
        provenance: SeedProvenance::Deterministic,
        diverged_at,
    })
}

/// One-interval flow of the nominal closed loop starting at knot `t`.
/// Composing k of these reproduces `integrate_ode` knot for knot.
pub fn flow_map<F>(
    sys: &SystemBundle,
    policy: &F,
    x: &Vector,
    t: f64,
    partition: &Partition,
) -> Result<Vector>
where
    F: Fn(&Vector) -> Vector + ?Sized,
{
    let j = partition.knot_index(t)?;
    if j >= partition.k {
        return Err(Error::ContractViolation(
            "flow map start must precede the final knot".into(),
        ));
    }
    rk4_interval(
        sys,
        policy,
        None,
        partition.knot(j),
        x,
        partition.dt_sub(),
        partition.substeps,
    )
    .ok_or_else(|| Error::ContractViolation("flow map diverged".into()))
}

/// Euler-Maruyama on the uncertain system
/// dX = (f + g u + lambda_mu) dt + lambda_sigma dW
/// with the control sampled once per substep. Brownian increments come from
/// `stream` with d draws per substep, so paths are bit-reproducible.
pub fn integrate_sde<C>(
    sys: &SystemBundle,
    control: &mut C,
    x0: &Vector,
    partition: &Partition,
    stream: RngStream,
) -> Result<Trajectory>
where
    C: FnMut(f64, &Vector) -> Vector + ?Sized,
{
    if x0.dim() != sys.state_dim {
        return Err(Error::ContractViolation(format!(
            "x0 dimension {} != {}",
            x0.dim(),
            sys.state_dim
        )));
    }
    let d = sys.noise_dim;
    let dt = partition.dt_sub();
    let sqrt_dt = dt.sqrt();
    let provenance = SeedProvenance::Stream {
        master_seed: stream.master_seed,
        stream_id: stream.stream_id,
    };
    let mut states = Vec::with_capacity(partition.k + 1);
    let mut inputs = Vec::with_capacity(partition.k + 1);
    let mut x = x0.clone();
    let mut diverged_at = None;
    if !x.is_finite() || x.norm() > DIVERGENCE_NORM {
        return Ok(Trajectory {
            partition: *partition,
            states,
            inputs,
            provenance,
            diverged_at: Some(0),
        });
    }
    states.push(x.clone());
    let mut draw_index = 0u64;
    'outer: for j in 0..partition.k {
        for s in 0..partition.substeps {
            let t = partition.knot(j) + s as f64 * dt;
            let u = control(t, &x);
            if s == 0 {
                inputs.push(u.clone());
            }
            let drift = match eval_true_drift(sys, t, &x, &u) {
                Ok(v) => v,
                Err(_) => {
                    diverged_at = Some(j + 1);
                    break 'outer;
                }
            };
            let sigma = sys.lambda_sigma(t, &x);
            let dw = Vector(
                (0..d)
                    .map(|_| {
                        let z = stream.normal(draw_index);
                        draw_index += 1;
                        z * sqrt_dt
                    })
                    .collect(),
            );
            x.axpy(dt, &drift);
            x.axpy(1.0, &sigma.matvec(&dw));
            if !x.is_finite() || x.norm() > DIVERGENCE_NORM {
                diverged_at = Some(j + 1);
                break 'outer;
            }
        }
        states.push(x.clone());
    }
    if let Some(d_at) = diverged_at {
        states.truncate(d_at);
        inputs.truncate(d_at);
    } else if let Some(last) = inputs.last().cloned() {
        // input at the final knot repeats the last applied control
        inputs.push(last);
    }
    Ok(Trajectory {
        partition: *partition,
        states,
        inputs,
        provenance,
        diverged_at,
    })
}

/// Initial-condition law. `UniformBox`, `PointMass`, and `Empirical` have
/// compact support; `Gaussian` does not and is rejected where compactness is
/// a contract.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InitialLaw {
    PointMass { at: Vec<f64> },
    UniformBox { lo: Vec<f64>, hi: Vec<f64> },
    Gaussian { mean: Vec<f64>, std: Vec<f64> },
    Empirical { points: Vec<Vec<f64>> },
}

impl InitialLaw {
    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::PointMass { at } => at.len(),
            InitialLaw::UniformBox { lo, .. } => lo.len(),
            InitialLaw::Gaussian { mean, .. } => mean.len(),
            InitialLaw::Empirical { points } => points.first().map_or(0, |p| p.len()),
        }
    }

    pub fn has_compact_support(&self) -> bool {
        !matches!(self, InitialLaw::Gaussian { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            InitialLaw::UniformBox { lo, hi } => {
                if lo.len() != hi.len() || lo.iter().zip(hi).any(|(l, h)| l > h) {
                    return Err(Error::ContractViolation("malformed uniform box".into()));
                }
            }
            InitialLaw::Gaussian { mean, std } => {
                if mean.len() != std.len() || std.iter().any(|s| *s < 0.0) {
                    return Err(Error::ContractViolation("malformed gaussian law".into()));
                }
            }
            InitialLaw::Empirical { points } => {
                if points.is_empty() {
                    return Err(Error::ContractViolation("empty empirical law".into()));
                }
                let d = points[0].len();
                if points.iter().any(|p| p.len() != d) {
                    return Err(Error::ContractViolation("ragged empirical points".into()));
                }
            }
            InitialLaw::PointMass { .. } => {}
        }
        Ok(())
    }

    /// Deterministic draw number `index` under `master_seed`.
    pub fn sample(&self, master_seed: u64, index: u64) -> Vector {
        let stream = RngStream::new(master_seed, INITIAL_LAW_STREAM_BASE | index);
        match self {
            InitialLaw::PointMass { at } => Vector::from_slice(at),
            InitialLaw::UniformBox { lo, hi } => Vector(
                lo.iter()
                    .zip(hi)
                    .enumerate()
                    .map(|(i, (l, h))| l + (h - l) * stream.uniform(i as u64))
                    .collect(),
            ),
            InitialLaw::Gaussian { mean, std } => Vector(
                mean.iter()
                    .zip(std)
                    .enumerate()
                    .map(|(i, (m, s))| m + s * stream.normal(i as u64))
                    .collect(),
            ),
            InitialLaw::Empirical { points } => {
                let pick = (stream.raw(0) % points.len() as u64) as usize;
                Vector::from_slice(&points[pick])
            }
        }
    }
}

/// A collection of trajectories over one partition; trajectory i used
/// Brownian stream i off the shared master seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Ensemble {
    pub trajectories: Vec<Trajectory>,
    pub initial_law: InitialLaw,
    pub master_seed: u64,
}

impl Ensemble {
    pub fn diverged_count(&self) -> usize {
        self.trajectories.iter().filter(|t| t.is_diverged()).count()
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

/// Roll out `count` SDE paths. Each path owns Brownian stream i and initial
/// draw i; evaluation fans out over the rayon pool, and since every path is
/// a pure function of its index the result is scheduling-invariant.
pub fn simulate_ensemble<F>(
    sys: &SystemBundle,
    make_control: &F,
    initial_law: &InitialLaw,
    count: usize,
    partition: &Partition,
    master_seed: u64,
) -> Result<Ensemble>
where
    F: Fn(usize) -> Box<dyn FnMut(f64, &Vector) -> Vector> + Sync,
{
    if count < 1 {
        return Err(Error::ContractViolation(
            "ensemble count must be >= 1".into(),
        ));
    }
    initial_law.validate()?;
    use rayon::prelude::*;
    let trajectories: Vec<Trajectory> = (0..count)
        .into_par_iter()
        .map(|i| {
            let xi = initial_law.sample(master_seed, i as u64);
            let mut control = make_control(i);
            integrate_sde(
                sys,
                &mut *control,
                &xi,
                partition,
                RngStream::new(master_seed, i as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Ensemble {
        trajectories,
        initial_law: initial_law.clone(),
        master_seed,
    })
}

/// Manifest entry for one exported trajectory.
#[derive(Serialize, Deserialize)]
struct TrajectoryManifestRow {
    index: usize,
    file: String,
    provenance: SeedProvenance,
    diverged_at: Option<usize>,
}

/// Write one CSV per trajectory plus a JSON manifest with seeds, the
/// partition, and divergence flags.
pub fn export_ensemble(ensemble: &Ensemble, dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut rows = Vec::with_capacity(ensemble.len());
    for (i, traj) in ensemble.trajectories.iter().enumerate() {
        let file = format!("{stem}_{i:04}.csv");
        let f = std::fs::File::create(dir.join(&file))?;
        traj.to_csv(std::io::BufWriter::new(f))?;
        rows.push(TrajectoryManifestRow {
            index: i,
            file,
            provenance: traj.provenance,
            diverged_at: traj.diverged_at,
        });
    }
    let manifest = serde_json::json!({
        "master_seed": ensemble.master_seed,
        "partition": ensemble.trajectories.first().map(|t| t.partition),
        "initial_law": ensemble.initial_law,
        "diverged_count": ensemble.diverged_count(),
        "trajectories": rows,
    });
    let f = std::fs::File::create(dir.join(format!("{stem}_manifest.json")))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), &manifest)
        .map_err(|e| Error::Serialization(e.to_string()))?;
    Ok(())
}
