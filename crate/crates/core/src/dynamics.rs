//! Vector fields: the known drift/input pair, the unknown drift and
//! diffusion perturbations, the 4-D benchmark system, and certification of
//! the growth bounds the analysis relies on.

use crate::error::{Error, Result};
use crate::net::Mlp;
use crate::numerics::{Matrix, RngStream, Vector};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

pub type DriftFn = Arc<dyn Fn(f64, &Vector) -> Vector + Send + Sync>;
pub type InputOpFn = Arc<dyn Fn(f64) -> Matrix + Send + Sync>;
pub type DiffusionFn = Arc<dyn Fn(f64, &Vector) -> Matrix + Send + Sync>;
pub type DriftJacobianFn = Arc<dyn Fn(f64, &Vector) -> Matrix + Send + Sync>;

/// A dynamical system split into known and unknown parts:
///
/// known drift f(t,x), input operator g(t); unknown drift perturbation
/// lambda_mu(t,x) and diffusion lambda_sigma(t,x). The true drift under
/// input u is f + g u + lambda_mu; the nominal drift drops lambda_mu.
#[derive(Clone)]
pub struct SystemBundle {
    pub state_dim: usize,
    pub input_dim: usize,
    pub noise_dim: usize,
    nominal_drift: DriftFn,
    input_operator: InputOpFn,
    drift_uncertainty: DriftFn,
    diffusion_uncertainty: DiffusionFn,
    /// Analytic d f / d x when available; certification cross-checks it
    /// against finite differences.
    nominal_drift_jacobian: Option<DriftJacobianFn>,
}

impl SystemBundle {
    pub fn new(
        state_dim: usize,
        input_dim: usize,
        noise_dim: usize,
        nominal_drift: DriftFn,
        input_operator: InputOpFn,
        drift_uncertainty: DriftFn,
        diffusion_uncertainty: DiffusionFn,
    ) -> Self {
        SystemBundle {
            state_dim,
            input_dim,
            noise_dim,
            nominal_drift,
            input_operator,
            drift_uncertainty,
            diffusion_uncertainty,
            nominal_drift_jacobian: None,
        }
    }

    pub fn with_drift_jacobian(mut self, jac: DriftJacobianFn) -> Self {
        self.nominal_drift_jacobian = Some(jac);
        self
    }

    pub fn drift_jacobian(&self) -> Option<&DriftJacobianFn> {
        self.nominal_drift_jacobian.as_ref()
    }

    pub fn f(&self, t: f64, x: &Vector) -> Vector {
        (self.nominal_drift)(t, x)
    }

    pub fn g(&self, t: f64) -> Matrix {
        (self.input_operator)(t)
    }

    pub fn lambda_mu(&self, t: f64, x: &Vector) -> Vector {
        (self.drift_uncertainty)(t, x)
    }

    pub fn lambda_sigma(&self, t: f64, x: &Vector) -> Matrix {
        (self.diffusion_uncertainty)(t, x)
    }

    /// Same known fields with both uncertainties zeroed.
    pub fn with_zero_uncertainty(&self) -> SystemBundle {
        let n = self.state_dim;
        let d = self.noise_dim;
        SystemBundle {
            state_dim: self.state_dim,
            input_dim: self.input_dim,
            noise_dim: self.noise_dim,
            nominal_drift: Arc::clone(&self.nominal_drift),
            input_operator: Arc::clone(&self.input_operator),
            drift_uncertainty: Arc::new(move |_, _| Vector::zeros(n)),
            diffusion_uncertainty: Arc::new(move |_, _| Matrix::zeros(n, d)),
            nominal_drift_jacobian: self.nominal_drift_jacobian.clone(),
        }
    }

    fn check_dims(&self, x: &Vector, u: &Vector) -> Result<()> {
        if x.dim() != self.state_dim {
            return Err(Error::ContractViolation(format!(
                "state dimension {} != {}",
                x.dim(),
                self.state_dim
            )));
        }
        if u.dim() != self.input_dim {
            return Err(Error::ContractViolation(format!(
                "input dimension {} != {}",
                u.dim(),
                self.input_dim
            )));
        }
        Ok(())
    }
}

/// f(t,x) + g(t) u + lambda_mu(t,x).
pub fn eval_true_drift(sys: &SystemBundle, t: f64, x: &Vector, u: &Vector) -> Result<Vector> {
    sys.check_dims(x, u)?;
    let mut out = sys.f(t, x);
    out.axpy(1.0, &sys.g(t).matvec(u));
    out.axpy(1.0, &sys.lambda_mu(t, x));
    Ok(out)
}

/// f(t,x) + g(t) u.
pub fn eval_nominal_drift(sys: &SystemBundle, t: f64, x: &Vector, u: &Vector) -> Result<Vector> {
    sys.check_dims(x, u)?;
    let mut out = sys.f(t, x);
    out.axpy(1.0, &sys.g(t).matvec(u));
    Ok(out)
}

/// How the scalar profile 0.1 + 0.05||x|| enters the benchmark drift
/// uncertainty: scaling the all-ones vector, or scaling the state itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DriftUncertaintyForm {
    #[default]
    AllOnes,
    StateScaled,
}

/// Coefficients of the 4-D benchmark, config-overridable.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchmarkParams {
    pub state_dim: usize,
    /// linear drift coefficient (the -0.05 in f = -0.05 x - 0.25 h(x))
    pub drift_gain: f64,
    /// coefficient on h inside the drift and the scalar input gain (g = c I)
    pub input_gain: f64,
    pub h_widths: Vec<usize>,
    pub h_weight_std: f64,
    pub lambda_mu_offset: f64,
    pub lambda_mu_slope: f64,
    pub lambda_sigma_offset: f64,
    pub lambda_sigma_slope: f64,
    pub drift_uncertainty_form: DriftUncertaintyForm,
}

impl Default for BenchmarkParams {
    fn default() -> Self {
        BenchmarkParams {
            state_dim: 4,
            drift_gain: -0.05,
            input_gain: 0.25,
            h_widths: vec![4, 16, 4],
            h_weight_std: 0.5,
            lambda_mu_offset: 0.1,
            lambda_mu_slope: 0.05,
            lambda_sigma_offset: 0.1,
            lambda_sigma_slope: 0.05,
            drift_uncertainty_form: DriftUncertaintyForm::AllOnes,
        }
    }
}

/// The benchmark's frozen nonlinearity: a 2-layer tanh network whose weights
/// are drawn once from N(0, std^2) and never trained.
pub fn benchmark_h(params: &BenchmarkParams, h_seed: u64) -> Mlp {
    let stream = RngStream::new(h_seed, 0x68);
    Mlp::random_with_std(&params.h_widths, params.h_weight_std, &mut stream.cursor())
}

/// 4-D benchmark system built around a shared frozen h:
/// f(t,x) = a x + b (-h(x)), g = b I, lambda_mu = (0.1 + 0.05||x||) * ones,
/// lambda_sigma = (0.1 + 0.05||x||^0.5) * I.
pub fn benchmark_system_with(params: &BenchmarkParams, h: Arc<Mlp>) -> SystemBundle {
    let n = params.state_dim;
    assert_eq!(h.input_dim(), n);
    assert_eq!(h.output_dim(), n);
    let a = params.drift_gain;
    let b = params.input_gain;
    let h_drift = Arc::clone(&h);
    let drift: DriftFn = Arc::new(move |_t, x: &Vector| {
        let mut out = x.scale(a);
        out.axpy(-b, &h_drift.forward(x));
        out
    });
    let g: InputOpFn = Arc::new(move |_t| Matrix::identity(n).scale(b));
    let mu_off = params.lambda_mu_offset;
    let mu_slope = params.lambda_mu_slope;
    let form = params.drift_uncertainty_form;
    let lmu: DriftFn = Arc::new(move |_t, x: &Vector| {
        let s = mu_off + mu_slope * x.norm();
        match form {
            DriftUncertaintyForm::AllOnes => Vector::ones(n).scale(s),
            DriftUncertaintyForm::StateScaled => x.scale(s),
        }
    });
    let sg_off = params.lambda_sigma_offset;
    let sg_slope = params.lambda_sigma_slope;
    let lsig: DiffusionFn = Arc::new(move |_t, x: &Vector| {
        let s = sg_off + sg_slope * x.norm().sqrt();
        Matrix::identity(n).scale(s)
    });
    let h_jac = Arc::clone(&h);
    let jac: DriftJacobianFn = Arc::new(move |_t, x: &Vector| {
        let mut j = h_jac.state_jacobian(x).scale(-b);
        for i in 0..n {
            j.add_at(i, i, a);
        }
        j
    });
    SystemBundle::new(n, n, n, drift, g, lmu, lsig).with_drift_jacobian(jac)
}

/// Convenience constructor from a seed alone, with default coefficients.
pub fn benchmark_system(h_seed: u64) -> SystemBundle {
    let params = BenchmarkParams::default();
    let h = Arc::new(benchmark_h(&params, h_seed));
    benchmark_system_with(&params, h)
}

/// Certified growth constants for the two uncertainty bounds and the input
/// operator, valid on the probed domain.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GrowthConstants {
    pub delta_mu: f64,
    pub delta_sigma: f64,
    pub delta_g: f64,
}

/// Safety margin applied on top of the probed suprema.
pub const GROWTH_MARGIN: f64 = 1.05;

/// Smallest constants (up to the 5% margin) such that on the probed domain
/// ||lambda_mu||^2 <= delta_mu^2 (1 + ||x||^2),
/// ||lambda_sigma||_F^2 <= delta_sigma^2 (1 + ||x||^2)^(1/2), and
/// ||g(t)||_F <= delta_g.
///
/// States are probed on a radial grid of `grid_points` norms in [0, radius],
/// each paired with a set of deterministic directions; time is probed on a
/// coarse grid over `horizon`.
pub fn fit_growth_constants(
    sys: &SystemBundle,
    radius: f64,
    grid_points: usize,
    horizon: f64,
) -> Result<GrowthConstants> {
    if radius <= 0.0 {
        return Err(Error::ContractViolation("radius must be positive".into()));
    }
    if grid_points < 1000 {
        return Err(Error::ContractViolation(
            "need at least 1000 grid points".into(),
        ));
    }
    let n = sys.state_dim;
    let stream = RngStream::new(0x9f17, 0);
    let mut cursor = stream.cursor();
    // direction set: +-axes plus a few fixed random unit vectors
    let mut directions: Vec<Vector> = Vec::new();
    for i in 0..n {
        directions.push(Vector::basis(n, i));
        directions.push(Vector::basis(n, i).scale(-1.0));
    }
    for _ in 0..4 {
        let v = Vector((0..n).map(|_| cursor.next()).collect());
        let nrm = v.norm();
        if nrm > 1e-9 {
            directions.push(v.scale(1.0 / nrm));
        }
    }
    let t_grid: Vec<f64> = (0..=20).map(|i| horizon * i as f64 / 20.0).collect();
    let mut mu_sq_max = 0.0f64;
    let mut sigma_sq_max = 0.0f64;
    for j in 0..grid_points {
        let r = radius * j as f64 / (grid_points - 1) as f64;
        let dir = &directions[j % directions.len()];
        let x = dir.scale(r);
        let weight = 1.0 + r * r;
        for &t in &[0.0, horizon / 2.0, horizon] {
            let lmu = sys.lambda_mu(t, &x);
            if !lmu.is_finite() {
                return Err(Error::NonFiniteField(format!(
                    "lambda_mu at t={t}, ||x||={r}"
                )));
            }
            mu_sq_max = mu_sq_max.max(lmu.norm_sq() / weight);
            let lsig = sys.lambda_sigma(t, &x);
            if !lsig.is_finite() {
                return Err(Error::NonFiniteField(format!(
                    "lambda_sigma at t={t}, ||x||={r}"
                )));
            }
            let fro_sq = lsig.frobenius_norm().powi(2);
            sigma_sq_max = sigma_sq_max.max(fro_sq / weight.sqrt());
        }
    }
    let mut g_max = 0.0f64;
    for &t in &t_grid {
        let g = sys.g(t);
        if !g.is_finite() {
            return Err(Error::NonFiniteField(format!("g at t={t}")));
        }
        g_max = g_max.max(g.frobenius_norm());
    }
    Ok(GrowthConstants {
        delta_mu: mu_sq_max.sqrt() * GROWTH_MARGIN,
        delta_sigma: sigma_sq_max.sqrt() * GROWTH_MARGIN,
        delta_g: g_max * GROWTH_MARGIN,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_h_benchmark() -> SystemBundle {
        let params = BenchmarkParams::default();
        let h = Arc::new(Mlp::zeros(&params.h_widths));
        benchmark_system_with(&params, h)
    }

    #[test]
    fn true_drift_at_origin_is_offset_ones() {
        // lambda_mu(t, 0) = 0.1 * ones under the all-ones form
        let sys = zero_h_benchmark();
        let d = eval_true_drift(&sys, 0.0, &Vector::zeros(4), &Vector::zeros(4)).unwrap();
        for i in 0..4 {
            assert!((d[i] - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_uncertainty_drift_vanishes_at_origin() {
        let sys = zero_h_benchmark().with_zero_uncertainty();
        let d = eval_true_drift(&sys, 0.0, &Vector::zeros(4), &Vector::zeros(4)).unwrap();
        assert_eq!(d, Vector::zeros(4));
    }

    #[test]
    fn zero_uncertainty_drift_on_axis() {
        let sys = zero_h_benchmark().with_zero_uncertainty();
        let x = Vector::basis(4, 0);
        let d = eval_true_drift(&sys, 0.0, &x, &Vector::zeros(4)).unwrap();
        let expected = x.scale(-0.05);
        assert!(d.sub(&expected).norm() < 1e-15);
    }

    #[test]
    fn nominal_drift_input_channel() {
        // g = 0.25 I, so u = e1 contributes 0.25 e1
        let sys = zero_h_benchmark();
        let d = eval_nominal_drift(&sys, 0.0, &Vector::zeros(4), &Vector::basis(4, 0)).unwrap();
        assert!(d.sub(&Vector::basis(4, 0).scale(0.25)).norm() < 1e-15);
    }

    #[test]
    fn pseudoinverse_input_cancels_drift() {
        // u = -g^+ f(x); with g = 0.25 I the pseudoinverse is 4 I
        let sys = benchmark_system(3);
        let x = Vector::from_slice(&[0.4, -1.0, 0.2, 0.9]);
        let f = sys.f(0.0, &x);
        let u = f.scale(-4.0);
        let d = eval_nominal_drift(&sys, 0.0, &x, &u).unwrap();
        assert!(d.norm() < 1e-12);
    }

    #[test]
    fn drift_dimension_mismatch_rejected() {
        let sys = benchmark_system(0);
        let err = eval_true_drift(&sys, 0.0, &Vector::zeros(3), &Vector::zeros(4));
        assert!(matches!(err, Err(Error::ContractViolation(_))));
    }

    #[test]
    fn true_minus_nominal_is_exactly_lambda_mu() {
        let sys = benchmark_system(7);
        let stream = RngStream::new(1, 0);
        let mut cursor = stream.cursor();
        for _ in 0..50 {
            let x = Vector((0..4).map(|_| 2.0 * cursor.next()).collect());
            let u = Vector((0..4).map(|_| cursor.next()).collect());
            let t = cursor.next().abs();
            let diff = eval_true_drift(&sys, t, &x, &u)
                .unwrap()
                .sub(&eval_nominal_drift(&sys, t, &x, &u).unwrap());
            assert!(diff.sub(&sys.lambda_mu(t, &x)).norm() < 1e-14);
        }
    }

    #[test]
    fn benchmark_sigma_at_origin() {
        let sys = benchmark_system(0);
        let s = sys.lambda_sigma(0.0, &Vector::zeros(4));
        assert!((s.get(0, 0) - 0.1).abs() < 1e-15);
        assert!((s.frobenius_norm() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn benchmark_g_frobenius_norm() {
        let sys = benchmark_system(0);
        for t in [0.0, 1.0, 10.0] {
            assert!((sys.g(t).frobenius_norm() - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn benchmark_h_is_seed_deterministic() {
        let params = BenchmarkParams::default();
        let a = benchmark_h(&params, 11);
        let b = benchmark_h(&params, 11);
        assert_eq!(a.params(), b.params());
        let c = benchmark_h(&params, 12);
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn growth_constants_match_closed_form() {
        // sup_r 4 (0.1 + 0.05 r)^2 / (1 + r^2) peaks at r = 0.5 with value
        // 0.05, so delta_mu = sqrt(0.05) * 1.05
        let sys = benchmark_system(5);
        let g = fit_growth_constants(&sys, 10.0, 4000, 10.0).unwrap();
        assert!(
            g.delta_mu > 0.223 && g.delta_mu < 0.236,
            "delta_mu = {}",
            g.delta_mu
        );
        assert_eq!(g.delta_g, 0.525, "delta_g must be exactly 0.5 * 1.05");
        assert!(g.delta_sigma > 0.0);
    }

    #[test]
    fn growth_constants_zero_for_zero_uncertainty() {
        let sys = benchmark_system(5).with_zero_uncertainty();
        let g = fit_growth_constants(&sys, 10.0, 1000, 10.0).unwrap();
        assert_eq!(g.delta_mu, 0.0);
        assert_eq!(g.delta_sigma, 0.0);
    }

    #[test]
    fn fitted_constants_certify_the_inequalities() {
        let sys = benchmark_system(9);
        let g = fit_growth_constants(&sys, 10.0, 2000, 10.0).unwrap();
        let stream = RngStream::new(77, 0);
        let mut cursor = stream.cursor();
        for _ in 0..10_000 {
            let raw = Vector((0..4).map(|_| cursor.next()).collect());
            let r = cursor.next().abs().min(2.5) * 4.0; // radii in [0, 10]
            let x = if raw.norm() > 1e-12 {
                raw.scale(r / raw.norm())
            } else {
                raw
            };
            let lmu = sys.lambda_mu(0.3, &x).norm_sq();
            assert!(lmu <= g.delta_mu.powi(2) * (1.0 + x.norm_sq()) + 1e-12);
            let lsig = sys.lambda_sigma(0.3, &x).frobenius_norm().powi(2);
            assert!(lsig <= g.delta_sigma.powi(2) * (1.0 + x.norm_sq()).sqrt() + 1e-12);
        }
    }

    #[test]
    fn input_operator_smallest_singular_value() {
        let sys = benchmark_system(2);
        for i in 0..100 {
            let t = i as f64 * 0.1;
            let g = sys.g(t);
            // for 0.25 I the smallest singular value is 0.25
            let gram = g.transpose().matmul(&g);
            let (w, _) = crate::numerics::sym_eig(&gram).unwrap();
            let min_sv = w.into_iter().fold(f64::INFINITY, f64::min).max(0.0).sqrt();
            assert!(min_sv > 1e-8);
        }
    }

    #[test]
    fn state_scaled_uncertainty_form() {
        let params = BenchmarkParams {
            drift_uncertainty_form: DriftUncertaintyForm::StateScaled,
            ..Default::default()
        };
        let h = Arc::new(Mlp::zeros(&params.h_widths));
        let sys = benchmark_system_with(&params, h);
        // at x = 0 the state-scaled reading vanishes
        assert_eq!(sys.lambda_mu(0.0, &Vector::zeros(4)), Vector::zeros(4));
        let x = Vector::basis(4, 1).scale(2.0);
        let lmu = sys.lambda_mu(0.0, &x);
        let expected = x.scale(0.1 + 0.05 * 2.0);
        assert!(lmu.sub(&expected).norm() < 1e-14);
    }
}
