//! Small fully-connected tanh networks with hand-written differentiation.
//!
//! Three derivative paths are exposed, all analytic:
//! - `state_jacobian`: d output / d input via the layerwise chain rule;
//! - `grad_value`: reverse mode of  <cotangent, output>  w.r.t. parameters;
//! - `grad_jacobian_form`: reverse mode of the bilinear form  u^T J(x) v
//!   w.r.t. parameters (forward tangent pass in direction v, then reverse
//!   through both the primal and tangent computations). This is what a
//!   Jacobian-matching loss needs.
//!
//! Hidden layers apply tanh; the output layer is affine, so a single-layer
//! network is an exact linear map.

use crate::numerics::{Matrix, NormalCursor, Vector};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    widths: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Vec<Vector>,
}

/// Forward-pass record: activations per layer (a[0] = input) and the tanh
/// derivative 1 - a^2 for hidden layers.
pub struct ForwardTrace {
    pub activations: Vec<Vector>,
    pub tanh_deriv: Vec<Vector>,
}

impl Mlp {
    /// Zero-initialized network (outputs the zero bias).
    pub fn zeros(widths: &[usize]) -> Self {
        assert!(widths.len() >= 2, "need at least input and output widths");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 1..widths.len() {
            weights.push(Matrix::zeros(widths[l], widths[l - 1]));
            biases.push(Vector::zeros(widths[l]));
        }
        Mlp {
            widths: widths.to_vec(),
            weights,
            biases,
        }
    }

    /// Weights drawn i.i.d. N(0, std^2), biases zero.
    pub fn random_with_std(widths: &[usize], std: f64, cursor: &mut NormalCursor) -> Self {
        let mut net = Mlp::zeros(widths);
        for w in &mut net.weights {
            for i in 0..w.rows() {
                for j in 0..w.cols() {
                    w.set(i, j, std * cursor.next());
                }
            }
        }
        net
    }

    /// Standard initialization: weights N(0, 1/fan_in), biases zero.
    pub fn random(widths: &[usize], cursor: &mut NormalCursor) -> Self {
        let mut net = Mlp::zeros(widths);
        for w in &mut net.weights {
            let std = (1.0 / w.cols() as f64).sqrt();
            for i in 0..w.rows() {
                for j in 0..w.cols() {
                    w.set(i, j, std * cursor.next());
                }
            }
        }
        net
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    fn layer_count(&self) -> usize {
        self.weights.len()
    }

    pub fn param_count(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.rows() * w.cols() + b.dim())
            .sum()
    }

    /// Flatten parameters layer by layer: W row-major, then b.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for i in 0..w.rows() {
                out.extend_from_slice(w.row(i));
            }
            out.extend_from_slice(b.as_slice());
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "parameter length mismatch");
        let mut off = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            for i in 0..w.rows() {
                for j in 0..w.cols() {
                    w.set(i, j, flat[off]);
                    off += 1;
                }
            }
            for i in 0..b.dim() {
                b[i] = flat[off];
                off += 1;
            }
        }
    }

    pub fn forward(&self, x: &Vector) -> Vector {
        let mut trace = self.forward_trace(x);
        trace.activations.pop().expect("non-empty activation stack")
    }

    /// Forward pass keeping every activation, for the reverse passes.
    pub fn forward_trace(&self, x: &Vector) -> ForwardTrace {
        assert_eq!(x.dim(), self.input_dim(), "input dimension mismatch");
        let last = self.layer_count() - 1;
        let mut activations = Vec::with_capacity(self.layer_count() + 1);
        let mut tanh_deriv = Vec::with_capacity(self.layer_count());
        activations.push(x.clone());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut s = w.matvec(activations.last().unwrap());
            s.axpy(1.0, b);
            if l < last {
                let a = Vector(s.0.iter().map(|v| v.tanh()).collect());
                tanh_deriv.push(Vector(a.0.iter().map(|v| 1.0 - v * v).collect()));
                activations.push(a);
            } else {
                tanh_deriv.push(Vector::zeros(0)); // unused for the affine output layer
                activations.push(s);
            }
        }
        ForwardTrace {
            activations,
            tanh_deriv,
        }
    }

    /// d output / d input at x: W_L D_{L-1} W_{L-1} ... D_1 W_1.
    pub fn state_jacobian(&self, x: &Vector) -> Matrix {
        let trace = self.forward_trace(x);
        self.state_jacobian_from(&trace)
    }

    pub fn state_jacobian_from(&self, trace: &ForwardTrace) -> Matrix {
        let last = self.layer_count() - 1;
        let mut jac = Matrix::identity(self.input_dim());
        for (l, w) in self.weights.iter().enumerate() {
            let mut next = w.matmul(&jac);
            if l < last {
                let d = &trace.tanh_deriv[l];
                for i in 0..next.rows() {
                    let di = d[i];
                    for j in 0..next.cols() {
                        next.set(i, j, next.get(i, j) * di);
                    }
                }
            }
            jac = next;
        }
        jac
    }

    /// Accumulate d <cot, output(x)> / d params into `grad` (flat layout).
    pub fn grad_value(&self, trace: &ForwardTrace, cot: &Vector, scale: f64, grad: &mut [f64]) {
        let last = self.layer_count() - 1;
        let mut delta = cot.scale(scale);
        // walk layers backward, writing gradient blocks at their flat offsets
        for l in (0..self.layer_count()).rev() {
            if l < last {
                delta = delta.hadamard(&trace.tanh_deriv[l]);
            }
            let a_prev = &trace.activations[l];
            let off = self.layer_offset(l);
            let (rows, cols) = (self.weights[l].rows(), self.weights[l].cols());
            for i in 0..rows {
                let di = delta[i];
                let base = off + i * cols;
                for j in 0..cols {
                    grad[base + j] += di * a_prev[j];
                }
            }
            let boff = off + rows * cols;
            for i in 0..rows {
                grad[boff + i] += delta[i];
            }
            if l > 0 {
                delta = self.weights[l].t_matvec(&delta);
            }
        }
    }

    /// Accumulate  scale * d (u^T J(x) v) / d params  into `grad`.
    ///
    /// Runs the tangent recursion q_l = D_l (W_l q_{l-1}) forward in the
    /// direction v, then reverses through the tangent and primal variables
    /// together. The primal activations enter through the tanh derivatives,
    /// which is where the second-order terms come from.
    pub fn grad_jacobian_form(
        &self,
        trace: &ForwardTrace,
        u: &Vector,
        v: &Vector,
        scale: f64,
        grad: &mut [f64],
    ) {
        let last = self.layer_count() - 1;
        let layers = self.layer_count();
        // forward tangent pass, keeping the pre-gating products p_l = W_l q_{l-1}
        let mut q = Vec::with_capacity(layers + 1);
        let mut p = Vec::with_capacity(layers);
        q.push(v.clone());
        for (l, w) in self.weights.iter().enumerate() {
            let pl = w.matvec(q.last().unwrap());
            if l < last {
                q.push(pl.hadamard(&trace.tanh_deriv[l]));
            } else {
                q.push(pl.clone());
            }
            p.push(pl);
        }
        // reverse pass: rq = adjoint of q_l, ra = adjoint of a_l (primal)
        let mut rq = u.scale(scale);
        let mut ra = Vector::zeros(self.widths[layers]); // a_L never feeds the form
        for l in (0..layers).rev() {
            let rows = self.weights[l].rows();
            let cols = self.weights[l].cols();
            let off = self.layer_offset(l);
            let a_prev = &trace.activations[l];
            let (rp, rs) = if l < last {
                let d = &trace.tanh_deriv[l];
                let rp = rq.hadamard(d);
                // d_l = 1 - a_l^2 contributes rd * (-2 a_l) to the a_l adjoint
                let a_l = &trace.activations[l + 1];
                let mut ra_l = std::mem::replace(&mut ra, Vector::zeros(0));
                for i in 0..rows {
                    ra_l[i] += rq[i] * p[l][i] * (-2.0 * a_l[i]);
                }
                let rs = ra_l.hadamard(d);
                (rp, rs)
            } else {
                // affine output layer: no gating, s_L does not feed the form
                (rq.clone(), Vector::zeros(rows))
            };
            // tangent product p_l = W_l q_{l-1}
            for i in 0..rows {
                let ri = rp[i];
                let base = off + i * cols;
                for j in 0..cols {
                    grad[base + j] += ri * q[l][j];
                }
            }
            // primal affine s_l = W_l a_{l-1} + b_l
            for i in 0..rows {
                let ri = rs[i];
                let base = off + i * cols;
                for j in 0..cols {
                    grad[base + j] += ri * a_prev[j];
                }
            }
            let boff = off + rows * cols;
            for i in 0..rows {
                grad[boff + i] += rs[i];
            }
            if l > 0 {
                rq = self.weights[l].t_matvec(&rp);
                ra = self.weights[l].t_matvec(&rs);
            }
        }
    }

    fn layer_offset(&self, layer: usize) -> usize {
        let mut off = 0;
        for l in 0..layer {
            off += self.weights[l].rows() * self.weights[l].cols() + self.biases[l].dim();
        }
        off
    }

    pub fn weight(&self, layer: usize) -> &Matrix {
        &self.weights[layer]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut Vector {
        &mut self.biases[layer]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut Matrix {
        &mut self.weights[layer]
    }
}
