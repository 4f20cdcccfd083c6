//! Batched forward/backward passes.
//!
//! Rows of every matrix are samples. Layer `l` computes
//! `z_l = a_l * W_l^T + b_l`, with `a_{l+1} = act(z_l)` for hidden layers.
//! Weights are stored row-major as (fan_out x fan_in), which is exactly the
//! column-major layout of `W_l^T`, so no transposition is needed to load them.

use nalgebra::DMatrix;

use super::model::{Activation, ModelKind, ModelSpec};
use super::LossKind;

/// Per-sample supervision for a batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
    /// Soft targets: teacher probabilities for classifiers, teacher outputs for regressors.
    Soft(DMatrix<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(v) => v.len(),
            Targets::Values(v) => v.len(),
            Targets::Soft(m) => m.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub(crate) struct Net<'a> {
    spec: &'a ModelSpec,
    params: &'a [f64],
    /// W_l^T, shape (fan_in x fan_out)
    wts: Vec<DMatrix<f64>>,
}

pub(crate) struct Tape {
    /// Inputs to each layer; `acts[0]` is the batch itself.
    pub acts: Vec<DMatrix<f64>>,
    /// Pre-activations of each layer; the last entry holds the output logits / predictions.
    pub pre: Vec<DMatrix<f64>>,
}

impl Tape {
    pub fn output(&self) -> &DMatrix<f64> {
        self.pre.last().expect("at least one layer")
    }
}

impl<'a> Net<'a> {
    pub fn new(spec: &'a ModelSpec, params: &'a [f64]) -> Self {
        let wts = spec
            .layer_shapes()
            .iter()
            .zip(spec.layer_offsets())
            .map(|(&(fan_in, fan_out), r)| {
                DMatrix::from_column_slice(fan_in, fan_out, &params[r.start..r.start + fan_in * fan_out])
            })
            .collect();
        Net { spec, params, wts }
    }

    fn bias(&self, l: usize) -> &[f64] {
        let r = &self.spec.layer_offsets()[l];
        let (fan_in, fan_out) = self.spec.layer_shapes()[l];
        &self.params[r.start + fan_in * fan_out..r.end]
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> Tape {
        let layers = self.wts.len();
        let mut acts = Vec::with_capacity(layers);
        let mut pre = Vec::with_capacity(layers);
        acts.push(x.clone());
        for l in 0..layers {
            let mut z = &acts[l] * &self.wts[l];
            add_row_vector(&mut z, self.bias(l));
            if l + 1 < layers {
                let act = self.spec.activation;
                acts.push(z.map(|v| act.apply(v)));
            }
            pre.push(z);
        }
        Tape { acts, pre }
    }

    /// Backpropagate output deltas (one row per sample, already scaled by the
    /// caller). Returns the summed parameter gradient and/or per-sample input gradients.
    pub fn backward(
        &self,
        tape: &Tape,
        delta_out: DMatrix<f64>,
        want_params: bool,
        want_input: bool,
    ) -> (Option<Vec<f64>>, Option<DMatrix<f64>>) {
        let layers = self.wts.len();
        let offsets = self.spec.layer_offsets();
        let mut grad = want_params.then(|| vec![0.0; self.params.len()]);
        let mut delta = delta_out;
        let mut input = None;
        for l in (0..layers).rev() {
            if let Some(g) = grad.as_mut() {
                let start = offsets[l].start;
                let dwt = tape.acts[l].tr_mul(&delta);
                let nw = dwt.len();
                g[start..start + nw].copy_from_slice(dwt.as_slice());
                for (j, gb) in g[start + nw..offsets[l].end].iter_mut().enumerate() {
                    *gb = delta.column(j).sum();
                }
            }
            if l == 0 && !want_input {
                break;
            }
            let da = &delta * self.wts[l].transpose();
            if l == 0 {
                input = Some(da);
            } else {
                let act = self.spec.activation;
                delta = da.zip_map(&tape.pre[l - 1], |d, z| d * act.deriv(z));
            }
        }
        (grad, input)
    }

    /// Summed squared per-sample parameter gradients, given unscaled per-sample deltas.
    pub fn squared_grad_sum(&self, tape: &Tape, delta_out: DMatrix<f64>) -> Vec<f64> {
        let layers = self.wts.len();
        let offsets = self.spec.layer_offsets();
        let mut out = vec![0.0; self.params.len()];
        let mut delta = delta_out;
        for l in (0..layers).rev() {
            let start = offsets[l].start;
            // per-sample dW = delta_i (x) a_i, so sum_i dW^2 = (delta^2)^T (a^2)
            let a2 = tape.acts[l].map(|v| v * v);
            let d2 = delta.map(|v| v * v);
            let s = a2.tr_mul(&d2);
            let nw = s.len();
            out[start..start + nw].copy_from_slice(s.as_slice());
            for (j, o) in out[start + nw..offsets[l].end].iter_mut().enumerate() {
                *o = d2.column(j).sum();
            }
            if l == 0 {
                break;
            }
            let act = self.spec.activation;
            let da = &delta * self.wts[l].transpose();
            delta = da.zip_map(&tape.pre[l - 1], |d, z| d * act.deriv(z));
        }
        out
    }

    /// Per-sample `grad_x <v, grad_theta loss(theta, x_i)>`, computed as the
    /// directional derivative of the input gradient along `v` in parameter space.
    pub fn mixed_input_grads(&self, tape: &Tape, loss: LossKind, targets: &Targets, v: &[f64]) -> DMatrix<f64> {
        let layers = self.wts.len();
        let shapes = self.spec.layer_shapes();
        let offsets = self.spec.layer_offsets();
        let act = self.spec.activation;
        let dwts: Vec<DMatrix<f64>> = shapes
            .iter()
            .zip(&offsets)
            .map(|(&(i, o), r)| DMatrix::from_column_slice(i, o, &v[r.start..r.start + i * o]))
            .collect();
        let dbias = |l: usize| {
            let (i, o) = shapes[l];
            &v[offsets[l].start + i * o..offsets[l].end]
        };

        // forward tangents of the pre-activations
        let n = tape.acts[0].nrows();
        let mut zdot: Vec<DMatrix<f64>> = Vec::with_capacity(layers);
        let mut adot = DMatrix::zeros(n, self.spec.input_dim);
        for l in 0..layers {
            let mut zd = &tape.acts[l] * &dwts[l];
            if l > 0 {
                zd += &adot * &self.wts[l];
            }
            add_row_vector(&mut zd, dbias(l));
            if l + 1 < layers {
                adot = zd.zip_map(&tape.pre[l], |t, z| t * act.deriv(z));
            }
            zdot.push(zd);
        }

        let (_, mut delta) = head(self.spec, loss, tape.output(), targets);
        let mut ddelta = head_tangent(self.spec, tape.output(), &zdot[layers - 1]);

        for l in (0..layers).rev() {
            let wt_t = self.wts[l].transpose();
            let da = &delta * &wt_t;
            let dda = &ddelta * &wt_t + &delta * dwts[l].transpose();
            if l == 0 {
                return dda;
            }
            let z = &tape.pre[l - 1];
            delta = da.zip_map(z, |d, z| d * act.deriv(z));
            let mut next = dda.zip_map(z, |d, z| d * act.deriv(z));
            if act == Activation::Tanh {
                for ((nv, &dv), (&zv, &tv)) in next
                    .iter_mut()
                    .zip(da.iter())
                    .zip(z.iter().zip(zdot[l - 1].iter()))
                {
                    *nv += dv * act.second_deriv(zv) * tv;
                }
            }
            ddelta = next;
        }
        unreachable!("loop returns at layer 0")
    }
}

fn add_row_vector(m: &mut DMatrix<f64>, b: &[f64]) {
    for (j, &bj) in b.iter().enumerate() {
        m.column_mut(j).add_scalar_mut(bj);
    }
}

pub(crate) fn softmax_rows(z: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = z.clone();
    for i in 0..p.nrows() {
        let mut row = p.row_mut(i);
        let m = row.max();
        row.apply(|v| *v = (*v - m).exp());
        let s = row.sum();
        row.apply(|v| *v /= s);
    }
    p
}

fn log_softmax_row(z: &DMatrix<f64>, i: usize) -> Vec<f64> {
    let row = z.row(i);
    let m = row.max();
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Per-sample losses and unscaled output deltas (d loss_i / d output_i).
pub(crate) fn head(spec: &ModelSpec, loss: LossKind, out: &DMatrix<f64>, targets: &Targets) -> (Vec<f64>, DMatrix<f64>) {
    let n = out.nrows();
    let mut losses = vec![0.0; n];
    match (loss, spec.kind) {
        (LossKind::CrossEntropy, ModelKind::LogisticClassifier | ModelKind::Mlp) => {
            let mut delta = softmax_rows(out);
            match targets {
                Targets::Classes(y) => {
                    for i in 0..n {
                        losses[i] = -log_softmax_row(out, i)[y[i]];
                        delta[(i, y[i])] -= 1.0;
                    }
                }
                Targets::Soft(q) => {
                    for i in 0..n {
                        let lp = log_softmax_row(out, i);
                        let mut kl = 0.0;
                        for (j, &lpj) in lp.iter().enumerate() {
                            let qj = q[(i, j)];
                            if qj > 0.0 {
                                kl += qj * (qj.ln() - lpj);
                            }
                        }
                        losses[i] = kl;
                    }
                    delta -= q;
                }
                Targets::Values(_) => unreachable!("validated by caller"),
            }
            (losses, delta)
        }
        (LossKind::SquaredError, _) => {
            let mut delta = out.clone();
            match targets {
                Targets::Values(y) => {
                    for i in 0..n {
                        delta[(i, 0)] -= y[i];
                    }
                }
                Targets::Soft(t) => delta -= t,
                Targets::Classes(_) => unreachable!("validated by caller"),
            }
            for i in 0..n {
                losses[i] = 0.5 * delta.row(i).norm_squared();
            }
            (losses, delta)
        }
        (LossKind::CrossEntropy, ModelKind::LinearRegressor) => unreachable!("validated by caller"),
    }
}

/// Tangent of the output delta given the tangent of the output.
fn head_tangent(spec: &ModelSpec, out: &DMatrix<f64>, zdot: &DMatrix<f64>) -> DMatrix<f64> {
    if !spec.is_classifier() {
        return zdot.clone();
    }
    let p = softmax_rows(out);
    let mut t = DMatrix::zeros(p.nrows(), p.ncols());
    for i in 0..p.nrows() {
        let dot: f64 = p.row(i).iter().zip(zdot.row(i).iter()).map(|(a, b)| a * b).sum();
        for j in 0..p.ncols() {
            t[(i, j)] = p[(i, j)] * (zdot[(i, j)] - dot);
        }
    }
    t
}
