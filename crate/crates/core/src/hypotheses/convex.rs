//! Exact solvers for the convex models: closed-form ridge regression and
//! L-BFGS for ridge-penalized multinomial logistic regression.

use std::cell::RefCell;

use argmin::core::{CostFunction, Executor, Gradient, State};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::LBFGS;
use nalgebra::{DMatrix, DVector};

use crate::datakit::Dataset;
use crate::diffcore::{loss_and_grad, LossKind, ModelKind, ModelSpec, Targets};
use crate::error::{Error, Result};

/// Sufficient statistics of `(1/2n) sum (w.x + b - y)^2`: the Gram matrix of
/// the bias-augmented inputs and `Z^T y`. Rows can be added or removed, so
/// fits on nested subsets share one pass over the data.
#[derive(Debug, Clone)]
pub struct RidgeSystem {
    gram: DMatrix<f64>,
    rhs: DVector<f64>,
    n: usize,
}

fn augment(data: &Dataset, idx: &[usize]) -> DMatrix<f64> {
    let d = data.dim();
    DMatrix::from_fn(idx.len(), d + 1, |r, c| if c < d { data.row(idx[r])[c] } else { 1.0 })
}

fn values(data: &Dataset, idx: &[usize]) -> Result<DVector<f64>> {
    match data.targets(idx) {
        Targets::Values(v) => Ok(DVector::from_vec(v)),
        _ => Err(Error::invalid("ridge regression needs real-valued labels")),
    }
}

impl RidgeSystem {
    pub fn new(data: &Dataset) -> Result<Self> {
        let idx: Vec<usize> = (0..data.len()).collect();
        let mut s = RidgeSystem {
            gram: DMatrix::zeros(data.dim() + 1, data.dim() + 1),
            rhs: DVector::zeros(data.dim() + 1),
            n: 0,
        };
        s.add(data, &idx)?;
        Ok(s)
    }

    pub fn add(&mut self, data: &Dataset, idx: &[usize]) -> Result<()> {
        self.update(data, idx, 1.0)?;
        self.n += idx.len();
        Ok(())
    }

    pub fn remove(&mut self, data: &Dataset, idx: &[usize]) -> Result<()> {
        if idx.len() > self.n {
            return Err(Error::invalid("removing more rows than the system holds"));
        }
        self.update(data, idx, -1.0)?;
        self.n -= idx.len();
        Ok(())
    }

    fn update(&mut self, data: &Dataset, idx: &[usize], sign: f64) -> Result<()> {
        if data.dim() + 1 != self.gram.nrows() {
            return Err(Error::DimensionMismatch {
                expected: self.gram.nrows() - 1,
                got: data.dim(),
            });
        }
        if idx.is_empty() {
            return Ok(());
        }
        let z = augment(data, idx);
        let y = values(data, idx)?;
        self.gram.gemm_tr(sign, &z, &z, 1.0);
        self.rhs.gemv_tr(sign, &z, &y, 1.0);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Minimizer of `(1/2n) sum (w.x + b - y)^2 + (lambda/2) ||w||^2`, laid out
    /// as the parameters of `ModelSpec::linear` (weights, then bias).
    pub fn solve(&self, lambda: f64) -> Result<Vec<f64>> {
        if self.n == 0 {
            return Err(Error::EmptyBatch);
        }
        let d = self.gram.nrows() - 1;
        let n = self.n as f64;
        let mut a = &self.gram / n;
        for j in 0..d {
            a[(j, j)] += lambda;
        }
        let b = &self.rhs / n;
        let chol = a
            .cholesky()
            .ok_or_else(|| Error::Degenerate("ridge system is not positive definite".into()))?;
        Ok(chol.solve(&b).iter().copied().collect())
    }
}

/// Ridge regression fit on all rows of `data`.
pub fn fit_ridge_regression(data: &Dataset, lambda: f64) -> Result<Vec<f64>> {
    RidgeSystem::new(data)?.solve(lambda)
}

/// Gradient of `(lambda/2) ||W||^2` added in place; biases are not penalized.
pub(crate) fn add_ridge(spec: &ModelSpec, params: &[f64], grad: &mut [f64], lambda: f64) {
    let (fan_in, fan_out) = spec.layer_shapes()[0];
    let w = fan_in * fan_out;
    for i in 0..w {
        grad[i] += lambda * params[i];
    }
}

fn ridge_penalty(spec: &ModelSpec, params: &[f64], lambda: f64) -> f64 {
    let (fan_in, fan_out) = spec.layer_shapes()[0];
    0.5 * lambda * params[..fan_in * fan_out].iter().map(|v| v * v).sum::<f64>()
}

struct Logistic<'a> {
    spec: &'a ModelSpec,
    x: DMatrix<f64>,
    t: Targets,
    lambda: f64,
    cache: RefCell<Option<(Vec<f64>, f64, Vec<f64>)>>,
}

impl Logistic<'_> {
    fn eval(&self, p: &[f64]) -> std::result::Result<(f64, Vec<f64>), argmin::core::Error> {
        if let Some((q, c, g)) = self.cache.borrow().as_ref() {
            if q.as_slice() == p {
                return Ok((*c, g.clone()));
            }
        }
        let (l, mut g) = loss_and_grad(self.spec, p, &self.x, &self.t, LossKind::CrossEntropy)
            .map_err(|e| argmin::core::Error::msg(e.to_string()))?;
        add_ridge(self.spec, p, &mut g, self.lambda);
        let c = l + ridge_penalty(self.spec, p, self.lambda);
        *self.cache.borrow_mut() = Some((p.to_vec(), c, g.clone()));
        Ok((c, g))
    }
}

impl CostFunction for Logistic<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        Ok(self.eval(p)?.0)
    }
}

impl Gradient for Logistic<'_> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;

    fn gradient(&self, p: &Self::Param) -> std::result::Result<Vec<f64>, argmin::core::Error> {
        Ok(self.eval(p)?.1)
    }
}

/// Gradient of the ridge-penalized mean loss of a convex model.
pub fn penalized_grad(spec: &ModelSpec, params: &[f64], data: &Dataset, lambda: f64) -> Result<Vec<f64>> {
    let loss = LossKind::for_spec(spec);
    let (_, mut g) = loss_and_grad(spec, params, &data.full_matrix(), &data.all_targets(), loss)?;
    add_ridge(spec, params, &mut g, lambda);
    Ok(g)
}

/// Minimize mean cross-entropy plus `(lambda/2) ||W||^2` with L-BFGS from
/// `init`, until the gradient norm is at most `tol`.
pub fn fit_ridge_logistic(
    spec: &ModelSpec,
    data: &Dataset,
    lambda: f64,
    init: &[f64],
    tol: f64,
    max_iters: u64,
) -> Result<Vec<f64>> {
    if spec.kind != ModelKind::LogisticClassifier {
        return Err(Error::invalid("fit_ridge_logistic needs a logistic model"));
    }
    if init.len() != spec.param_count() {
        return Err(Error::DimensionMismatch {
            expected: spec.param_count(),
            got: init.len(),
        });
    }
    let problem = Logistic {
        spec,
        x: data.full_matrix(),
        t: data.all_targets(),
        lambda,
        cache: RefCell::new(None),
    };
    let solver = LBFGS::new(MoreThuenteLineSearch::new(), 10)
        .with_tolerance_grad(tol)
        .and_then(|s| s.with_tolerance_cost(0.0))
        .map_err(|e| Error::invalid(e.to_string()))?;
    let res = Executor::new(problem, solver)
        .configure(|s| s.param(init.to_vec()).max_iters(max_iters))
        .run()
        .map_err(|e| Error::Degenerate(format!("L-BFGS failed: {e}")))?;
    let state = res.state();
    let iterations = state.get_iter();
    let best = state
        .get_best_param()
        .cloned()
        .ok_or_else(|| Error::Degenerate("L-BFGS returned no parameters".into()))?;
    let g = penalized_grad(spec, &best, data, lambda)?;
    let grad_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(grad_norm <= tol) {
        return Err(Error::NotConverged {
            iterations: iterations as usize,
            grad_norm,
        });
    }
    Ok(best)
}
