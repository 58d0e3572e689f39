//! Damped Newton-Raphson for the penalized objective
//!
//! ```text
//! F(beta) = -(1/n) sum_i l(beta; x_i, y_i) + lambda * sum_c beta_c' D beta_c
//! ```
//!
//! Coefficients are stored as a `p x m` matrix (one column per linear
//! predictor). Flattened vectors use the matrix's column-major storage, so
//! entry `c * p + j` is coefficient `j` of class `c`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::{Family, Variance};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSearch {
    pub shrink: f64,
    pub sufficient_decrease: f64,
    pub max_backtracks: usize,
}

impl Default for LineSearch {
    fn default() -> Self {
        LineSearch {
            shrink: 0.5,
            sufficient_decrease: 1e-4,
            max_backtracks: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub lambda: f64,
    pub max_iterations: usize,
    /// Stop once the max-norm of the gradient is at or below this.
    pub gradient_tolerance: f64,
    pub line_search: LineSearch,
    /// First diagonal ridge tried when the Hessian fails to factor; grown
    /// tenfold up to `max_ridge`.
    pub hessian_ridge: f64,
    pub max_ridge: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            lambda: 0.0,
            max_iterations: 200,
            gradient_tolerance: 1e-8,
            line_search: LineSearch::default(),
            hessian_ridge: 1e-10,
            max_ridge: 1e-2,
        }
    }
}

impl FitConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        FitConfig {
            lambda,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ls = &self.line_search;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.gradient_tolerance <= 0.0
            || !(ls.shrink > 0.0 && ls.shrink < 1.0)
            || !(ls.sufficient_decrease > 0.0 && ls.sufficient_decrease < 1.0)
            || self.hessian_ridge <= 0.0
            || self.max_ridge < self.hessian_ridge
        {
            return Err(Error::Config("invalid solver tolerances".into()));
        }
        Ok(())
    }
}

/// Data, family, penalty and weight of one fitting problem.
#[derive(Debug)]
pub struct Problem<'a> {
    x: &'a DMatrix<f64>,
    y: &'a DVector<f64>,
    family: Family,
    penalty: &'a DMatrix<f64>,
    lambda: f64,
    penalized: bool,
    response: DMatrix<f64>,
}

impl<'a> Problem<'a> {
    pub fn new(
        x: &'a DMatrix<f64>,
        y: &'a DVector<f64>,
        family: Family,
        penalty: &'a DMatrix<f64>,
        lambda: f64,
    ) -> Result<Self> {
        let (n, p) = x.shape();
        if y.len() != n {
            return Err(Error::Shape(format!("{n} design rows, {} outcomes", y.len())));
        }
        if penalty.shape() != (p, p) {
            return Err(Error::Shape(format!(
                "penalty is {:?}, expected {p} x {p}",
                penalty.shape()
            )));
        }
        if n == 0 {
            return Err(Error::Shape("no rows".into()));
        }
        family.check_support(y)?;
        Ok(Problem {
            x,
            y,
            family,
            penalty,
            lambda,
            // a zero penalty or weight is skipped entirely so such fits are
            // bit-identical to unpenalized ones
            penalized: lambda > 0.0 && penalty.iter().any(|&v| v != 0.0),
            response: family.response_matrix(y),
        })
    }

    pub fn n_params(&self) -> usize {
        self.x.ncols() * self.family.width()
    }

    fn shape_beta(&self) -> (usize, usize) {
        (self.x.ncols(), self.family.width())
    }

    /// `(mean negative log-likelihood, sum_c beta_c' D beta_c)`.
    pub fn objective_terms(&self, beta: &DMatrix<f64>) -> Result<(f64, f64)> {
        let eta = self.x * beta;
        let ll = self.family.log_likelihood(self.y, &eta, 1.0)?;
        let nll = -ll.sum() / self.y.len() as f64;
        let pen = if self.penalized {
            let db = self.penalty * beta;
            beta.iter().zip(db.iter()).map(|(a, b)| a * b).sum()
        } else {
            0.0
        };
        Ok((nll, pen))
    }

    pub fn objective(&self, beta: &DMatrix<f64>) -> Result<f64> {
        let (nll, pen) = self.objective_terms(beta)?;
        let value = if self.penalized { nll + self.lambda * pen } else { nll };
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::NonFinite("objective"))
        }
    }

    /// `-(1/n) X'(Y - mu) + 2 lambda D beta`.
    pub fn gradient(&self, beta: &DMatrix<f64>) -> DMatrix<f64> {
        let eta = self.x * beta;
        let resid = &self.response - self.family.mean(&eta);
        let mut g = self.x.tr_mul(&resid) * (-1.0 / self.y.len() as f64);
        if self.penalized {
            g += (self.penalty * beta) * (2.0 * self.lambda);
        }
        g
    }

    /// `(1/n) X' W X + 2 lambda D`, with the class-block layout for the
    /// multinomial.
    pub fn hessian(&self, beta: &DMatrix<f64>) -> DMatrix<f64> {
        let (p, m) = self.shape_beta();
        let n = self.y.len() as f64;
        let eta = self.x * beta;
        let weighted_gram = |w: &dyn Fn(usize) -> f64| {
            let mut xw = self.x.clone();
            for (i, mut row) in xw.row_iter_mut().enumerate() {
                row *= w(i);
            }
            self.x.tr_mul(&xw) / n
        };
        let mut h = DMatrix::zeros(p * m, p * m);
        match self.family.variance(&eta) {
            Variance::Diagonal(w) => {
                h.copy_from(&weighted_gram(&|i| w[i]));
            }
            Variance::Blocks(blocks) => {
                for a in 0..m {
                    for b in a..m {
                        let block = weighted_gram(&|i| blocks[i][(a, b)]);
                        h.view_mut((a * p, b * p), (p, p)).copy_from(&block);
                        if a != b {
                            h.view_mut((b * p, a * p), (p, p)).copy_from(&block.transpose());
                        }
                    }
                }
            }
        }
        if self.penalized {
            let scaled = self.penalty * (2.0 * self.lambda);
            for c in 0..m {
                let mut view = h.view_mut((c * p, c * p), (p, p));
                view += &scaled;
            }
        }
        for i in 0..p * m {
            for j in (i + 1)..p * m {
                h[(j, i)] = h[(i, j)];
            }
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub family: Family,
    /// `p x m` coefficients.
    pub beta: DMatrix<f64>,
    pub lambda: f64,
    pub converged: bool,
    pub iterations: usize,
    pub final_gradient_norm: f64,
    /// Mean negative log-likelihood on the training data with unit dispersion.
    pub train_nll: f64,
    /// `sum_c beta_c' D beta_c` at the solution.
    pub train_penalty_value: f64,
    pub sigma2_hat: Option<f64>,
    /// Objective after each accepted step, starting at `beta = 0`.
    pub objective_trace: Vec<f64>,
}

impl FittedModel {
    pub fn linear_predictor(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        x * &self.beta
    }

    pub fn predict_mean(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.family.mean(&self.linear_predictor(x))
    }

    /// Dispersion used when reporting likelihoods.
    pub fn dispersion(&self) -> f64 {
        self.sigma2_hat.unwrap_or(1.0)
    }
}

const SIGMA2_FLOOR: f64 = 1e-12;

fn solve_spd(h: &DMatrix<f64>, rhs: &DVector<f64>, config: &FitConfig) -> Result<DVector<f64>> {
    if let Some(chol) = h.clone().cholesky() {
        return Ok(chol.solve(rhs));
    }
    let mut ridge = config.hessian_ridge;
    while ridge <= config.max_ridge * (1.0 + 1e-12) {
        let mut shifted = h.clone();
        for i in 0..shifted.nrows() {
            shifted[(i, i)] += ridge;
        }
        if let Some(chol) = shifted.cholesky() {
            log::debug!("Hessian factored with ridge {ridge:e}");
            return Ok(chol.solve(rhs));
        }
        ridge *= 10.0;
    }
    Err(Error::SingularHessian {
        ridge: config.max_ridge,
    })
}

/// Minimizes the penalized objective from `beta = 0`.
pub fn fit(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    family: Family,
    penalty: &DMatrix<f64>,
    config: &FitConfig,
) -> Result<FittedModel> {
    config.validate()?;
    let problem = Problem::new(x, y, family, penalty, config.lambda)?;
    let (n, p) = x.shape();
    if n < p {
        log::warn!("fewer rows ({n}) than columns ({p}); the fit may not be identifiable");
    }
    let m = family.width();
    let ls = &config.line_search;

    let mut beta = DMatrix::zeros(p, m);
    let mut value = problem.objective(&beta)?;
    let mut trace = vec![value];
    let mut iterations = 0;
    let mut converged = false;
    let mut grad = problem.gradient(&beta);

    while iterations < config.max_iterations {
        if grad.amax() <= config.gradient_tolerance {
            converged = true;
            break;
        }
        let g = DVector::from_column_slice(grad.as_slice());
        let step = solve_spd(&problem.hessian(&beta), &(-&g), config)?;
        let slope = g.dot(&step);
        let step = DMatrix::from_column_slice(p, m, step.as_slice());

        let mut t = 1.0;
        let mut accepted = None;
        let mut unit_step = None;
        for attempt in 0..=ls.max_backtracks {
            let candidate = &beta + &step * t;
            if let Ok(v) = problem.objective(&candidate) {
                if attempt == 0 && v <= value {
                    unit_step = Some((candidate.clone(), v));
                }
                if v <= value + ls.sufficient_decrease * t * slope {
                    accepted = Some((candidate, v));
                    break;
                }
                // objective change lost in rounding: judge the full step by
                // the gradient instead
                let noise = 16.0 * f64::EPSILON * value.abs().max(1.0);
                if attempt == 0 && v <= value + noise && problem.gradient(&candidate).amax() < grad.amax() {
                    accepted = Some((candidate, v));
                    break;
                }
            }
            t *= ls.shrink;
        }
        // near the optimum the Armijo decrease drops below rounding; a full
        // step that does not increase the objective is still taken
        let Some((next, v)) = accepted.or(unit_step) else {
            log::debug!("line search exhausted at iteration {iterations}");
            break;
        };
        beta = next;
        value = v;
        trace.push(value);
        iterations += 1;
        grad = problem.gradient(&beta);
    }
    let final_gradient_norm = grad.amax();
    converged |= final_gradient_norm <= config.gradient_tolerance;

    let (train_nll, train_penalty_value) = {
        let (nll, _) = problem.objective_terms(&beta)?;
        let db = penalty * &beta;
        (nll, beta.iter().zip(db.iter()).map(|(a, b)| a * b).sum())
    };
    let sigma2_hat = match family {
        Family::Gaussian => {
            let resid = y - x * beta.column(0);
            Some((resid.norm_squared() / n as f64).max(SIGMA2_FLOOR))
        }
        _ => None,
    };
    Ok(FittedModel {
        family,
        beta,
        lambda: config.lambda,
        converged,
        iterations,
        final_gradient_norm,
        train_nll,
        train_penalty_value,
        sigma2_hat,
        objective_trace: trace,
    })
}

/// Objective value at `beta`.
pub fn objective(
    beta: &DMatrix<f64>,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    family: Family,
    penalty: &DMatrix<f64>,
    lambda: f64,
) -> Result<f64> {
    Problem::new(x, y, family, penalty, lambda)?.objective(beta)
}

pub fn gradient(
    beta: &DMatrix<f64>,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    family: Family,
    penalty: &DMatrix<f64>,
    lambda: f64,
) -> Result<DMatrix<f64>> {
    Ok(Problem::new(x, y, family, penalty, lambda)?.gradient(beta))
}

pub fn hessian(
    beta: &DMatrix<f64>,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    family: Family,
    penalty: &DMatrix<f64>,
    lambda: f64,
) -> Result<DMatrix<f64>> {
    Ok(Problem::new(x, y, family, penalty, lambda)?.hessian(beta))
}
