//! Canonical-link exponential families.
//!
//! Linear predictors are carried as `n x m` matrices: `m = 1` for the scalar
//! families and `m = classes` (non-reference classes) for the multinomial,
//! whose reference class has an implicit linear predictor of zero.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::dataset::OutcomeType;
use crate::error::{Error, Result};

/// Exponents are clamped to this magnitude before `exp`.
pub const EXP_CLAMP: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Family {
    Gaussian,
    Bernoulli,
    Poisson,
    /// Baseline-category logit with `classes` non-reference classes.
    Multinomial { classes: usize },
}

/// Second derivative of the cumulant, per row.
#[derive(Debug, Clone, PartialEq)]
pub enum Variance {
    Diagonal(DVector<f64>),
    /// One symmetric `m x m` block per row.
    Blocks(Vec<DMatrix<f64>>),
}

#[inline]
pub(crate) fn exp_clamped(x: f64) -> f64 {
    x.clamp(-EXP_CLAMP, EXP_CLAMP).exp()
}

#[inline]
pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Probabilities of the non-reference classes for one row of scores.
fn softmax_with_reference(eta: impl Iterator<Item = f64> + Clone) -> (Vec<f64>, f64) {
    let shift = eta.clone().fold(0.0f64, f64::max);
    let e: Vec<f64> = eta.map(|v| (v - shift).exp()).collect();
    let denom = (-shift).exp() + e.iter().sum::<f64>();
    let log_denom = shift + denom.ln();
    (e.into_iter().map(|v| v / denom).collect(), log_denom)
}

impl Family {
    pub fn for_outcome(outcome: OutcomeType, n_classes: usize) -> Result<Self> {
        Ok(match outcome {
            OutcomeType::Binary => Family::Bernoulli,
            OutcomeType::Continuous => Family::Gaussian,
            OutcomeType::Count => Family::Poisson,
            OutcomeType::Multiclass => {
                if n_classes < 2 {
                    return Err(Error::Config("multiclass outcome needs at least two classes".into()));
                }
                Family::Multinomial {
                    classes: n_classes - 1,
                }
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Bernoulli => "bernoulli",
            Family::Poisson => "poisson",
            Family::Multinomial { .. } => "multinomial",
        }
    }

    /// Number of linear predictors per row.
    pub fn width(&self) -> usize {
        match self {
            Family::Multinomial { classes } => *classes,
            _ => 1,
        }
    }

    fn check_eta(&self, eta: &DMatrix<f64>) {
        debug_assert_eq!(eta.ncols(), self.width(), "linear predictor width");
    }

    pub fn check_support(&self, y: &DVector<f64>) -> Result<()> {
        for (row, &v) in y.iter().enumerate() {
            let ok = match self {
                Family::Gaussian => v.is_finite(),
                Family::Bernoulli => v == 0.0 || v == 1.0,
                Family::Poisson => v >= 0.0 && v.fract() == 0.0 && v.is_finite(),
                Family::Multinomial { classes } => {
                    v >= 0.0 && v.fract() == 0.0 && v <= *classes as f64
                }
            };
            if !ok {
                return Err(Error::Domain {
                    row,
                    value: v,
                    family: self.name(),
                });
            }
        }
        Ok(())
    }

    /// Inverse canonical link.
    pub fn mean(&self, eta: &DMatrix<f64>) -> DMatrix<f64> {
        self.check_eta(eta);
        match self {
            Family::Gaussian => eta.clone(),
            Family::Bernoulli => eta.map(logistic),
            Family::Poisson => eta.map(exp_clamped),
            Family::Multinomial { classes } => {
                let mut mu = DMatrix::zeros(eta.nrows(), *classes);
                for i in 0..eta.nrows() {
                    let (p, _) = softmax_with_reference(eta.row(i).iter().copied());
                    for (c, v) in p.into_iter().enumerate() {
                        mu[(i, c)] = v;
                    }
                }
                mu
            }
        }
    }

    /// `b''(eta)`, the derivative of the mean with respect to the linear
    /// predictor.
    pub fn variance(&self, eta: &DMatrix<f64>) -> Variance {
        self.check_eta(eta);
        match self {
            Family::Gaussian => Variance::Diagonal(DVector::from_element(eta.nrows(), 1.0)),
            Family::Bernoulli => Variance::Diagonal(DVector::from_iterator(
                eta.nrows(),
                eta.column(0).iter().map(|&v| {
                    let m = logistic(v);
                    m * (1.0 - m)
                }),
            )),
            Family::Poisson => Variance::Diagonal(DVector::from_iterator(
                eta.nrows(),
                eta.column(0).iter().map(|&v| exp_clamped(v)),
            )),
            Family::Multinomial { classes } => {
                let m = *classes;
                let blocks = (0..eta.nrows())
                    .map(|i| {
                        let (p, _) = softmax_with_reference(eta.row(i).iter().copied());
                        DMatrix::from_fn(m, m, |a, b| {
                            if a == b {
                                p[a] - p[a] * p[a]
                            } else {
                                -p[a] * p[b]
                            }
                        })
                    })
                    .collect();
                Variance::Blocks(blocks)
            }
        }
    }

    /// Per-row log-likelihood. `dispersion` is the Gaussian `sigma^2`; it is
    /// ignored by the other families.
    pub fn log_likelihood(
        &self,
        y: &DVector<f64>,
        eta: &DMatrix<f64>,
        dispersion: f64,
    ) -> Result<DVector<f64>> {
        self.check_support(y)?;
        self.check_eta(eta);
        if y.len() != eta.nrows() {
            return Err(Error::Shape(format!(
                "{} outcomes for {} linear predictors",
                y.len(),
                eta.nrows()
            )));
        }
        let n = y.len();
        let ll = match self {
            Family::Gaussian => {
                let norm = -0.5 * (2.0 * std::f64::consts::PI * dispersion).ln();
                DVector::from_fn(n, |i, _| {
                    let r = y[i] - eta[(i, 0)];
                    norm - 0.5 * r * r / dispersion
                })
            }
            Family::Bernoulli => DVector::from_fn(n, |i, _| {
                let e = eta[(i, 0)];
                y[i] * e - softplus(e)
            }),
            Family::Poisson => DVector::from_fn(n, |i, _| {
                let e = eta[(i, 0)].clamp(-EXP_CLAMP, EXP_CLAMP);
                y[i] * e - e.exp() - ln_gamma(y[i] + 1.0)
            }),
            Family::Multinomial { .. } => DVector::from_fn(n, |i, _| {
                let (_, log_denom) = softmax_with_reference(eta.row(i).iter().copied());
                let class = y[i] as usize;
                let score = if class == 0 { 0.0 } else { eta[(i, class - 1)] };
                score - log_denom
            }),
        };
        Ok(ll)
    }

    /// Derivative of the log-likelihood with respect to the linear predictor:
    /// `(y - mu) / a(phi)`, per class for the multinomial.
    pub fn score_residual(
        &self,
        y: &DVector<f64>,
        eta: &DMatrix<f64>,
        dispersion: f64,
    ) -> Result<DMatrix<f64>> {
        self.check_support(y)?;
        let mu = self.mean(eta);
        Ok(match self {
            Family::Multinomial { classes } => DMatrix::from_fn(y.len(), *classes, |i, c| {
                let hit = if y[i] as usize == c + 1 { 1.0 } else { 0.0 };
                hit - mu[(i, c)]
            }),
            Family::Gaussian => DMatrix::from_fn(y.len(), 1, |i, _| (y[i] - mu[(i, 0)]) / dispersion),
            _ => DMatrix::from_fn(y.len(), 1, |i, _| y[i] - mu[(i, 0)]),
        })
    }

    /// Outcome encoded on the mean scale: the value itself for scalar
    /// families, a one-hot row over non-reference classes for multinomial.
    pub fn response_matrix(&self, y: &DVector<f64>) -> DMatrix<f64> {
        match self {
            Family::Multinomial { classes } => DMatrix::from_fn(y.len(), *classes, |i, c| {
                if y[i] as usize == c + 1 {
                    1.0
                } else {
                    0.0
                }
            }),
            _ => DMatrix::from_column_slice(y.len(), 1, y.as_slice()),
        }
    }
}
