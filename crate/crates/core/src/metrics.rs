//! Overall and per-group performance, plus the grouped disparity measures.
//!
//! Disparities are raw sums over unordered group pairs and outcome segments
//! of squared gaps between within-cell means; no `kappa` normalization.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::Family;
use crate::penalty::Segmentation;
use crate::solver::FittedModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub group: usize,
    pub segment: usize,
    pub count: usize,
    pub mean_log_likelihood: f64,
    /// Mean predicted outcome, one entry per linear predictor.
    pub mean_prediction: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Performance {
    pub count: usize,
    pub nll: f64,
    /// Mean squared error; the Brier score for binary and multiclass.
    pub mse: f64,
    pub mae: Option<f64>,
    pub auroc: Option<f64>,
    pub misclassification: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disparities {
    pub d_ell: f64,
    pub d_eo: f64,
    /// Largest pairwise gap in per-group MSE.
    pub d_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedEvaluation {
    /// Sorted by `(group, segment)`; empty cells omitted.
    pub per_cell: Vec<CellStats>,
    /// Indexed by group; `None` for groups absent from the evaluation data.
    pub per_group: Vec<Option<Performance>>,
    pub overall: Performance,
    pub disparities: Disparities,
    /// `(k, l, segment)` cells skipped because one side was empty.
    pub skipped_cells: Vec<(usize, usize, usize)>,
}

/// Per-row quantities every metric is built from.
struct RowEval {
    ll: DVector<f64>,
    mean: DMatrix<f64>,
}

fn row_eval(model: &FittedModel, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<RowEval> {
    if x.nrows() != y.len() {
        return Err(Error::Shape(format!("{} rows, {} outcomes", x.nrows(), y.len())));
    }
    let eta = model.linear_predictor(x);
    let ll = model.family.log_likelihood(y, &eta, model.dispersion())?;
    let mean = model.family.mean(&eta);
    Ok(RowEval { ll, mean })
}

/// Mann-Whitney estimate with average ranks for ties; `None` unless both
/// classes are present.
pub fn auroc(scores: &[f64], labels: &[f64]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&v| v == 1.0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&r| labels[r] == 1.0).count() as f64 * avg;
        i = j + 1;
    }
    let np = n_pos as f64;
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

fn performance_rows(family: Family, y: &DVector<f64>, ev: &RowEval, rows: &[usize]) -> Performance {
    let n = rows.len() as f64;
    let nll = -rows.iter().map(|&i| ev.ll[i]).sum::<f64>() / n;
    match family {
        Family::Multinomial { classes } => {
            let mut sq = 0.0;
            let mut wrong = 0usize;
            for &i in rows {
                let truth = y[i] as usize;
                let p_ref = 1.0 - ev.mean.row(i).sum();
                let probs: Vec<f64> = std::iter::once(p_ref)
                    .chain((0..classes).map(|c| ev.mean[(i, c)]))
                    .collect();
                sq += probs
                    .iter()
                    .enumerate()
                    .map(|(c, p)| (if c == truth { 1.0 } else { 0.0 } - p).powi(2))
                    .sum::<f64>();
                let predicted = probs
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (c, &p)| if p > best.1 { (c, p) } else { best })
                    .0;
                wrong += usize::from(predicted != truth);
            }
            Performance {
                count: rows.len(),
                nll,
                mse: sq / n,
                mae: None,
                auroc: None,
                misclassification: Some(wrong as f64 / n),
            }
        }
        _ => {
            let resid: Vec<f64> = rows.iter().map(|&i| y[i] - ev.mean[(i, 0)]).collect();
            let mse = resid.iter().map(|r| r * r).sum::<f64>() / n;
            let mae = resid.iter().map(|r| r.abs()).sum::<f64>() / n;
            let auroc = match family {
                Family::Bernoulli => {
                    let s: Vec<f64> = rows.iter().map(|&i| ev.mean[(i, 0)]).collect();
                    let l: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
                    auroc(&s, &l)
                }
                _ => None,
            };
            Performance {
                count: rows.len(),
                nll,
                mse,
                mae: matches!(family, Family::Gaussian | Family::Poisson).then_some(mae),
                auroc,
                misclassification: None,
            }
        }
    }
}

/// Overall performance of `model` on `(x, y)`.
pub fn performance(model: &FittedModel, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Performance> {
    let ev = row_eval(model, x, y)?;
    let rows: Vec<usize> = (0..y.len()).collect();
    Ok(performance_rows(model.family, y, &ev, &rows))
}

/// Full grouped evaluation with the segmentation fitted on training data.
pub fn evaluate(
    model: &FittedModel,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    groups: &[usize],
    n_groups: usize,
    segmentation: &Segmentation,
) -> Result<GroupedEvaluation> {
    if groups.len() != y.len() {
        return Err(Error::Shape(format!("{} group labels, {} outcomes", groups.len(), y.len())));
    }
    let ev = row_eval(model, x, y)?;
    let m = model.family.width();
    let n_seg = segmentation.n_segments();

    // accumulate (count, sum ll, sum mean) by (group, segment)
    let mut count = vec![0usize; n_groups * n_seg];
    let mut sum_ll = vec![0.0; n_groups * n_seg];
    let mut sum_mu = vec![vec![0.0; m]; n_groups * n_seg];
    for i in 0..y.len() {
        let Some(s) = segmentation.segment_of(y[i]) else { continue };
        let c = groups[i] * n_seg + s;
        count[c] += 1;
        sum_ll[c] += ev.ll[i];
        for (a, acc) in sum_mu[c].iter_mut().enumerate() {
            *acc += ev.mean[(i, a)];
        }
    }
    let cell = |g: usize, s: usize| -> Option<CellStats> {
        let c = g * n_seg + s;
        (count[c] > 0).then(|| CellStats {
            group: g,
            segment: s,
            count: count[c],
            mean_log_likelihood: sum_ll[c] / count[c] as f64,
            mean_prediction: sum_mu[c].iter().map(|v| v / count[c] as f64).collect(),
        })
    };
    let cells: Vec<Vec<Option<CellStats>>> = (0..n_groups)
        .map(|g| (0..n_seg).map(|s| cell(g, s)).collect())
        .collect();

    let mut d_ell = 0.0;
    let mut d_eo = 0.0;
    let mut skipped = Vec::new();
    for k in 0..n_groups {
        for l in (k + 1)..n_groups {
            let mut used = 0;
            for (s, pair) in cells[k].iter().zip(&cells[l]).enumerate() {
                match pair {
                    (Some(a), Some(b)) => {
                        used += 1;
                        d_ell += (a.mean_log_likelihood - b.mean_log_likelihood).powi(2);
                        d_eo += a
                            .mean_prediction
                            .iter()
                            .zip(&b.mean_prediction)
                            .map(|(u, v)| (u - v).powi(2))
                            .sum::<f64>();
                    }
                    _ => skipped.push((k, l, s)),
                }
            }
            if used == 0 {
                log::warn!("groups {k} and {l} share no outcome segment; pair contributes 0");
            }
        }
    }

    let mut members = vec![Vec::new(); n_groups];
    for (i, &g) in groups.iter().enumerate() {
        members[g].push(i);
    }
    let per_group: Vec<Option<Performance>> = members
        .iter()
        .map(|rows| (!rows.is_empty()).then(|| performance_rows(model.family, y, &ev, rows)))
        .collect();
    let mse: Vec<f64> = per_group.iter().flatten().map(|p| p.mse).collect();
    let d_metric = mse
        .iter()
        .flat_map(|a| mse.iter().map(move |b| (a - b).abs()))
        .fold(0.0, f64::max);

    let all: Vec<usize> = (0..y.len()).collect();
    Ok(GroupedEvaluation {
        per_cell: cells.into_iter().flatten().flatten().collect(),
        per_group,
        overall: performance_rows(model.family, y, &ev, &all),
        disparities: Disparities { d_ell, d_eo, d_metric },
        skipped_cells: skipped,
    })
}

pub fn disparity_ell(
    model: &FittedModel,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    groups: &[usize],
    n_groups: usize,
    segmentation: &Segmentation,
) -> Result<f64> {
    Ok(evaluate(model, x, y, groups, n_groups, segmentation)?.disparities.d_ell)
}

pub fn disparity_eo(
    model: &FittedModel,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    groups: &[usize],
    n_groups: usize,
    segmentation: &Segmentation,
) -> Result<f64> {
    Ok(evaluate(model, x, y, groups, n_groups, segmentation)?.disparities.d_eo)
}
