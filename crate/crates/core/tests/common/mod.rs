#![allow(dead_code)]

use fairglm::dataset::{DatasetSchema, FeatureKind, FeatureSpec, OutcomeType, RawValue, Record};
use fairglm::family::Family;
use fairglm::penalty::{build_pair_sets, build_penalty_matrix, PenaltyOptions, SegmentKind, Segmentation};
use fairglm::dataset::Dataset;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

pub fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Intercept column followed by `p - 1` standard normal columns.
pub fn design(rng: &mut impl Rng, n: usize, p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { normal(rng) })
}

pub fn groups(rng: &mut impl Rng, n: usize, k: usize) -> Vec<usize> {
    // every group present
    (0..n).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect()
}

/// Outcomes drawn from `family` at the linear predictor `eta` (n x width).
pub fn outcomes(rng: &mut impl Rng, family: Family, eta: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(eta.nrows(), |i, _| match family {
        Family::Gaussian => eta[(i, 0)] + normal(rng),
        Family::Bernoulli => f64::from(rng.random::<f64>() < 1.0 / (1.0 + (-eta[(i, 0)]).exp())),
        Family::Poisson => Poisson::new(eta[(i, 0)].exp().clamp(1e-6, 1e6)).unwrap().sample(rng),
        Family::Multinomial { classes } => {
            let w: Vec<f64> = std::iter::once(1.0).chain((0..classes).map(|c| eta[(i, c)].exp())).collect();
            let total: f64 = w.iter().sum();
            let mut u = rng.random::<f64>() * total;
            let mut label = classes;
            for (c, v) in w.iter().enumerate() {
                if u < *v {
                    label = c;
                    break;
                }
                u -= v;
            }
            label as f64
        }
    })
}

pub fn random_beta(rng: &mut impl Rng, p: usize, m: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(p, m, |_, _| scale * normal(rng))
}

/// Segmentation that buckets outcomes into `segments` equal-width ranges
/// over `[lo, hi]`, without the coverage search.
pub fn fixed_segments(lo: f64, hi: f64, segments: usize) -> Segmentation {
    let boundaries = (0..=segments).map(|s| lo + (hi - lo) * s as f64 / segments as f64).collect();
    Segmentation {
        kind: SegmentKind::EqualLengths { segments },
        boundaries,
    }
}

pub fn per_value(labels: usize) -> Segmentation {
    Segmentation {
        kind: SegmentKind::PerValue,
        boundaries: (0..labels).map(|v| v as f64).collect(),
    }
}

/// Penalty from the definition: a literal double loop over every cross-group
/// pair in every cell, normalized per cell and by the nominal kappa.
pub fn brute_force_penalty(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    groups: &[usize],
    n_groups: usize,
    seg: &Segmentation,
) -> DMatrix<f64> {
    let p = x.ncols();
    let s_of: Vec<Option<usize>> = y.iter().map(|&v| seg.segment_of(v)).collect();
    let mut d = DMatrix::zeros(p, p);
    for k in 0..n_groups {
        for l in (k + 1)..n_groups {
            for s in 0..seg.n_segments() {
                let left: Vec<usize> = (0..y.len()).filter(|&i| groups[i] == k && s_of[i] == Some(s)).collect();
                let right: Vec<usize> = (0..y.len()).filter(|&i| groups[i] == l && s_of[i] == Some(s)).collect();
                if left.is_empty() || right.is_empty() {
                    continue;
                }
                let mut cell = DMatrix::zeros(p, p);
                for &i in &left {
                    for &j in &right {
                        let diff = (x.row(i) - x.row(j)).transpose();
                        cell += &diff * diff.transpose();
                    }
                }
                d += cell / (left.len() * right.len()) as f64;
            }
        }
    }
    let kappa = (seg.n_segments() * n_groups * (n_groups - 1) / 2) as f64;
    d / kappa
}

pub fn penalty(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    groups: &[usize],
    n_groups: usize,
    seg: &Segmentation,
    exact_pairs: bool,
) -> DMatrix<f64> {
    let pairs = build_pair_sets(seg, y, groups, n_groups);
    let options = PenaltyOptions {
        exact_pairs,
        ..PenaltyOptions::default()
    };
    build_penalty_matrix(x, &pairs, &options).unwrap().d
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |a, v| a.max(v.abs()))
}

/// `||a - b||_inf / max(||a||_inf, ||b||_inf, tiny)`.
pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    max_abs(&(a - b)) / max_abs(a).max(max_abs(b)).max(1e-300)
}

pub fn mixed_schema(outcome_type: OutcomeType) -> DatasetSchema {
    DatasetSchema {
        outcome_column: "y".into(),
        outcome_type,
        sensitive_column: "group".into(),
        feature_columns: vec![
            FeatureSpec { name: "u".into(), kind: FeatureKind::Continuous },
            FeatureSpec { name: "v".into(), kind: FeatureKind::Continuous },
            FeatureSpec { name: "c".into(), kind: FeatureKind::Categorical },
        ],
        positive_label: None,
        class_labels: None,
    }
}

/// Synthetic dataset whose features and outcome both depend on the group, so
/// an unpenalized fit is group-unfair.
pub fn synthetic_dataset(rng: &mut impl Rng, n: usize, k: usize, outcome_type: OutcomeType) -> Dataset {
    let levels = ["a", "b", "c"];
    let classes = 3;
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let g = if i < k * 3 { i % k } else { rng.random_range(0..k) };
        let shift = g as f64 * 0.6;
        let u = normal(rng) + shift;
        let v = normal(rng) - 0.5 * shift;
        let c = levels[(rng.random_range(0..3) + g) % 3];
        let eta = 0.3 + 0.8 * u - 0.5 * v + if c == "b" { 0.4 } else { 0.0 } + 0.3 * g as f64;
        let outcome = match outcome_type {
            OutcomeType::Continuous => eta + normal(rng),
            OutcomeType::Binary => f64::from(rng.random::<f64>() < 1.0 / (1.0 + (-eta).exp())),
            OutcomeType::Count => Poisson::new((0.4 * eta).exp()).unwrap().sample(rng),
            OutcomeType::Multiclass => {
                let w = [1.0, eta.exp(), (0.5 - 0.7 * u).exp()];
                let total: f64 = w.iter().sum();
                let mut r = rng.random::<f64>() * total;
                let mut label = classes - 1;
                for (c, p) in w.iter().enumerate() {
                    if r < *p {
                        label = c;
                        break;
                    }
                    r -= p;
                }
                label as f64
            }
        };
        records.push(Record {
            outcome,
            group: format!("g{g}"),
            features: vec![RawValue::Number(u), RawValue::Number(v), RawValue::Level(c.into())],
        });
    }
    let labels = match outcome_type {
        OutcomeType::Multiclass => (0..classes).map(|c| format!("class{c}")).collect(),
        _ => Vec::new(),
    };
    Dataset::from_records(mixed_schema(outcome_type), records, labels).unwrap()
}
