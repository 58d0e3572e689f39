//! Outcome segmentation and the cross-group linear-component penalty matrix.
//!
//! For every unordered group pair `k < l` and outcome segment `s`, the cell
//! matrix is the mean outer product of row differences `x_i - x_j` over all
//! pairs with `i` in group `k`, `j` in group `l`, both in segment `s`. The
//! penalty matrix is the sum of cell matrices divided by `kappa`, so that the
//! penalty of a coefficient vector is `beta' D beta`.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::OutcomeType;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    EqualCounts,
    EqualLengths,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KappaPolicy {
    /// `|segments| * K (K - 1) / 2`, independent of which cells are empty.
    #[default]
    Nominal,
    /// Number of non-empty cells.
    NonEmpty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SegmentKind {
    PerValue,
    EqualCounts { segments: usize },
    EqualLengths { segments: usize },
    CountClip { lower: i64, upper: i64 },
}

/// Partition of the outcome range used by the penalty and by the grouped
/// disparity metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    pub kind: SegmentKind,
    /// Continuous kinds: `t + 1` ordered points; segment `s` is
    /// `[boundaries[s], boundaries[s + 1])`, the last one closed, with values
    /// outside the training range mapped to the nearest end segment.
    /// Per-value: the sorted observed labels. Count clip: unused.
    pub boundaries: Vec<f64>,
}

impl Segmentation {
    pub fn n_segments(&self) -> usize {
        match self.kind {
            SegmentKind::PerValue => self.boundaries.len(),
            SegmentKind::EqualCounts { segments } | SegmentKind::EqualLengths { segments } => {
                segments
            }
            SegmentKind::CountClip { lower, upper } => (upper - lower + 1) as usize,
        }
    }

    /// Segment index of an outcome value. `None` only for per-value
    /// segmentations meeting a label that was never observed.
    pub fn segment_of(&self, y: f64) -> Option<usize> {
        match self.kind {
            SegmentKind::PerValue => self.boundaries.iter().position(|&v| v == y),
            SegmentKind::EqualCounts { segments } | SegmentKind::EqualLengths { segments } => {
                let interior = &self.boundaries[1..segments];
                Some(interior.partition_point(|&c| c <= y))
            }
            SegmentKind::CountClip { lower, upper } => {
                let v = (y.round() as i64).clamp(lower, upper);
                Some((v - lower) as usize)
            }
        }
    }

    pub fn assign(&self, y: &DVector<f64>) -> Vec<Option<usize>> {
        y.iter().map(|&v| self.segment_of(v)).collect()
    }
}

/// `counts[segment][group]`.
fn coverage(seg: &Segmentation, y: &DVector<f64>, groups: &[usize], n_groups: usize) -> Vec<Vec<usize>> {
    let mut counts = vec![vec![0usize; n_groups]; seg.n_segments()];
    for (&v, &g) in y.iter().zip(groups) {
        if let Some(s) = seg.segment_of(v) {
            counts[s][g] += 1;
        }
    }
    counts
}

fn covers(counts: &[Vec<usize>]) -> bool {
    counts.iter().all(|row| row.iter().all(|&c| c > 0))
}

fn equal_counts(sorted: &[f64], t: usize) -> Option<Segmentation> {
    let n = sorted.len();
    let mut boundaries = Vec::with_capacity(t + 1);
    boundaries.push(sorted[0]);
    for i in 1..t {
        let pos = i * n / t;
        if pos == 0 {
            return None;
        }
        // ties with the last value of the lower segment stay in it
        let last_low = sorted[pos - 1];
        let j = sorted.partition_point(|&v| v <= last_low);
        if j == n {
            return None;
        }
        boundaries.push(sorted[j]);
    }
    boundaries.push(sorted[n - 1]);
    Some(Segmentation {
        kind: SegmentKind::EqualCounts { segments: t },
        boundaries,
    })
}

fn equal_lengths(sorted: &[f64], t: usize) -> Option<Segmentation> {
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    if t > 1 && hi <= lo {
        return None;
    }
    let width = (hi - lo) / t as f64;
    let mut boundaries: Vec<f64> = (0..t).map(|i| lo + width * i as f64).collect();
    boundaries.push(hi);
    Some(Segmentation {
        kind: SegmentKind::EqualLengths { segments: t },
        boundaries,
    })
}

/// Widest `[lower, upper]` such that, after clamping outcomes into it, every
/// integer in the window holds at least one sample of every group. Ties go
/// to the smallest `lower`.
fn count_window(y: &DVector<f64>, groups: &[usize], n_groups: usize) -> (i64, i64) {
    let mut min_g = vec![i64::MAX; n_groups];
    let mut max_g = vec![i64::MIN; n_groups];
    for (&v, &g) in y.iter().zip(groups) {
        let v = v.round() as i64;
        min_g[g] = min_g[g].min(v);
        max_g[g] = max_g[g].max(v);
    }
    // the clamped end segments need every group at or below `lower` and at
    // or above `upper`
    let lo = *min_g.iter().max().unwrap();
    let hi = *max_g.iter().min().unwrap();
    if lo >= hi {
        // only a single clamped segment covers every group
        let floor = *min_g.iter().min().unwrap();
        return (floor, floor);
    }
    let span = (hi - lo + 1) as usize;
    let mut present = vec![vec![false; n_groups]; span];
    for (&v, &g) in y.iter().zip(groups) {
        let v = v.round() as i64;
        if (lo..=hi).contains(&v) {
            present[(v - lo) as usize][g] = true;
        }
    }
    let full: Vec<bool> = present.iter().map(|p| p.iter().all(|&b| b)).collect();
    // stop[i]: first index >= i that is not full, or the top of the range
    let mut stop = vec![span - 1; span];
    for i in (0..span - 1).rev() {
        stop[i] = if full[i] { stop[i + 1] } else { i };
    }
    let mut best = (lo, lo);
    for lower in 0..span - 1 {
        // the interior (lower, upper) must be full
        let upper = stop[lower + 1];
        if upper - lower > (best.1 - best.0) as usize {
            best = (lo + lower as i64, lo + upper as i64);
        }
    }
    best
}

/// Chooses the outcome segmentation for the penalty.
///
/// Binary and multiclass outcomes get one segment per observed label.
/// Continuous outcomes get the largest segment count `t <= max_segments`
/// whose segments each contain every group, searching downwards. Count
/// outcomes get the widest clipping window with the same property.
pub fn discretize(
    y: &DVector<f64>,
    groups: &[usize],
    group_names: &[String],
    outcome_type: OutcomeType,
    max_segments: usize,
    strategy: Strategy,
) -> Result<Segmentation> {
    let n_groups = group_names.len();
    if n_groups < 2 {
        return Err(Error::Config("at least two groups are required".into()));
    }
    if max_segments == 0 {
        return Err(Error::Config("max_segments must be at least 1".into()));
    }
    if y.len() != groups.len() {
        return Err(Error::Shape(format!("{} outcomes, {} group labels", y.len(), groups.len())));
    }
    let mut seen = vec![false; n_groups];
    for &g in groups {
        seen[g] = true;
    }
    if let Some(g) = seen.iter().position(|&s| !s) {
        return Err(Error::Infeasible {
            group: group_names[g].clone(),
            reason: "has no samples".into(),
        });
    }

    match outcome_type {
        OutcomeType::Binary | OutcomeType::Multiclass => {
            let mut labels: Vec<f64> = y.iter().copied().collect();
            labels.sort_by(f64::total_cmp);
            labels.dedup();
            Ok(Segmentation {
                kind: SegmentKind::PerValue,
                boundaries: labels,
            })
        }
        OutcomeType::Count => {
            let (lower, upper) = count_window(y, groups, n_groups);
            Ok(Segmentation {
                kind: SegmentKind::CountClip { lower, upper },
                boundaries: Vec::new(),
            })
        }
        OutcomeType::Continuous => {
            let mut sorted: Vec<f64> = y.iter().copied().collect();
            sorted.sort_by(f64::total_cmp);
            for t in (1..=max_segments.min(sorted.len())).rev() {
                let candidate = match strategy {
                    Strategy::EqualCounts => equal_counts(&sorted, t),
                    Strategy::EqualLengths => equal_lengths(&sorted, t),
                };
                if let Some(seg) = candidate {
                    if covers(&coverage(&seg, y, groups, n_groups)) {
                        return Ok(seg);
                    }
                }
            }
            // t = 1 covers whenever every group is present, checked above
            unreachable!("single segment always covers present groups")
        }
    }
}

/// Row indices of one `(k, l, segment)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub k: usize,
    pub l: usize,
    pub segment: usize,
    pub left: Vec<usize>,
    pub right: Vec<usize>,
}

impl Cell {
    pub fn n_pairs(&self) -> usize {
        self.left.len() * self.right.len()
    }

    pub fn is_empty(&self) -> bool {
        self.n_pairs() == 0
    }

    /// Every `(i, j)` with `i` from group `k` and `j` from group `l`.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.left
            .iter()
            .flat_map(move |&i| self.right.iter().map(move |&j| (i, j)))
    }
}

/// All cells, sorted by `(k, l, segment)`, empty ones included.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSets {
    pub cells: Vec<Cell>,
    pub n_groups: usize,
    pub n_segments: usize,
}

pub fn build_pair_sets(
    segmentation: &Segmentation,
    y: &DVector<f64>,
    groups: &[usize],
    n_groups: usize,
) -> PairSets {
    let n_segments = segmentation.n_segments();
    let mut members = vec![vec![Vec::new(); n_groups]; n_segments];
    for (i, (&v, &g)) in y.iter().zip(groups).enumerate() {
        if let Some(s) = segmentation.segment_of(v) {
            members[s][g].push(i);
        }
    }
    let mut cells = Vec::new();
    for k in 0..n_groups {
        for l in (k + 1)..n_groups {
            for (s, seg) in members.iter().enumerate() {
                cells.push(Cell {
                    k,
                    l,
                    segment: s,
                    left: seg[k].clone(),
                    right: seg[l].clone(),
                });
            }
        }
    }
    PairSets {
        cells,
        n_groups,
        n_segments,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PenaltyOptions {
    pub kappa: KappaPolicy,
    /// Sum over explicit pairs instead of the moment expansion.
    pub exact_pairs: bool,
    /// Cap on pairs per cell, enforced by uniform row subsampling of both sides.
    pub max_pairs_per_cell: Option<usize>,
    pub subsample_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellCount {
    pub k: usize,
    pub l: usize,
    pub segment: usize,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyMatrix {
    pub d: DMatrix<f64>,
    pub kappa: f64,
    /// Pair counts of the non-empty cells actually used.
    pub cell_counts: Vec<CellCount>,
    pub skipped_cells: Vec<(usize, usize, usize)>,
}

const DUMP_MAGIC: &[u8; 8] = b"FGLMPEN\x01";

impl PenaltyMatrix {
    pub fn dim(&self) -> usize {
        self.d.nrows()
    }

    /// `sum_c beta_c' D beta_c` over the columns of `beta`.
    pub fn quadratic_form(&self, beta: &DMatrix<f64>) -> f64 {
        let db = &self.d * beta;
        beta.iter().zip(db.iter()).map(|(a, b)| a * b).sum()
    }

    pub fn zeros(p: usize) -> Self {
        PenaltyMatrix {
            d: DMatrix::zeros(p, p),
            kappa: 1.0,
            cell_counts: Vec::new(),
            skipped_cells: Vec::new(),
        }
    }

    /// Binary dump: 8-byte magic, `p` (u64), `kappa` (f64), non-empty cell
    /// count (u64), then `p * p` row-major f64 values, all little-endian.
    pub fn write_dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let p = self.dim();
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&(p as u64).to_le_bytes())?;
        w.write_all(&self.kappa.to_le_bytes())?;
        w.write_all(&(self.cell_counts.len() as u64).to_le_bytes())?;
        for i in 0..p {
            for j in 0..p {
                w.write_all(&self.d[(i, j)].to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads a dump; returns the matrix (with no per-cell detail) and the
    /// stored cell count.
    pub fn read_dump<R: Read>(mut r: R) -> std::io::Result<(PenaltyMatrix, usize)> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != DUMP_MAGIC {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                "not a penalty matrix dump",
            ));
        }
        let mut word = [0u8; 8];
        r.read_exact(&mut word)?;
        let p = u64::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let kappa = f64::from_le_bytes(word);
        r.read_exact(&mut word)?;
        let cells = u64::from_le_bytes(word) as usize;
        let mut d = DMatrix::zeros(p, p);
        for i in 0..p {
            for j in 0..p {
                r.read_exact(&mut word)?;
                d[(i, j)] = f64::from_le_bytes(word);
            }
        }
        Ok((
            PenaltyMatrix {
                d,
                kappa,
                cell_counts: Vec::new(),
                skipped_cells: Vec::new(),
            },
            cells,
        ))
    }
}

/// Rows sorted by content, so accumulation order depends only on the
/// multiset of rows and not on their positions in `x`.
fn canonical_order(x: &DMatrix<f64>, rows: &[usize]) -> Vec<usize> {
    let mut sorted = rows.to_vec();
    sorted.sort_by(|&a, &b| {
        x.row(a)
            .iter()
            .zip(x.row(b).iter())
            .map(|(u, v)| u.total_cmp(v))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    sorted
}

/// Column means of the selected rows; a column whose selected values are all
/// identical gets that value exactly.
fn exact_means(rows: &DMatrix<f64>) -> DVector<f64> {
    let n = rows.nrows() as f64;
    DVector::from_iterator(
        rows.ncols(),
        rows.column_iter().map(|c| {
            let first = c[0];
            if c.iter().all(|&v| v == first) {
                first
            } else {
                c.sum() / n
            }
        }),
    )
}

/// `sum_{i in left, j in right} (x_i - x_j)'(x_i - x_j)` via
/// `n_r C_l + n_l C_r + n_l n_r (m_l - m_r)(m_l - m_r)'` with centred scatter
/// matrices `C` and means `m`, in `O((n_l + n_r) p^2)`.
fn cell_scatter_moments(x: &DMatrix<f64>, left: &[usize], right: &[usize]) -> DMatrix<f64> {
    let left = canonical_order(x, left);
    let right = canonical_order(x, right);
    let (left, right) = (left.as_slice(), right.as_slice());
    let xl = x.select_rows(left);
    let xr = x.select_rows(right);
    let (nl, nr) = (left.len() as f64, right.len() as f64);
    let ml = exact_means(&xl);
    let mr = exact_means(&xr);
    let centre = |mut rows: DMatrix<f64>, m: &DVector<f64>| {
        for (j, mut col) in rows.column_iter_mut().enumerate() {
            col.add_scalar_mut(-m[j]);
        }
        rows
    };
    let zl = centre(xl, &ml);
    let zr = centre(xr, &mr);
    let diff = &ml - &mr;
    zl.tr_mul(&zl) * nr + zr.tr_mul(&zr) * nl + (&diff * diff.transpose()) * (nl * nr)
}

/// Same sum by explicit enumeration of pairs, `O(n_l n_r p^2)`.
fn cell_scatter_pairs(x: &DMatrix<f64>, left: &[usize], right: &[usize]) -> DMatrix<f64> {
    let left = canonical_order(x, left);
    let right = canonical_order(x, right);
    let p = x.ncols();
    let rows_l: Vec<Vec<f64>> = left.iter().map(|&i| x.row(i).iter().copied().collect()).collect();
    let rows_r: Vec<Vec<f64>> = right.iter().map(|&j| x.row(j).iter().copied().collect()).collect();
    let mut acc = vec![0.0; p * p];
    let mut d = vec![0.0; p];
    for a in &rows_l {
        for b in &rows_r {
            for t in 0..p {
                d[t] = a[t] - b[t];
            }
            for u in 0..p {
                let du = d[u];
                if du == 0.0 {
                    continue;
                }
                let row = &mut acc[u * p..(u + 1) * p];
                for v in u..p {
                    row[v] += du * d[v];
                }
            }
        }
    }
    DMatrix::from_fn(p, p, |i, j| if i <= j { acc[i * p + j] } else { acc[j * p + i] })
}

fn subsample(rows: &[usize], size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if size >= rows.len() {
        return rows.to_vec();
    }
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, rows.len(), size)
        .into_iter()
        .map(|i| rows[i])
        .collect();
    picked.sort_unstable();
    picked
}

/// Assembles `D = (1 / kappa) sum_cells (1 / n_cell) sum_pairs (x_i - x_j)'(x_i - x_j)`.
///
/// Cells are processed in parallel; partial matrices are reduced in
/// `(k, l, segment)` order, so the result does not depend on thread count.
pub fn build_penalty_matrix(
    x: &DMatrix<f64>,
    pairs: &PairSets,
    options: &PenaltyOptions,
) -> Result<PenaltyMatrix> {
    if pairs.n_groups < 2 {
        return Err(Error::Config("penalty needs at least two groups (kappa = 0)".into()));
    }
    let n = x.nrows();
    let p = x.ncols();
    if let Some(bad) = pairs
        .cells
        .iter()
        .flat_map(|c| c.left.iter().chain(&c.right))
        .find(|&&i| i >= n)
    {
        return Err(Error::Shape(format!("pair index {bad} out of range for {n} rows")));
    }

    let work: Vec<(usize, &Cell)> = pairs
        .cells
        .iter()
        .enumerate()
        .filter(|(_, c)| !c.is_empty())
        .collect();
    let partials: Vec<(CellCount, DMatrix<f64>)> = work
        .par_iter()
        .map(|&(idx, cell)| {
            let (left, right) = match options.max_pairs_per_cell {
                Some(cap) if cell.n_pairs() > cap.max(1) => {
                    let ratio = (cap.max(1) as f64 / cell.n_pairs() as f64).sqrt();
                    let mut rng = ChaCha8Rng::seed_from_u64(options.subsample_seed);
                    rng.set_stream(idx as u64);
                    let sl = ((cell.left.len() as f64 * ratio).floor() as usize).max(1);
                    let sr = ((cell.right.len() as f64 * ratio).floor() as usize).max(1);
                    (subsample(&cell.left, sl, &mut rng), subsample(&cell.right, sr, &mut rng))
                }
                _ => (cell.left.clone(), cell.right.clone()),
            };
            let scatter = if options.exact_pairs {
                cell_scatter_pairs(x, &left, &right)
            } else {
                cell_scatter_moments(x, &left, &right)
            };
            let count = left.len() * right.len();
            (
                CellCount {
                    k: cell.k,
                    l: cell.l,
                    segment: cell.segment,
                    pairs: count,
                },
                scatter / count as f64,
            )
        })
        .collect();

    let kappa = match options.kappa {
        KappaPolicy::Nominal => {
            (pairs.n_segments * pairs.n_groups * (pairs.n_groups - 1) / 2) as f64
        }
        KappaPolicy::NonEmpty => partials.len() as f64,
    };
    if kappa <= 0.0 {
        return Err(Error::Config("no non-empty penalty cells".into()));
    }
    let mut d = DMatrix::zeros(p, p);
    let mut cell_counts = Vec::with_capacity(partials.len());
    for (count, m) in partials {
        d += m;
        cell_counts.push(count);
    }
    d /= kappa;
    for i in 0..p {
        for j in (i + 1)..p {
            d[(j, i)] = d[(i, j)];
        }
    }
    let skipped_cells = pairs
        .cells
        .iter()
        .filter(|c| c.is_empty())
        .map(|c| (c.k, c.l, c.segment))
        .collect();
    Ok(PenaltyMatrix {
        d,
        kappa,
        cell_counts,
        skipped_cells,
    })
}
