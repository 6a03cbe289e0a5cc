// SPDX-License-Identifier: MIT OR Apache-2.0

//! Domain types shared by the detectors, plus lag stacking and block
//! partitioning.
//!
//! Coefficients are handled in two orientations. The *transition* orientation
//! is the usual `Φ^(l)` with `y_t = Σ_l Φ^(l) y_{t-l}`; lag matrices are
//! stacked side by side into a `p × pq` matrix `(Φ^(1), …, Φ^(q))`. The
//! *regression* orientation is its transpose `B` (`pq × p`), so that a row of
//! the lagged design times `B` predicts a row of the response.

use nalgebra::{DMatrix, DVector, Schur};

use crate::error::{Error, Result};

/// `T × p` observation matrix. Row `t - 1` holds `y_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    values: DMatrix<f64>,
}

impl TimeSeries {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() < 2 {
            return Err(Error::InvalidData(format!(
                "need at least 2 time points, got {}",
                values.nrows()
            )));
        }
        if values.ncols() == 0 {
            return Err(Error::InvalidData("need at least one series".into()));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let (r, c) = (pos % values.nrows(), pos / values.nrows());
            return Err(Error::InvalidData(format!(
                "non-finite value at time {}, series {}",
                r + 1,
                c + 1
            )));
        }
        Ok(Self { values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let p = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::InvalidData("ragged rows".into()));
        }
        let values = DMatrix::from_fn(rows.len(), p, |r, c| rows[r][c]);
        Self::new(values)
    }

    /// Number of time points `T`.
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    /// Number of series `p`.
    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    /// Observation at 1-based time `t`.
    pub fn at(&self, t: usize) -> DVector<f64> {
        self.values.row(t - 1).transpose()
    }
}

/// Ordered lag matrices `Φ^(1), …, Φ^(q)` of one stationary segment.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionSet {
    lags: Vec<DMatrix<f64>>,
}

impl TransitionSet {
    pub fn new(lags: Vec<DMatrix<f64>>) -> Result<Self> {
        let Some(first) = lags.first() else {
            return Err(Error::config("a transition set needs at least one lag"));
        };
        let p = first.nrows();
        if p == 0 || lags.iter().any(|m| m.nrows() != p || m.ncols() != p) {
            return Err(Error::config("all lag matrices must be p × p with p >= 1"));
        }
        Ok(Self { lags })
    }

    pub fn zeros(p: usize, q: usize) -> Self {
        Self {
            lags: vec![DMatrix::zeros(p, p); q],
        }
    }

    /// Splits a `p × pq` stacked matrix into its lag blocks.
    pub fn from_stacked(stacked: &DMatrix<f64>, q: usize) -> Result<Self> {
        let p = stacked.nrows();
        if q == 0 || stacked.ncols() != p * q {
            return Err(Error::config(format!(
                "stacked matrix is {}×{}, expected p×pq with q = {q}",
                p,
                stacked.ncols()
            )));
        }
        let lags = (0..q)
            .map(|l| stacked.columns(l * p, p).into_owned())
            .collect();
        Self::new(lags)
    }

    pub fn dim(&self) -> usize {
        self.lags[0].nrows()
    }

    pub fn lag_count(&self) -> usize {
        self.lags.len()
    }

    pub fn lags(&self) -> &[DMatrix<f64>] {
        &self.lags
    }

    pub fn lag(&self, l: usize) -> &DMatrix<f64> {
        &self.lags[l - 1]
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            lags: self.lags.iter().map(|m| m * c).collect(),
        }
    }

    /// `(Φ^(1), …, Φ^(q))` as one `p × pq` matrix.
    pub fn stacked(&self) -> DMatrix<f64> {
        let p = self.dim();
        let q = self.lag_count();
        let mut out = DMatrix::zeros(p, p * q);
        for (l, m) in self.lags.iter().enumerate() {
            out.columns_mut(l * p, p).copy_from(m);
        }
        out
    }

    /// Pads with zero matrices up to `q` lags.
    pub fn padded(&self, q: usize) -> Self {
        let p = self.dim();
        let mut lags = self.lags.clone();
        while lags.len() < q {
            lags.push(DMatrix::zeros(p, p));
        }
        Self { lags }
    }

    pub fn companion(&self) -> DMatrix<f64> {
        let p = self.dim();
        let q = self.lag_count();
        let mut c = DMatrix::zeros(p * q, p * q);
        c.rows_mut(0, p).copy_from(&self.stacked());
        for i in p..p * q {
            c[(i, i - p)] = 1.0;
        }
        c
    }
}

/// Largest eigenvalue modulus of the `pq × pq` companion matrix.
pub fn companion_spectral_radius(ts: &TransitionSet) -> f64 {
    if ts.lags().iter().all(|m| m.iter().all(|v| *v == 0.0)) {
        return 0.0;
    }
    let c = ts.companion();
    if c.nrows() == 1 {
        return c[(0, 0)].abs();
    }
    // Nearly nilpotent companions (superdiagonal patterns) are defective and
    // can stall the QR iteration at machine precision.
    for eps in [f64::EPSILON, 1e-12] {
        if let Some(s) = Schur::try_new(c.clone(), eps, 10_000) {
            return s.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
        }
    }
    gelfand_radius(c)
}

/// `lim ‖C^k‖^{1/k}` by repeated squaring with rescaling.
fn gelfand_radius(mut c: DMatrix<f64>) -> f64 {
    let mut log_scale = 0.0;
    let mut k = 1.0;
    let mut estimate = f64::INFINITY;
    for _ in 0..40 {
        let norm = c.norm();
        if norm == 0.0 {
            return 0.0;
        }
        c /= norm;
        log_scale += norm.ln() / k;
        let next = log_scale.exp();
        if (next - estimate).abs() <= 1e-12 * next {
            return next;
        }
        estimate = next;
        c = &c * &c;
        k *= 2.0;
    }
    estimate
}

/// Ground truth of a piecewise-stationary VAR process.
#[derive(Clone, Debug, PartialEq)]
pub struct PiecewiseVarModel {
    /// `t_1 < … < t_m`, each the first time point of a new segment.
    pub break_points: Vec<usize>,
    pub segments: Vec<TransitionSet>,
    /// Per-segment `σ_j`; the noise covariance is `σ_j² I`.
    pub noise_scales: Vec<f64>,
    /// Per-segment low-rank components (transition orientation, lag 1) for
    /// low-rank-plus-sparse models. The sparse part is `Φ^(1) - L`.
    pub lowrank: Option<Vec<DMatrix<f64>>>,
}

impl PiecewiseVarModel {
    pub fn new(
        break_points: Vec<usize>,
        segments: Vec<TransitionSet>,
        noise_scales: Vec<f64>,
    ) -> Result<Self> {
        if segments.len() != break_points.len() + 1 {
            return Err(Error::config(format!(
                "{} segments for {} break points",
                segments.len(),
                break_points.len()
            )));
        }
        if noise_scales.len() != segments.len() || noise_scales.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::config("need one non-negative noise scale per segment"));
        }
        if break_points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("break points must be strictly increasing"));
        }
        Ok(Self {
            break_points,
            segments,
            noise_scales,
            lowrank: None,
        })
    }

    pub fn max_lag(&self) -> usize {
        self.segments.iter().map(TransitionSet::lag_count).max().unwrap_or(1)
    }

    /// Index of the segment containing 1-based time `t` (`t_{j-1} <= t < t_j`).
    pub fn segment_of(&self, t: usize) -> usize {
        self.break_points.partition_point(|&b| b <= t)
    }

    /// Sparse components in the stacked `p × pq` orientation.
    pub fn sparse_components(&self) -> Vec<DMatrix<f64>> {
        let q = self.max_lag();
        self.segments
            .iter()
            .enumerate()
            .map(|(j, s)| {
                let mut m = s.padded(q).stacked();
                if let Some(l) = &self.lowrank {
                    let p = l[j].nrows();
                    let mut first = m.columns_mut(0, p);
                    first -= &l[j];
                }
                m
            })
            .collect()
    }
}

/// Block end points `q = r_0 < r_1 < … < r_k = T + 1` over response times.
///
/// Block `i` (1-based) covers the half-open range `[r_{i-1}, r_i)`. All blocks
/// but the last have exactly `block_size` points; the last one holds the
/// remainder and may be shorter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockPartition {
    pub endpoints: Vec<usize>,
    pub block_size: usize,
}

impl BlockPartition {
    /// Builds a partition from explicit end points.
    pub fn from_endpoints(endpoints: Vec<usize>) -> Result<Self> {
        if endpoints.len() < 2 || endpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(
                "block end points must contain at least two strictly increasing values",
            ));
        }
        let block_size = endpoints[1] - endpoints[0];
        Ok(Self {
            endpoints,
            block_size,
        })
    }

    /// Number of blocks `k_n`.
    pub fn count(&self) -> usize {
        self.endpoints.len() - 1
    }

    /// Half-open time range of block `i` (1-based).
    pub fn range(&self, i: usize) -> (usize, usize) {
        (self.endpoints[i - 1], self.endpoints[i])
    }

    /// 1-based block containing time `t`.
    pub fn block_of(&self, t: usize) -> usize {
        let k = self.count();
        self.endpoints[1..].partition_point(|&e| e <= t).min(k - 1) + 1
    }

    pub fn mean_size(&self) -> f64 {
        (self.endpoints[self.count()] - self.endpoints[0]) as f64 / self.count() as f64
    }
}

/// Block partition of the `n = T - q + 1` time points `q, …, T`.
///
/// Default block size is `⌊√n⌋`; an explicit size must lie in `[2, n/2]`.
pub fn make_blocks(t_len: usize, q: usize, block_size: Option<usize>) -> Result<BlockPartition> {
    if q == 0 || q >= t_len {
        return Err(Error::InvalidLag { lag: q, len: t_len });
    }
    let n = t_len - q + 1;
    let b = match block_size {
        Some(b) => {
            if b < 2 || b > n / 2 {
                return Err(Error::InvalidBlock { size: b, max: n / 2 });
            }
            b
        }
        None => ((n as f64).sqrt().floor() as usize).max(2),
    };
    let mut endpoints: Vec<usize> = (q..=t_len).step_by(b).collect();
    if *endpoints.last().unwrap() != t_len + 1 {
        endpoints.push(t_len + 1);
    }
    Ok(BlockPartition {
        endpoints,
        block_size: b,
    })
}

/// Lagged regression design of a VAR(q).
///
/// Row `r` corresponds to response time `t = q + 1 + r`: the design row is
/// `(y_{t-1}', …, y_{t-q}')` and the response row is `y_t'`.
#[derive(Clone, Debug)]
pub struct LaggedDesign {
    pub design: DMatrix<f64>,
    pub response: DMatrix<f64>,
    pub q: usize,
}

impl LaggedDesign {
    /// First response time, `q + 1`.
    pub fn first_time(&self) -> usize {
        self.q + 1
    }

    /// Last response time, `T`.
    pub fn last_time(&self) -> usize {
        self.q + self.design.nrows()
    }

    /// Design and response rows for response times in `[start, end)`,
    /// clipped to the available range.
    pub fn rows(&self, start: usize, end: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let (a, b) = self.row_span(start, end);
        (
            self.design.rows(a, b - a).into_owned(),
            self.response.rows(a, b - a).into_owned(),
        )
    }

    /// 0-based row span `[a, b)` for response times `[start, end)`.
    pub fn row_span(&self, start: usize, end: usize) -> (usize, usize) {
        let lo = self.first_time();
        let hi = self.last_time() + 1;
        let s = start.clamp(lo, hi) - lo;
        let e = end.clamp(lo, hi) - lo;
        (s, e.max(s))
    }
}

/// Stacks lags: returns a `(T - q) × pq` design whose row for time `l`
/// (`l = q, …, T-1`) is `(y_l', …, y_{l-q+1}')`, aligned with response `y_{l+1}`.
pub fn stack_lag_rows(data: &TimeSeries, q: usize) -> Result<LaggedDesign> {
    let t_len = data.len();
    if q == 0 || q >= t_len {
        return Err(Error::InvalidLag { lag: q, len: t_len });
    }
    let p = data.dim();
    let y = data.values();
    let rows = t_len - q;
    let mut design = DMatrix::zeros(rows, p * q);
    for r in 0..rows {
        // response at 0-based row q + r; lag l uses 0-based row q + r - l
        for l in 1..=q {
            let src = q + r - l;
            for c in 0..p {
                design[(r, (l - 1) * p + c)] = y[(src, c)];
            }
        }
    }
    let response = y.rows(q, rows).into_owned();
    Ok(LaggedDesign {
        design,
        response,
        q,
    })
}

/// Coefficient grouping for the group lasso penalty.
///
/// Groups are described in the transition orientation: "row `i`" is the
/// equation of series `i`, "column `j`" is the effect of lagged series `j`.
#[derive(Clone, Debug, PartialEq)]
pub enum Grouping {
    /// `{Φ^(l)(·, j)}` for each lag `l` and column `j`.
    ColumnwiseSeparate,
    /// `{Φ^(1)(·, j), …, Φ^(q)(·, j)}` for each column `j`.
    ColumnwiseSimultaneous,
    /// `{Φ^(l)(i, ·)}` for each lag `l` and row `i`.
    RowwiseSeparate,
    /// `{Φ^(1)(i, ·), …, Φ^(q)(i, ·)}` for each row `i`.
    RowwiseSimultaneous,
    /// Nested groups `{Φ^(l:q)(i, ·)}`, `l = 1, …, q`, for each row `i`.
    HierarchicalLag,
    /// Disjoint groups of entries of the stacked `p × pq` matrix, each entry
    /// given as a 0-based column-major index `row + p * col`. Entries not
    /// listed form singleton groups.
    Explicit(Vec<Vec<usize>>),
}

impl Grouping {
    /// Builds explicit groups from lists of 0-based slice indices in
    /// `[0, pq)`. A slice `s` is column `s` of the stacked matrix when
    /// `columnwise`, otherwise row `s % p` of lag `s / p + 1`.
    pub fn from_slices(slices: &[Vec<usize>], p: usize, q: usize, columnwise: bool) -> Result<Self> {
        let mut groups = Vec::with_capacity(slices.len());
        for list in slices {
            let mut g = Vec::new();
            for &s in list {
                if s >= p * q {
                    return Err(Error::config(format!(
                        "group slice index {s} outside [0, {})",
                        p * q
                    )));
                }
                if columnwise {
                    g.extend((0..p).map(|i| i + p * s));
                } else {
                    let (lag, row) = (s / p, s % p);
                    g.extend((0..p).map(|j| row + p * (lag * p + j)));
                }
            }
            groups.push(g);
        }
        Ok(Self::Explicit(groups))
    }

    /// Groups as 0-based column-major indices into the regression-orientation
    /// coefficient matrix `B` (`pq × p`, `B[(l-1)p + j, i] = Φ^(l)(i, j)`).
    ///
    /// Applying block soft-thresholding group by group in the returned order
    /// yields the exact proximal map: groups are disjoint, except for
    /// [`Grouping::HierarchicalLag`] where each chain is listed from the
    /// innermost (highest-lag) group outwards.
    pub fn regression_groups(&self, p: usize, q: usize) -> Result<Vec<Vec<usize>>> {
        let d = p * q;
        let at = |row: usize, col: usize| row + d * col;
        let mut groups: Vec<Vec<usize>> = Vec::new();
        match self {
            Self::ColumnwiseSeparate => {
                for l in 0..q {
                    for j in 0..p {
                        groups.push((0..p).map(|i| at(l * p + j, i)).collect());
                    }
                }
            }
            Self::ColumnwiseSimultaneous => {
                for j in 0..p {
                    let mut g = Vec::new();
                    for l in 0..q {
                        g.extend((0..p).map(|i| at(l * p + j, i)));
                    }
                    groups.push(g);
                }
            }
            Self::RowwiseSeparate => {
                for l in 0..q {
                    for i in 0..p {
                        groups.push((0..p).map(|j| at(l * p + j, i)).collect());
                    }
                }
            }
            Self::RowwiseSimultaneous => {
                for i in 0..p {
                    groups.push((0..d).map(|r| at(r, i)).collect());
                }
            }
            Self::HierarchicalLag => {
                for i in 0..p {
                    for l in (0..q).rev() {
                        groups.push((l * p..d).map(|r| at(r, i)).collect());
                    }
                }
            }
            Self::Explicit(list) => {
                let mut seen = vec![false; p * d];
                for g in list {
                    let mut out = Vec::with_capacity(g.len());
                    for &idx in g {
                        if idx >= p * d {
                            return Err(Error::config(format!(
                                "group index {idx} outside [0, {})",
                                p * d
                            )));
                        }
                        if std::mem::replace(&mut seen[idx], true) {
                            return Err(Error::config(format!(
                                "coefficient {idx} appears in more than one group"
                            )));
                        }
                        let (row, col) = (idx % p, idx / p);
                        out.push(at(col, row));
                    }
                    if !out.is_empty() {
                        groups.push(out);
                    }
                }
                for (idx, _) in seen.iter().enumerate().filter(|(_, s)| !**s) {
                    let (row, col) = (idx % p, idx / p);
                    groups.push(vec![at(col, row)]);
                }
            }
        }
        Ok(groups)
    }
}

/// Penalty family for the detectors.
#[derive(Clone, Debug, PartialEq)]
pub enum PenaltyKind {
    Sparse,
    GroupSparse(Grouping),
    /// Low-rank component shared by all segments plus time-varying sparse.
    FixedLowRankSparse,
    /// Low-rank and sparse components both allowed to change.
    LowRankSparse,
}

impl PenaltyKind {
    pub fn has_lowrank(&self) -> bool {
        matches!(self, Self::FixedLowRankSparse | Self::LowRankSparse)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PenaltySpec {
    pub kind: PenaltyKind,
    pub lambda1: f64,
    pub lambda2: f64,
    pub mu: Option<f64>,
}

impl PenaltySpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::config("lambda values must be non-negative"));
        }
        match (self.kind.has_lowrank(), self.mu) {
            (true, None) => Err(Error::config("low-rank penalties need mu")),
            (true, Some(mu)) if !(mu >= 0.0) => Err(Error::config("mu must be non-negative")),
            (false, Some(_)) => Err(Error::config("mu is only used by low-rank penalties")),
            _ => Ok(()),
        }
    }
}

/// Output of a detector.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionResult {
    /// Increasing 1-based change points, each the first time of a new segment.
    pub change_points: Vec<usize>,
    /// Per-segment `p × pq` sparse (or full, when no low-rank part) estimates.
    pub sparse_mats: Vec<DMatrix<f64>>,
    /// Per-segment `p × p` low-rank estimates, when the model has one.
    pub lowrank_mats: Option<Vec<DMatrix<f64>>>,
    pub lag: usize,
    pub elapsed_seconds: f64,
}

impl DetectionResult {
    pub fn validate(&self, t_len: usize) -> Result<()> {
        if self.sparse_mats.len() != self.change_points.len() + 1 {
            return Err(Error::config("need one segment matrix per segment"));
        }
        if let Some(l) = &self.lowrank_mats {
            if l.len() != self.sparse_mats.len() {
                return Err(Error::config("need one low-rank matrix per segment"));
            }
        }
        if self.change_points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("change points must be strictly increasing"));
        }
        if self
            .change_points
            .iter()
            .any(|&c| c <= self.lag || c >= t_len)
        {
            return Err(Error::config("change points must lie strictly inside (q, T)"));
        }
        if !(self.elapsed_seconds >= 0.0) {
            return Err(Error::config("elapsed time must be non-negative"));
        }
        Ok(())
    }

    /// Full per-segment transition estimate `S_j (+ L_j on lag 1)`.
    pub fn transition(&self, segment: usize) -> DMatrix<f64> {
        let mut m = self.sparse_mats[segment].clone();
        if let Some(l) = &self.lowrank_mats {
            let p = m.nrows();
            let mut first = m.columns_mut(0, p);
            first += &l[segment];
        }
        m
    }

    pub fn segment_of(&self, t: usize) -> usize {
        self.change_points.partition_point(|&c| c <= t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gelfand_fallback_agrees_with_eigenvalues() {
        let a = DMatrix::from_row_slice(3, 3, &[0.5, 0.2, 0.0, -0.1, 0.3, 0.4, 0.0, 0.2, -0.6]);
        let schur = Schur::new(a.clone()).complex_eigenvalues();
        let exact = schur.iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert!((gelfand_radius(a) - exact).abs() < 1e-9);
        let mut nil = DMatrix::zeros(4, 4);
        for i in 0..3 {
            nil[(i, i + 1)] = 0.8;
        }
        assert_eq!(gelfand_radius(nil), 0.0);
    }

    #[test]
    fn superdiagonal_lags_have_finite_radius() {
        let mut l1 = DMatrix::zeros(15, 15);
        let mut l2 = DMatrix::zeros(15, 15);
        for i in 0..14 {
            l1[(i, i + 1)] = 0.6;
            l2[(i, i + 1)] = 0.4;
        }
        let ts = TransitionSet::new(vec![l1, l2]).unwrap();
        let r = companion_spectral_radius(&ts);
        // Nilpotent of index 30: eigenvalues are only determined up to
        // (ε ‖C‖)^(1/30).
        let bound = (f64::EPSILON * ts.companion().norm()).powf(1.0 / 30.0);
        assert!(r.is_finite() && r <= bound, "{r} > {bound}");
    }

    #[test]
    fn lag_one_stacking_is_a_shift() {
        let data = TimeSeries::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![2.0, 3.0],
        ])
        .unwrap();
        let d = stack_lag_rows(&data, 1).unwrap();
        assert_eq!(d.design, data.values().rows(0, 2).into_owned());
        assert_eq!(d.response, data.values().rows(1, 2).into_owned());
    }

    #[test]
    fn lag_two_stacking_by_hand() {
        let data = TimeSeries::from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]).unwrap();
        let d = stack_lag_rows(&data, 2).unwrap();
        assert_eq!(d.design, DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 3.0, 2.0]));
        assert_eq!(d.response, DMatrix::from_row_slice(2, 1, &[3.0, 4.0]));
    }

    #[test]
    fn lag_three_rows_index_identity() {
        let vals = DMatrix::from_fn(10, 2, |r, c| ((r * 7 + c * 3) % 11) as f64 - 0.5 * c as f64);
        let data = TimeSeries::new(vals.clone()).unwrap();
        let d = stack_lag_rows(&data, 3).unwrap();
        assert_eq!(d.design.nrows(), 7);
        assert_eq!(d.design.ncols(), 6);
        for r in 0..7 {
            let t = 4 + r; // 1-based response time
            for l in 1..=3 {
                for c in 0..2 {
                    assert_eq!(d.design[(r, (l - 1) * 2 + c)], vals[(t - l - 1, c)]);
                }
            }
            // block-identity readout of the first lag recovers y_{t-1}
            let readout = d.design.row(r).columns(0, 2).into_owned();
            assert_eq!(readout, vals.row(t - 2).into_owned());
            assert_eq!(d.response.row(r), vals.row(t - 1));
        }
    }

    #[test]
    fn invalid_lag_is_rejected() {
        let data = TimeSeries::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        assert!(matches!(
            stack_lag_rows(&data, 2),
            Err(Error::InvalidLag { lag: 2, len: 2 })
        ));
    }

    #[test]
    fn time_series_rejects_non_finite() {
        let m = DMatrix::from_row_slice(2, 1, &[1.0, f64::NAN]);
        assert!(TimeSeries::new(m).is_err());
    }

    #[test]
    fn spectral_radius_of_simple_sets() {
        let ts = TransitionSet::new(vec![DMatrix::identity(3, 3) * 0.5]).unwrap();
        assert!((companion_spectral_radius(&ts) - 0.5).abs() < 1e-12);
        assert_eq!(companion_spectral_radius(&TransitionSet::zeros(4, 2)), 0.0);
    }

    #[test]
    fn spectral_radius_var2_against_characteristic_roots() {
        // Φ1 upper triangular and Φ2 = 0.1 I: the companion determinant
        // factorizes into (λ² - 0.5λ - 0.1)(λ² - 0.3λ - 0.1).
        let phi1 = DMatrix::from_row_slice(2, 2, &[0.5, 0.2, 0.0, 0.3]);
        let phi2 = DMatrix::identity(2, 2) * 0.1;
        let ts = TransitionSet::new(vec![phi1, phi2]).unwrap();
        let root = |a: f64, b: f64| (a + (a * a + 4.0 * b).sqrt()) / 2.0;
        let expected = root(0.5, 0.1).max(root(0.3, 0.1));
        assert!((companion_spectral_radius(&ts) - expected).abs() < 1e-10);
        assert!((expected - 0.6531128874149275).abs() < 1e-12);
    }

    #[test]
    fn default_blocks_for_long_series() {
        let b = make_blocks(4000, 1, None).unwrap();
        assert_eq!(b.block_size, 63);
        assert_eq!(b.count(), 64);
        assert_eq!(b.endpoints[0], 1);
        assert_eq!(*b.endpoints.last().unwrap(), 4001);
    }

    #[test]
    fn explicit_block_size() {
        let b = make_blocks(100, 1, Some(10)).unwrap();
        assert_eq!(b.endpoints, (0..=10).map(|i| 1 + 10 * i).collect::<Vec<_>>());
        let b = make_blocks(101, 2, Some(10)).unwrap();
        let expect: Vec<usize> = (0..=10).map(|i| 2 + 10 * i).collect();
        assert_eq!(b.endpoints, expect);
        assert_eq!(b.count(), 10);
        assert_eq!(b.range(10), (92, 102));
    }

    #[test]
    fn block_size_bounds() {
        assert!(matches!(make_blocks(100, 1, Some(1)), Err(Error::InvalidBlock { .. })));
        assert!(matches!(make_blocks(100, 1, Some(51)), Err(Error::InvalidBlock { .. })));
        assert!(make_blocks(100, 1, Some(50)).is_ok());
    }

    #[test]
    fn block_lookup() {
        let b = make_blocks(100, 1, Some(10)).unwrap();
        assert_eq!(b.block_of(1), 1);
        assert_eq!(b.block_of(10), 1);
        assert_eq!(b.block_of(11), 2);
        assert_eq!(b.block_of(100), 10);
    }

    #[test]
    fn hierarchical_groups_are_nested() {
        let g = Grouping::HierarchicalLag.regression_groups(2, 3).unwrap();
        assert_eq!(g.len(), 6);
        // innermost group first for each row
        assert_eq!(g[0].len(), 2);
        assert_eq!(g[1].len(), 4);
        assert_eq!(g[2].len(), 6);
        assert!(g[0].iter().all(|i| g[1].contains(i)));
    }

    #[test]
    fn explicit_groups_fill_singletons() {
        let g = Grouping::Explicit(vec![vec![0, 1]]).regression_groups(2, 1).unwrap();
        assert_eq!(g.len(), 3);
        assert!(Grouping::Explicit(vec![vec![0], vec![0]])
            .regression_groups(2, 1)
            .is_err());
    }

    #[test]
    fn slice_groups_match_columns() {
        // columnwise slices 0..pq are the columns of the stacked matrix
        let g = Grouping::from_slices(&[vec![0], vec![3]], 2, 2, true).unwrap();
        let groups = g.regression_groups(2, 2).unwrap();
        // column 3 of (Φ1, Φ2) is Φ2(·, 1) -> rows 3 of B (both columns)
        assert_eq!(groups[1], vec![3, 3 + 4]);
    }

    #[test]
    fn penalty_spec_requires_mu_for_lowrank() {
        let spec = PenaltySpec {
            kind: PenaltyKind::FixedLowRankSparse,
            lambda1: 0.1,
            lambda2: 0.1,
            mu: None,
        };
        assert!(spec.validate().is_err());
    }

    proptest! {
        #[test]
        fn blocks_tile_the_range(t_len in 10usize..500, q in 1usize..4, frac in 0.0f64..1.0) {
            prop_assume!(q + 4 <= t_len);
            let n = t_len - q + 1;
            let b = 2 + ((n / 2 - 2) as f64 * frac) as usize;
            let part = make_blocks(t_len, q, Some(b)).unwrap();
            prop_assert_eq!(part.endpoints[0], q);
            prop_assert_eq!(*part.endpoints.last().unwrap(), t_len + 1);
            prop_assert!(part.endpoints.windows(2).all(|w| w[0] < w[1]));
            let k = part.count();
            prop_assert_eq!(k, n.div_ceil(b));
            for i in 1..k {
                prop_assert_eq!(part.range(i).1 - part.range(i).0, b);
            }
        }

        #[test]
        fn stacking_recovers_raw_window(t_len in 4usize..30, p in 1usize..4, q in 1usize..3, seed in 0u64..1000) {
            prop_assume!(q < t_len);
            let vals = DMatrix::from_fn(t_len, p, |r, c| ((r as u64 * 31 + c as u64 * 17 + seed) % 97) as f64);
            let data = TimeSeries::new(vals.clone()).unwrap();
            let d = stack_lag_rows(&data, q).unwrap();
            for r in 0..d.design.nrows() {
                // concatenating response with the design row gives y_{t}, …, y_{t-q}
                for l in 0..=q {
                    for c in 0..p {
                        let v = if l == 0 { d.response[(r, c)] } else { d.design[(r, (l - 1) * p + c)] };
                        prop_assert_eq!(v, vals[(r + q - l, c)]);
                    }
                }
            }
        }

        #[test]
        fn spectral_radius_is_homogeneous_for_var1(c in -3.0f64..3.0, seed in 0u64..500) {
            let m = DMatrix::from_fn(3, 3, |r, k| (((r * 5 + k * 3) as u64 + seed) % 7) as f64 / 7.0 - 0.4);
            let ts = TransitionSet::new(vec![m]).unwrap();
            let base = companion_spectral_radius(&ts);
            let scaled = companion_spectral_radius(&ts.scaled(c));
            prop_assert!((scaled - c.abs() * base).abs() < 1e-8 * (1.0 + base));
        }
    }
}
