// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic piecewise-stationary VAR data.
//!
//! Randomness comes from ChaCha8 seeded with `seed`. Stream 0 draws the
//! noise, stream `1 + j` draws the structure of segment `j` (random sparsity
//! patterns and low-rank frames). Identical specs therefore give identical
//! output, and changing one segment's structure does not disturb the noise.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::types::{companion_spectral_radius, PiecewiseVarModel, TimeSeries, TransitionSet};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SparsityPattern {
    /// Signal on the first superdiagonal `(i, i + 1)`.
    OffDiagonal,
    Diagonal,
    /// Each entry nonzero independently with the given probability.
    Random(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Sparse,
    GroupSparse,
    /// Low-rank component shared by all segments plus a sparse part.
    FixedLowRankSparse,
    /// Low-rank and sparse components that both change at break points.
    LowRankSparse,
}

/// Which entries a group-sparse generator fills.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupSpec {
    /// Fill columns when true, rows otherwise.
    pub columnwise: bool,
    /// 1-based flat slice indices `(lag - 1) p + k` where `k` is the column
    /// (or row) within that lag. The nesting into lists is kept for
    /// bookkeeping; all listed slices are filled.
    pub index: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationSpec {
    pub method: Method,
    pub t_len: usize,
    pub p: usize,
    /// Lag per segment; a single entry applies to every segment.
    pub lags: Vec<usize>,
    /// `t_1 < … < t_m < T + 1`, the last entry always `T + 1`.
    pub break_points: Vec<usize>,
    pub pattern: SparsityPattern,
    /// Segment-major magnitudes over each segment's lags, or one per segment.
    pub signals: Vec<f64>,
    pub group: Option<GroupSpec>,
    pub ranks: Option<Vec<usize>>,
    pub singular_vals: Option<Vec<f64>>,
    pub info_ratio: Option<Vec<f64>>,
    pub spectral_radius: f64,
    pub skip: usize,
    pub seed: u64,
    /// Diagonal of the noise covariance (length `p`).
    pub sigma: Vec<f64>,
}

impl GenerationSpec {
    /// Spec with defaults: off-diagonal pattern, ρ = 0.9, skip 50, unit noise.
    pub fn new(
        method: Method,
        t_len: usize,
        p: usize,
        lag: usize,
        break_points: Vec<usize>,
        signals: Vec<f64>,
    ) -> Self {
        Self {
            method,
            t_len,
            p,
            lags: vec![lag],
            break_points,
            pattern: SparsityPattern::OffDiagonal,
            signals,
            group: None,
            ranks: None,
            singular_vals: None,
            info_ratio: None,
            spectral_radius: 0.9,
            skip: 50,
            seed: 1,
            sigma: vec![1.0; p],
        }
    }

    pub fn segment_count(&self) -> usize {
        self.break_points.len()
    }

    /// Lag of each segment.
    pub fn segment_lags(&self) -> Vec<usize> {
        if self.lags.len() == 1 {
            vec![self.lags[0]; self.segment_count()]
        } else {
            self.lags.clone()
        }
    }

    pub fn max_lag(&self) -> usize {
        self.lags.iter().copied().max().unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_len < 2 || self.p == 0 {
            return Err(Error::config("need T >= 2 and p >= 1"));
        }
        let m = self.segment_count();
        if m == 0 || *self.break_points.last().unwrap() != self.t_len + 1 {
            return Err(Error::config("break points must end with T + 1"));
        }
        if self.break_points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("break points must be strictly increasing"));
        }
        if self.break_points[0] < 2 {
            return Err(Error::config("first break point must exceed 1"));
        }
        if self.lags.is_empty() || self.lags.contains(&0) {
            return Err(Error::config("lags must be positive"));
        }
        if self.lags.len() != 1 && self.lags.len() != m {
            return Err(Error::config(format!(
                "{} lags given for {m} segments",
                self.lags.len()
            )));
        }
        if !(self.spectral_radius > 0.0 && self.spectral_radius < 1.0) {
            return Err(Error::config("spectral radius target must lie in (0, 1)"));
        }
        if self.sigma.len() != self.p || self.sigma.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::config("sigma must hold p non-negative variances"));
        }
        if let SparsityPattern::Random(d) = self.pattern {
            if !(d > 0.0 && d < 1.0) {
                return Err(Error::config("random density must lie in (0, 1)"));
            }
        }
        self.signal_table()?;
        if matches!(self.method, Method::FixedLowRankSparse | Method::LowRankSparse) {
            if self.segment_lags().iter().any(|&q| q != 1) {
                return Err(Error::config("low-rank models are lag 1"));
            }
            let ranks = self.ranks()?;
            let sv = self
                .singular_vals
                .as_ref()
                .ok_or_else(|| Error::config("low-rank models need singular_vals"))?;
            let max_rank = ranks.iter().copied().max().unwrap_or(0);
            if sv.len() != max_rank {
                return Err(Error::config(format!(
                    "{} singular values for maximum rank {max_rank}",
                    sv.len()
                )));
            }
            if sv.iter().any(|s| !(*s > 0.0)) || sv.windows(2).any(|w| w[0] < w[1]) {
                return Err(Error::config("singular values must be positive and decreasing"));
            }
            if self.method == Method::FixedLowRankSparse && ranks.windows(2).any(|w| w[0] != w[1]) {
                return Err(Error::config("a fixed low-rank component has a single rank"));
            }
            if let Some(g) = &self.info_ratio {
                if (g.len() != 1 && g.len() != m) || g.iter().any(|v| !(*v > 0.0)) {
                    return Err(Error::config("need one positive information ratio per segment"));
                }
            }
        }
        Ok(())
    }

    fn ranks(&self) -> Result<Vec<usize>> {
        let r = self
            .ranks
            .as_ref()
            .ok_or_else(|| Error::config("low-rank models need ranks"))?;
        match r.len() {
            1 => Ok(vec![r[0]; self.segment_count()]),
            n if n == self.segment_count() => Ok(r.clone()),
            n => Err(Error::config(format!("{n} ranks for {} segments", self.segment_count()))),
        }
    }

    /// `signals[j][l]` for segment `j`, lag `l` (0-based).
    fn signal_table(&self) -> Result<Vec<Vec<f64>>> {
        let lags = self.segment_lags();
        let slots: usize = lags.iter().sum();
        let m = lags.len();
        if self.signals.len() == slots {
            let mut it = self.signals.iter().copied();
            Ok(lags.iter().map(|&q| it.by_ref().take(q).collect()).collect())
        } else if self.signals.len() == m {
            Ok(lags
                .iter()
                .zip(&self.signals)
                .map(|(&q, &s)| vec![s; q])
                .collect())
        } else {
            Err(Error::config(format!(
                "{} signals for {m} segments with {slots} lag matrices",
                self.signals.len()
            )))
        }
    }

    fn stream(&self, k: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(k);
        rng
    }
}

fn pad_all(sets: Vec<Vec<DMatrix<f64>>>, q: usize) -> Result<Vec<TransitionSet>> {
    sets.into_iter()
        .map(|lags| TransitionSet::new(lags).map(|t| t.padded(q)))
        .collect()
}

/// Sparse transition matrices following `spec.pattern`.
pub fn gen_sparse_transitions(spec: &GenerationSpec) -> Result<Vec<TransitionSet>> {
    let table = spec.signal_table()?;
    let p = spec.p;
    let mut out = Vec::with_capacity(table.len());
    for (j, sig) in table.iter().enumerate() {
        let mut rng = spec.stream(1 + j as u64);
        let lags = sig
            .iter()
            .map(|&s| -> Result<DMatrix<f64>> {
                Ok(match spec.pattern {
                    SparsityPattern::OffDiagonal => {
                        DMatrix::from_fn(p, p, |r, c| if c == r + 1 { s } else { 0.0 })
                    }
                    SparsityPattern::Diagonal => DMatrix::identity(p, p) * s,
                    SparsityPattern::Random(d) => {
                        let coin = Bernoulli::new(d)
                            .map_err(|_| Error::config("random density must lie in (0, 1)"))?;
                        DMatrix::from_fn(p, p, |_, _| if coin.sample(&mut rng) { s } else { 0.0 })
                    }
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(lags);
    }
    pad_all(out, spec.max_lag())
}

/// Group-sparse transition matrices: listed rows or columns are dense.
pub fn gen_group_sparse_transitions(spec: &GenerationSpec) -> Result<Vec<TransitionSet>> {
    let table = spec.signal_table()?;
    let group = spec
        .group
        .as_ref()
        .ok_or_else(|| Error::config("group-sparse generation needs a group spec"))?;
    let p = spec.p;
    let q = spec.max_lag();
    let mut slices = Vec::new();
    for &s in group.index.iter().flatten() {
        if s == 0 || s > p * q {
            return Err(Error::config(format!(
                "group index {s} outside [1, {}]",
                p * q
            )));
        }
        slices.push(((s - 1) / p, (s - 1) % p));
    }
    let mut out = Vec::with_capacity(table.len());
    for sig in &table {
        let mut lags: Vec<DMatrix<f64>> = vec![DMatrix::zeros(p, p); sig.len()];
        for &(lag, k) in &slices {
            if lag >= sig.len() {
                continue;
            }
            if group.columnwise {
                lags[lag].column_mut(k).fill(sig[lag]);
            } else {
                lags[lag].row_mut(k).fill(sig[lag]);
            }
        }
        out.push(lags);
    }
    pad_all(out, q)
}

/// `U diag(s_1..s_r) Vᵀ` with random orthonormal `p × r` frames.
pub fn gen_lowrank_component(
    p: usize,
    rank: usize,
    singular_vals: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<DMatrix<f64>> {
    if rank > p {
        return Err(Error::config(format!("rank {rank} exceeds dimension {p}")));
    }
    if singular_vals.len() < rank || singular_vals[..rank].iter().any(|s| !(*s > 0.0)) {
        return Err(Error::config("need a positive singular value for every rank"));
    }
    if rank == 0 {
        return Ok(DMatrix::zeros(p, p));
    }
    let mut frame = || {
        let g = DMatrix::<f64>::from_fn(p, rank, |_, _| StandardNormal.sample(rng));
        g.qr().q()
    };
    let u = frame();
    let v = frame();
    let d = DMatrix::from_diagonal(&DVector::from_column_slice(&singular_vals[..rank]));
    Ok(u * d * v.transpose())
}

/// Rescales `L` so that `‖L‖_∞ / ‖S‖_∞ = gamma` (max-entry norms).
pub fn apply_info_ratio(l: &DMatrix<f64>, s: &DMatrix<f64>, gamma: f64) -> Result<DMatrix<f64>> {
    let s_max = s.amax();
    let l_max = l.amax();
    if s_max == 0.0 || l_max == 0.0 {
        return Err(Error::UndefinedRatio);
    }
    if !(gamma > 0.0) {
        return Err(Error::config("information ratio must be positive"));
    }
    Ok(l * (gamma * s_max / l_max))
}

/// Shrinks all lags by a common factor when the companion spectral radius is
/// at least `rho`, targeting `rho (1 - 1e-6)`.
pub fn stabilize(ts: &TransitionSet, rho: f64) -> TransitionSet {
    let c = stabilizing_factor(ts, rho);
    if c == 1.0 {
        ts.clone()
    } else {
        ts.scaled(c)
    }
}

/// Factor applied by [`stabilize`]; `1` when already stable enough.
pub fn stabilizing_factor(ts: &TransitionSet, rho: f64) -> f64 {
    let radius = companion_spectral_radius(ts);
    if radius < rho {
        return 1.0;
    }
    let target = rho * (1.0 - 1e-6);
    if ts.lag_count() == 1 {
        // eigenvalues scale linearly; nudge down if rounding lands on the target
        let mut c = target / radius;
        while companion_spectral_radius(&ts.scaled(c)) >= rho {
            c *= 1.0 - 1e-9;
        }
        return c;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if companion_spectral_radius(&ts.scaled(mid)) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    lo
}

/// Output of [`simulate`].
#[derive(Clone, Debug)]
pub struct Simulation {
    pub data: TimeSeries,
    /// Noise draws aligned with `data`.
    pub noise: DMatrix<f64>,
    pub model: PiecewiseVarModel,
}

/// Builds the ground-truth model for a spec.
pub fn build_model(spec: &GenerationSpec) -> Result<PiecewiseVarModel> {
    spec.validate()?;
    let m = spec.segment_count();
    let rho = spec.spectral_radius;
    let mut lowrank = None;
    let segments: Vec<TransitionSet> = match spec.method {
        Method::Sparse => gen_sparse_transitions(spec)?
            .iter()
            .map(|t| stabilize(t, rho))
            .collect(),
        Method::GroupSparse => gen_group_sparse_transitions(spec)?
            .iter()
            .map(|t| stabilize(t, rho))
            .collect(),
        Method::FixedLowRankSparse | Method::LowRankSparse => {
            let sparse = gen_sparse_transitions(spec)?;
            let ranks = spec.ranks()?;
            let sv = spec.singular_vals.as_deref().unwrap_or(&[]);
            let gamma = |j: usize| {
                spec.info_ratio
                    .as_ref()
                    .map(|g| if g.len() == 1 { g[0] } else { g[j] })
            };
            let fixed = spec.method == Method::FixedLowRankSparse;
            let mut ls: Vec<DMatrix<f64>> = Vec::with_capacity(m);
            for j in 0..m {
                let l = if fixed && j > 0 {
                    ls[0].clone()
                } else {
                    let mut rng = spec.stream(1 + j as u64);
                    let raw = gen_lowrank_component(spec.p, ranks[j], sv, &mut rng)?;
                    match gamma(j) {
                        Some(g) if ranks[j] > 0 => apply_info_ratio(&raw, sparse[j].lag(1), g)?,
                        _ => raw,
                    }
                };
                ls.push(l);
            }
            let full: Vec<TransitionSet> = sparse
                .iter()
                .zip(&ls)
                .map(|(s, l)| TransitionSet::new(vec![s.lag(1) + l]))
                .collect::<Result<_>>()?;
            let factors: Vec<f64> = if fixed {
                let c = full
                    .iter()
                    .map(|t| stabilizing_factor(t, rho))
                    .fold(1.0, f64::min);
                vec![c; m]
            } else {
                full.iter().map(|t| stabilizing_factor(t, rho)).collect()
            };
            lowrank = Some(ls.iter().zip(&factors).map(|(l, c)| l * *c).collect());
            full.iter().zip(&factors).map(|(t, c)| t.scaled(*c)).collect()
        }
    };
    for (j, t) in segments.iter().enumerate() {
        let r = companion_spectral_radius(t);
        if r >= rho {
            return Err(Error::numeric(format!(
                "segment {} still has spectral radius {r} after stabilization",
                j + 1
            )));
        }
    }
    let scale = (spec.sigma.iter().sum::<f64>() / spec.p as f64).sqrt();
    let mut model = PiecewiseVarModel::new(
        spec.break_points[..m - 1].to_vec(),
        segments,
        vec![scale; m],
    )?;
    model.lowrank = lowrank;
    Ok(model)
}

/// Generates `T + skip` points from zero history and keeps the last `T`.
pub fn simulate(spec: &GenerationSpec) -> Result<Simulation> {
    let model = build_model(spec)?;
    let (t_len, p, skip) = (spec.t_len, spec.p, spec.skip);
    let q = model.max_lag();
    let total = t_len + skip;
    let mut rng = spec.stream(0);
    let sd: Vec<f64> = spec.sigma.iter().map(|s| s.sqrt()).collect();
    let noise = DMatrix::from_fn(total, p, |_, c| {
        let z: f64 = StandardNormal.sample(&mut rng);
        sd[c] * z
    });
    let mut y = DMatrix::zeros(total, p);
    let stacked: Vec<DMatrix<f64>> = model.segments.iter().map(|s| s.stacked()).collect();
    let mut lagged = DVector::zeros(p * q);
    for tau in 0..total {
        // 1-based output time is tau + 1 - skip; burn-in uses segment 1
        let j = if tau < skip { 0 } else { model.segment_of(tau + 1 - skip) };
        for l in 1..=q {
            for c in 0..p {
                lagged[(l - 1) * p + c] = if tau >= l { y[(tau - l, c)] } else { 0.0 };
            }
        }
        let next = &stacked[j] * &lagged + noise.row(tau).transpose();
        y.set_row(tau, &next.transpose());
    }
    let data = TimeSeries::new(y.rows(skip, t_len).into_owned())?;
    Ok(Simulation {
        data,
        noise: noise.rows(skip, t_len).into_owned(),
        model,
    })
}
