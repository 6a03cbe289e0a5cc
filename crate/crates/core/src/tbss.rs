// SPDX-License-Identifier: MIT OR Apache-2.0

//! Thresholded block segmentation.
//!
//! 1. Block fused lasso over per-block coefficients gives candidate change
//!    points at block boundaries where the coefficients jump.
//! 2. Local screening compares split and merged fits around each candidate.
//! 3. Exhaustive search localizes one change point per cluster of survivors.
//! 4. Optional ℓ₁ refit on trimmed segments.
//!
//! Coefficients inside this module use the regression orientation
//! (`pq × p`, see [`crate::types`]); results are converted back.

use std::time::Instant;

use log::{debug, warn};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::solvers::{
    apply_groups, fista, fused_chain_prox_into, lasso_from_stats, max_eigenvalue, soft,
    singular_value_threshold, FistaOptions, GroupL2, LeastSquares, Penalty, Smooth, L1,
};
use crate::types::{
    make_blocks, stack_lag_rows, BlockPartition, DetectionResult, LaggedDesign, PenaltyKind,
    TimeSeries,
};

/// Settings for [`tbss_detect`].
#[derive(Clone, Debug)]
pub struct TbssConfig {
    pub kind: PenaltyKind,
    pub lag: usize,
    pub block_size: Option<usize>,
    /// Explicit block end points; overrides `block_size`.
    pub blocks: Option<BlockPartition>,
    /// Fusion weights to cross-validate; generated from the data when `None`.
    pub lambda1_grid: Option<Vec<f64>>,
    /// Sparsity weights to cross-validate; `c √(log p / n)` when `None`.
    pub lambda2_grid: Option<Vec<f64>>,
    /// Nuclear-norm weight for [`PenaltyKind::FixedLowRankSparse`], relative
    /// to the residual sum of squares.
    pub mu: Option<f64>,
    pub an_grid: Option<Vec<usize>>,
    /// Fixed screening penalty; chosen by clustering when `None`.
    pub omega: Option<f64>,
    pub use_bic_for_omega: bool,
    pub tol: f64,
    pub max_iter: usize,
    pub refit: bool,
    /// Trimming radius `R_T` for the refit, at least the block size.
    pub refit_radius: Option<usize>,
    /// ℓ₁ weight of the refit; `√(log(pq) / N)` when `None`.
    pub refit_rho: Option<f64>,
    /// Seeds the cross-validation split.
    pub seed: u64,
}

impl TbssConfig {
    pub fn new(kind: PenaltyKind, lag: usize) -> Self {
        Self {
            kind,
            lag,
            block_size: None,
            blocks: None,
            lambda1_grid: None,
            lambda2_grid: None,
            mu: None,
            an_grid: None,
            omega: None,
            use_bic_for_omega: false,
            tol: 1e-2,
            max_iter: 50,
            refit: false,
            refit_radius: None,
            refit_rho: None,
            seed: 1,
        }
    }

    fn fista_options(&self) -> FistaOptions {
        FistaOptions::with_tol(self.tol, self.max_iter)
    }

    fn validate(&self) -> Result<()> {
        if self.lag == 0 {
            return Err(Error::config("lag must be positive"));
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::config("need tol > 0 and max_iter >= 1"));
        }
        for grid in [&self.lambda1_grid, &self.lambda2_grid].into_iter().flatten() {
            if grid.is_empty() || grid.iter().all(|v| *v == 0.0) {
                return Err(Error::config("lambda grids must contain a positive value"));
            }
            if grid.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::config("lambda values must be non-negative"));
            }
        }
        match (&self.kind, self.mu) {
            (PenaltyKind::FixedLowRankSparse, None) => {
                return Err(Error::config("the fixed low-rank penalty needs mu"))
            }
            (PenaltyKind::FixedLowRankSparse, Some(mu)) if !(mu >= 0.0) => {
                return Err(Error::config("mu must be non-negative"))
            }
            (PenaltyKind::LowRankSparse, _) => {
                return Err(Error::config(
                    "time-varying low-rank models are handled by the rolling-window detector",
                ))
            }
            _ => {}
        }
        if self.kind == PenaltyKind::FixedLowRankSparse && self.lag != 1 {
            return Err(Error::config("the fixed low-rank penalty is lag 1"));
        }
        if let Some(g) = &self.an_grid {
            if g.is_empty() || g.contains(&0) {
                return Err(Error::config("a_n grid values must be positive"));
            }
        }
        Ok(())
    }
}

/// Per-block sufficient statistics of the lagged regression.
#[derive(Clone, Debug)]
pub struct BlockStats {
    pub grams: Vec<DMatrix<f64>>,
    pub crosses: Vec<DMatrix<f64>>,
    pub yty: Vec<f64>,
    /// Rows used in total (the loss normalizer `n`).
    pub rows: usize,
}

impl BlockStats {
    /// Statistics over response times of each block, skipping rows where
    /// `skip(t)` holds.
    pub fn new(
        design: &LaggedDesign,
        blocks: &BlockPartition,
        skip: impl Fn(usize) -> bool,
    ) -> Self {
        let d = design.design.ncols();
        let p = design.response.ncols();
        let k = blocks.count();
        let mut grams = Vec::with_capacity(k);
        let mut crosses = Vec::with_capacity(k);
        let mut yty = Vec::with_capacity(k);
        let mut rows = 0;
        for i in 1..=k {
            let (s, e) = blocks.range(i);
            let (a, b) = design.row_span(s, e);
            let keep: Vec<usize> = (a..b).filter(|&r| !skip(r + design.first_time())).collect();
            rows += keep.len();
            let x = design.design.select_rows(keep.iter());
            let y = design.response.select_rows(keep.iter());
            if keep.is_empty() {
                grams.push(DMatrix::zeros(d, d));
                crosses.push(DMatrix::zeros(d, p));
                yty.push(0.0);
            } else {
                grams.push(x.tr_mul(&x));
                crosses.push(x.tr_mul(&y));
                yty.push(y.norm_squared());
            }
        }
        Self {
            grams,
            crosses,
            yty,
            rows,
        }
    }

    pub fn count(&self) -> usize {
        self.grams.len()
    }

    /// Statistics of `Y - X L` in place of `Y`.
    fn shifted(&self, l: &DMatrix<f64>) -> Self {
        let mut out = self.clone();
        for i in 0..self.count() {
            let gl = &self.grams[i] * l;
            out.yty[i] = self.yty[i] - 2.0 * l.dot(&self.crosses[i]) + l.dot(&gl);
            out.crosses[i] = &self.crosses[i] - gl;
        }
        out
    }
}

/// Block-separable least squares over horizontally stacked `φ_i`.
struct BlockLs<'a> {
    stats: &'a BlockStats,
    p: usize,
}

impl BlockLs<'_> {
    fn n(&self) -> f64 {
        self.stats.rows.max(1) as f64
    }
}

impl Smooth for BlockLs<'_> {
    fn value(&self, x: &DMatrix<f64>) -> f64 {
        let mut total = 0.0;
        for i in 0..self.stats.count() {
            let phi = x.columns(i * self.p, self.p);
            let g = &self.stats.grams[i] * phi;
            total += self.stats.yty[i] - 2.0 * phi.dot(&self.stats.crosses[i]) + phi.dot(&g);
        }
        total.max(0.0) / self.n()
    }

    fn gradient(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        let scale = 2.0 / self.n();
        for i in 0..self.stats.count() {
            let phi = x.columns(i * self.p, self.p);
            let g = (&self.stats.grams[i] * phi - &self.stats.crosses[i]) * scale;
            out.columns_mut(i * self.p, self.p).copy_from(&g);
        }
        out
    }
}

/// Fusion (total variation across blocks, per coefficient) plus sparsity
/// on every block's coefficients.
struct FusedPenalty<'a> {
    lam_tv: f64,
    lam_sparse: f64,
    groups: Option<&'a [Vec<usize>]>,
    d: usize,
    p: usize,
    k: usize,
}

impl Penalty for FusedPenalty<'_> {
    fn value(&self, x: &DMatrix<f64>) -> f64 {
        let s = x.as_slice();
        let dp = self.d * self.p;
        let mut tv = 0.0;
        for i in 1..self.k {
            for c in 0..dp {
                tv += (s[i * dp + c] - s[(i - 1) * dp + c]).abs();
            }
        }
        let sparse = match self.groups {
            None => s.iter().map(|v| v.abs()).sum::<f64>(),
            Some(groups) => (0..self.k)
                .map(|i| {
                    let blk = &s[i * dp..(i + 1) * dp];
                    groups
                        .iter()
                        .map(|g| g.iter().map(|&j| blk[j] * blk[j]).sum::<f64>().sqrt())
                        .sum::<f64>()
                })
                .sum(),
        };
        self.lam_tv * tv + self.lam_sparse * sparse
    }

    fn prox(&self, x: &DMatrix<f64>, step: f64) -> Result<DMatrix<f64>> {
        let mut out = x.clone();
        let dp = self.d * self.p;
        let src = x.as_slice();
        let dst = out.as_mut_slice();
        let mut chain = vec![0.0; self.k];
        let mut fused = vec![0.0; self.k];
        for c in 0..dp {
            for i in 0..self.k {
                chain[i] = src[i * dp + c];
            }
            fused_chain_prox_into(&chain, step * self.lam_tv, &mut fused);
            for i in 0..self.k {
                dst[i * dp + c] = fused[i];
            }
        }
        let lam = step * self.lam_sparse;
        match self.groups {
            None => dst.iter_mut().for_each(|v| *v = soft(*v, lam)),
            Some(groups) => {
                for blk in dst.chunks_mut(dp) {
                    apply_groups(blk, groups, lam);
                }
            }
        }
        Ok(out)
    }
}

/// Output of the block fused lasso.
#[derive(Clone, Debug)]
pub struct BlockFit {
    /// Per-block sparse coefficients `φ_i` (regression orientation).
    pub phi: Vec<DMatrix<f64>>,
    /// Shared low-rank part (regression orientation) for the fixed
    /// low-rank penalty.
    pub lowrank: Option<DMatrix<f64>>,
    /// Candidate change points: first time of every block `i ≥ 2` whose
    /// difference `θ_i = φ_i - φ_{i-1}` is declared nonzero.
    pub candidates: Vec<usize>,
    /// Block index (1-based) of each candidate.
    pub candidate_blocks: Vec<usize>,
}

impl BlockFit {
    /// Number of Step-1 optimization variables, `k · pq · p`.
    pub fn variable_count(&self) -> usize {
        self.phi.iter().map(|m| m.len()).sum()
    }

    /// Full coefficients of block `i` (1-based), including the low-rank part.
    pub fn block_coef(&self, i: usize) -> DMatrix<f64> {
        match &self.lowrank {
            Some(l) => &self.phi[i - 1] + l,
            None => self.phi[i - 1].clone(),
        }
    }
}

/// Weights used by the Step-1 problem.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusedWeights {
    /// Fusion weight on block-to-block differences.
    pub lambda1: f64,
    /// Sparsity weight on each block's coefficients.
    pub lambda2: f64,
    /// Nuclear-norm weight on the shared low-rank part, on the `(1/n)` loss scale.
    pub mu: Option<f64>,
}

fn stack_blocks(phi: &[DMatrix<f64>]) -> DMatrix<f64> {
    let (d, p) = phi[0].shape();
    let mut x = DMatrix::zeros(d, p * phi.len());
    for (i, m) in phi.iter().enumerate() {
        x.columns_mut(i * p, p).copy_from(m);
    }
    x
}

fn split_blocks(x: &DMatrix<f64>, p: usize) -> Vec<DMatrix<f64>> {
    (0..x.ncols() / p)
        .map(|i| x.columns(i * p, p).into_owned())
        .collect()
}

struct Nuclear(f64);

impl Penalty for Nuclear {
    fn value(&self, x: &DMatrix<f64>) -> f64 {
        self.0 * crate::solvers::nuclear_norm(x)
    }
    fn prox(&self, x: &DMatrix<f64>, step: f64) -> Result<DMatrix<f64>> {
        singular_value_threshold(x, step * self.0)
    }
}

const LOWRANK_ALTERNATIONS: usize = 3;

/// Solves the Step-1 problem on precomputed block statistics.
pub fn fit_blocks(
    stats: &BlockStats,
    groups: Option<&[Vec<usize>]>,
    weights: FusedWeights,
    warm: Option<&BlockFit>,
    opts: &FistaOptions,
) -> Result<(Vec<DMatrix<f64>>, Option<DMatrix<f64>>)> {
    let (d, p) = stats.crosses[0].shape();
    let k = stats.count();
    let pen = FusedPenalty {
        lam_tv: weights.lambda1,
        lam_sparse: weights.lambda2,
        groups,
        d,
        p,
        k,
    };
    let n = stats.rows.max(1) as f64;
    let lmax = stats.grams.iter().map(max_eigenvalue).fold(0.0, f64::max);
    let step = if lmax > 0.0 { n / (2.0 * lmax) } else { 1.0 };
    let opts = opts.starting_at(step);
    let x0 = warm.map_or_else(|| DMatrix::zeros(d, p * k), |w| stack_blocks(&w.phi));
    match weights.mu {
        None => {
            let out = fista(&BlockLs { stats, p }, &pen, x0, &opts)?;
            Ok((split_blocks(&out.x, p), None))
        }
        Some(mu) => {
            let mut l = warm
                .and_then(|w| w.lowrank.clone())
                .unwrap_or_else(|| DMatrix::zeros(d, p));
            let mut x = x0;
            let gram: DMatrix<f64> = stats.grams.iter().fold(DMatrix::zeros(d, d), |a, g| a + g);
            let l_step = n / (2.0 * max_eigenvalue(&gram)).max(f64::MIN_POSITIVE);
            for _ in 0..LOWRANK_ALTERNATIONS {
                let shifted = stats.shifted(&l);
                x = fista(&BlockLs { stats: &shifted, p }, &pen, x, &opts)?.x;
                // low-rank update on the full-sample residual of the sparse part
                let mut cross = DMatrix::zeros(d, p);
                let mut yty = 0.0;
                for i in 0..k {
                    let phi = x.columns(i * p, p);
                    let g = &stats.grams[i] * phi;
                    cross += &stats.crosses[i] - &g;
                    yty += stats.yty[i] - 2.0 * phi.dot(&stats.crosses[i]) + phi.dot(&g);
                }
                let ls = LeastSquares {
                    gram: gram.clone(),
                    cross,
                    yty,
                    n,
                };
                let lopts = FistaOptions::with_tol(1e-4, 1000).starting_at(l_step);
                l = fista(&ls, &Nuclear(mu), l, &lopts)?.x;
            }
            Ok((split_blocks(&x, p), Some(l)))
        }
    }
}

/// Candidate blocks whose jump exceeds `1e-6 · max(1, max |φ|)`.
pub fn declare_candidates(phi: &[DMatrix<f64>], blocks: &BlockPartition) -> (Vec<usize>, Vec<usize>) {
    let scale = phi.iter().map(|m| m.amax()).fold(0.0, f64::max).max(1.0);
    let mut times = Vec::new();
    let mut idx = Vec::new();
    for i in 2..=phi.len() {
        let jump = (&phi[i - 1] - &phi[i - 2]).amax();
        if jump > 1e-6 * scale {
            times.push(blocks.range(i).0);
            idx.push(i);
        }
    }
    (times, idx)
}

/// Step 1 at fixed weights.
pub fn block_fused_step(
    design: &LaggedDesign,
    blocks: &BlockPartition,
    kind: &PenaltyKind,
    weights: FusedWeights,
    opts: &FistaOptions,
) -> Result<BlockFit> {
    let stats = BlockStats::new(design, blocks, |_| false);
    let groups = regression_groups(kind, design)?;
    let (phi, lowrank) = fit_blocks(&stats, groups.as_deref(), weights, None, opts)?;
    let (candidates, candidate_blocks) = declare_candidates(&phi, blocks);
    Ok(BlockFit {
        phi,
        lowrank,
        candidates,
        candidate_blocks,
    })
}

fn regression_groups(kind: &PenaltyKind, design: &LaggedDesign) -> Result<Option<Vec<Vec<usize>>>> {
    let p = design.response.ncols();
    match kind {
        PenaltyKind::GroupSparse(g) => Ok(Some(g.regression_groups(p, design.q)?)),
        _ => Ok(None),
    }
}

/// Smallest fusion weight for which all block differences vanish, given the
/// sparsity weight. Computed from the optimality conditions at the pooled
/// (all blocks equal) solution.
pub fn lambda1_max(
    stats: &BlockStats,
    groups: Option<&[Vec<usize>]>,
    lambda2: f64,
    lowrank: Option<&DMatrix<f64>>,
) -> Result<f64> {
    let shifted;
    let stats = match lowrank {
        Some(l) => {
            shifted = stats.shifted(l);
            &shifted
        }
        None => stats,
    };
    let (d, p) = stats.crosses[0].shape();
    let k = stats.count();
    let n = stats.rows.max(1) as f64;
    let pooled = LeastSquares {
        gram: stats.grams.iter().fold(DMatrix::zeros(d, d), |a, g| a + g),
        cross: stats.crosses.iter().fold(DMatrix::zeros(d, p), |a, c| a + c),
        yty: stats.yty.iter().sum(),
        n,
    };
    let opts = FistaOptions::with_tol(1e-8, 5000).starting_at(pooled.lipschitz_step());
    let weight = lambda2 * k as f64;
    let phi = match groups {
        None => fista(&pooled, &L1(weight), DMatrix::zeros(d, p), &opts)?.x,
        Some(g) => {
            fista(&pooled, &GroupL2 { lam: weight, groups: g }, DMatrix::zeros(d, p), &opts)?.x
        }
    };
    let grads: Vec<DMatrix<f64>> = (0..k)
        .map(|i| (&stats.grams[i] * &phi - &stats.crosses[i]) * (2.0 / n))
        .collect();
    let mean = grads.iter().fold(DMatrix::zeros(d, p), |a, g| a + g) / k as f64;
    let mut partial = DMatrix::zeros(d, p);
    let mut best = 0.0f64;
    for g in &grads[..k - 1] {
        partial += g - &mean;
        best = best.max(partial.amax());
    }
    Ok(best)
}

/// Cross-validated `(λ1, λ2)`.
///
/// Every fifth block, starting at a random offset, loses its last time
/// point to the validation set. Each grid pair is fit on the remaining rows
/// and scored by one-step prediction error on the held-out points.
pub fn cross_validate_lambdas(
    design: &LaggedDesign,
    blocks: &BlockPartition,
    config: &TbssConfig,
) -> Result<(f64, f64)> {
    let k = blocks.count();
    let p = design.response.ncols();
    if let (Some(g1), Some(g2)) = (&config.lambda1_grid, &config.lambda2_grid) {
        if g1.len() == 1 && g2.len() == 1 {
            return Ok((g1[0], g2[0]));
        }
    }
    if k < 5 {
        return Err(Error::config(format!(
            "cross-validation needs at least 5 blocks, got {k}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let offset = rng.random_range(0..5usize);
    let held: Vec<usize> = (offset..k)
        .step_by(5)
        .map(|i| blocks.range(i + 1).1 - 1)
        .filter(|&t| t > design.q && t <= design.last_time())
        .collect();
    if held.is_empty() {
        return Err(Error::config("empty validation set"));
    }
    let stats = BlockStats::new(design, blocks, |t| held.binary_search(&t).is_ok());
    let groups = regression_groups(&config.kind, design)?;
    let n = (design.last_time() + 1 - design.q) as f64;
    let lambda2_grid = config.lambda2_grid.clone().unwrap_or_else(|| {
        let base = ((p as f64).ln().max(0.0) / n).sqrt().max(1e-12);
        LAMBDA2_SCALES.iter().map(|c| c * base).collect()
    });
    let mu = config.mu.map(|m| m / stats.rows.max(1) as f64);
    let eps = if blocks.block_size < 2 * p { 1e-3 } else { 1e-4 };
    let opts = config.fista_options();
    let scored: Vec<Result<(f64, f64, f64)>> = lambda2_grid
        .par_iter()
        .map(|&lambda2| -> Result<(f64, f64, f64)> {
            let grid = match &config.lambda1_grid {
                Some(g) => g.clone(),
                None => {
                    let top = lambda1_max(&stats, groups.as_deref(), lambda2, None)?;
                    log_grid(top, eps, LAMBDA1_COUNT)
                }
            };
            let mut warm: Option<BlockFit> = None;
            let mut best = (f64::INFINITY, grid[0], lambda2);
            for &lambda1 in &grid {
                let w = FusedWeights {
                    lambda1,
                    lambda2,
                    mu,
                };
                let (phi, lowrank) = fit_blocks(&stats, groups.as_deref(), w, warm.as_ref(), &opts)?;
                let fit = BlockFit {
                    phi,
                    lowrank,
                    candidates: vec![],
                    candidate_blocks: vec![],
                };
                let err = validation_error(design, blocks, &fit, &held);
                debug!("cv lambda1={lambda1:.3e} lambda2={lambda2:.3e} err={err:.6}");
                if err < best.0 {
                    best = (err, lambda1, lambda2);
                }
                warm = Some(fit);
            }
            Ok(best)
        })
        .collect();
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for r in scored {
        let r = r?;
        if r.0 < best.0 {
            best = r;
        }
    }
    if !best.0.is_finite() {
        return Err(Error::numeric("cross-validation error is not finite"));
    }
    Ok((best.1, best.2))
}

const LAMBDA1_COUNT: usize = 10;
const LAMBDA2_SCALES: [f64; 3] = [1.0, 0.1, 0.01];

fn log_grid(top: f64, eps: f64, count: usize) -> Vec<f64> {
    if !(top > 0.0) {
        return vec![0.0];
    }
    let (hi, lo) = (top.ln(), (top * eps).ln());
    (0..count)
        .map(|j| (hi + (lo - hi) * j as f64 / (count - 1) as f64).exp())
        .collect()
}

fn validation_error(
    design: &LaggedDesign,
    blocks: &BlockPartition,
    fit: &BlockFit,
    held: &[usize],
) -> f64 {
    let mut total = 0.0;
    for &t in held {
        let r = t - design.first_time();
        let coef = fit.block_coef(blocks.block_of(t));
        let pred = design.design.row(r) * coef;
        total += (design.response.row(r) - pred).norm_squared();
    }
    total / held.len() as f64
}

/// Penalty of the local fits used in screening.
#[derive(Clone, Debug)]
pub enum LocalPenalty {
    Lasso,
    Group(Vec<Vec<usize>>),
}

/// Local regression model used by screening and the exhaustive search.
pub struct LocalModel<'a> {
    pub design: &'a LaggedDesign,
    pub penalty: LocalPenalty,
    /// Subtracted from every fit (fixed low-rank part).
    pub offset: Option<DMatrix<f64>>,
}

/// Split and merged residual sums of squares around one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LicTerm {
    pub t: usize,
    pub split: f64,
    pub merged: f64,
}

impl LicTerm {
    /// Decrease of the criterion when `t` is kept, before the `ω` penalty.
    pub fn jump(&self) -> f64 {
        self.merged - self.split
    }
}

impl LocalModel<'_> {
    pub fn new<'a>(design: &'a LaggedDesign, kind: &PenaltyKind, offset: Option<DMatrix<f64>>) -> Result<LocalModel<'a>> {
        let penalty = match kind {
            PenaltyKind::GroupSparse(g) => {
                LocalPenalty::Group(g.regression_groups(design.response.ncols(), design.q)?)
            }
            _ => LocalPenalty::Lasso,
        };
        Ok(LocalModel {
            design,
            penalty,
            offset,
        })
    }

    fn stats(&self, start: usize, end: usize) -> LeastSquares {
        let (x, mut y) = self.design.rows(start, end);
        if let Some(l) = &self.offset {
            y -= &x * l;
        }
        LeastSquares::new(&x, &y)
    }

    /// Residual sum of squares of the penalized fit on responses `[start, end)`.
    pub fn fit_sse(&self, start: usize, end: usize, eta: f64) -> Result<f64> {
        let ls = self.stats(start, end);
        let opts = FistaOptions::with_tol(1e-6, 2000).starting_at(ls.lipschitz_step());
        let d = ls.gram.nrows();
        let m = ls.cross.ncols();
        let b = match &self.penalty {
            LocalPenalty::Lasso => lasso_from_stats(&ls, eta, None, &opts)?,
            LocalPenalty::Group(groups) => {
                fista(&ls, &GroupL2 { lam: eta, groups }, DMatrix::zeros(d, m), &opts)?.x
            }
        };
        Ok(ls.sse(&b))
    }

    /// LIC terms at `t`; `None` when the window leaves the data.
    pub fn lic_term(&self, t: usize, a_n: usize, eta: f64) -> Result<Option<LicTerm>> {
        let lo = self.design.first_time();
        let hi = self.design.last_time() + 1;
        if t < lo + a_n || t + a_n > hi {
            return Ok(None);
        }
        let left = self.fit_sse(t - a_n, t, eta)?;
        let right = self.fit_sse(t, t + a_n, eta)?;
        let merged = self.fit_sse(t - a_n, t + a_n, eta)?;
        Ok(Some(LicTerm {
            t,
            split: left + right,
            merged,
        }))
    }

    /// LIC terms for every candidate whose window fits in the data.
    pub fn lic_terms(&self, candidates: &[usize], a_n: usize, eta: f64) -> Result<Vec<LicTerm>> {
        let terms: Vec<Result<Option<LicTerm>>> = candidates
            .par_iter()
            .map(|&t| self.lic_term(t, a_n, eta))
            .collect();
        let mut out = Vec::with_capacity(terms.len());
        for (t, r) in candidates.iter().zip(terms) {
            match r? {
                Some(term) => out.push(term),
                None => warn!("candidate {t} dropped: a_n = {a_n} window leaves the data"),
            }
        }
        Ok(out)
    }

    /// Jump of the criterion at the two boundary reference points.
    pub fn reference_jump(&self, a_n: usize, eta: f64) -> Result<Option<f64>> {
        let first = self.design.first_time();
        let last = self.design.last_time();
        let refs = [first + a_n, (last + 1).saturating_sub(a_n)];
        let mut best: Option<f64> = None;
        for t in refs {
            if let Some(term) = self.lic_term(t, a_n, eta)? {
                best = Some(best.map_or(term.jump(), |b| b.max(term.jump())));
            }
        }
        Ok(best)
    }
}

/// Screening weight `η = log(2 a_n) log p / (2 a_n)`.
pub fn default_eta(a_n: usize, p: usize) -> f64 {
    let two_a = 2.0 * a_n as f64;
    (two_a.ln() * (p as f64).ln() / two_a).max(0.0)
}

/// Criterion value of keeping exactly the candidates flagged in `keep`.
pub fn lic_value(terms: &[LicTerm], keep: &[bool], omega: f64) -> f64 {
    terms
        .iter()
        .zip(keep)
        .map(|(t, &k)| if k { t.split + omega } else { t.merged })
        .sum()
}

/// Candidates kept by the separable criterion: `split + ω < merged`.
pub fn screen_terms(terms: &[LicTerm], omega: f64) -> Vec<usize> {
    terms
        .iter()
        .filter(|t| t.split + omega < t.merged)
        .map(|t| t.t)
        .collect()
}

/// Screened subset of `candidates` at neighborhood size `a_n`.
pub fn local_screen(
    model: &LocalModel,
    candidates: &[usize],
    a_n: usize,
    eta: f64,
    omega: f64,
) -> Result<Vec<usize>> {
    let terms = model.lic_terms(candidates, a_n, eta)?;
    Ok(screen_terms(&terms, omega))
}

/// Exact two-cluster split of 1-D data: returns (sorted values, split index,
/// between-SS / total-SS). Values before the split form the small cluster.
pub fn two_means(values: &[f64]) -> (Vec<f64>, usize, f64) {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    let mean = v.iter().sum::<f64>() / n as f64;
    let total: f64 = v.iter().map(|x| (x - mean).powi(2)).sum();
    if n < 2 || total <= 0.0 {
        return (v, n, 0.0);
    }
    let ss = |s: &[f64]| {
        let m = s.iter().sum::<f64>() / s.len() as f64;
        s.iter().map(|x| (x - m).powi(2)).sum::<f64>()
    };
    let mut best = (f64::INFINITY, 1);
    for split in 1..n {
        let within = ss(&v[..split]) + ss(&v[split..]);
        if within < best.0 {
            best = (within, split);
        }
    }
    let ratio = 1.0 - best.0 / total;
    (v, best.1, ratio)
}

/// Threshold on between-SS / total-SS for a clear two-cluster structure.
pub const CLUSTER_RATIO: f64 = 0.67;

/// Chooses `ω` from candidate jumps and the reference jump.
///
/// With a clear small/large split and the reference in the small cluster,
/// `ω` is the largest small-cluster jump so every large-cluster candidate
/// survives; otherwise `ω = max V` and nothing survives.
pub fn omega_from_jumps(jumps: &[f64], reference: Option<f64>, use_bic: bool) -> f64 {
    if jumps.is_empty() {
        return f64::INFINITY;
    }
    let mut v = jumps.to_vec();
    if let Some(r) = reference {
        v.push(r);
        v.push(r);
    }
    let (sorted, split, ratio) = two_means(&v);
    let max_v = sorted[sorted.len() - 1];
    if split >= sorted.len() {
        return max_v;
    }
    let clear = if use_bic {
        bic_prefers_two(&sorted, split)
    } else {
        ratio > CLUSTER_RATIO
    };
    let small_max = sorted[split - 1];
    let reference_small = reference.is_none_or(|r| r <= small_max);
    if clear && reference_small {
        small_max
    } else {
        max_v
    }
}

fn bic_prefers_two(sorted: &[f64], split: usize) -> bool {
    let n = sorted.len() as f64;
    let ss = |s: &[f64]| {
        let m = s.iter().sum::<f64>() / s.len() as f64;
        s.iter().map(|x| (x - m).powi(2)).sum::<f64>()
    };
    let floor = 1e-12 * sorted.iter().map(|x| x.abs()).fold(1.0, f64::max);
    let one = n * (ss(sorted) / n).max(floor).ln() + 2.0 * n.ln();
    let two = n * ((ss(&sorted[..split]) + ss(&sorted[split..])) / n).max(floor).ln() + 3.0 * n.ln();
    two < one
}

/// Data-driven `ω` for candidates at neighborhood size `a_n`.
pub fn select_omega(
    model: &LocalModel,
    candidates: &[usize],
    a_n: usize,
    eta: f64,
    use_bic: bool,
) -> Result<f64> {
    let terms = model.lic_terms(candidates, a_n, eta)?;
    let jumps: Vec<f64> = terms.iter().map(LicTerm::jump).collect();
    let reference = model.reference_jump(a_n, eta)?;
    Ok(omega_from_jumps(&jumps, reference, use_bic))
}

/// Screening outcome at one neighborhood size.
#[derive(Clone, Debug)]
pub struct ScreenOutcome {
    pub a_n: usize,
    pub omega: f64,
    pub terms: Vec<LicTerm>,
    pub screened: Vec<usize>,
}

fn screen_at(
    model: &LocalModel,
    candidates: &[usize],
    a_n: usize,
    omega: Option<f64>,
    use_bic: bool,
) -> Result<ScreenOutcome> {
    let p = model.design.response.ncols();
    let eta = default_eta(a_n, p);
    let terms = model.lic_terms(candidates, a_n, eta)?;
    let omega = match omega {
        Some(w) => w,
        None => {
            let jumps: Vec<f64> = terms.iter().map(LicTerm::jump).collect();
            let r = model.reference_jump(a_n, eta)?;
            omega_from_jumps(&jumps, r, use_bic)
        }
    };
    let screened = screen_terms(&terms, omega);
    Ok(ScreenOutcome {
        a_n,
        omega,
        terms,
        screened,
    })
}

/// Default `a_n` grid: five equally spaced values in `[a_lb, a_ub]`.
pub fn an_grid(candidates: &[usize], blocks: &BlockPartition, t_len: usize, q: usize, p: usize) -> Vec<usize> {
    let n = (t_len - q + 1) as f64;
    let lb = (blocks.mean_size().floor() as usize).max((n.ln() * (p as f64).ln()).floor() as usize).max(1);
    let first = candidates[0];
    let last = candidates[candidates.len() - 1];
    let ub = (10 * lb)
        .min(first.saturating_sub(q + 1))
        .min((t_len - q).saturating_sub(last + 1));
    if ub < lb {
        warn!("a_n upper bound {ub} below lower bound {lb}; using {lb}");
        return vec![lb];
    }
    (0..5)
        .map(|i| lb + ((ub - lb) as f64 * i as f64 / 4.0).round() as usize)
        .collect()
}

/// First grid index whose count repeats over three consecutive grid values;
/// the last index when none does.
pub fn stable_index(counts: &[usize]) -> usize {
    (0..counts.len().saturating_sub(2))
        .find(|&i| counts[i] == counts[i + 1] && counts[i + 1] == counts[i + 2])
        .unwrap_or(counts.len().saturating_sub(1))
}

/// Neighborhood size from the stability rule over the `a_n` grid, applied
/// to the number of final change points (clusters of screened points).
pub fn select_an(
    model: &LocalModel,
    candidates: &[usize],
    blocks: &BlockPartition,
    grid: Option<&[usize]>,
    use_bic: bool,
) -> Result<usize> {
    Ok(select_an_outcome(model, candidates, blocks, grid, None, use_bic)?.0.a_n)
}

fn select_an_outcome(
    model: &LocalModel,
    candidates: &[usize],
    blocks: &BlockPartition,
    grid: Option<&[usize]>,
    omega: Option<f64>,
    use_bic: bool,
) -> Result<(ScreenOutcome, Vec<(usize, usize)>)> {
    let design = model.design;
    let t_len = design.last_time();
    let p = design.response.ncols();
    let grid = match grid {
        Some(g) => g.to_vec(),
        None => an_grid(candidates, blocks, t_len, design.q, p),
    };
    let mut outcomes = Vec::with_capacity(grid.len());
    for &a in &grid {
        outcomes.push(screen_at(model, candidates, a, omega, use_bic)?);
    }
    // one final point per cluster of survivors
    let counts: Vec<usize> = outcomes
        .iter()
        .map(|o| cluster_points(&o.screened, 2 * o.a_n).len())
        .collect();
    debug!("a_n grid {grid:?} counts {counts:?}");
    let i = stable_index(&counts);
    let grid_counts = grid.iter().copied().zip(counts).collect();
    Ok((outcomes.swap_remove(i), grid_counts))
}

/// Greedy left-to-right clusters of sorted points with diameter `≤ width`.
pub fn cluster_points(points: &[usize], width: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    for &t in points {
        match out.last_mut() {
            Some(c) if t - c[0] <= width => c.push(t),
            _ => out.push(vec![t]),
        }
    }
    out
}

/// One final change point per cluster of screened points.
///
/// `block_coef(i)` returns the full regression coefficients of block `i`.
pub fn exhaustive_search(
    design: &LaggedDesign,
    screened: &[usize],
    a_n: usize,
    blocks: &BlockPartition,
    block_coef: &(dyn Fn(usize) -> DMatrix<f64> + Sync),
) -> Vec<usize> {
    if screened.is_empty() {
        return vec![];
    }
    let lo = design.first_time();
    let hi = design.last_time() + 1;
    let clusters = cluster_points(screened, 2 * a_n);
    let intervals: Vec<(usize, usize)> = clusters
        .iter()
        .map(|c| {
            let (l, u) = if c.len() == 1 {
                (c[0].saturating_sub(a_n), c[0] + a_n)
            } else {
                (c[0], c[c.len() - 1])
            };
            (l.max(lo), u.min(hi))
        })
        .collect();
    let k = blocks.count();
    let mut spans = vec![(1, 1)];
    for &(l, u) in &intervals {
        let first = blocks.block_of(l + 1);
        let last = blocks.block_of(u.saturating_sub(1).max(l + 1));
        spans.push((first, last));
    }
    spans.push((k, k));
    let w: Vec<usize> = (1..spans.len())
        .map(|i| ((spans[i - 1].1 + spans[i].0) as f64 / 2.0).round() as usize)
        .map(|b| b.clamp(1, k))
        .collect();
    intervals
        .par_iter()
        .enumerate()
        .map(|(i, &(l, u))| {
            let left = block_coef(w[i]);
            let right = block_coef(w[i + 1]);
            scan_split(design, l, u, &left, &right).unwrap_or(c_mid(&clusters[i]))
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(Vec::new(), |mut acc: Vec<usize>, t| {
            if acc.last().is_none_or(|&prev| t > prev) {
                acc.push(t);
            }
            acc
        })
}

fn c_mid(c: &[usize]) -> usize {
    c[c.len() / 2]
}

/// Smallest `s ∈ (l, u)` minimizing the SSE of `left` on `[l, s)` plus
/// `right` on `[s, u)`.
pub fn scan_split(
    design: &LaggedDesign,
    l: usize,
    u: usize,
    left: &DMatrix<f64>,
    right: &DMatrix<f64>,
) -> Option<usize> {
    if u < l + 2 {
        return None;
    }
    let (x, y) = design.rows(l, u);
    let rl = (&y - &x * left).row_iter().map(|r| r.norm_squared()).collect::<Vec<_>>();
    let rr = (&y - &x * right).row_iter().map(|r| r.norm_squared()).collect::<Vec<_>>();
    let n = rl.len();
    // cost(s) = Σ_{j<s-l} rl_j + Σ_{j≥s-l} rr_j
    let mut left_sum = rl[0];
    let mut right_sum: f64 = rr[1..].iter().sum();
    let mut best = (left_sum + right_sum, l + 1);
    for j in 2..n {
        left_sum += rl[j - 1];
        right_sum -= rr[j - 1];
        let cost = left_sum + right_sum;
        if cost < best.0 {
            best = (cost, l + j);
        }
    }
    Some(best.1)
}

/// Responses `[start, end)` of each trimmed segment.
pub fn refit_intervals(
    design: &LaggedDesign,
    cps: &[usize],
    radius: usize,
) -> Result<Vec<(usize, usize)>> {
    let first = design.first_time();
    let last = design.last_time();
    let mut out = Vec::with_capacity(cps.len() + 1);
    for j in 0..=cps.len() {
        let start = if j == 0 { first } else { cps[j - 1] + radius + 1 };
        let end = if j == cps.len() {
            last + 1
        } else {
            cps[j].saturating_sub(radius + 1) + 1
        };
        if end <= start {
            return Err(Error::SegmentTooShort {
                segment: j + 1,
                len: 0,
                need: 1,
            });
        }
        out.push((start.max(first), end.min(last + 1)));
    }
    Ok(out)
}

/// ℓ₁ refit on trimmed segments; returns per-segment regression
/// coefficients (the sparse part when `offset` is given).
///
/// Minimizes `(1/N) Σ_j ‖Y_j - X_j B_j‖² + ρ Σ_j ‖B_j‖₁`, which separates
/// into one lasso per segment with weight `ρ N / N_j`.
pub fn refit_segments(
    design: &LaggedDesign,
    cps: &[usize],
    radius: usize,
    rho: Option<f64>,
    offset: Option<&DMatrix<f64>>,
) -> Result<Vec<DMatrix<f64>>> {
    let intervals = refit_intervals(design, cps, radius)?;
    let total: usize = intervals.iter().map(|(a, b)| b - a).sum();
    let p = design.response.ncols();
    let d = design.design.ncols();
    let rho = rho.unwrap_or_else(|| ((d as f64).ln().max(0.0) / total as f64).sqrt());
    let _ = p;
    intervals
        .par_iter()
        .map(|&(a, b)| {
            let (x, mut y) = design.rows(a, b);
            if let Some(l) = offset {
                y -= &x * l;
            }
            let ls = LeastSquares::new(&x, &y);
            let lam = rho * total as f64 / (b - a) as f64;
            let opts = FistaOptions::with_tol(1e-6, 5000).starting_at(ls.lipschitz_step());
            lasso_from_stats(&ls, lam, None, &opts)
        })
        .collect()
}

/// Full pipeline intermediate results.
#[derive(Clone, Debug)]
pub struct TbssTrace {
    pub lambda1: f64,
    pub lambda2: f64,
    pub candidates: Vec<usize>,
    pub a_n: Option<usize>,
    /// Final change point count at each `a_n` grid value.
    pub an_counts: Vec<(usize, usize)>,
    pub omega: Option<f64>,
    pub screened: Vec<usize>,
    pub final_points: Vec<usize>,
}

/// Runs all four steps and returns the detection result.
pub fn tbss_detect(data: &TimeSeries, config: &TbssConfig) -> Result<DetectionResult> {
    Ok(tbss_detect_traced(data, config)?.0)
}

/// [`tbss_detect`] that also returns the intermediate sets.
pub fn tbss_detect_traced(data: &TimeSeries, config: &TbssConfig) -> Result<(DetectionResult, TbssTrace)> {
    let start = Instant::now();
    config.validate()?;
    let q = config.lag;
    let t_len = data.len();
    let p = data.dim();
    let design = stack_lag_rows(data, q)?;
    let blocks = match &config.blocks {
        Some(b) => b.clone(),
        None => make_blocks(t_len, q, config.block_size)?,
    };
    if blocks.endpoints[0] != q || *blocks.endpoints.last().unwrap() != t_len + 1 {
        return Err(Error::config("blocks must span q through T + 1"));
    }
    if t_len <= 2 * blocks.block_size {
        return Err(Error::config("series too short for the block size"));
    }
    let (lambda1, lambda2) = cross_validate_lambdas(&design, &blocks, config)?;
    let stats = BlockStats::new(&design, &blocks, |_| false);
    let groups = regression_groups(&config.kind, &design)?;
    let weights = FusedWeights {
        lambda1,
        lambda2,
        mu: config.mu.map(|m| m / stats.rows.max(1) as f64),
    };
    let (phi, lowrank) = fit_blocks(&stats, groups.as_deref(), weights, None, &config.fista_options())?;
    let (candidates, candidate_blocks) = declare_candidates(&phi, &blocks);
    let fit = BlockFit {
        phi,
        lowrank,
        candidates,
        candidate_blocks,
    };
    debug!("candidates {:?}", fit.candidates);
    let model = LocalModel::new(&design, &config.kind, fit.lowrank.clone())?;
    let mut trace = TbssTrace {
        lambda1,
        lambda2,
        candidates: fit.candidates.clone(),
        a_n: None,
        an_counts: vec![],
        omega: None,
        screened: vec![],
        final_points: vec![],
    };
    let mut final_points = Vec::new();
    if !fit.candidates.is_empty() {
        let (outcome, grid_counts) = select_an_outcome(
            &model,
            &fit.candidates,
            &blocks,
            config.an_grid.as_deref(),
            config.omega,
            config.use_bic_for_omega,
        )?;
        debug!("a_n {} omega {} screened {:?}", outcome.a_n, outcome.omega, outcome.screened);
        let coef = |i: usize| fit.block_coef(i);
        final_points = exhaustive_search(&design, &outcome.screened, outcome.a_n, &blocks, &coef);
        final_points.retain(|&t| t > q && t < t_len);
        trace.an_counts = grid_counts;
        trace.a_n = Some(outcome.a_n);
        trace.omega = Some(outcome.omega);
        trace.screened = outcome.screened;
    }
    trace.final_points = final_points.clone();

    let segment_coefs: Vec<DMatrix<f64>> = if config.refit {
        let radius = config.refit_radius.unwrap_or(blocks.block_size);
        if radius < blocks.block_size {
            return Err(Error::config("refit radius must be at least the block size"));
        }
        refit_segments(&design, &final_points, radius, config.refit_rho, fit.lowrank.as_ref())?
    } else {
        let mut bounds = vec![q];
        bounds.extend(&final_points);
        bounds.push(t_len + 1);
        bounds
            .windows(2)
            .map(|w| fit.phi[blocks.block_of((w[0] + w[1]) / 2) - 1].clone())
            .collect()
    };
    let sparse_mats: Vec<DMatrix<f64>> = segment_coefs.iter().map(|b| b.transpose()).collect();
    let lowrank_mats = fit
        .lowrank
        .as_ref()
        .map(|l| vec![l.transpose(); sparse_mats.len()]);
    let _ = p;
    let result = DetectionResult {
        change_points: final_points,
        sparse_mats,
        lowrank_mats,
        lag: q,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    };
    result.validate(t_len)?;
    Ok((result, trace))
}
