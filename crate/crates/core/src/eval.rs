// SPDX-License-Identifier: MIT OR Apache-2.0

//! Scoring detections against a known truth, replicated simulations and
//! BIC-based lag selection.
//!
//! A true change point `t_j` counts as found when some estimate lies in
//! `[t_j - (t_j - t_{j-1}) / L, t_j + (t_{j+1} - t_j) / L]`, with `t_0 = 0` and
//! `t_{m+1} = T`.

use std::fmt;
use std::time::Instant;

use log::warn;
use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::datagen::{simulate, GenerationSpec};
use crate::error::{Error, Result};
use crate::lstsp::{lstsp_detect, LstspConfig};
use crate::tbss::{tbss_detect, TbssConfig};
use crate::types::{DetectionResult, TimeSeries};

/// Default critical value `L` of the success window.
pub const DEFAULT_CRITICAL: f64 = 5.0;
/// Default magnitude above which an estimated entry counts as nonzero.
pub const DEFAULT_SUPPORT_THRESHOLD: f64 = 0.1;

/// Success window `[lo, hi]` of the `j`-th (0-based) true change point.
pub fn success_window(truth: &[usize], j: usize, t_len: usize, critical: f64) -> (f64, f64) {
    let t = truth[j] as f64;
    let prev = if j == 0 { 0.0 } else { truth[j - 1] as f64 };
    let next = truth.get(j + 1).map_or(t_len as f64, |&v| v as f64);
    (t - (t - prev) / critical, t + (next - t) / critical)
}

/// Fraction of replicates with an estimate inside each true change point's
/// success window.
pub fn selection_rate(
    estimates: &[Vec<usize>],
    truth: &[usize],
    t_len: usize,
    critical: f64,
) -> Result<Vec<f64>> {
    if !(critical >= 2.0) {
        return Err(Error::config("critical value L must be at least 2"));
    }
    if estimates.is_empty() {
        return Err(Error::config("need at least one replicate"));
    }
    let n = estimates.len() as f64;
    Ok((0..truth.len())
        .map(|j| {
            let (lo, hi) = success_window(truth, j, t_len, critical);
            let hits = estimates
                .iter()
                .filter(|est| est.iter().any(|&e| (e as f64) >= lo && (e as f64) <= hi))
                .count();
            hits as f64 / n
        })
        .collect())
}

/// Hausdorff distance between two finite point sets.
///
/// Two empty sets are at distance 0. If exactly one side is empty the
/// distance is `+∞`.
pub fn hausdorff(a: &[usize], b: &[usize]) -> f64 {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => return f64::INFINITY,
        _ => {}
    }
    let directed = |x: &[usize], y: &[usize]| {
        x.iter()
            .map(|&u| y.iter().map(|&v| u.abs_diff(v)).min().unwrap_or(0))
            .max()
            .unwrap_or(0)
    };
    directed(a, b).max(directed(b, a)) as f64
}

/// Entry-wise confusion counts of support recovery.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn add(&mut self, other: Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }

    pub fn metrics(&self) -> SupportMetrics {
        let (tp, fp, tn, fn_) = (
            self.tp as f64,
            self.fp as f64,
            self.tn as f64,
            self.fn_ as f64,
        );
        let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
        // Zero marginals make MCC undefined; report 0.
        let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
        let mcc = if den > 0.0 {
            ((tp * tn - fp * fn_) / den.sqrt()).clamp(-1.0, 1.0)
        } else {
            0.0
        };
        SupportMetrics {
            sen: ratio(tp, tp + fn_),
            spc: ratio(tn, tn + fp),
            acc: ratio(tp + tn, tp + tn + fp + fn_),
            mcc,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SupportMetrics {
    pub sen: f64,
    pub spc: f64,
    pub acc: f64,
    pub mcc: f64,
}

/// Confusion of `|estimate| > threshold` against the exact nonzero pattern of
/// the truth, pooled over segments.
pub fn support_confusion(
    estimated: &[DMatrix<f64>],
    truth: &[DMatrix<f64>],
    threshold: f64,
) -> Result<Confusion> {
    if estimated.len() != truth.len() {
        return Err(Error::config(format!(
            "{} estimated segments against {} true ones",
            estimated.len(),
            truth.len()
        )));
    }
    let mut c = Confusion::default();
    for (e, t) in estimated.iter().zip(truth) {
        if e.shape() != t.shape() {
            return Err(Error::config(format!(
                "shape {:?} against {:?}",
                e.shape(),
                t.shape()
            )));
        }
        for (x, y) in e.iter().zip(t.iter()) {
            match (x.abs() > threshold, *y != 0.0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
    }
    Ok(c)
}

/// SEN, SPC, ACC and MCC of support recovery.
pub fn support_metrics(
    estimated: &[DMatrix<f64>],
    truth: &[DMatrix<f64>],
    threshold: f64,
) -> Result<SupportMetrics> {
    Ok(support_confusion(estimated, truth, threshold)?.metrics())
}

/// Widen `m` with zero columns to `cols`.
fn pad_columns(m: &DMatrix<f64>, cols: usize) -> DMatrix<f64> {
    if m.ncols() >= cols {
        return m.clone();
    }
    let mut out = DMatrix::zeros(m.nrows(), cols);
    out.columns_mut(0, m.ncols()).copy_from(m);
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Stats {
    pub mean: f64,
    /// Sample standard deviation (`n - 1` denominator); 0 for one value.
    pub std: f64,
    pub median: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                median: f64::NAN,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 1 {
            sorted[mid]
        } else {
            0.5 * (sorted[mid - 1] + sorted[mid])
        };
        Self { mean, std, median }
    }
}

/// Location statistics of one true change point.
#[derive(Clone, Debug, PartialEq)]
pub struct CpRow {
    /// Truth as a fraction of `T`.
    pub truth: f64,
    /// Mean and std of the matched estimate as a fraction of `T`, over
    /// replicates with the correct count.
    pub mean: f64,
    pub std: f64,
    pub selection_rate: f64,
}

/// Outcome of one replicate.
#[derive(Clone, Debug, PartialEq)]
pub struct Replicate {
    pub index: usize,
    pub seed: u64,
    pub change_points: Vec<usize>,
    pub hausdorff: f64,
    pub support: Option<SupportMetrics>,
    pub elapsed_seconds: f64,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulationSummary {
    pub t_len: usize,
    pub truth: Vec<usize>,
    pub critical: f64,
    pub rows: Vec<CpRow>,
    /// Over replicates with a finite distance.
    pub hausdorff: Stats,
    pub sen: Stats,
    pub spc: Stats,
    pub acc: Stats,
    pub mcc: Stats,
    /// Replicates whose change point count differs from the truth, that
    /// failed, or whose Hausdorff distance is infinite.
    pub failed: Vec<usize>,
    pub mean_runtime: f64,
    pub replicates: Vec<Replicate>,
}

/// Scoring options of [`run_replications`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub critical: f64,
    pub threshold: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            critical: DEFAULT_CRITICAL,
            threshold: DEFAULT_SUPPORT_THRESHOLD,
        }
    }
}

/// One of the two detectors with its settings.
#[derive(Clone, Debug)]
pub enum Detector {
    Tbss(TbssConfig),
    Lstsp(LstspConfig),
}

impl Detector {
    pub fn detect(&self, data: &TimeSeries) -> Result<DetectionResult> {
        match self {
            Detector::Tbss(c) => tbss_detect(data, c),
            Detector::Lstsp(c) => lstsp_detect(data, c),
        }
    }
}

/// Generate, detect and score `nreps` replicates of `spec`, replicate `i`
/// using seed `spec.seed + i`.
pub fn run_replications(
    nreps: usize,
    spec: &GenerationSpec,
    detector: &Detector,
    options: &EvalOptions,
) -> Result<SimulationSummary> {
    run_replications_with(nreps, spec, options, |data| detector.detect(data))
}

/// [`run_replications`] with an arbitrary detector.
pub fn run_replications_with<F>(
    nreps: usize,
    spec: &GenerationSpec,
    options: &EvalOptions,
    detect: F,
) -> Result<SimulationSummary>
where
    F: Fn(&TimeSeries) -> Result<DetectionResult> + Sync,
{
    if nreps == 0 {
        return Err(Error::config("need at least one replicate"));
    }
    if !(options.critical >= 2.0) {
        return Err(Error::config("critical value L must be at least 2"));
    }
    spec.validate()?;
    let truth: Vec<usize> = spec.break_points[..spec.break_points.len() - 1].to_vec();
    let t_len = spec.t_len;

    let replicates: Vec<Replicate> = (0..nreps)
        .into_par_iter()
        .map(|i| {
            let seed = spec.seed.wrapping_add(i as u64);
            let mut s = spec.clone();
            s.seed = seed;
            let start = Instant::now();
            let outcome = simulate(&s).and_then(|sim| {
                let res = detect(&sim.data)?;
                Ok((sim, res))
            });
            let elapsed = start.elapsed().as_secs_f64();
            match outcome {
                Ok((sim, res)) => {
                    let support = if res.change_points.len() == truth.len() {
                        let true_mats = sim.model.sparse_components();
                        let cols = true_mats
                            .iter()
                            .chain(&res.sparse_mats)
                            .map(|m| m.ncols())
                            .max()
                            .unwrap_or(0);
                        let est: Vec<_> = res.sparse_mats.iter().map(|m| pad_columns(m, cols)).collect();
                        let tru: Vec<_> = true_mats.iter().map(|m| pad_columns(m, cols)).collect();
                        support_metrics(&est, &tru, options.threshold).ok()
                    } else {
                        None
                    };
                    Replicate {
                        index: i,
                        seed,
                        hausdorff: hausdorff(&res.change_points, &truth),
                        change_points: res.change_points,
                        support,
                        elapsed_seconds: elapsed,
                        error: None,
                    }
                }
                Err(e) => {
                    warn!("replicate {i} (seed {seed}) failed: {e}");
                    Replicate {
                        index: i,
                        seed,
                        change_points: Vec::new(),
                        hausdorff: f64::INFINITY,
                        support: None,
                        elapsed_seconds: elapsed,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();

    summarize(replicates, truth, t_len, options.critical)
}

/// Reduce per-replicate outcomes to a [`SimulationSummary`].
pub fn summarize(
    replicates: Vec<Replicate>,
    truth: Vec<usize>,
    t_len: usize,
    critical: f64,
) -> Result<SimulationSummary> {
    let estimates: Vec<Vec<usize>> = replicates.iter().map(|r| r.change_points.clone()).collect();
    let rates = selection_rate(&estimates, &truth, t_len, critical)?;
    let failed: Vec<usize> = replicates
        .iter()
        .filter(|r| {
            r.error.is_some() || r.change_points.len() != truth.len() || !r.hausdorff.is_finite()
        })
        .map(|r| r.index)
        .collect();
    let matched: Vec<&Replicate> = replicates
        .iter()
        .filter(|r| r.error.is_none() && r.change_points.len() == truth.len())
        .collect();
    let rows = truth
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            let locs: Vec<f64> = matched
                .iter()
                .map(|r| r.change_points[j] as f64 / t_len as f64)
                .collect();
            let s = Stats::of(&locs);
            CpRow {
                truth: t as f64 / t_len as f64,
                mean: s.mean,
                std: s.std,
                selection_rate: rates[j],
            }
        })
        .collect();
    let dists: Vec<f64> = replicates
        .iter()
        .map(|r| r.hausdorff)
        .filter(|d| d.is_finite())
        .collect();
    let supports: Vec<SupportMetrics> = replicates.iter().filter_map(|r| r.support).collect();
    let pick = |f: fn(&SupportMetrics) -> f64| Stats::of(&supports.iter().map(f).collect::<Vec<_>>());
    let mean_runtime =
        replicates.iter().map(|r| r.elapsed_seconds).sum::<f64>() / replicates.len() as f64;
    Ok(SimulationSummary {
        t_len,
        truth,
        critical,
        rows,
        hausdorff: Stats::of(&dists),
        sen: pick(|m| m.sen),
        spc: pick(|m| m.spc),
        acc: pick(|m| m.acc),
        mcc: pick(|m| m.mcc),
        failed,
        mean_runtime,
        replicates,
    })
}

impl fmt::Display for SimulationSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rule = |f: &mut fmt::Formatter<'_>, title: &str| {
            let pad = 69usize.saturating_sub(title.len() + 2);
            let left = pad / 2;
            writeln!(f, "{} {} {}", "=".repeat(left), title, "=".repeat(pad - left))
        };
        rule(f, "Selection rate:")?;
        writeln!(f, "  {:>8} {:>8} {:>8} {:>15}", "Truth", "Mean", "Std", "Selection rate")?;
        for (j, r) in self.rows.iter().enumerate() {
            writeln!(
                f,
                "{} {:>8.5} {:>8.4} {:>8.4} {:>15.4}",
                j + 1,
                r.truth,
                r.mean,
                r.std,
                r.selection_rate
            )?;
        }
        rule(f, "Hausdorff distance:")?;
        writeln!(f, "  {:>8} {:>8} {:>8}", "Mean", "Std", "Median")?;
        writeln!(
            f,
            "1 {:>8.4} {:>8.4} {:>8.4}",
            self.hausdorff.mean, self.hausdorff.std, self.hausdorff.median
        )?;
        rule(f, "Statistical measurement:")?;
        writeln!(f, "     {:>8} {:>8} {:>8} {:>8}", "SEN", "SPC", "ACC", "MCC")?;
        writeln!(
            f,
            "Mean {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            self.sen.mean, self.spc.mean, self.acc.mean, self.mcc.mean
        )?;
        writeln!(
            f,
            "Std  {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            self.sen.std, self.spc.std, self.acc.std, self.mcc.std
        )?;
        if self.failed.is_empty() {
            writeln!(f, "Incorrect estimation replication: none")?;
        } else {
            let ids: Vec<String> = self.failed.iter().map(|i| (i + 1).to_string()).collect();
            writeln!(f, "Incorrect estimation replication: {}", ids.join(" "))?;
        }
        rule(f, "Computational time:")?;
        writeln!(f, "Averaged running time: {:.3} seconds", self.mean_runtime)?;
        writeln!(f, "{}", "=".repeat(69))
    }
}

/// Residuals `y_t - Σ_l Φ^(l) y_{t-l}` of a `p × pd` stacked transition
/// over local times `d+1..=n` of `segment` (rows are times). Column `k` of
/// the output is the residual at local time `d + 1 + k`.
pub fn segment_residuals(segment: &DMatrix<f64>, phi: &DMatrix<f64>, d: usize) -> DMatrix<f64> {
    let (n, p) = segment.shape();
    let count = n.saturating_sub(d);
    let mut out = DMatrix::zeros(p, count);
    for k in 0..count {
        let t = d + k;
        let mut r = segment.row(t).transpose();
        for l in 1..=d {
            let lag = phi.columns((l - 1) * p, p);
            r -= lag * segment.row(t - l).transpose();
        }
        out.set_column(k, &r);
    }
    out
}

/// `Σ_j [log det Σ̂_j + d_j log N_j / N_j]` over the segments of `result`,
/// where `N_j` is the segment length, `Σ̂_j` the residual covariance with
/// denominator `N_j - d` and `d_j` the count of nonzero coefficients.
pub fn segment_bic(data: &TimeSeries, result: &DetectionResult, d: usize) -> Result<f64> {
    let p = data.dim();
    let mut bounds = vec![1];
    bounds.extend(&result.change_points);
    bounds.push(data.len() + 1);
    let mut total = 0.0;
    for j in 0..bounds.len() - 1 {
        let (a, b) = (bounds[j], bounds[j + 1]);
        let n = b - a;
        if n < d + p {
            return Err(Error::SegmentTooShort {
                segment: j,
                len: n,
                need: d + p,
            });
        }
        let phi = pad_columns(&result.transition(j), p * d);
        if phi.ncols() != p * d {
            return Err(Error::config(format!(
                "segment {j} has {} lag columns, expected {}",
                phi.ncols(),
                p * d
            )));
        }
        let seg = data.values().rows(a - 1, n).into_owned();
        let res = segment_residuals(&seg, &phi, d);
        let sigma = &res * res.transpose() / (n - d) as f64;
        let det = sigma.determinant();
        if !(det > 0.0) {
            return Err(Error::numeric(format!("singular residual covariance in segment {j}")));
        }
        let nonzero = phi.iter().filter(|v| **v != 0.0).count() as f64;
        total += det.ln() + nonzero * (n as f64).ln() / n as f64;
    }
    Ok(total)
}

/// Chosen lag and the BIC of every candidate lag (`None` when skipped).
#[derive(Clone, Debug, PartialEq)]
pub struct LagSelection {
    pub lag: usize,
    pub bic: Vec<Option<f64>>,
}

/// Detect with each lag `1..=max_lag` and keep the lag of smallest total BIC.
pub fn bic_lag_select_with<F>(data: &TimeSeries, max_lag: usize, detect: F) -> Result<LagSelection>
where
    F: Fn(&TimeSeries, usize) -> Result<DetectionResult> + Sync,
{
    if !(1..=8).contains(&max_lag) {
        return Err(Error::config("max lag must lie in [1, 8]"));
    }
    let bic: Vec<Option<f64>> = (1..=max_lag)
        .into_par_iter()
        .map(|d| match detect(data, d).and_then(|r| segment_bic(data, &r, d)) {
            Ok(v) => Some(v),
            Err(e) => {
                warn!("lag {d} skipped: {e}");
                None
            }
        })
        .collect();
    let lag = bic
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|v| (i + 1, v)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(d, _)| d)
        .ok_or_else(|| Error::numeric("no lag could be scored"))?;
    Ok(LagSelection { lag, bic })
}

/// [`bic_lag_select_with`] using TBSS with refitting at each lag.
pub fn bic_lag_select(data: &TimeSeries, max_lag: usize, config: &TbssConfig) -> Result<LagSelection> {
    bic_lag_select_with(data, max_lag, |x, d| {
        let mut c = config.clone();
        c.lag = d;
        c.refit = true;
        tbss_detect(x, &c)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::Method;
    use crate::types::stack_lag_rows;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn selection_rate_windows() {
        let truth = [1333, 2666];
        let r = selection_rate(&[vec![1333, 2666]], &truth, 4000, 5.0).unwrap();
        assert_eq!(r, vec![1.0, 1.0]);
        // Window of 1333 is [1066.4, 1599.6].
        let r = selection_rate(&[vec![1066], vec![1067], vec![1600]], &truth, 4000, 5.0).unwrap();
        assert!((r[0] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(r[1], 0.0);
        assert!(selection_rate(&[vec![]], &truth, 4000, 1.5).is_err());
    }

    #[test]
    fn hausdorff_examples() {
        assert_eq!(hausdorff(&[3, 9], &[3, 9]), 0.0);
        assert_eq!(hausdorff(&[1], &[5]), 4.0);
        assert_eq!(hausdorff(&[1, 10], &[4, 8, 20]), 10.0);
        assert_eq!(hausdorff(&[], &[4]), f64::INFINITY);
        assert_eq!(hausdorff(&[], &[]), 0.0);
    }

    fn brute_hausdorff(a: &[usize], b: &[usize]) -> f64 {
        let mut best = 0.0f64;
        for &x in a {
            let mut m = f64::INFINITY;
            for &y in b {
                m = m.min((x as f64 - y as f64).abs());
            }
            best = best.max(m);
        }
        for &y in b {
            let mut m = f64::INFINITY;
            for &x in a {
                m = m.min((x as f64 - y as f64).abs());
            }
            best = best.max(m);
        }
        best
    }

    #[test]
    fn support_metric_limits() {
        let truth = vec![DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.5])];
        let m = support_metrics(&truth, &truth, 0.1).unwrap();
        assert_eq!((m.sen, m.spc, m.acc, m.mcc), (1.0, 1.0, 1.0, 1.0));
        let zero = vec![DMatrix::zeros(2, 2)];
        let m = support_metrics(&zero, &truth, 0.1).unwrap();
        assert_eq!((m.sen, m.spc), (0.0, 1.0));
        assert_eq!(m.mcc, 0.0);
        assert!(support_metrics(&zero, &[DMatrix::zeros(2, 3)], 0.1).is_err());
    }

    #[test]
    fn mcc_matches_hand_computation() {
        let c = Confusion { tp: 6, fp: 2, tn: 10, fn_: 1 };
        let m = c.metrics();
        let expected = (6.0 * 10.0 - 2.0 * 1.0) / ((8.0 * 7.0 * 12.0 * 11.0) as f64).sqrt();
        assert!((m.mcc - expected).abs() < 1e-15);
        assert!((m.acc - 16.0 / 19.0).abs() < 1e-15);
    }

    #[test]
    fn stats_use_sample_std() {
        let s = Stats::of(&[1.0, 2.0, 3.0, 10.0]);
        assert_eq!(s.mean, 4.0);
        assert_eq!(s.median, 2.5);
        assert!((s.std - (50.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(Stats::of(&[7.0]).std, 0.0);
    }

    fn strong_spec() -> GenerationSpec {
        let mut s = GenerationSpec::new(Method::Sparse, 400, 3, 1, vec![201, 401], vec![-0.8, 0.8]);
        s.seed = 3;
        s
    }

    #[test]
    fn stub_detector_returning_truth_is_perfect() {
        let spec = strong_spec();
        let summary = run_replications_with(3, &spec, &EvalOptions::default(), |data| {
            let model = crate::datagen::build_model(&spec)?;
            let _ = data;
            Ok(DetectionResult {
                change_points: vec![201],
                sparse_mats: model.sparse_components(),
                lowrank_mats: None,
                lag: 1,
                elapsed_seconds: 0.0,
            })
        })
        .unwrap();
        assert!(summary.failed.is_empty());
        assert_eq!(summary.rows[0].selection_rate, 1.0);
        assert_eq!(summary.rows[0].std, 0.0);
        assert_eq!(summary.hausdorff.mean, 0.0);
        assert_eq!((summary.sen.mean, summary.spc.mean, summary.mcc.mean), (1.0, 1.0, 1.0));
        assert_eq!(summary.replicates.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![3, 4, 5]);
    }

    #[test]
    fn single_replicate_equals_single_run() {
        let spec = strong_spec();
        let det = Detector::Tbss(TbssConfig::new(crate::types::PenaltyKind::Sparse, 1));
        let summary = run_replications(1, &spec, &det, &EvalOptions::default()).unwrap();
        let sim = simulate(&spec).unwrap();
        let res = det.detect(&sim.data).unwrap();
        assert_eq!(summary.replicates[0].change_points, res.change_points);
        assert_eq!(summary.hausdorff.mean, hausdorff(&res.change_points, &[201]));
        let rate = selection_rate(&[res.change_points.clone()], &[201], 400, 5.0).unwrap();
        assert_eq!(summary.rows[0].selection_rate, rate[0]);
    }

    #[test]
    fn failures_are_recorded() {
        let spec = strong_spec();
        let summary = run_replications_with(2, &spec, &EvalOptions::default(), |_| {
            Err(Error::config("boom"))
        })
        .unwrap();
        assert_eq!(summary.failed, vec![0, 1]);
        assert!(summary.replicates.iter().all(|r| r.error.is_some()));
        assert_eq!(summary.rows[0].selection_rate, 0.0);
    }

    #[test]
    fn residuals_match_direct_predictor() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (n, p, d) = (12, 3, 2);
        let seg = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
        let phi = DMatrix::from_fn(p, p * d, |_, _| rng.random_range(-1.0..1.0));
        let r = segment_residuals(&seg, &phi, d);
        assert_eq!(r.ncols(), n - d);
        for k in 0..n - d {
            let t = k + d;
            for i in 0..p {
                let mut pred = 0.0;
                for l in 1..=d {
                    for c in 0..p {
                        pred += phi[(i, (l - 1) * p + c)] * seg[(t - l, c)];
                    }
                }
                assert!((r[(i, k)] - (seg[(t, i)] - pred)).abs() < 1e-14);
            }
        }
    }

    /// Ordinary least squares VAR(d) fit without change points.
    fn ols_result(data: &TimeSeries, d: usize) -> Result<DetectionResult> {
        let design = stack_lag_rows(data, d)?;
        let (x, y) = (&design.design, &design.response);
        let b = (x.transpose() * x)
            .try_inverse()
            .ok_or_else(|| Error::numeric("singular"))?
            * x.transpose()
            * y;
        Ok(DetectionResult {
            change_points: vec![],
            sparse_mats: vec![b.transpose()],
            lowrank_mats: None,
            lag: d,
            elapsed_seconds: 0.0,
        })
    }

    #[test]
    fn white_noise_prefers_lag_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vals = DMatrix::from_fn(300, 4, |_, _| rng.random_range(-1.0..1.0));
        let data = TimeSeries::new(vals).unwrap();
        let sel = bic_lag_select_with(&data, 3, ols_result).unwrap();
        assert_eq!(sel.lag, 1);
        // Independent recomputation of the lag-2 value.
        let r = ols_result(&data, 2).unwrap();
        let seg = data.values().clone();
        let res = segment_residuals(&seg, &r.sparse_mats[0], 2);
        let sigma = &res * res.transpose() / 298.0;
        let direct = sigma.determinant().ln() + 32.0 * 300f64.ln() / 300.0;
        assert!((sel.bic[1].unwrap() - direct).abs() < 1e-10);
        assert_eq!(bic_lag_select_with(&data, 1, ols_result).unwrap().lag, 1);
    }

    #[test]
    fn short_segment_skips_lag() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vals = DMatrix::from_fn(60, 4, |_, _| rng.random_range(-1.0..1.0));
        let data = TimeSeries::new(vals).unwrap();
        let sel = bic_lag_select_with(&data, 2, |x, d| {
            let mut r = ols_result(x, d)?;
            if d == 2 {
                r.change_points = vec![4];
                r.sparse_mats = vec![r.sparse_mats[0].clone(); 2];
            }
            Ok(r)
        })
        .unwrap();
        assert_eq!(sel.bic[1], None);
        assert_eq!(sel.lag, 1);
    }

    fn point_set() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::btree_set(0usize..200, 1..8).prop_map(|s| s.into_iter().collect())
    }

    proptest! {
        #[test]
        fn hausdorff_is_a_metric(a in point_set(), b in point_set(), c in point_set()) {
            let ab = hausdorff(&a, &b);
            prop_assert_eq!(ab, hausdorff(&b, &a));
            prop_assert_eq!(ab, brute_hausdorff(&a, &b));
            prop_assert_eq!(ab == 0.0, a == b);
            prop_assert!(ab <= hausdorff(&a, &c) + hausdorff(&c, &b));
        }

        #[test]
        fn selection_rate_ignores_order(
            reps in prop::collection::vec(prop::collection::vec(1usize..1000, 0..5), 1..6),
            shift in 0usize..6,
        ) {
            let truth = [300, 700];
            let base = selection_rate(&reps, &truth, 1000, 5.0).unwrap();
            let mut shuffled: Vec<Vec<usize>> = reps.iter().map(|r| r.iter().rev().cloned().collect()).collect();
            let k = shift % shuffled.len();
            shuffled.rotate_left(k);
            prop_assert_eq!(base, selection_rate(&shuffled, &truth, 1000, 5.0).unwrap());
        }

        #[test]
        fn mcc_is_bounded(tp in 0usize..50, fp in 0usize..50, tn in 0usize..50, fn_ in 0usize..50) {
            let m = Confusion { tp, fp, tn, fn_ }.metrics();
            prop_assert!((-1.0..=1.0).contains(&m.mcc));
            for v in [m.sen, m.spc, m.acc] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
