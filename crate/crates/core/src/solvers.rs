// SPDX-License-Identifier: MIT OR Apache-2.0

//! Proximal operators and an accelerated proximal-gradient solver.
//!
//! The solver is the monotone variant of FISTA with backtracking on the step
//! size. Parameters are dense matrices; the smooth part and the penalty are
//! supplied through the [`Smooth`] and [`Penalty`] traits.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// `sign(x) max(|x| - lam, 0)`.
#[inline]
pub fn soft(x: f64, lam: f64) -> f64 {
    if x > lam {
        x - lam
    } else if x < -lam {
        x + lam
    } else {
        0.0
    }
}

/// Elementwise soft-thresholding.
pub fn soft_threshold(x: &DMatrix<f64>, lam: f64) -> DMatrix<f64> {
    x.map(|v| soft(v, lam))
}

/// Block soft-thresholding `v max(0, 1 - lam / ‖v‖₂)`.
pub fn group_soft_threshold(v: &DVector<f64>, lam: f64) -> DVector<f64> {
    let mut out = v.clone();
    shrink_group(out.as_mut_slice(), lam);
    out
}

/// In-place block soft-thresholding of a slice.
pub fn shrink_group(v: &mut [f64], lam: f64) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = if norm > lam { 1.0 - lam / norm } else { 0.0 };
    v.iter_mut().for_each(|x| *x *= scale);
}

/// Prox of `mu ‖·‖_*`: shrinks every singular value by `mu`.
pub fn singular_value_threshold(m: &DMatrix<f64>, mu: f64) -> Result<DMatrix<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("singular value threshold of a non-finite matrix"));
    }
    if m.is_empty() {
        return Ok(m.clone());
    }
    let svd = m
        .clone()
        .try_svd(true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::numeric("SVD did not converge"))?;
    let u = svd.u.as_ref().expect("requested U");
    let vt = svd.v_t.as_ref().expect("requested Vᵀ");
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for (i, s) in svd.singular_values.iter().enumerate() {
        let s = s - mu;
        if s > 0.0 {
            out += u.column(i) * vt.row(i) * s;
        }
    }
    Ok(out)
}

/// Sum of singular values.
pub fn nuclear_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().sum()
}

/// Exact prox of `lam Σ_{i≥2} |w_i - w_{i-1}|` (1-D total variation).
///
/// Direct non-iterative taut-string scan, linear in practice.
pub fn fused_chain_prox(z: &[f64], lam: f64) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    fused_chain_prox_into(z, lam, &mut out);
    out
}

/// [`fused_chain_prox`] writing into a caller-provided buffer.
pub fn fused_chain_prox_into(input: &[f64], lambda: f64, output: &mut [f64]) {
    let width = input.len();
    if width == 0 {
        return;
    }
    if lambda <= 0.0 || width == 1 {
        output.copy_from_slice(input);
        return;
    }
    let (mut k, mut k0, mut kplus, mut kminus) = (0usize, 0usize, 0usize, 0usize);
    let mut umin = lambda;
    let mut umax = -lambda;
    let mut vmin = input[0] - lambda;
    let mut vmax = input[0] + lambda;
    let twolambda = 2.0 * lambda;
    let minlambda = -lambda;
    loop {
        while k == width - 1 {
            if umin < 0.0 {
                loop {
                    output[k0] = vmin;
                    k0 += 1;
                    if k0 > kminus {
                        break;
                    }
                }
                kminus = k0;
                k = k0;
                vmin = input[k0];
                umin = lambda;
                umax = vmin + umin - vmax;
            } else if umax > 0.0 {
                loop {
                    output[k0] = vmax;
                    k0 += 1;
                    if k0 > kplus {
                        break;
                    }
                }
                kplus = k0;
                k = k0;
                vmax = input[k0];
                umax = minlambda;
                umin = vmax + umax - vmin;
            } else {
                vmin += umin / (k - k0 + 1) as f64;
                loop {
                    output[k0] = vmin;
                    k0 += 1;
                    if k0 > k {
                        break;
                    }
                }
                return;
            }
        }
        umin += input[k + 1] - vmin;
        if umin < minlambda {
            loop {
                output[k0] = vmin;
                k0 += 1;
                if k0 > kminus {
                    break;
                }
            }
            kplus = k0;
            kminus = k0;
            k = k0;
            vmin = input[k0];
            vmax = vmin + twolambda;
            umin = lambda;
            umax = minlambda;
            continue;
        }
        umax += input[k + 1] - vmax;
        if umax > lambda {
            loop {
                output[k0] = vmax;
                k0 += 1;
                if k0 > kplus {
                    break;
                }
            }
            kplus = k0;
            kminus = k0;
            k = k0;
            vmax = input[k0];
            vmin = vmax - twolambda;
            umin = lambda;
            umax = minlambda;
            continue;
        }
        k += 1;
        if umin >= lambda {
            kminus = k;
            vmin += (umin - lambda) / (kminus - k0 + 1) as f64;
            umin = lambda;
        }
        if umax <= minlambda {
            kplus = k;
            vmax += (umax + lambda) / (kplus - k0 + 1) as f64;
            umax = minlambda;
        }
    }
}

/// Prox of `lam1 ‖w‖₁ + lam2 TV(w)`: total-variation prox then soft-threshold.
pub fn sparse_fused_prox(z: &[f64], lam1: f64, lam2: f64) -> Vec<f64> {
    let mut w = fused_chain_prox(z, lam2);
    w.iter_mut().for_each(|v| *v = soft(*v, lam1));
    w
}

/// Differentiable part of a composite objective.
pub trait Smooth {
    fn value(&self, x: &DMatrix<f64>) -> f64;
    fn gradient(&self, x: &DMatrix<f64>) -> DMatrix<f64>;
}

/// Non-smooth part with a computable proximal map.
pub trait Penalty {
    fn value(&self, x: &DMatrix<f64>) -> f64;
    /// `argmin_w ½‖w - x‖² + step · g(w)`.
    fn prox(&self, x: &DMatrix<f64>, step: f64) -> Result<DMatrix<f64>>;
}

/// No penalty.
pub struct Zero;

impl Penalty for Zero {
    fn value(&self, _: &DMatrix<f64>) -> f64 {
        0.0
    }
    fn prox(&self, x: &DMatrix<f64>, _: f64) -> Result<DMatrix<f64>> {
        Ok(x.clone())
    }
}

/// `lam ‖x‖₁`.
pub struct L1(pub f64);

impl Penalty for L1 {
    fn value(&self, x: &DMatrix<f64>) -> f64 {
        self.0 * x.iter().map(|v| v.abs()).sum::<f64>()
    }
    fn prox(&self, x: &DMatrix<f64>, step: f64) -> Result<DMatrix<f64>> {
        Ok(soft_threshold(x, step * self.0))
    }
}

/// `lam Σ_g ‖x_g‖₂` over groups of column-major indices, applied in order.
pub struct GroupL2<'a> {
    pub lam: f64,
    pub groups: &'a [Vec<usize>],
}

impl Penalty for GroupL2<'_> {
    fn value(&self, x: &DMatrix<f64>) -> f64 {
        let s = x.as_slice();
        self.lam
            * self
                .groups
                .iter()
                .map(|g| g.iter().map(|&i| s[i] * s[i]).sum::<f64>().sqrt())
                .sum::<f64>()
    }
    fn prox(&self, x: &DMatrix<f64>, step: f64) -> Result<DMatrix<f64>> {
        let mut out = x.clone();
        apply_groups(out.as_mut_slice(), self.groups, step * self.lam);
        Ok(out)
    }
}

/// Block soft-thresholds each group of `x` in turn.
pub fn apply_groups(x: &mut [f64], groups: &[Vec<usize>], lam: f64) {
    let mut buf = Vec::new();
    for g in groups {
        buf.clear();
        buf.extend(g.iter().map(|&i| x[i]));
        shrink_group(&mut buf, lam);
        for (&i, v) in g.iter().zip(&buf) {
            x[i] = *v;
        }
    }
}

/// Step-size policy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepRule {
    Fixed(f64),
    Backtracking { initial: f64, shrink: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FistaOptions {
    pub step: StepRule,
    pub tol: f64,
    pub max_iter: usize,
}

impl FistaOptions {
    pub fn with_tol(tol: f64, max_iter: usize) -> Self {
        Self {
            step: StepRule::Backtracking {
                initial: 1.0,
                shrink: 0.5,
            },
            tol,
            max_iter,
        }
    }

    /// Same options with a different initial step.
    pub fn starting_at(mut self, step: f64) -> Self {
        if let StepRule::Backtracking { initial, .. } = &mut self.step {
            *initial = step;
        }
        self
    }
}

impl Default for FistaOptions {
    fn default() -> Self {
        Self::with_tol(1e-4, 1000)
    }
}

#[derive(Clone, Debug)]
pub struct FistaOutput {
    pub x: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each iteration, starting with the initial point.
    pub objective: Vec<f64>,
    /// Final step size.
    pub step: f64,
}

/// Monotone FISTA.
///
/// Stops once `‖z_k - x_{k-1}‖_F ≤ tol · ‖x_{k-1}‖_F` where `z_k` is the
/// proximal-gradient point of iteration `k`, or after `max_iter` iterations.
pub fn fista<F: Smooth, P: Penalty>(
    smooth: &F,
    penalty: &P,
    x0: DMatrix<f64>,
    opts: &FistaOptions,
) -> Result<FistaOutput> {
    if !(opts.tol > 0.0) || opts.max_iter == 0 {
        return Err(Error::config("fista needs tol > 0 and max_iter >= 1"));
    }
    let (mut step, shrink) = match opts.step {
        StepRule::Fixed(s) => (s, None),
        StepRule::Backtracking { initial, shrink } => (initial, Some(shrink)),
    };
    if !(step > 0.0) || shrink.is_some_and(|s| !(s > 0.0 && s < 1.0)) {
        return Err(Error::config("invalid step rule"));
    }
    let mut x = x0;
    let mut obj = smooth.value(&x) + penalty.value(&x);
    let mut history = vec![obj];
    let mut y = x.clone();
    let mut f_y = smooth.value(&y);
    let mut t = 1.0f64;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let grad = smooth.gradient(&y);
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite gradient at iteration {iterations}"
            )));
        }
        let (z, f_z) = loop {
            let z = penalty.prox(&(&y - &grad * step), step)?;
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged { iterations });
            }
            let f_z = smooth.value(&z);
            let Some(shrink) = shrink else { break (z, f_z) };
            let d = &z - &y;
            let model = f_y + grad.dot(&d) + d.norm_squared() / (2.0 * step);
            if f_z <= model + 1e-12 * f_y.abs().max(1.0) {
                break (z, f_z);
            }
            step *= shrink;
            if step < 1e-300 {
                return Err(Error::Diverged { iterations });
            }
        };
        let obj_z = f_z + penalty.value(&z);
        if !obj_z.is_finite() {
            return Err(Error::Diverged { iterations });
        }
        let change = (&z - &x).norm();
        let scale = x.norm();
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let x_prev = x;
        let x_new;
        if obj_z <= obj {
            x_new = z.clone();
            obj = obj_z;
        } else {
            x_new = x_prev.clone();
        }
        y = &x_new + (&z - &x_new) * (t / t_next) + (&x_new - &x_prev) * ((t - 1.0) / t_next);
        f_y = smooth.value(&y);
        t = t_next;
        x = x_new;
        history.push(obj);
        if change <= opts.tol * scale || change == 0.0 {
            converged = true;
            break;
        }
    }
    Ok(FistaOutput {
        x,
        iterations,
        converged,
        objective: history,
        step,
    })
}

/// `(1/N) ‖Y - X B‖_F²` through sufficient statistics.
#[derive(Clone, Debug)]
pub struct LeastSquares {
    pub gram: DMatrix<f64>,
    pub cross: DMatrix<f64>,
    pub yty: f64,
    pub n: f64,
}

impl LeastSquares {
    pub fn new(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Self {
        Self {
            gram: x.tr_mul(x),
            cross: x.tr_mul(y),
            yty: y.norm_squared(),
            n: x.nrows().max(1) as f64,
        }
    }

    /// Same statistics with a different normalizing count.
    pub fn with_count(mut self, n: f64) -> Self {
        self.n = n;
        self
    }

    /// Residual sum of squares `‖Y - X B‖²`.
    pub fn sse(&self, b: &DMatrix<f64>) -> f64 {
        let gb = &self.gram * b;
        (self.yty - 2.0 * b.dot(&self.cross) + b.dot(&gb)).max(0.0)
    }

    /// Step `1/L` from the largest Gram eigenvalue (power iteration).
    pub fn lipschitz_step(&self) -> f64 {
        let l = 2.0 * max_eigenvalue(&self.gram) / self.n;
        if l > 0.0 {
            1.0 / l
        } else {
            1.0
        }
    }
}

impl Smooth for LeastSquares {
    fn value(&self, b: &DMatrix<f64>) -> f64 {
        self.sse(b) / self.n
    }
    fn gradient(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        (&self.gram * b - &self.cross) * (2.0 / self.n)
    }
}

/// Largest eigenvalue of a symmetric positive semidefinite matrix.
pub fn max_eigenvalue(g: &DMatrix<f64>) -> f64 {
    let d = g.nrows();
    if d == 0 {
        return 0.0;
    }
    let mut v = DVector::from_fn(d, |i, _| 1.0 + (i as f64) * 1e-3);
    v /= v.norm();
    let mut lam = 0.0;
    for _ in 0..200 {
        let w = g * &v;
        let n = w.norm();
        if n == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w);
        v = w / n;
        if (next - lam).abs() <= 1e-10 * next.abs() {
            lam = next;
            break;
        }
        lam = next;
    }
    // power iteration under-estimates; a small margin keeps 1/L safe
    lam * 1.01
}

/// Minimizer of `(1/N) ‖Y - X B‖² + lam ‖B‖₁`.
pub fn lasso_regression(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    lam: f64,
    opts: &FistaOptions,
) -> Result<DMatrix<f64>> {
    let ls = LeastSquares::new(x, y);
    lasso_from_stats(&ls, lam, None, opts)
}

/// Lasso on precomputed statistics, optionally warm-started.
pub fn lasso_from_stats(
    ls: &LeastSquares,
    lam: f64,
    warm: Option<&DMatrix<f64>>,
    opts: &FistaOptions,
) -> Result<DMatrix<f64>> {
    check_dims(ls)?;
    if !(lam >= 0.0) {
        return Err(Error::config("lasso weight must be non-negative"));
    }
    let x0 = warm
        .cloned()
        .unwrap_or_else(|| DMatrix::zeros(ls.gram.nrows(), ls.cross.ncols()));
    Ok(fista(ls, &L1(lam), x0, opts)?.x)
}

fn check_dims(ls: &LeastSquares) -> Result<()> {
    if ls.gram.nrows() != ls.cross.nrows() {
        return Err(Error::config("design and response are not conformable"));
    }
    Ok(())
}

/// `[L; S]` stacked vertically in regression orientation.
struct StackedLs<'a>(&'a LeastSquares);

impl StackedLs<'_> {
    fn sum(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let d = self.0.gram.nrows();
        x.rows(0, d) + x.rows(d, d)
    }
}

impl Smooth for StackedLs<'_> {
    fn value(&self, x: &DMatrix<f64>) -> f64 {
        self.0.value(&self.sum(x))
    }
    fn gradient(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let g = self.0.gradient(&self.sum(x));
        let d = g.nrows();
        let mut out = DMatrix::zeros(2 * d, g.ncols());
        out.rows_mut(0, d).copy_from(&g);
        out.rows_mut(d, d).copy_from(&g);
        out
    }
}

struct NuclearPlusL1 {
    lam: f64,
    mu: f64,
    d: usize,
}

impl Penalty for NuclearPlusL1 {
    fn value(&self, x: &DMatrix<f64>) -> f64 {
        let l = x.rows(0, self.d).into_owned();
        let s = x.rows(self.d, self.d);
        self.mu * nuclear_norm(&l) + self.lam * s.iter().map(|v| v.abs()).sum::<f64>()
    }
    fn prox(&self, x: &DMatrix<f64>, step: f64) -> Result<DMatrix<f64>> {
        let l = singular_value_threshold(&x.rows(0, self.d).into_owned(), step * self.mu)?;
        let s = soft_threshold(&x.rows(self.d, self.d).into_owned(), step * self.lam);
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        out.rows_mut(0, self.d).copy_from(&l);
        out.rows_mut(self.d, self.d).copy_from(&s);
        Ok(out)
    }
}

/// Low-rank plus sparse fit of a lag-1 regression.
#[derive(Clone, Debug)]
pub struct LowRankSparseFit {
    /// Low-rank part, transition orientation (`p × p`).
    pub lowrank: DMatrix<f64>,
    /// Sparse part, transition orientation.
    pub sparse: DMatrix<f64>,
    /// `(1/N)‖Y - X(L + S)ᵀ‖²`.
    pub loss: f64,
    /// Residual sum of squares.
    pub sse: f64,
}

impl LowRankSparseFit {
    /// Penalized objective with the given weights.
    pub fn objective(&self, lam: f64, mu: f64) -> f64 {
        self.loss + lam * self.sparse.iter().map(|v| v.abs()).sum::<f64>() + mu * nuclear_norm(&self.lowrank)
    }
}

/// Minimizer of `(1/N) Σ ‖x_t - (L + S) x_{t-1}‖² + lam ‖S‖₁ + mu ‖L‖_*`.
///
/// `x` holds the lagged rows and `y` the responses; `L` and `S` are updated
/// jointly by one FISTA loop with a shared gradient.
pub fn lowrank_sparse_regression(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    lam: f64,
    mu: f64,
    opts: &FistaOptions,
) -> Result<LowRankSparseFit> {
    let ls = LeastSquares::new(x, y);
    lowrank_sparse_from_stats(&ls, lam, mu, opts)
}

/// [`lowrank_sparse_regression`] on precomputed statistics.
pub fn lowrank_sparse_from_stats(
    ls: &LeastSquares,
    lam: f64,
    mu: f64,
    opts: &FistaOptions,
) -> Result<LowRankSparseFit> {
    check_dims(ls)?;
    if !(lam >= 0.0 && mu >= 0.0) {
        return Err(Error::config("penalty weights must be non-negative"));
    }
    let d = ls.gram.nrows();
    let m = ls.cross.ncols();
    let stacked = StackedLs(ls);
    let pen = NuclearPlusL1 { lam, mu, d };
    let opts = opts.starting_at(0.5 * ls.lipschitz_step());
    let out = fista(&stacked, &pen, DMatrix::zeros(2 * d, m), &opts)?;
    let l = out.x.rows(0, d).into_owned();
    let s = out.x.rows(d, d).into_owned();
    let sse = ls.sse(&(&l + &s));
    Ok(LowRankSparseFit {
        lowrank: l.transpose(),
        sparse: s.transpose(),
        loss: sse / ls.n,
        sse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_matrix(r: &mut ChaCha8Rng, n: usize, m: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, m, |_, _| r.random_range(-1.0..1.0))
    }

    /// Dual coordinate descent for `½‖w - z‖² + Σ_i c_i |a_i·w|` with rows
    /// `a_i` given sparsely. Returns the primal point.
    fn dual_cd(z: &[f64], rows: &[(Vec<(usize, f64)>, f64)], sweeps: usize) -> Vec<f64> {
        let mut u = vec![0.0; rows.len()];
        let mut w = z.to_vec();
        for _ in 0..sweeps {
            for (k, (row, c)) in rows.iter().enumerate() {
                let nrm: f64 = row.iter().map(|(_, a)| a * a).sum();
                let aw: f64 = row.iter().map(|(i, a)| a * w[*i]).sum();
                let new = (u[k] + aw / nrm).clamp(-c, *c);
                let delta = new - u[k];
                if delta != 0.0 {
                    for (i, a) in row {
                        w[*i] -= a * delta;
                    }
                    u[k] = new;
                }
            }
        }
        w
    }

    fn tv_rows(k: usize, lam: f64) -> Vec<(Vec<(usize, f64)>, f64)> {
        (1..k).map(|i| (vec![(i - 1, -1.0), (i, 1.0)], lam)).collect()
    }

    fn tv(w: &[f64]) -> f64 {
        w.windows(2).map(|p| (p[1] - p[0]).abs()).sum()
    }

    #[test]
    fn soft_threshold_examples() {
        assert!((soft(1.0, 0.4) - 0.6).abs() < 1e-15);
        assert_eq!(soft(-0.3, 0.4), 0.0);
        let m = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 0.5, 0.0]);
        assert_eq!(soft_threshold(&m, 0.0), m);
    }

    #[test]
    fn group_soft_threshold_examples() {
        let v = DVector::from_vec(vec![3.0, 4.0]);
        assert_eq!(group_soft_threshold(&v, 5.0), DVector::zeros(2));
        let h = group_soft_threshold(&v, 2.5);
        assert!((h[0] - 1.5).abs() < 1e-15 && (h[1] - 2.0).abs() < 1e-15);
        assert_eq!(group_soft_threshold(&v, 0.0), v);
        assert_eq!(group_soft_threshold(&DVector::zeros(3), 1.0), DVector::zeros(3));
    }

    #[test]
    fn svt_examples() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0]));
        let out = singular_value_threshold(&m, 1.0).unwrap();
        let expect = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.0]));
        assert!((out - expect).norm() < 1e-12);
        let mut r = rng(1);
        let a = random_matrix(&mut r, 4, 4);
        assert!((singular_value_threshold(&a, 0.0).unwrap() - &a).norm() < 1e-10);
        let bad = DMatrix::from_element(2, 2, f64::NAN);
        assert!(singular_value_threshold(&bad, 0.1).is_err());
    }

    #[test]
    fn svt_matches_per_sigma_minimizer() {
        let mut r = rng(7);
        let m = random_matrix(&mut r, 5, 5);
        let mu = 0.7;
        let svd = m.clone().svd(true, true);
        // minimize ½(s - σ)² + mu s over s ≥ 0 by bisection on the derivative
        let shrunk: Vec<f64> = svd
            .singular_values
            .iter()
            .map(|&sig| {
                let (mut lo, mut hi) = (0.0f64, sig + 1.0);
                let df = |s: f64| s - sig + mu;
                if df(0.0) >= 0.0 {
                    return 0.0;
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if df(mid) > 0.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                (lo + hi) / 2.0
            })
            .collect();
        let u = svd.u.unwrap();
        let vt = svd.v_t.unwrap();
        let oracle = &u * DMatrix::from_diagonal(&DVector::from_vec(shrunk)) * &vt;
        let out = singular_value_threshold(&m, mu).unwrap();
        let err = (&out - &oracle).norm();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn fused_chain_examples() {
        let c = vec![0.3; 7];
        assert_eq!(fused_chain_prox(&c, 2.0), c);
        for lam in [0.5, 0.8, 3.0] {
            let w = fused_chain_prox(&[0.0, 1.0], lam);
            assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 0.5).abs() < 1e-15);
        }
        let w = fused_chain_prox(&[0.0, 1.0], 0.2);
        assert!((w[0] - 0.2).abs() < 1e-15 && (w[1] - 0.8).abs() < 1e-15);
        assert_eq!(fused_chain_prox(&[], 1.0), Vec::<f64>::new());
        assert_eq!(fused_chain_prox(&[2.0], 1.0), vec![2.0]);
    }

    #[test]
    fn fused_chain_matches_dual_oracle() {
        let mut r = rng(11);
        for _ in 0..50 {
            let z: Vec<f64> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
            let w = fused_chain_prox(&z, 0.3);
            let oracle = dual_cd(&z, &tv_rows(8, 0.3), 20_000);
            for (a, b) in w.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-8, "{w:?} vs {oracle:?}");
            }
        }
    }

    #[test]
    fn sparse_fused_reduces_to_parts() {
        let z = [0.4, -1.2, 0.9, 0.1, 2.0];
        assert_eq!(sparse_fused_prox(&z, 0.0, 0.3), fused_chain_prox(&z, 0.3));
        let st: Vec<f64> = z.iter().map(|v| soft(*v, 0.5)).collect();
        assert_eq!(sparse_fused_prox(&z, 0.5, 0.0), st);
    }

    #[test]
    fn sparse_fused_matches_joint_oracle() {
        let mut r = rng(5);
        for _ in 0..30 {
            let z: Vec<f64> = (0..6).map(|_| r.random_range(-1.5..1.5)).collect();
            let mut rows = tv_rows(6, 0.4);
            rows.extend((0..6).map(|i| (vec![(i, 1.0)], 0.2)));
            let oracle = dual_cd(&z, &rows, 50_000);
            let w = sparse_fused_prox(&z, 0.2, 0.4);
            for (a, b) in w.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-8, "{w:?} vs {oracle:?}");
            }
        }
    }

    #[test]
    fn prox_optimality_under_perturbation() {
        let mut r = rng(3);
        let z: Vec<f64> = (0..10).map(|_| r.random_range(-1.0..1.0)).collect();
        let (l1, l2) = (0.15, 0.25);
        let obj = |w: &[f64]| {
            0.5 * w.iter().zip(&z).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                + l1 * w.iter().map(|v| v.abs()).sum::<f64>()
                + l2 * tv(w)
        };
        let w = sparse_fused_prox(&z, l1, l2);
        let base = obj(&w);
        for _ in 0..1000 {
            let pert: Vec<f64> = w.iter().map(|v| v + r.random_range(-1e-3..1e-3)).collect();
            assert!(obj(&pert) >= base - 1e-10);
        }
    }

    fn cd_lasso(x: &DMatrix<f64>, y: &DVector<f64>, lam: f64) -> DVector<f64> {
        // minimizes (1/N)‖y - Xb‖² + lam‖b‖₁ by cyclic coordinate descent
        let n = x.nrows() as f64;
        let d = x.ncols();
        let mut b = DVector::zeros(d);
        let mut resid = y.clone();
        for _ in 0..100_000 {
            let mut max_delta = 0.0f64;
            for j in 0..d {
                let col = x.column(j);
                let a = 2.0 * col.norm_squared() / n;
                let rho = 2.0 * col.dot(&resid) / n + a * b[j];
                let new = soft(rho, lam) / a;
                let delta = new - b[j];
                if delta != 0.0 {
                    resid -= col * delta;
                    b[j] = new;
                    max_delta = max_delta.max(delta.abs());
                }
            }
            if max_delta < 1e-13 {
                break;
            }
        }
        b
    }

    #[test]
    fn fista_least_squares_limit() {
        let mut r = rng(21);
        let x = random_matrix(&mut r, 6, 6) + DMatrix::identity(6, 6) * 2.0;
        let y = random_matrix(&mut r, 6, 2);
        let b = lasso_regression(&x, &y, 0.0, &FistaOptions::with_tol(1e-12, 100_000)).unwrap();
        let exact = x.clone().lu().solve(&y).unwrap();
        assert!((&b - &exact).norm() / exact.norm() < 1e-6);
    }

    #[test]
    fn lasso_zero_at_threshold() {
        let mut r = rng(22);
        let x = random_matrix(&mut r, 20, 4);
        let y = random_matrix(&mut r, 20, 3);
        let lam_max = (x.tr_mul(&y) * (2.0 / 20.0)).amax();
        let b = lasso_regression(&x, &y, lam_max, &FistaOptions::default()).unwrap();
        assert_eq!(b, DMatrix::zeros(4, 3));
        let b = lasso_regression(&x, &y, 1e6, &FistaOptions::default()).unwrap();
        assert_eq!(b, DMatrix::zeros(4, 3));
    }

    #[test]
    fn lasso_orthonormal_design() {
        let x = DMatrix::<f64>::identity(4, 4);
        let y = DMatrix::from_row_slice(4, 1, &[1.0, -2.0, 0.5, 3.0]);
        // (1/N) scaling: with N = 4 and X = I the minimizer is XᵀY for lam = 0
        let b = lasso_regression(&x, &y, 0.0, &FistaOptions::with_tol(1e-12, 10_000)).unwrap();
        assert!((b - x.tr_mul(&y)).norm() < 1e-9);
    }

    #[test]
    fn fista_matches_coordinate_descent() {
        let mut r = rng(23);
        for trial in 0..5 {
            let x = random_matrix(&mut r, 10, 5);
            let y = random_matrix(&mut r, 10, 1);
            let lam = 0.05 + 0.05 * trial as f64;
            let b = lasso_regression(&x, &y, lam, &FistaOptions::with_tol(1e-12, 200_000)).unwrap();
            let oracle = cd_lasso(&x, &y.column(0).into_owned(), lam);
            assert!((b.column(0) - oracle).amax() < 1e-6);
        }
    }

    #[test]
    fn fista_objective_is_monotone() {
        let mut r = rng(24);
        let x = random_matrix(&mut r, 30, 8);
        let y = random_matrix(&mut r, 30, 3);
        let ls = LeastSquares::new(&x, &y);
        let out = fista(&ls, &L1(0.02), DMatrix::zeros(8, 3), &FistaOptions::with_tol(1e-10, 500)).unwrap();
        assert!(out.objective.windows(2).all(|w| w[1] <= w[0]));
        let fixed = FistaOptions {
            step: StepRule::Fixed(ls.lipschitz_step()),
            tol: 1e-10,
            max_iter: 500,
        };
        let out = fista(&ls, &L1(0.02), DMatrix::zeros(8, 3), &fixed).unwrap();
        assert!(out.objective.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn fista_reports_divergence() {
        struct Blowup;
        impl Smooth for Blowup {
            fn value(&self, x: &DMatrix<f64>) -> f64 {
                -x.norm_squared()
            }
            fn gradient(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
                x * -1e200 - DMatrix::from_element(x.nrows(), x.ncols(), 1e300)
            }
        }
        let opts = FistaOptions {
            step: StepRule::Fixed(1e10),
            tol: 1e-6,
            max_iter: 50,
        };
        let err = fista(&Blowup, &Zero, DMatrix::zeros(2, 2), &opts).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. } | Error::Numeric(_)));
    }

    #[test]
    fn group_penalty_prox_in_fista() {
        let mut r = rng(25);
        let x = random_matrix(&mut r, 40, 4);
        let y = random_matrix(&mut r, 40, 1);
        let groups = vec![vec![0, 1], vec![2, 3]];
        let pen = GroupL2 { lam: 1e3, groups: &groups };
        let ls = LeastSquares::new(&x, &y);
        let out = fista(&ls, &pen, DMatrix::zeros(4, 1), &FistaOptions::default()).unwrap();
        assert_eq!(out.x, DMatrix::zeros(4, 1));
    }

    fn lowrank_data(seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut r = rng(seed);
        let u = DVector::from_vec(vec![0.6, -0.5, 0.4]);
        let v = DVector::from_vec(vec![0.5, 0.5, -0.6]);
        let l = &u * v.transpose();
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![0.3, -0.3, 0.2]));
        let a = l + s;
        let mut y = DMatrix::zeros(61, 3);
        for t in 1..61 {
            let noise = DVector::from_fn(3, |_, _| r.random_range(-1.0..1.0));
            let next = &a * y.row(t - 1).transpose() + noise;
            y.set_row(t, &next.transpose());
        }
        (y.rows(0, 60).into_owned(), y.rows(1, 60).into_owned())
    }

    #[test]
    fn lowrank_sparse_limits() {
        let (x, y) = lowrank_data(31);
        let opts = FistaOptions::with_tol(1e-10, 20_000);
        let fit = lowrank_sparse_regression(&x, &y, 0.05, 1e6, &opts).unwrap();
        assert_eq!(fit.lowrank, DMatrix::zeros(3, 3));
        let lasso = lasso_regression(&x, &y, 0.05, &opts).unwrap().transpose();
        assert!((&fit.sparse - lasso).amax() < 1e-6);
        let fit = lowrank_sparse_regression(&x, &y, 1e6, 0.05, &opts).unwrap();
        assert_eq!(fit.sparse, DMatrix::zeros(3, 3));
        assert!(fit.lowrank.amax() > 0.0);
    }

    #[test]
    fn lowrank_sparse_matches_alternating_oracle() {
        let (x, y) = lowrank_data(32);
        let (lam, mu) = (0.05, 0.1);
        let ls = LeastSquares::new(&x, &y);
        let tight = FistaOptions::with_tol(1e-13, 50_000);
        // block coordinate minimization: exact S-step and exact L-step
        let d = 3;
        let mut l = DMatrix::zeros(d, 3);
        let mut s = DMatrix::zeros(d, 3);
        struct Shifted<'a>(&'a LeastSquares, DMatrix<f64>);
        impl Smooth for Shifted<'_> {
            fn value(&self, b: &DMatrix<f64>) -> f64 {
                self.0.value(&(b + &self.1))
            }
            fn gradient(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
                self.0.gradient(&(b + &self.1))
            }
        }
        struct Nuclear(f64);
        impl Penalty for Nuclear {
            fn value(&self, x: &DMatrix<f64>) -> f64 {
                self.0 * nuclear_norm(x)
            }
            fn prox(&self, x: &DMatrix<f64>, step: f64) -> Result<DMatrix<f64>> {
                singular_value_threshold(x, step * self.0)
            }
        }
        let objective = |l: &DMatrix<f64>, s: &DMatrix<f64>| {
            ls.value(&(l + s)) + lam * s.iter().map(|v| v.abs()).sum::<f64>() + mu * nuclear_norm(l)
        };
        let mut prev = f64::INFINITY;
        for _ in 0..2000 {
            s = fista(&Shifted(&ls, l.clone()), &L1(lam), s, &tight).unwrap().x;
            l = fista(&Shifted(&ls, s.clone()), &Nuclear(mu), l, &tight).unwrap().x;
            let cur = objective(&l, &s);
            if prev - cur < 1e-15 {
                break;
            }
            prev = cur;
        }
        let oracle = objective(&l, &s);
        let fit = lowrank_sparse_regression(&x, &y, lam, mu, &FistaOptions::with_tol(1e-10, 50_000)).unwrap();
        let ours = fit.objective(lam, mu);
        assert!((ours - oracle).abs() < 1e-4, "{ours} vs {oracle}");
    }
}
