//! Rank-truncated singular value decompositions, classical or robust.
//!
//! The robust variant fits one rank-one component at a time by alternating
//! Huber M-estimation regressions (IRLS with a MAD scale frozen at the
//! starting residual) and removes it by deflation. Cell-wise outliers get
//! bounded influence, and missing cells are zero-weighted inside every
//! regression sum rather than imputed.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;

/// Default Huber tuning constant (95% efficiency under normal errors).
pub const DEFAULT_HUBER_C: f64 = 1.345;

/// Clip factor, in MAD units, for the winsorized matrix that seeds each
/// rank-one fit. Large enough to leave clean data essentially untouched,
/// small enough that gross cell-wise outliers cannot steer the starting
/// point into their own basin.
const INIT_CLIP_MADS: f64 = 3.0;

const POWER_ITER_MAX: usize = 200;
const POWER_ITER_TOL: f64 = 1e-12;

/// Boolean observation mask paired with a matrix; `true` means observed.
#[derive(Debug, Clone, PartialEq)]
pub struct MissingMask {
    rows: usize,
    cols: usize,
    flags: Vec<bool>,
}

impl MissingMask {
    /// Builds a mask from row-major flags, checking that every row and
    /// every column keeps at least two observed cells.
    pub fn new(rows: usize, cols: usize, flags: Vec<bool>) -> Result<Self> {
        if flags.len() != rows * cols {
            return Err(Error::invalid(format!(
                "mask flags length {} does not match {rows}x{cols}",
                flags.len()
            )));
        }
        let mask = MissingMask { rows, cols, flags };
        for i in 0..rows {
            let seen = (0..cols).filter(|&j| mask.observed(i, j)).count();
            if seen < 2 {
                return Err(Error::invalid(format!(
                    "mask row {i} has {seen} observed cells; need at least 2"
                )));
            }
        }
        for j in 0..cols {
            let seen = (0..rows).filter(|&i| mask.observed(i, j)).count();
            if seen < 2 {
                return Err(Error::invalid(format!(
                    "mask column {j} has {seen} observed cells; need at least 2"
                )));
            }
        }
        Ok(mask)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn observed(&self, row: usize, col: usize) -> bool {
        self.flags[row * self.cols + col]
    }

    pub fn n_missing(&self) -> usize {
        self.flags.iter().filter(|f| !**f).count()
    }
}

#[inline]
fn is_observed(mask: Option<&MissingMask>, i: usize, j: usize) -> bool {
    mask.map_or(true, |m| m.observed(i, j))
}

/// Tuning parameters for the Huber IRLS rank-one fits.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct HuberConfig {
    /// Robustness tuning constant c of the Huber loss.
    pub c: f64,
    /// Maximum alternating sweeps per rank-one component.
    pub max_iter: usize,
    /// Relative Frobenius-change convergence threshold.
    pub tol: f64,
    /// Absolute lower bound for the residual scale estimate.
    pub scale_floor: f64,
}

impl Default for HuberConfig {
    fn default() -> Self {
        HuberConfig {
            c: DEFAULT_HUBER_C,
            max_iter: 100,
            tol: 1e-6,
            scale_floor: 1e-12,
        }
    }
}

impl HuberConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) {
            return Err(Error::invalid("Huber c must be positive"));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter must be positive"));
        }
        if !(self.tol > 0.0) || !(self.scale_floor > 0.0) {
            return Err(Error::invalid("tol and scale_floor must be positive"));
        }
        Ok(())
    }
}

/// One extracted singular component.
#[derive(Debug, Clone)]
pub struct RankOneFit {
    pub delta: f64,
    pub u: DVector<f64>,
    pub v: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Components in descending singular-value order plus the final residual.
#[derive(Debug, Clone)]
pub struct RobustSvdResult {
    pub components: Vec<RankOneFit>,
    pub residual: Matrix,
}

impl RobustSvdResult {
    pub fn singular_values(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.delta).collect()
    }

    /// Left singular vectors as columns, m x rank.
    pub fn u_matrix(&self) -> Matrix {
        let m = self.residual.nrows();
        Matrix::from_fn(m, self.components.len(), |i, k| self.components[k].u[i])
    }

    /// Right singular vectors as columns, n x rank.
    pub fn v_matrix(&self) -> Matrix {
        let n = self.residual.ncols();
        Matrix::from_fn(n, self.components.len(), |j, k| self.components[k].v[j])
    }

    pub fn reconstruction(&self) -> Matrix {
        let mut acc = Matrix::zeros(self.residual.nrows(), self.residual.ncols());
        for c in &self.components {
            acc += (&c.u * c.v.transpose()) * c.delta;
        }
        acc
    }
}

/// Huber loss: quadratic inside `|x| <= c`, linear outside.
pub fn huber_rho(x: f64, c: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::invalid("huber_rho: x must be finite"));
    }
    if !(c > 0.0) {
        return Err(Error::invalid("huber_rho: c must be positive"));
    }
    let ax = x.abs();
    Ok(if ax <= c { x * x } else { 2.0 * c * ax - c * c })
}

/// IRLS weight psi(x)/x induced by the Huber loss, for x = residual/scale.
pub fn huber_weight(residual: f64, scale: f64, c: f64) -> Result<f64> {
    if !(scale > 0.0) {
        return Err(Error::invalid("huber_weight: scale must be positive"));
    }
    if !(c > 0.0) {
        return Err(Error::invalid("huber_weight: c must be positive"));
    }
    let z = (residual / scale).abs();
    Ok(if z <= c { 1.0 } else { c / z })
}

/// Normal-consistent MAD of the observed residuals, clamped below.
pub fn mad_scale(residuals: &[f64], mask: Option<&[bool]>, scale_floor: f64) -> Result<f64> {
    if !(scale_floor > 0.0) {
        return Err(Error::invalid("mad_scale: scale_floor must be positive"));
    }
    let mut vals: Vec<f64> = match mask {
        Some(flags) => residuals
            .iter()
            .zip(flags.iter())
            .filter(|(_, f)| **f)
            .map(|(r, _)| *r)
            .collect(),
        None => residuals.to_vec(),
    };
    if vals.is_empty() {
        return Err(Error::invalid("mad_scale: no observed residuals"));
    }
    let med = median_in_place(&mut vals);
    for v in vals.iter_mut() {
        *v = (*v - med).abs();
    }
    let mad = median_in_place(&mut vals);
    Ok((1.4826 * mad).max(scale_floor))
}

fn median_in_place(vals: &mut [f64]) -> f64 {
    let n = vals.len();
    let mid = n / 2;
    let (_, upper, _) = vals.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    let hi = *upper;
    if n % 2 == 1 {
        hi
    } else {
        let (_, lowmax, _) = vals[..mid].select_nth_unstable_by(mid - 1, |a, b| a.total_cmp(b));
        0.5 * (*lowmax + hi)
    }
}

fn observed_frobenius(x: &Matrix, mask: Option<&MissingMask>) -> f64 {
    let mut acc = 0.0;
    for j in 0..x.ncols() {
        for i in 0..x.nrows() {
            if is_observed(mask, i, j) {
                acc += x[(i, j)] * x[(i, j)];
            }
        }
    }
    acc.sqrt()
}

fn check_finite_observed(x: &Matrix, mask: Option<&MissingMask>) -> Result<()> {
    for j in 0..x.ncols() {
        for i in 0..x.nrows() {
            if is_observed(mask, i, j) && !x[(i, j)].is_finite() {
                return Err(Error::invalid(format!(
                    "non-finite value at observed cell ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

fn check_mask_shape(x: &Matrix, mask: Option<&MissingMask>) -> Result<()> {
    if let Some(m) = mask {
        if m.rows() != x.nrows() || m.cols() != x.ncols() {
            return Err(Error::invalid(format!(
                "mask shape {}x{} does not match matrix {}x{}",
                m.rows(),
                m.cols(),
                x.nrows(),
                x.ncols()
            )));
        }
    }
    Ok(())
}

/// Leading singular triple of `x` by alternating power iteration.
fn leading_triple(x: &Matrix) -> (f64, DVector<f64>, DVector<f64>) {
    let (m, n) = x.shape();
    // Start from the column-norm profile; deterministic and already
    // correlated with the dominant right singular vector.
    let mut v = DVector::from_fn(n, |j, _| x.column(j).norm());
    if v.norm() == 0.0 {
        v = DVector::from_element(n, 1.0);
    }
    v /= v.norm();
    let mut u = DVector::zeros(m);
    let mut sigma = 0.0f64;
    for _ in 0..POWER_ITER_MAX {
        u = x * &v;
        let nu = u.norm();
        if nu == 0.0 {
            return (0.0, DVector::from_element(m, 0.0), v);
        }
        u /= nu;
        v = x.transpose() * &u;
        let ns = v.norm();
        if ns == 0.0 {
            return (0.0, u, DVector::from_element(n, 0.0));
        }
        v /= ns;
        if (ns - sigma).abs() <= POWER_ITER_TOL * ns.max(1.0) {
            sigma = ns;
            break;
        }
        sigma = ns;
    }
    (sigma, u, v)
}

/// Winsorized copy of `x` used only to seed the IRLS: missing cells are
/// imputed as 0 and entries are clipped at the median +- a few MADs so a
/// gross outlier cannot dominate the starting direction.
fn winsorized_for_init(x: &Matrix, mask: Option<&MissingMask>) -> Matrix {
    let mut vals: Vec<f64> = Vec::with_capacity(x.len());
    for j in 0..x.ncols() {
        for i in 0..x.nrows() {
            if is_observed(mask, i, j) {
                vals.push(x[(i, j)]);
            }
        }
    }
    if vals.is_empty() {
        return Matrix::zeros(x.nrows(), x.ncols());
    }
    let med = median_in_place(&mut vals);
    for v in vals.iter_mut() {
        *v = (*v - med).abs();
    }
    let mad = 1.4826 * median_in_place(&mut vals);
    let (lo, hi) = (med - INIT_CLIP_MADS * mad, med + INIT_CLIP_MADS * mad);
    Matrix::from_fn(x.nrows(), x.ncols(), |i, j| {
        if !is_observed(mask, i, j) {
            0.0
        } else if mad > 0.0 {
            x[(i, j)].clamp(lo, hi)
        } else {
            x[(i, j)]
        }
    })
}

struct SweepState {
    a: DVector<f64>,
    b: DVector<f64>,
}

/// Fits one robust rank-one component by alternating Huber regressions.
///
/// Each singular-vector coordinate solves a one-coefficient weighted
/// regression, so the IRLS update is a ratio of weighted sums per
/// coordinate. The residual scale is refreshed by MAD before every
/// half-sweep.
pub fn robust_rank_one(
    x: &Matrix,
    mask: Option<&MissingMask>,
    cfg: &HuberConfig,
    init: Option<(DVector<f64>, DVector<f64>)>,
) -> Result<RankOneFit> {
    cfg.validate()?;
    let (m, n) = x.shape();
    if m < 2 || n < 2 {
        return Err(Error::invalid("robust_rank_one: need at least 2x2"));
    }
    check_mask_shape(x, mask)?;
    check_finite_observed(x, mask)?;

    let frob = observed_frobenius(x, mask);
    if frob == 0.0 {
        // Exactly-zero input: canonical zero component.
        let mut u = DVector::zeros(m);
        let mut v = DVector::zeros(n);
        u[0] = 1.0;
        v[0] = 1.0;
        return Ok(RankOneFit {
            delta: 0.0,
            u,
            v,
            iterations: 0,
            converged: true,
        });
    }
    let floor = cfg
        .scale_floor
        .max(1e-8 * frob / ((m * n) as f64).sqrt());

    let mut state = match init {
        Some((a, b)) => {
            if a.len() != m || b.len() != n {
                return Err(Error::invalid("robust_rank_one: init shape mismatch"));
            }
            SweepState { a, b }
        }
        None => {
            let xw = winsorized_for_init(x, mask);
            let (sigma, u, v) = leading_triple(&xw);
            let s = sigma.max(floor).sqrt();
            SweepState { a: u * s, b: v * s }
        }
    };

    let mut fit = &state.a * state.b.transpose();
    let mut iterations = 0;
    let mut converged = false;
    let mut used_random_restart = false;

    // The residual scale is frozen at the starting point. Re-estimating it
    // every sweep lets whatever structure remains in the residual (later
    // components of a higher-rank matrix) shrink the scale and get treated
    // as outliers, which biases clean fits; the scale at the start already
    // reflects everything this component should not explain.
    let mut scale = residual_scale(x, mask, &state.a, &state.b, floor)?;

    while iterations < cfg.max_iter {
        iterations += 1;
        match sweep(x, mask, cfg, scale, &mut state) {
            Ok(()) => {}
            Err(Error::DegenerateFit { .. }) if !used_random_restart => {
                // The starting pair collapsed; retry once from a fixed-seed
                // uniform draw scaled to the data.
                used_random_restart = true;
                let mut rng = ChaCha8Rng::seed_from_u64(0x4a49_5645);
                let amp = (frob / ((m * n) as f64).sqrt()).sqrt().max(floor.sqrt());
                state.a = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0) * amp);
                state.b = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0) * amp);
                fit = &state.a * state.b.transpose();
                scale = residual_scale(x, mask, &state.a, &state.b, floor)?;
                continue;
            }
            Err(e) => return Err(e),
        }
        let new_fit = &state.a * state.b.transpose();
        let change = (&new_fit - &fit).norm() / fit.norm().max(floor);
        fit = new_fit;
        if change < cfg.tol {
            converged = true;
            break;
        }
    }

    let na = state.a.norm();
    let nb = state.b.norm();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateFit { component: None });
    }
    let mut u = state.a / na;
    let mut v = state.b / nb;
    canonicalize_sign(&mut u, &mut v);
    Ok(RankOneFit {
        delta: na * nb,
        u,
        v,
        iterations,
        converged,
    })
}

fn sweep(
    x: &Matrix,
    mask: Option<&MissingMask>,
    cfg: &HuberConfig,
    scale: f64,
    state: &mut SweepState,
) -> Result<()> {
    let (m, n) = x.shape();

    // b-step: for fixed a, each b_j is a weighted ratio over observed rows.
    let mut b_new = DVector::zeros(n);
    for j in 0..n {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..m {
            if !is_observed(mask, i, j) {
                continue;
            }
            let r = x[(i, j)] - state.a[i] * state.b[j];
            let w = huber_weight(r, scale, cfg.c)?;
            num += w * state.a[i] * x[(i, j)];
            den += w * state.a[i] * state.a[i];
        }
        if den == 0.0 {
            return Err(Error::DegenerateFit { component: None });
        }
        b_new[j] = num / den;
    }
    state.b = b_new;

    // a-step, symmetric.
    let mut a_new = DVector::zeros(m);
    for i in 0..m {
        let mut num = 0.0;
        let mut den = 0.0;
        for j in 0..n {
            if !is_observed(mask, i, j) {
                continue;
            }
            let r = x[(i, j)] - state.a[i] * state.b[j];
            let w = huber_weight(r, scale, cfg.c)?;
            num += w * state.b[j] * x[(i, j)];
            den += w * state.b[j] * state.b[j];
        }
        if den == 0.0 {
            return Err(Error::DegenerateFit { component: None });
        }
        a_new[i] = num / den;
    }
    state.a = a_new;
    Ok(())
}

fn residual_scale(
    x: &Matrix,
    mask: Option<&MissingMask>,
    a: &DVector<f64>,
    b: &DVector<f64>,
    floor: f64,
) -> Result<f64> {
    let mut res = Vec::with_capacity(x.len());
    for j in 0..x.ncols() {
        for i in 0..x.nrows() {
            if is_observed(mask, i, j) {
                res.push(x[(i, j)] - a[i] * b[j]);
            }
        }
    }
    mad_scale(&res, None, floor)
}

fn canonicalize_sign(u: &mut DVector<f64>, v: &mut DVector<f64>) {
    let mut best = 0;
    for i in 0..u.len() {
        if u[i].abs() > u[best].abs() {
            best = i;
        }
    }
    if u[best] < 0.0 {
        *u = -&*u;
        *v = -&*v;
    }
}

fn check_rank(x: &Matrix, rank: usize) -> Result<()> {
    if rank == 0 {
        return Err(Error::invalid("rank must be positive"));
    }
    if rank > x.nrows().min(x.ncols()) {
        return Err(Error::invalid(format!(
            "rank {} exceeds min dimension {}",
            rank,
            x.nrows().min(x.ncols())
        )));
    }
    Ok(())
}

fn sort_components(mut components: Vec<RankOneFit>) -> Vec<RankOneFit> {
    components.sort_by(|a, b| b.delta.total_cmp(&a.delta));
    components
}

fn zero_masked(residual: &mut Matrix, mask: Option<&MissingMask>) {
    if let Some(m) = mask {
        for j in 0..residual.ncols() {
            for i in 0..residual.nrows() {
                if !m.observed(i, j) {
                    residual[(i, j)] = 0.0;
                }
            }
        }
    }
}

/// Rank-`rank` robust SVD by repeated rank-one extraction and deflation.
pub fn robust_svd(
    x: &Matrix,
    rank: usize,
    mask: Option<&MissingMask>,
    cfg: &HuberConfig,
) -> Result<RobustSvdResult> {
    check_rank(x, rank)?;
    check_mask_shape(x, mask)?;
    let mut residual = x.clone();
    zero_masked(&mut residual, mask);
    let mut components = Vec::with_capacity(rank);
    for k in 0..rank {
        let fit = robust_rank_one(&residual, mask, cfg, None).map_err(|e| match e {
            Error::DegenerateFit { .. } => Error::DegenerateFit { component: Some(k) },
            other => other,
        })?;
        residual -= (&fit.u * fit.v.transpose()) * fit.delta;
        zero_masked(&mut residual, mask);
        components.push(fit);
    }

    // The sequential fits each see the later components inside their
    // residual, where the heavy tails of that leftover signal draw Huber
    // downweighting and bias the extraction. A joint refinement of the
    // factor pair leaves only noise in the model residual, so the weights
    // act on genuine outliers alone. Only components clearly above the
    // post-fit noise floor are refined: below it the joint regression is
    // barely identified and would just reshuffle noise directions.
    if rank > 1 {
        let (m, n) = x.shape();
        let obs: Vec<f64> = (0..n)
            .flat_map(|j| (0..m).filter_map(move |i| is_observed(mask, i, j).then(|| (i, j))))
            .map(|(i, j)| residual[(i, j)])
            .collect();
        let sigma = mad_scale(&obs, None, cfg.scale_floor)?;
        let tau = 2.0 * sigma * ((m as f64).sqrt() + (n as f64).sqrt());
        components = sort_components(components);
        let head_len = components.iter().filter(|c| c.delta > tau).count();
        if head_len > 1 {
            let tail = components.split_off(head_len);
            let mut x_head = x.clone();
            zero_masked(&mut x_head, mask);
            for c in &tail {
                x_head -= (&c.u * c.v.transpose()) * c.delta;
            }
            components = refine_joint(&x_head, mask, cfg, components)?;
            components.extend(tail);
            residual = x.clone();
            zero_masked(&mut residual, mask);
            for c in &components {
                residual -= (&c.u * c.v.transpose()) * c.delta;
            }
            zero_masked(&mut residual, mask);
        }
    }

    Ok(RobustSvdResult {
        components: sort_components(components),
        residual,
    })
}

/// Alternating Huber-weighted multivariate regressions on the full factor
/// pair, seeded from the sequential fits, followed by re-orthogonalization
/// into singular triples.
fn refine_joint(
    x: &Matrix,
    mask: Option<&MissingMask>,
    cfg: &HuberConfig,
    components: Vec<RankOneFit>,
) -> Result<Vec<RankOneFit>> {
    let (m, n) = x.shape();
    let r = components.len();
    let frob = observed_frobenius(x, mask);
    let floor = cfg.scale_floor.max(1e-8 * frob / ((m * n) as f64).sqrt());

    let mut a = Matrix::zeros(m, r);
    let mut b = Matrix::zeros(n, r);
    for (k, c) in components.iter().enumerate() {
        a.set_column(k, &(&c.u * c.delta));
        b.set_column(k, &c.v);
    }

    let mut fit = &a * b.transpose();
    let mut iterations = 0;
    let mut converged = false;
    let ridge = 1e-12;
    let xt = x.transpose();
    let mask_t = mask.map(|mk| {
        let mut flags = vec![true; m * n];
        for i in 0..n {
            for j in 0..m {
                flags[i * m + j] = mk.observed(j, i);
            }
        }
        MissingMask {
            rows: n,
            cols: m,
            flags,
        }
    });

    while iterations < cfg.max_iter {
        iterations += 1;
        half_sweep_joint(x, mask, cfg, floor, &a, &mut b, ridge)?;
        half_sweep_joint(&xt, mask_t.as_ref(), cfg, floor, &b, &mut a, ridge)?;
        let new_fit = &a * b.transpose();
        let change = (&new_fit - &fit).norm() / fit.norm().max(floor);
        fit = new_fit;
        if change < cfg.tol {
            converged = true;
            break;
        }
    }

    // Re-extract singular triples from the refined low-rank product.
    let qa = a.clone().qr();
    let qb = b.clone().qr();
    let small = qa.r() * qb.r().transpose();
    let svd = small.svd(true, true);
    let us = svd.u.as_ref().expect("u requested");
    let vs = svd.v_t.as_ref().expect("v_t requested");
    let qa_q = qa.q();
    let qb_q = qb.q();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let mut refined = Vec::with_capacity(r);
    for &k in &order {
        let mut u: DVector<f64> = &qa_q * us.column(k);
        let mut v: DVector<f64> = &qb_q * vs.row(k).transpose();
        canonicalize_sign(&mut u, &mut v);
        refined.push(RankOneFit {
            delta: svd.singular_values[k],
            u,
            v,
            iterations,
            converged,
        });
    }
    Ok(refined)
}

/// One weighted regression half-sweep: `x` is oriented so `fixed` spans
/// its rows (pass the transpose to update the left factor), and every row
/// of `free` is re-solved as an r-variate Huber regression.
fn half_sweep_joint(
    x: &Matrix,
    mask: Option<&MissingMask>,
    cfg: &HuberConfig,
    floor: f64,
    fixed: &Matrix,
    free: &mut Matrix,
    ridge: f64,
) -> Result<()> {
    let r = fixed.ncols();
    let residual_at = |i: usize, j: usize, free: &Matrix| -> f64 {
        let mut pred = 0.0;
        for k in 0..r {
            pred += fixed[(i, k)] * free[(j, k)];
        }
        x[(i, j)] - pred
    };
    let n_fixed = fixed.nrows();
    let n_free = free.nrows();

    let mut res = Vec::new();
    for j in 0..n_free {
        for i in 0..n_fixed {
            if is_observed(mask, i, j) {
                res.push(residual_at(i, j, free));
            }
        }
    }
    let scale = mad_scale(&res, None, floor)?;

    for j in 0..n_free {
        let mut xtx = Matrix::zeros(r, r);
        let mut xty = DVector::zeros(r);
        for i in 0..n_fixed {
            if !is_observed(mask, i, j) {
                continue;
            }
            let rij = residual_at(i, j, free);
            let w = huber_weight(rij, scale, cfg.c)?;
            let y = x[(i, j)];
            for p in 0..r {
                xty[p] += w * fixed[(i, p)] * y;
                for q in 0..r {
                    xtx[(p, q)] += w * fixed[(i, p)] * fixed[(i, q)];
                }
            }
        }
        let trace: f64 = (0..r).map(|p| xtx[(p, p)]).sum();
        for p in 0..r {
            xtx[(p, p)] += ridge * trace.max(1.0);
        }
        let sol = xtx
            .lu()
            .solve(&xty)
            .ok_or(Error::DegenerateFit { component: None })?;
        free.set_row(j, &sol.transpose());
    }
    Ok(())
}

/// Truncated classical SVD wrapped in the same result type.
pub fn classical_svd(x: &Matrix, rank: usize) -> Result<RobustSvdResult> {
    check_rank(x, rank)?;
    check_finite_observed(x, None)?;
    let svd = x.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut components = Vec::with_capacity(rank);
    for &k in order.iter().take(rank) {
        let mut uk: DVector<f64> = u.column(k).into();
        let mut vk: DVector<f64> = vt.row(k).transpose();
        canonicalize_sign(&mut uk, &mut vk);
        components.push(RankOneFit {
            delta: svd.singular_values[k],
            u: uk,
            v: vk,
            iterations: 0,
            converged: true,
        });
    }
    let mut residual = x.clone();
    for c in &components {
        residual -= (&c.u * c.v.transpose()) * c.delta;
    }
    Ok(RobustSvdResult {
        components,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand_distr::{Distribution, StandardNormal};

    fn randn_matrix(rng: &mut ChaCha8Rng, m: usize, n: usize, sd: f64) -> Matrix {
        Matrix::from_fn(m, n, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            z * sd
        })
    }

    fn unit(v: DVector<f64>) -> DVector<f64> {
        let n = v.norm();
        v / n
    }

    #[test]
    fn huber_rho_matches_formula() {
        assert_eq!(huber_rho(0.0, 1.345).unwrap(), 0.0);
        assert_relative_eq!(huber_rho(1.345, 1.345).unwrap(), 1.809025, epsilon = 1e-12);
        // 2*1.345*3 - 1.345^2, hand arithmetic
        assert_relative_eq!(huber_rho(3.0, 1.345).unwrap(), 6.260975, epsilon = 1e-12);
        assert!(huber_rho(f64::NAN, 1.0).is_err());
        assert!(huber_rho(1.0, 0.0).is_err());
    }

    #[test]
    fn huber_rho_continuous_at_knot() {
        let c = 1.345;
        let eps = 1e-9;
        let lhs = huber_rho(c + eps, c).unwrap();
        let rhs = huber_rho(c - eps, c).unwrap();
        assert!((lhs - rhs).abs() < 1e-7);
    }

    #[test]
    fn huber_weight_values() {
        assert_eq!(huber_weight(0.0, 1.0, 1.345).unwrap(), 1.0);
        assert_eq!(huber_weight(1.345, 1.0, 1.345).unwrap(), 1.0);
        assert_relative_eq!(huber_weight(13.45, 1.0, 1.345).unwrap(), 0.1, epsilon = 1e-12);
        assert!(huber_weight(1.0, 0.0, 1.345).is_err());
    }

    #[test]
    fn mad_scale_examples() {
        // all-zero residuals clamp to floor
        assert_eq!(mad_scale(&[0.0; 4], None, 1e-8).unwrap(), 1e-8);
        // median 0, abs deviations (1,0,1), median 1
        assert_relative_eq!(
            mad_scale(&[-1.0, 0.0, 1.0], None, 1e-12).unwrap(),
            1.4826,
            epsilon = 1e-12
        );
        assert!(mad_scale(&[], None, 1e-8).is_err());
        assert!(mad_scale(&[1.0, 2.0], Some(&[false, false]), 1e-8).is_err());
    }

    #[test]
    fn mad_is_consistent_for_normal_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sample: Vec<f64> = (0..100_000)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let s = mad_scale(&sample, None, 1e-12).unwrap();
        assert!((s - 1.0).abs() < 0.02, "MAD estimate {s}");
    }

    #[test]
    fn rank_one_exact_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u0 = unit(DVector::from_fn(12, |_, _| StandardNormal.sample(&mut rng)));
        let v0 = unit(DVector::from_fn(9, |_, _| StandardNormal.sample(&mut rng)));
        let delta0 = 4.2;
        let x = (&u0 * v0.transpose()) * delta0;
        let fit = robust_rank_one(&x, None, &HuberConfig::default(), None).unwrap();
        // convergence tolerance is 1e-6 relative, so allow the same slack
        assert_relative_eq!(fit.delta, delta0, epsilon = 1e-5);
        assert!((fit.u.dot(&u0)).abs() > 1.0 - 1e-8);
        assert!((fit.v.dot(&v0)).abs() > 1.0 - 1e-8);
        assert_relative_eq!(fit.u.norm(), 1.0, epsilon = 1e-10);
        assert_relative_eq!(fit.v.norm(), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn rank_one_survives_single_huge_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u0 = unit(DVector::from_fn(50, |_, _| StandardNormal.sample(&mut rng)));
        let v0 = unit(DVector::from_fn(40, |_, _| StandardNormal.sample(&mut rng)));
        let clean = (&u0 * v0.transpose()) * 25.0;
        let oracle = classical_svd(&clean, 1).unwrap();
        let mut x = clean.clone();
        x[(3, 5)] = 1e6;

        let fit = robust_rank_one(&x, None, &HuberConfig::default(), None).unwrap();
        let clean_fit = &oracle.components[0];
        assert!((fit.delta - clean_fit.delta).abs() / clean_fit.delta < 1e-3);
        assert!(1.0 - fit.u.dot(&clean_fit.u).abs() < 1e-3);
        assert!(1.0 - fit.v.dot(&clean_fit.v).abs() < 1e-3);

        // the classical triple on the contaminated matrix is far off
        let classical = classical_svd(&x, 1).unwrap();
        let cos = classical.components[0].u.dot(&clean_fit.u).abs();
        assert!(cos.acos() > 0.1, "classical angle {}", cos.acos());
    }

    #[test]
    fn rank_one_with_missing_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u0 = unit(DVector::from_fn(20, |_, _| StandardNormal.sample(&mut rng)));
        let v0 = unit(DVector::from_fn(15, |_, _| StandardNormal.sample(&mut rng)));
        let x = (&u0 * v0.transpose()) * 10.0;
        let flags: Vec<bool> = (0..300).map(|_| rng.random_range(0.0..1.0) > 0.1).collect();
        let mask = MissingMask::new(20, 15, flags).unwrap();
        let fit = robust_rank_one(&x, Some(&mask), &HuberConfig::default(), None).unwrap();
        assert_relative_eq!(fit.delta, 10.0, epsilon = 1e-6);
        assert!(1.0 - fit.u.dot(&u0).abs() < 1e-6);
    }

    #[test]
    fn masked_cells_do_not_influence_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = randn_matrix(&mut rng, 10, 8, 1.0);
        let mut flags = vec![true; 80];
        flags[3 * 8 + 2] = false;
        let mask = MissingMask::new(10, 8, flags).unwrap();
        let fit_a = robust_rank_one(&x0, Some(&mask), &HuberConfig::default(), None).unwrap();
        let mut x1 = x0.clone();
        x1[(3, 2)] = 1e9;
        let fit_b = robust_rank_one(&x1, Some(&mask), &HuberConfig::default(), None).unwrap();
        assert!((fit_a.delta - fit_b.delta).abs() < 1e-12);
        assert!((&fit_a.u - &fit_b.u).amax() < 1e-12);
        assert!((&fit_a.v - &fit_b.v).amax() < 1e-12);
    }

    #[test]
    fn robust_svd_diagonal() {
        let mut x = Matrix::zeros(5, 5);
        x[(0, 0)] = 3.0;
        x[(1, 1)] = 2.0;
        x[(2, 2)] = 1.0;
        let res = robust_svd(&x, 3, None, &HuberConfig::default()).unwrap();
        let sv = res.singular_values();
        assert_relative_eq!(sv[0], 3.0, epsilon = 1e-8);
        assert_relative_eq!(sv[1], 2.0, epsilon = 1e-8);
        assert_relative_eq!(sv[2], 1.0, epsilon = 1e-8);
    }

    #[test]
    fn robust_matches_classical_on_clean_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rank = 5;
        let mut x = Matrix::zeros(60, 40);
        for k in 0..rank {
            let u = unit(DVector::from_fn(60, |_, _| StandardNormal.sample(&mut rng)));
            let v = unit(DVector::from_fn(40, |_, _| StandardNormal.sample(&mut rng)));
            x += (&u * v.transpose()) * (20.0 - 2.0 * k as f64);
        }
        x += randn_matrix(&mut rng, 60, 40, 0.01);
        let robust = robust_svd(&x, rank, None, &HuberConfig::default()).unwrap();
        let classical = classical_svd(&x, rank).unwrap();
        for k in 0..rank {
            let dr = robust.components[k].delta;
            let dc = classical.components[k].delta;
            assert!(
                (dr - dc).abs() / dc < 0.01,
                "component {k}: robust {dr} classical {dc}"
            );
        }
    }

    #[test]
    fn deflation_residual_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randn_matrix(&mut rng, 20, 15, 1.0);
        let mut prev = f64::INFINITY;
        for rank in 1..=5 {
            let res = robust_svd(&x, rank, None, &HuberConfig::default()).unwrap();
            let norm = res.residual.norm();
            assert!(norm <= prev + 1e-9, "rank {rank}: {norm} > {prev}");
            prev = norm;
        }
    }

    #[test]
    fn reconstruction_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randn_matrix(&mut rng, 15, 12, 1.0);
        let res = robust_svd(&x, 6, None, &HuberConfig::default()).unwrap();
        let recon = res.reconstruction() + &res.residual;
        assert!((&recon - &x).norm() / x.norm() < 1e-8);
    }

    #[test]
    fn classical_svd_identity_and_rank_one() {
        let res = classical_svd(&Matrix::identity(4, 4), 4).unwrap();
        for c in &res.components {
            assert_relative_eq!(c.delta, 1.0, epsilon = 1e-12);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u = unit(DVector::from_fn(7, |_, _| StandardNormal.sample(&mut rng)));
        let v = unit(DVector::from_fn(5, |_, _| StandardNormal.sample(&mut rng)));
        let res = classical_svd(&(&u * v.transpose()), 2).unwrap();
        assert_relative_eq!(res.components[0].delta, 1.0, epsilon = 1e-10);
        assert!(res.components[1].delta < 1e-10);
    }

    #[test]
    fn classical_full_rank_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = randn_matrix(&mut rng, 50, 40, 1.0);
        let res = classical_svd(&x, 40).unwrap();
        assert!((res.reconstruction() - &x).norm() / x.norm() < 1e-10);
    }

    #[test]
    fn rank_validation() {
        let x = Matrix::zeros(4, 3);
        assert!(classical_svd(&x, 4).is_err());
        assert!(robust_svd(&x, 4, None, &HuberConfig::default()).is_err());
    }

    #[test]
    fn sign_convention_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let x = randn_matrix(&mut rng, 10, 8, 1.0);
            let res = robust_svd(&x, 3, None, &HuberConfig::default()).unwrap();
            for c in &res.components {
                let mut best = 0;
                for i in 0..c.u.len() {
                    if c.u[i].abs() > c.u[best].abs() {
                        best = i;
                    }
                }
                assert!(c.u[best] >= 0.0);
            }
        }
    }

    #[test]
    fn mask_requires_two_observed_per_line() {
        let flags = vec![true, false, false, true, true, true];
        assert!(MissingMask::new(2, 3, flags).is_err());
    }
}
