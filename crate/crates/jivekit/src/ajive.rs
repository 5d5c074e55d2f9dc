//! Three-phase angle-based decomposition of a multi-block dataset.
//!
//! Phase 1 extracts a rank-truncated row basis per block with the configured
//! SVD backend. Phase 2 stacks those bases and segments the shared score
//! space: squared singular values of the stacked matrix lie in [0, K] and
//! measure how many blocks carry a direction. Phase 3 projects each block
//! onto the selected joint basis and splits the remainder into individual
//! and noise parts.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::robust_svd::{
    classical_svd, mad_scale, robust_svd, HuberConfig, Matrix, MissingMask, RobustSvdResult,
};

/// K aligned blocks sharing the same n sample columns.
#[derive(Debug, Clone)]
pub struct MultiBlockDataset {
    blocks: Vec<Matrix>,
    masks: Vec<Option<MissingMask>>,
    block_names: Vec<String>,
}

impl MultiBlockDataset {
    pub fn new(
        blocks: Vec<Matrix>,
        masks: Vec<Option<MissingMask>>,
        block_names: Vec<String>,
    ) -> Result<Self> {
        if blocks.len() < 2 {
            return Err(Error::invalid("need at least 2 blocks"));
        }
        if masks.len() != blocks.len() || block_names.len() != blocks.len() {
            return Err(Error::invalid("blocks, masks and names must align"));
        }
        let n = blocks[0].ncols();
        for (k, b) in blocks.iter().enumerate() {
            if b.ncols() != n {
                return Err(Error::invalid(format!(
                    "block {} ({}) has {} subjects, expected {}",
                    k, block_names[k], b.ncols(), n
                )));
            }
            if b.nrows() == 0 || b.ncols() == 0 {
                return Err(Error::invalid(format!("block {k} is empty")));
            }
            if let Some(m) = &masks[k] {
                if m.rows() != b.nrows() || m.cols() != b.ncols() {
                    return Err(Error::invalid(format!(
                        "mask shape mismatch for block {k}"
                    )));
                }
            }
        }
        Ok(MultiBlockDataset {
            blocks,
            masks,
            block_names,
        })
    }

    /// Convenience constructor for unmasked blocks with default names.
    pub fn from_blocks(blocks: Vec<Matrix>) -> Result<Self> {
        let masks = vec![None; blocks.len()];
        let names = (0..blocks.len()).map(|k| format!("block{}", k + 1)).collect();
        MultiBlockDataset::new(blocks, masks, names)
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn n_subjects(&self) -> usize {
        self.blocks[0].ncols()
    }

    pub fn blocks(&self) -> &[Matrix] {
        &self.blocks
    }

    pub fn masks(&self) -> &[Option<MissingMask>] {
        &self.masks
    }

    pub fn block_names(&self) -> &[String] {
        &self.block_names
    }

    pub fn block(&self, k: usize) -> &Matrix {
        &self.blocks[k]
    }

    /// Block with missing cells replaced by zero (used for projections).
    fn zero_filled(&self, k: usize) -> Matrix {
        let mut x = self.blocks[k].clone();
        if let Some(m) = &self.masks[k] {
            for j in 0..x.ncols() {
                for i in 0..x.nrows() {
                    if !m.observed(i, j) {
                        x[(i, j)] = 0.0;
                    }
                }
            }
        }
        x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Classical,
    Robust,
}

impl std::fmt::Display for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Backend::Classical => write!(f, "classical"),
            Backend::Robust => write!(f, "robust"),
        }
    }
}

/// Resampling-null settings for the joint-rank and individual-rank
/// thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationConfig {
    pub n_resamples: usize,
    pub quantile: f64,
    pub seed: u64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        SegmentationConfig {
            n_resamples: 100,
            quantile: 0.95,
            seed: 424242,
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_resamples < 10 {
            return Err(Error::invalid("n_resamples must be at least 10"));
        }
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            return Err(Error::invalid("quantile must be in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AjiveConfig {
    pub initial_ranks: Vec<usize>,
    pub backend: Backend,
    #[serde(default)]
    pub huber: HuberConfig,
    #[serde(default)]
    pub joint_rank_override: Option<usize>,
    #[serde(default)]
    pub segmentation: SegmentationConfig,
}

impl AjiveConfig {
    pub fn new(initial_ranks: Vec<usize>, backend: Backend) -> Self {
        AjiveConfig {
            initial_ranks,
            backend,
            huber: HuberConfig::default(),
            joint_rank_override: None,
            segmentation: SegmentationConfig::default(),
        }
    }

    pub fn validate(&self, data: &MultiBlockDataset) -> Result<()> {
        self.segmentation.validate()?;
        self.huber.validate()?;
        if self.initial_ranks.len() != data.n_blocks() {
            return Err(Error::invalid(format!(
                "{} initial ranks for {} blocks",
                self.initial_ranks.len(),
                data.n_blocks()
            )));
        }
        let n = data.n_subjects();
        let mut sum = 0usize;
        let mut max = 0usize;
        for (k, &r) in self.initial_ranks.iter().enumerate() {
            let limit = data.block(k).nrows().min(n);
            if r == 0 || r > limit {
                return Err(Error::invalid(format!(
                    "initial rank {} for block {} ({}) outside 1..={}",
                    r, k, data.block_names()[k], limit
                )));
            }
            sum += r;
            max = max.max(r);
        }
        if sum <= max {
            return Err(Error::invalid(
                "sum of initial ranks must exceed the largest one",
            ));
        }
        Ok(())
    }
}

/// One block's share of the decomposition.
#[derive(Debug, Clone)]
pub struct BlockDecomposition {
    pub joint: Matrix,
    pub individual: Matrix,
    pub noise: Matrix,
    pub individual_rank: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentationDiagnostics {
    /// Singular values of the stacked score matrix, as extracted.
    pub m_singular_values: Vec<f64>,
    pub threshold: f64,
    pub clamped: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct AjiveResult {
    pub joint_rank: usize,
    /// n x r orthonormal joint row-space basis.
    pub joint_basis: Matrix,
    /// n x r subject-level joint scores (sqrt(n)-scaled basis rows).
    pub joint_scores: Matrix,
    pub per_block: Vec<BlockDecomposition>,
    pub diagnostics: SegmentationDiagnostics,
}

fn backend_svd(
    x: &Matrix,
    rank: usize,
    mask: Option<&MissingMask>,
    cfg: &AjiveConfig,
) -> Result<RobustSvdResult> {
    match cfg.backend {
        Backend::Robust => robust_svd(x, rank, mask, &cfg.huber),
        Backend::Classical => {
            // classical backend imputes missing cells as zero
            match mask {
                None => classical_svd(x, rank),
                Some(m) => {
                    let mut filled = x.clone();
                    for j in 0..x.ncols() {
                        for i in 0..x.nrows() {
                            if !m.observed(i, j) {
                                filled[(i, j)] = 0.0;
                            }
                        }
                    }
                    classical_svd(&filled, rank)
                }
            }
        }
    }
}

/// Per-block output of Phase 1.
pub struct BlockExtraction {
    pub svd: RobustSvdResult,
    /// Robust scale of the extraction residual entries.
    pub residual_scale: f64,
}

impl BlockExtraction {
    /// Right singular vectors as an n x r_k matrix.
    pub fn row_basis(&self) -> Matrix {
        self.svd.v_matrix()
    }
}

/// Phase 1: rank-truncated backend SVD of every block.
pub fn initial_extraction(
    data: &MultiBlockDataset,
    cfg: &AjiveConfig,
) -> Result<Vec<BlockExtraction>> {
    cfg.validate(data)?;
    data.blocks()
        .par_iter()
        .enumerate()
        .map(|(k, x)| {
            let mask = data.masks()[k].as_ref();
            let svd = backend_svd(x, cfg.initial_ranks[k], mask, cfg)
                .map_err(|e| e.in_block(k, &data.block_names()[k]))?;
            let mut residuals = Vec::with_capacity(svd.residual.len());
            for j in 0..svd.residual.ncols() {
                for i in 0..svd.residual.nrows() {
                    if mask.map_or(true, |m| m.observed(i, j)) {
                        residuals.push(svd.residual[(i, j)]);
                    }
                }
            }
            let residual_scale = mad_scale(&residuals, None, f64::MIN_POSITIVE)
                .map_err(|e| e.in_block(k, &data.block_names()[k]))?;
            Ok(BlockExtraction {
                svd,
                residual_scale,
            })
        })
        .collect()
}

/// Phase 2a: stack the transposed row bases into the (sum r_k) x n matrix.
pub fn stack_scores(bases: &[Matrix]) -> Result<Matrix> {
    if bases.is_empty() {
        return Err(Error::invalid("no bases to stack"));
    }
    let n = bases[0].nrows();
    if bases.iter().any(|b| b.nrows() != n) {
        return Err(Error::invalid("stacked bases disagree on subject count"));
    }
    let total: usize = bases.iter().map(|b| b.ncols()).sum();
    let mut m = Matrix::zeros(total, n);
    let mut row = 0;
    for basis in bases {
        for c in 0..basis.ncols() {
            for j in 0..n {
                m[(row, j)] = basis[(j, c)];
            }
            row += 1;
        }
    }
    Ok(m)
}

type NullKey = (Vec<usize>, usize, usize, u64, u64);

fn null_cache() -> &'static Mutex<HashMap<NullKey, f64>> {
    static CACHE: OnceLock<Mutex<HashMap<NullKey, f64>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

fn quantile_sorted(mut vals: Vec<f64>, q: f64) -> f64 {
    vals.sort_by(f64::total_cmp);
    let n = vals.len();
    if n == 1 {
        return vals[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    vals[lo] * (1.0 - frac) + vals[hi] * frac
}

fn leading_sigma(x: &Matrix) -> f64 {
    // alternating power iteration, enough accuracy for a threshold
    let n = x.ncols();
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut sigma = 0.0;
    for _ in 0..60 {
        let u = x * &v;
        let nu = u.norm();
        if nu == 0.0 {
            return 0.0;
        }
        v = x.transpose() * (u / nu);
        let ns = v.norm();
        if ns == 0.0 {
            return 0.0;
        }
        v /= ns;
        if (ns - sigma).abs() <= 1e-9 * ns.max(1.0) {
            return ns;
        }
        sigma = ns;
    }
    sigma
}

/// Null quantile of the largest squared singular value of a stack of
/// independent uniformly-random orthonormal row bases. Block order is
/// canonicalized so the threshold is invariant to block permutation.
pub fn joint_null_threshold(initial_ranks: &[usize], n: usize, seg: &SegmentationConfig) -> f64 {
    let mut ranks: Vec<usize> = initial_ranks.to_vec();
    ranks.sort_unstable_by(|a, b| b.cmp(a));
    let key: NullKey = (
        ranks.clone(),
        n,
        seg.n_resamples,
        seg.quantile.to_bits(),
        seg.seed,
    );
    if let Some(v) = null_cache().lock().unwrap().get(&key) {
        return *v;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seg.seed);
    let total: usize = ranks.iter().sum();
    let mut tops = Vec::with_capacity(seg.n_resamples);
    for _ in 0..seg.n_resamples {
        let mut m = Matrix::zeros(total, n);
        let mut row = 0;
        for &rk in &ranks {
            let g = Matrix::from_fn(n, rk, |_, _| StandardNormal.sample(&mut rng));
            let q = g.qr().q();
            for c in 0..rk {
                for j in 0..n {
                    m[(row, j)] = q[(j, c)];
                }
                row += 1;
            }
        }
        let s = leading_sigma(&m);
        tops.push(s * s);
    }
    let thr = quantile_sorted(tops, seg.quantile);
    null_cache().lock().unwrap().insert(key, thr);
    thr
}

/// Null quantile of the largest singular value of a p x n matrix with
/// iid standard-normal entries; multiply by the residual scale to get a
/// noise threshold at that scale.
pub fn noise_null_sigma_max(p: usize, n: usize, seg: &SegmentationConfig) -> f64 {
    let key: NullKey = (
        vec![p],
        n,
        seg.n_resamples,
        seg.quantile.to_bits(),
        seg.seed.wrapping_add(1),
    );
    if let Some(v) = null_cache().lock().unwrap().get(&key) {
        return *v;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seg.seed.wrapping_add(1));
    let mut tops = Vec::with_capacity(seg.n_resamples);
    for _ in 0..seg.n_resamples {
        let g = Matrix::from_fn(p, n, |_, _| StandardNormal.sample(&mut rng));
        tops.push(leading_sigma(&g));
    }
    let thr = quantile_sorted(tops, seg.quantile);
    null_cache().lock().unwrap().insert(key, thr);
    thr
}

/// Phase 2b: backend SVD of the stacked matrix and joint-rank selection.
///
/// A direction counts as joint when its squared singular value exceeds both
/// the resampling-null quantile and the floor 1 + (K-1)/2.
pub fn segment_score_space(
    m: &Matrix,
    cfg: &AjiveConfig,
    data_n_blocks: usize,
) -> Result<(usize, Matrix, SegmentationDiagnostics)> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Err(Error::invalid("empty stacked matrix"));
    }
    let n = m.ncols();
    let min_rank = *cfg
        .initial_ranks
        .iter()
        .min()
        .ok_or_else(|| Error::invalid("no initial ranks"))?;
    let override_r = cfg.joint_rank_override;
    // Extract just enough components to select and detect clamping.
    let max_needed = (min_rank + 2).max(override_r.unwrap_or(0).min(min_rank));
    let extract = max_needed.min(m.nrows().min(n));
    let svd = backend_svd(m, extract, None, cfg)?;
    let sigmas = svd.singular_values();

    let k = data_n_blocks as f64;
    let floor = 1.0 + (k - 1.0) / 2.0;
    let null = joint_null_threshold(&cfg.initial_ranks, n, &cfg.segmentation);
    let threshold = null.max(floor);

    let mut warnings = Vec::new();
    let selected = sigmas.iter().filter(|s| *s * *s > threshold).count();
    let mut clamped = false;
    let r = match override_r {
        Some(o) => {
            let r = o.min(min_rank).min(n);
            if r != o {
                clamped = true;
                warnings.push(format!("joint rank override {o} clamped to {r}"));
            }
            r
        }
        None => {
            if selected > min_rank {
                clamped = true;
                warnings.push(format!(
                    "threshold selected {selected} joint directions, clamped to {min_rank}"
                ));
                min_rank
            } else {
                selected
            }
        }
    };

    let v_j = if r == 0 {
        Matrix::zeros(n, 0)
    } else {
        // top-r right singular vectors, re-orthonormalized
        let v = svd.v_matrix().columns(0, r).into_owned();
        let q = v.qr().q().columns(0, r).into_owned();
        canonicalize_columns(q)
    };

    Ok((
        r,
        v_j,
        SegmentationDiagnostics {
            m_singular_values: sigmas,
            threshold,
            clamped,
            warnings,
        },
    ))
}

fn canonicalize_columns(mut m: Matrix) -> Matrix {
    for c in 0..m.ncols() {
        let mut best = 0;
        for i in 0..m.nrows() {
            if m[(i, c)].abs() > m[(best, c)].abs() {
                best = i;
            }
        }
        if m[(best, c)] < 0.0 {
            for i in 0..m.nrows() {
                m[(i, c)] = -m[(i, c)];
            }
        }
    }
    m
}

/// Phase 3: project onto the joint basis and split the remainder.
pub fn final_decomposition(
    data: &MultiBlockDataset,
    v_j: &Matrix,
    cfg: &AjiveConfig,
    extractions: &[BlockExtraction],
) -> Result<Vec<BlockDecomposition>> {
    let n = data.n_subjects();
    let r = v_j.ncols();
    if v_j.nrows() != n {
        return Err(Error::invalid("joint basis row count mismatch"));
    }
    (0..data.n_blocks())
        .into_par_iter()
        .map(|k| {
            let x = data.zero_filled(k);
            let joint = if r == 0 {
                Matrix::zeros(x.nrows(), n)
            } else {
                (&x * v_j) * v_j.transpose()
            };
            let remainder = &x - &joint;

            // joint directions visibly present in this block's phase-1 row
            // space count against its individual budget
            let basis = extractions[k].row_basis();
            let mut attributable = 0usize;
            for c in 0..r {
                let proj = basis.transpose() * v_j.column(c);
                if proj.norm_squared() > 0.5 {
                    attributable += 1;
                }
            }
            let cap = cfg.initial_ranks[k].saturating_sub(attributable);
            let cap = cap.min(x.nrows().min(n));

            let (individual, individual_rank) = if cap == 0 || remainder.norm() == 0.0 {
                (Matrix::zeros(x.nrows(), n), 0)
            } else {
                let svd = backend_svd(&remainder, cap, data.masks()[k].as_ref(), cfg)
                    .map_err(|e| e.in_block(k, &data.block_names()[k]))?;
                let noise_thr = noise_null_sigma_max(x.nrows(), n, &cfg.segmentation)
                    * extractions[k].residual_scale;
                let kept: Vec<_> = svd
                    .components
                    .iter()
                    .filter(|c| c.delta > noise_thr)
                    .collect();
                let mut individual = Matrix::zeros(x.nrows(), n);
                for c in &kept {
                    individual += (&c.u * c.v.transpose()) * c.delta;
                }
                (individual, kept.len())
            };

            let noise = &x - &joint - &individual;
            Ok(BlockDecomposition {
                joint,
                individual,
                noise,
                individual_rank,
            })
        })
        .collect()
}

/// Runs all three phases. `backend = classical` is standard angle-based
/// JIVE; `backend = robust` swaps every SVD for the Huber IRLS variant.
pub fn decompose(data: &MultiBlockDataset, cfg: &AjiveConfig) -> Result<AjiveResult> {
    let extractions =
        initial_extraction(data, cfg).map_err(|e| e.in_phase("initial extraction"))?;
    let bases: Vec<Matrix> = extractions.iter().map(|e| e.row_basis()).collect();
    let m = stack_scores(&bases).map_err(|e| e.in_phase("score space segmentation"))?;
    let (joint_rank, joint_basis, diagnostics) =
        segment_score_space(&m, cfg, data.n_blocks())
            .map_err(|e| e.in_phase("score space segmentation"))?;
    let per_block = final_decomposition(data, &joint_basis, cfg, &extractions)
        .map_err(|e| e.in_phase("final decomposition"))?;
    let scale = (data.n_subjects() as f64).sqrt();
    let joint_scores = &joint_basis * scale;
    Ok(AjiveResult {
        joint_rank,
        joint_basis,
        joint_scores,
        per_block,
        diagnostics,
    })
}
