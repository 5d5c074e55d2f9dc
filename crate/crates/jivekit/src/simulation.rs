//! Synthetic multi-block generation, cell-wise contamination and the
//! replicated study harness.

use nalgebra::DVector;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ajive::{decompose, AjiveConfig, MultiBlockDataset};
use crate::error::{Error, Result};
use crate::metrics::{logistic_auc, subspace_recovery_error, variance_explained, BlockVariance};
use crate::robust_svd::Matrix;

fn default_signal_scale() -> f64 {
    8.5
}
fn default_joint_scale_boost() -> f64 {
    1.3
}
fn default_noise_sd() -> f64 {
    0.1
}

/// Low-rank joint + individual + noise generator.
///
/// Each block is A_k U^T + B_k W_k^T + E_k with U a shared orthonormal
/// score basis, W_k block-specific orthonormal bases orthogonal to U,
/// gaussian loadings at `signal_scale` (joint loadings additionally
/// multiplied by `joint_scale_boost`) and iid N(0, noise_sd^2) noise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n: usize,
    pub p: Vec<usize>,
    pub joint_rank: usize,
    pub individual_ranks: Vec<usize>,
    #[serde(default = "default_signal_scale")]
    pub signal_scale: f64,
    #[serde(default = "default_joint_scale_boost")]
    pub joint_scale_boost: f64,
    #[serde(default = "default_noise_sd")]
    pub noise_sd: f64,
    pub seed: u64,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p.len() < 2 {
            return Err(Error::invalid("need at least 2 blocks"));
        }
        if self.p.len() != self.individual_ranks.len() {
            return Err(Error::invalid(
                "individual_ranks must match the number of blocks",
            ));
        }
        for (&pk, &rk) in self.p.iter().zip(&self.individual_ranks) {
            if self.joint_rank + rk > pk.min(self.n) {
                return Err(Error::invalid(format!(
                    "joint_rank + individual rank {} exceeds min(p, n) for a {}x{} block",
                    self.joint_rank + rk,
                    pk,
                    self.n
                )));
            }
        }
        if self.signal_scale <= 0.0 || self.noise_sd < 0.0 || self.joint_scale_boost <= 0.0 {
            return Err(Error::invalid("scales must be positive"));
        }
        Ok(())
    }
}

/// What the generator knows and the estimator is asked to recover.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// n x r orthonormal joint score basis.
    pub joint_basis: Matrix,
    pub joint: Vec<Matrix>,
    pub individual: Vec<Matrix>,
    pub joint_rank: usize,
    pub individual_ranks: Vec<usize>,
    /// Bernoulli labels driven by the first joint score.
    pub labels: Vec<bool>,
}

fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

fn orthonormalize(m: &Matrix) -> Matrix {
    let r = m.ncols();
    m.clone().qr().q().columns(0, r).into_owned()
}

pub fn generate_multiblock(cfg: &GeneratorConfig) -> Result<(MultiBlockDataset, GroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n;
    let r = cfg.joint_rank;
    let u = if r > 0 {
        orthonormalize(&randn(&mut rng, n, r))
    } else {
        Matrix::zeros(n, 0)
    };

    // labels follow the first joint score on the sqrt(n) scale
    let labels: Vec<bool> = if r > 0 {
        (0..n)
            .map(|i| {
                let z = 2.0 * (n as f64).sqrt() * u[(i, 0)];
                rng.random::<f64>() < 1.0 / (1.0 + (-z).exp())
            })
            .collect()
    } else {
        (0..n).map(|_| rng.random::<bool>()).collect()
    };

    let mut blocks = Vec::new();
    let mut joints = Vec::new();
    let mut individuals = Vec::new();
    for (&pk, &rk) in cfg.p.iter().zip(&cfg.individual_ranks) {
        let g = randn(&mut rng, n, rk);
        let g = if r > 0 { &g - &u * (u.transpose() * &g) } else { g };
        let w = orthonormalize(&g);
        let a = randn(&mut rng, pk, r) * (cfg.joint_scale_boost * cfg.signal_scale);
        let b = randn(&mut rng, pk, rk) * cfg.signal_scale;
        let e = randn(&mut rng, pk, n) * cfg.noise_sd;
        let j = &a * u.transpose();
        let i = &b * w.transpose();
        blocks.push(&j + &i + e);
        joints.push(j);
        individuals.push(i);
    }
    let data = MultiBlockDataset::from_blocks(blocks)?;
    Ok((
        data,
        GroundTruth {
            joint_basis: u,
            joint: joints,
            individual: individuals,
            joint_rank: r,
            individual_ranks: cfg.individual_ranks.clone(),
            labels,
        },
    ))
}

/// Which blocks and how many variables receive outliers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutlierConfiguration {
    /// No contamination.
    None,
    /// A fifth of the variables, all blocks.
    O1,
    /// A fifth of the variables, highest-initial-rank block.
    O2,
    /// A fifth of the variables, lowest-initial-rank block.
    O3,
    /// All variables, all blocks.
    O4,
    /// All variables, highest-initial-rank block.
    O5,
    /// All variables, lowest-initial-rank block.
    O6,
    /// Shorthand for running O1 through O6 in one study.
    All,
}

impl OutlierConfiguration {
    pub fn label(&self) -> &'static str {
        match self {
            OutlierConfiguration::None => "none",
            OutlierConfiguration::O1 => "O1",
            OutlierConfiguration::O2 => "O2",
            OutlierConfiguration::O3 => "O3",
            OutlierConfiguration::O4 => "O4",
            OutlierConfiguration::O5 => "O5",
            OutlierConfiguration::O6 => "O6",
            OutlierConfiguration::All => "all",
        }
    }

    fn default_variable_fraction(&self) -> f64 {
        match self {
            OutlierConfiguration::O1 | OutlierConfiguration::O2 | OutlierConfiguration::O3 => 0.2,
            _ => 1.0,
        }
    }

    fn targets(&self, initial_ranks: &[usize]) -> Vec<usize> {
        let argmax = initial_ranks
            .iter()
            .enumerate()
            .max_by_key(|(_, r)| **r)
            .map(|(k, _)| k)
            .unwrap_or(0);
        let argmin = initial_ranks
            .iter()
            .enumerate()
            .min_by_key(|(_, r)| **r)
            .map(|(k, _)| k)
            .unwrap_or(0);
        match self {
            OutlierConfiguration::O1 | OutlierConfiguration::O4 => {
                (0..initial_ranks.len()).collect()
            }
            OutlierConfiguration::O2 | OutlierConfiguration::O5 => vec![argmax],
            OutlierConfiguration::O3 | OutlierConfiguration::O6 => vec![argmin],
            _ => Vec::new(),
        }
    }
}

/// Distribution of the additive contamination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OutlierDistribution {
    /// Additions drawn from N(mean, sd^2).
    Fixed { mean: f64, sd: f64 },
    /// Additions drawn from N(3m + 5s, (3s)^2) where m and s are the
    /// affected variable's own mean and standard deviation.
    Adaptive,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutlierConfig {
    pub configuration: OutlierConfiguration,
    pub distribution: OutlierDistribution,
    /// Fraction of subjects whose cells get contaminated; the same subject
    /// columns are reused across variables and blocks.
    pub observation_fraction: f64,
    /// Fraction of variables per target block; defaults to the
    /// configuration's convention (a fifth for O1-O3, all for O4-O6).
    #[serde(default)]
    pub variable_fraction: Option<f64>,
    pub seed: u64,
}

impl OutlierConfig {
    pub fn none() -> Self {
        OutlierConfig {
            configuration: OutlierConfiguration::None,
            distribution: OutlierDistribution::Fixed { mean: 0.0, sd: 1.0 },
            observation_fraction: 0.0,
            variable_fraction: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.observation_fraction) {
            return Err(Error::invalid("observation_fraction must be in [0, 1]"));
        }
        if let Some(f) = self.variable_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::invalid("variable_fraction must be in [0, 1]"));
            }
        }
        if let OutlierDistribution::Fixed { sd, .. } = self.distribution {
            if sd < 0.0 {
                return Err(Error::invalid("outlier sd must be nonnegative"));
            }
        }
        Ok(())
    }
}

/// Adds outliers in place according to the configuration. The contaminated
/// subject columns are drawn once and shared by every affected variable in
/// every target block. `None` leaves the data untouched; `All` must be
/// expanded by the caller.
pub fn inject_outliers(
    data: &MultiBlockDataset,
    cfg: &OutlierConfig,
    initial_ranks: &[usize],
) -> Result<MultiBlockDataset> {
    cfg.validate()?;
    if cfg.configuration == OutlierConfiguration::All {
        return Err(Error::invalid(
            "configuration `All` must be expanded into O1..O6 before injection",
        ));
    }
    if initial_ranks.len() != data.n_blocks() {
        return Err(Error::invalid("initial_ranks must match the block count"));
    }
    let mut blocks: Vec<Matrix> = data.blocks().to_vec();
    if cfg.configuration == OutlierConfiguration::None {
        return MultiBlockDataset::new(blocks, data.masks().to_vec(), data.block_names().to_vec());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(777));
    let n = data.n_subjects();
    let n_cols = (cfg.observation_fraction * n as f64).floor() as usize;
    let mut cols: Vec<usize> = sample(&mut rng, n, n_cols).into_iter().collect();
    cols.sort_unstable();

    let var_frac = cfg
        .variable_fraction
        .unwrap_or_else(|| cfg.configuration.default_variable_fraction());

    for k in cfg.configuration.targets(initial_ranks) {
        let block = &mut blocks[k];
        let pk = block.nrows();
        let nv = (var_frac * pk as f64).floor() as usize;
        let mut rows: Vec<usize> = sample(&mut rng, pk, nv).into_iter().collect();
        rows.sort_unstable();
        for &i in &rows {
            let (mu, sd) = match cfg.distribution {
                OutlierDistribution::Fixed { mean, sd } => (mean, sd),
                OutlierDistribution::Adaptive => {
                    let row = block.row(i);
                    let m = row.sum() / n as f64;
                    let var = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
                    let s = var.sqrt();
                    (3.0 * m + 5.0 * s, 3.0 * s)
                }
            };
            let dist = Normal::new(mu, sd)
                .map_err(|_| Error::invalid("invalid outlier distribution"))?;
            for &j in &cols {
                block[(i, j)] += dist.sample(&mut rng);
            }
        }
    }
    MultiBlockDataset::new(blocks, data.masks().to_vec(), data.block_names().to_vec())
}

fn default_workers() -> usize {
    0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyConfig {
    pub generator: GeneratorConfig,
    pub outliers: OutlierConfig,
    pub replications: usize,
    pub ajive: AjiveConfig,
    /// Backends to compare, e.g. [classical, robust].
    pub methods: Vec<crate::ajive::Backend>,
    /// 0 means use all available cores.
    #[serde(default = "default_workers")]
    pub parallel_workers: usize,
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.outliers.validate()?;
        if self.replications == 0 {
            return Err(Error::invalid("replications must be positive"));
        }
        if self.methods.is_empty() {
            return Err(Error::invalid("need at least one method"));
        }
        Ok(())
    }
}

/// One decomposition's metrics within a replication.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRecord {
    pub scenario: String,
    pub method: String,
    pub joint_rank: usize,
    pub individual_ranks: Vec<usize>,
    pub variance: Vec<BlockVariance>,
    pub sre: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Replication {
    pub index: usize,
    pub seed: u64,
    pub records: Vec<MetricRecord>,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateRow {
    pub scenario: String,
    pub method: String,
    pub n_replications: usize,
    pub median_joint_rank: f64,
    pub median_individual_ranks: Vec<f64>,
    pub median_sre: f64,
    pub median_auc: f64,
    /// Per block: median joint, individual and residual variance fractions.
    pub median_variance: Vec<BlockVariance>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyReport {
    pub schema_version: String,
    pub config: StudyConfig,
    pub replications: Vec<Replication>,
    pub aggregates: Vec<AggregateRow>,
    pub failed_replications: usize,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn scenarios_of(cfg: &OutlierConfig) -> Vec<OutlierConfiguration> {
    use OutlierConfiguration::*;
    match cfg.configuration {
        None => vec![None],
        All => vec![None, O1, O2, O3, O4, O5, O6],
        one => vec![None, one],
    }
}

fn run_one_replication(cfg: &StudyConfig, rep: usize) -> Replication {
    let seed = cfg.generator.seed.wrapping_add(rep as u64);
    let mut records = Vec::new();
    let mut errors = Vec::new();

    let mut gen_cfg = cfg.generator.clone();
    gen_cfg.seed = seed;
    let (clean, truth) = match generate_multiblock(&gen_cfg) {
        Ok(v) => v,
        Err(e) => {
            return Replication {
                index: rep,
                seed,
                records,
                errors: vec![format!("generation: {e}")],
            }
        }
    };

    for scenario in scenarios_of(&cfg.outliers) {
        let data = if scenario == OutlierConfiguration::None {
            clean.clone()
        } else {
            let mut out_cfg = cfg.outliers.clone();
            out_cfg.configuration = scenario;
            out_cfg.seed = cfg.outliers.seed.wrapping_add(rep as u64);
            match inject_outliers(&clean, &out_cfg, &cfg.ajive.initial_ranks) {
                Ok(d) => d,
                Err(e) => {
                    errors.push(format!("{}: injection: {e}", scenario.label()));
                    continue;
                }
            }
        };
        for &method in &cfg.methods {
            let mut ajive_cfg = cfg.ajive.clone();
            ajive_cfg.backend = method;
            let tag = format!("{}/{}", scenario.label(), method);
            match evaluate(&data, &ajive_cfg, &truth) {
                Ok(mut rec) => {
                    rec.scenario = scenario.label().to_string();
                    rec.method = method.to_string();
                    records.push(rec);
                }
                Err(e) => errors.push(format!("{tag}: {e}")),
            }
        }
    }
    Replication {
        index: rep,
        seed,
        records,
        errors,
    }
}

fn evaluate(
    data: &MultiBlockDataset,
    cfg: &AjiveConfig,
    truth: &GroundTruth,
) -> Result<MetricRecord> {
    let result = decompose(data, cfg)?;
    let variance = variance_explained(&result, data.blocks())?;
    let sre = subspace_recovery_error(&result.joint_basis, &truth.joint_basis)?;
    let auc = logistic_auc(&result.joint_scores, &truth.labels)?;
    Ok(MetricRecord {
        scenario: String::new(),
        method: String::new(),
        joint_rank: result.joint_rank,
        individual_ranks: result.per_block.iter().map(|b| b.individual_rank).collect(),
        variance,
        sre,
        auc,
    })
}

/// Runs every replication, in parallel when workers permit. Replications
/// are seeded independently so the outcome does not depend on the worker
/// count; failed replications are recorded and excluded from aggregates.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyReport> {
    cfg.validate()?;
    let run_all = || -> Vec<Replication> {
        (0..cfg.replications)
            .into_par_iter()
            .map(|rep| run_one_replication(cfg, rep))
            .collect()
    };
    let replications = if cfg.parallel_workers > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.parallel_workers)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        pool.install(run_all)
    } else {
        run_all()
    };

    let failed = replications.iter().filter(|r| !r.errors.is_empty()).count();
    if failed * 5 > cfg.replications {
        return Err(Error::invalid(format!(
            "{failed} of {} replications failed (over 20%)",
            cfg.replications
        )));
    }

    let aggregates = aggregate(&replications);
    Ok(StudyReport {
        schema_version: crate::SCHEMA_VERSION.to_string(),
        config: cfg.clone(),
        replications,
        aggregates,
        failed_replications: failed,
    })
}

fn aggregate(replications: &[Replication]) -> Vec<AggregateRow> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for rep in replications {
        if !rep.errors.is_empty() {
            continue;
        }
        for rec in &rep.records {
            let key = (rec.scenario.clone(), rec.method.clone());
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
    }
    keys.iter()
        .map(|(scenario, method)| {
            let recs: Vec<&MetricRecord> = replications
                .iter()
                .filter(|r| r.errors.is_empty())
                .flat_map(|r| &r.records)
                .filter(|rec| &rec.scenario == scenario && &rec.method == method)
                .collect();
            let n_blocks = recs.first().map_or(0, |r| r.individual_ranks.len());
            let mut joint: Vec<f64> = recs.iter().map(|r| r.joint_rank as f64).collect();
            let median_individual_ranks = (0..n_blocks)
                .map(|k| {
                    let mut v: Vec<f64> =
                        recs.iter().map(|r| r.individual_ranks[k] as f64).collect();
                    median(&mut v)
                })
                .collect();
            let median_variance = (0..n_blocks)
                .map(|k| {
                    let mut j: Vec<f64> = recs.iter().map(|r| r.variance[k].joint).collect();
                    let mut i: Vec<f64> = recs.iter().map(|r| r.variance[k].individual).collect();
                    let mut e: Vec<f64> = recs.iter().map(|r| r.variance[k].residual).collect();
                    BlockVariance {
                        joint: median(&mut j),
                        individual: median(&mut i),
                        residual: median(&mut e),
                    }
                })
                .collect();
            let mut sre: Vec<f64> = recs.iter().map(|r| r.sre).collect();
            let mut auc: Vec<f64> = recs.iter().map(|r| r.auc).collect();
            AggregateRow {
                scenario: scenario.clone(),
                method: method.clone(),
                n_replications: recs.len(),
                median_joint_rank: median(&mut joint),
                median_individual_ranks,
                median_sre: median(&mut sre),
                median_auc: median(&mut auc),
                median_variance,
            }
        })
        .collect()
}

#[allow(dead_code)]
fn scores_column(u: &Matrix, col: usize) -> DVector<f64> {
    u.column(col).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ajive::Backend;

    fn small_gen(seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            n: 40,
            p: vec![30, 25],
            joint_rank: 2,
            individual_ranks: vec![3, 2],
            signal_scale: 5.0,
            joint_scale_boost: 1.3,
            noise_sd: 0.1,
            seed,
        }
    }

    #[test]
    fn generator_shapes_and_orthogonality() {
        let (data, truth) = generate_multiblock(&small_gen(1)).unwrap();
        assert_eq!(data.n_blocks(), 2);
        assert_eq!(data.n_subjects(), 40);
        assert_eq!(truth.joint_basis.ncols(), 2);
        let gram = truth.joint_basis.transpose() * &truth.joint_basis;
        assert!((gram - Matrix::identity(2, 2)).norm() < 1e-10);
        // individual row spaces orthogonal to the joint basis
        for i in &truth.individual {
            let overlap = (i * &truth.joint_basis).norm();
            assert!(overlap < 1e-8 * i.norm());
        }
        // block = joint + individual + noise, noise small
        for (k, x) in data.blocks().iter().enumerate() {
            let resid = x - &truth.joint[k] - &truth.individual[k];
            let per_cell = resid.norm() / ((x.nrows() * x.ncols()) as f64).sqrt();
            assert!((per_cell - 0.1).abs() < 0.05, "noise rms {per_cell}");
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let (a, _) = generate_multiblock(&small_gen(5)).unwrap();
        let (b, _) = generate_multiblock(&small_gen(5)).unwrap();
        assert_eq!(a.block(0), b.block(0));
        let (c, _) = generate_multiblock(&small_gen(6)).unwrap();
        assert_ne!(a.block(0), c.block(0));
    }

    #[test]
    fn labels_track_first_joint_score() {
        let mut cfg = small_gen(2);
        cfg.n = 400;
        cfg.p = vec![50, 40];
        let (_, truth) = generate_multiblock(&cfg).unwrap();
        let mut agree = 0;
        for i in 0..cfg.n {
            let pos = truth.joint_basis[(i, 0)] > 0.0;
            if pos == truth.labels[i] {
                agree += 1;
            }
        }
        // strongly but not perfectly correlated
        let frac = agree as f64 / cfg.n as f64;
        assert!(frac > 0.75 && frac < 1.0, "agreement {frac}");
    }

    fn outlier_cfg(configuration: OutlierConfiguration) -> OutlierConfig {
        OutlierConfig {
            configuration,
            distribution: OutlierDistribution::Fixed { mean: 10.0, sd: 2.0 },
            observation_fraction: 0.1,
            variable_fraction: None,
            seed: 9,
        }
    }

    #[test]
    fn injection_none_is_identity() {
        let (data, _) = generate_multiblock(&small_gen(3)).unwrap();
        let out = inject_outliers(&data, &outlier_cfg(OutlierConfiguration::None), &[3, 2]).unwrap();
        assert_eq!(out.block(0), data.block(0));
        assert_eq!(out.block(1), data.block(1));
    }

    #[test]
    fn injection_modifies_expected_cell_count() {
        let (data, _) = generate_multiblock(&small_gen(3)).unwrap();
        let ranks = [3usize, 2];
        let cases = [
            (OutlierConfiguration::O1, vec![0usize, 1]),
            (OutlierConfiguration::O2, vec![0]),
            (OutlierConfiguration::O3, vec![1]),
            (OutlierConfiguration::O4, vec![0, 1]),
            (OutlierConfiguration::O5, vec![0]),
            (OutlierConfiguration::O6, vec![1]),
        ];
        for (conf, expected_targets) in cases {
            let out = inject_outliers(&data, &outlier_cfg(conf), &ranks).unwrap();
            let nc = (0.1 * 40.0_f64).floor() as usize;
            for k in 0..2 {
                let changed = data
                    .block(k)
                    .iter()
                    .zip(out.block(k).iter())
                    .filter(|(a, b)| a != b)
                    .count();
                if expected_targets.contains(&k) {
                    let frac = conf.default_variable_fraction();
                    let nv = (frac * data.block(k).nrows() as f64).floor() as usize;
                    assert_eq!(changed, nv * nc, "{conf:?} block {k}");
                } else {
                    assert_eq!(changed, 0, "{conf:?} block {k}");
                }
            }
        }
    }

    #[test]
    fn injection_shares_columns_across_blocks() {
        let (data, _) = generate_multiblock(&small_gen(4)).unwrap();
        let out = inject_outliers(&data, &outlier_cfg(OutlierConfiguration::O4), &[3, 2]).unwrap();
        let changed_cols = |k: usize| -> Vec<usize> {
            let mut cols = Vec::new();
            for j in 0..data.n_subjects() {
                for i in 0..data.block(k).nrows() {
                    if data.block(k)[(i, j)] != out.block(k)[(i, j)] {
                        cols.push(j);
                        break;
                    }
                }
            }
            cols
        };
        assert_eq!(changed_cols(0), changed_cols(1));
        assert_eq!(changed_cols(0).len(), 4);
    }

    #[test]
    fn injection_is_deterministic() {
        let (data, _) = generate_multiblock(&small_gen(4)).unwrap();
        let cfg = outlier_cfg(OutlierConfiguration::O1);
        let a = inject_outliers(&data, &cfg, &[3, 2]).unwrap();
        let b = inject_outliers(&data, &cfg, &[3, 2]).unwrap();
        assert_eq!(a.block(0), b.block(0));
    }

    #[test]
    fn adaptive_outliers_scale_with_variable() {
        let (data, _) = generate_multiblock(&small_gen(8)).unwrap();
        let mut cfg = outlier_cfg(OutlierConfiguration::O4);
        cfg.distribution = OutlierDistribution::Adaptive;
        let out = inject_outliers(&data, &cfg, &[3, 2]).unwrap();
        // additions should be roughly 3m + 5s sized per row
        let block = data.block(0);
        let outb = out.block(0);
        for i in 0..block.nrows() {
            let row = block.row(i);
            let m = row.sum() / row.len() as f64;
            let s = (row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / row.len() as f64).sqrt();
            let mu = 3.0 * m + 5.0 * s;
            for j in 0..block.ncols() {
                let add = outb[(i, j)] - block[(i, j)];
                if add != 0.0 {
                    assert!((add - mu).abs() < 6.0 * 3.0 * s, "row {i} addition {add} vs mu {mu}");
                }
            }
        }
    }

    fn tiny_study(backends: Vec<Backend>) -> StudyConfig {
        StudyConfig {
            generator: small_gen(100),
            outliers: outlier_cfg(OutlierConfiguration::O1),
            replications: 3,
            ajive: AjiveConfig::new(vec![5, 4], Backend::Classical),
            methods: backends,
            parallel_workers: 0,
        }
    }

    #[test]
    fn study_runs_and_aggregates() {
        let report = run_study(&tiny_study(vec![Backend::Classical])).unwrap();
        assert_eq!(report.replications.len(), 3);
        assert_eq!(report.failed_replications, 0);
        // scenarios none + O1, one method
        assert_eq!(report.aggregates.len(), 2);
        for row in &report.aggregates {
            assert_eq!(row.n_replications, 3);
            assert!(row.median_joint_rank >= 0.0);
            assert!(row.median_sre.is_finite());
            assert!(row.median_auc > 0.0 && row.median_auc <= 1.0);
        }
    }

    #[test]
    fn study_worker_count_does_not_change_results() {
        let mut cfg = tiny_study(vec![Backend::Classical]);
        let a = run_study(&cfg).unwrap();
        cfg.parallel_workers = 1;
        let b = run_study(&cfg).unwrap();
        cfg.parallel_workers = 4;
        let c = run_study(&cfg).unwrap();
        let dump = |r: &StudyReport| serde_json::to_string(&r.aggregates).unwrap();
        assert_eq!(dump(&a), dump(&b));
        assert_eq!(dump(&a), dump(&c));
    }

    #[test]
    fn study_rejects_bad_config() {
        let mut cfg = tiny_study(vec![]);
        assert!(run_study(&cfg).is_err());
        cfg.methods = vec![Backend::Classical];
        cfg.replications = 0;
        assert!(run_study(&cfg).is_err());
    }
}
