//! File formats and report writers: CSV block ingestion, JSON configs and
//! reports, plot-ready TSV summaries.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ajive::{AjiveConfig, AjiveResult, MultiBlockDataset};
use crate::error::{Error, Result};
use crate::metrics::BlockVariance;
use crate::robust_svd::{Matrix, MissingMask};
use crate::simulation::{StudyConfig, StudyReport};
use crate::SCHEMA_VERSION;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Orientation {
    #[serde(rename = "variables-in-rows")]
    VariablesInRows,
    #[serde(rename = "variables-in-columns")]
    VariablesInColumns,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockEntry {
    pub name: String,
    pub csv_path: String,
    pub orientation: Orientation,
}

fn default_missing_token() -> String {
    "NA".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: String,
    pub blocks: Vec<BlockEntry>,
    #[serde(default = "default_missing_token")]
    pub missing_token: String,
    #[serde(default)]
    pub center_rows: bool,
    #[serde(default)]
    pub scale_rows: bool,
}

/// Dataset plus the identifiers needed to label outputs.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub data: MultiBlockDataset,
    pub subject_ids: Vec<String>,
    /// Per block, one ID per variable row.
    pub variable_ids: Vec<Vec<String>>,
}

fn parse_error(path: &Path, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        message: message.into(),
    }
}

fn check_schema_version(found: &str) -> Result<()> {
    if found != SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: found.to_string(),
            expected: SCHEMA_VERSION.to_string(),
        });
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path)?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| parse_error(path, e.to_string()))?;
    check_schema_version(&manifest.schema_version)?;
    if manifest.blocks.len() < 2 {
        return Err(parse_error(path, "manifest needs at least 2 blocks"));
    }
    Ok(manifest)
}

struct RawBlock {
    values: Vec<Vec<Option<f64>>>, // variables x subjects
    variable_ids: Vec<String>,
    subject_ids: Vec<String>,
}

fn parse_block_csv(path: &Path, missing_token: &str) -> Result<RawBlock> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| parse_error(path, e.to_string()))?;
    let mut rows = reader.records();
    let header = rows
        .next()
        .ok_or_else(|| parse_error(path, "empty file"))?
        .map_err(|e| parse_error(path, e.to_string()))?;
    if header.len() < 2 {
        return Err(parse_error(path, "header needs at least one subject column"));
    }
    let subject_ids: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    for (i, id) in subject_ids.iter().enumerate() {
        if subject_ids[..i].contains(id) {
            return Err(parse_error(path, format!("duplicate subject header '{id}'")));
        }
    }
    let n = subject_ids.len();
    let mut values = Vec::new();
    let mut variable_ids = Vec::new();
    for (line, record) in rows.enumerate() {
        let record = record.map_err(|e| parse_error(path, e.to_string()))?;
        if record.len() != n + 1 {
            return Err(parse_error(
                path,
                format!(
                    "row {} has {} fields, expected {}",
                    line + 2,
                    record.len(),
                    n + 1
                ),
            ));
        }
        variable_ids.push(record[0].trim().to_string());
        let mut row = Vec::with_capacity(n);
        for (j, field) in record.iter().skip(1).enumerate() {
            let field = field.trim();
            if field == missing_token {
                row.push(None);
            } else {
                let v: f64 = field.parse().map_err(|_| {
                    parse_error(
                        path,
                        format!("non-numeric cell '{}' at row {}, column {}", field, line + 2, j + 2),
                    )
                })?;
                row.push(Some(v));
            }
        }
        values.push(row);
    }
    if values.is_empty() {
        return Err(parse_error(path, "no data rows"));
    }
    Ok(RawBlock {
        values,
        variable_ids,
        subject_ids,
    })
}

fn transpose_raw(raw: RawBlock) -> RawBlock {
    let p = raw.values.len();
    let n = raw.values[0].len();
    let mut values = vec![vec![None; p]; n];
    for i in 0..p {
        for j in 0..n {
            values[j][i] = raw.values[i][j];
        }
    }
    RawBlock {
        values,
        variable_ids: raw.subject_ids,
        subject_ids: raw.variable_ids,
    }
}

/// Loads every block named by the manifest into a row-aligned dataset.
/// CSV paths are resolved relative to the manifest's directory. Missing
/// tokens become masked cells; centering and scaling use observed cells
/// only and are applied at load, never inside the engine.
pub fn load_manifest(path: &Path) -> Result<LoadedDataset> {
    let manifest = read_manifest(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut blocks = Vec::new();
    let mut masks = Vec::new();
    let mut names = Vec::new();
    let mut variable_ids = Vec::new();
    let mut subject_ids: Option<Vec<String>> = None;

    for entry in &manifest.blocks {
        let csv_path = base.join(&entry.csv_path);
        let mut raw = parse_block_csv(&csv_path, &manifest.missing_token)?;
        if entry.orientation == Orientation::VariablesInColumns {
            raw = transpose_raw(raw);
        }
        match &subject_ids {
            None => subject_ids = Some(raw.subject_ids.clone()),
            Some(expected) => {
                if raw.subject_ids.len() != expected.len() {
                    return Err(parse_error(
                        &csv_path,
                        format!(
                            "block '{}' has {} subjects, expected {}",
                            entry.name,
                            raw.subject_ids.len(),
                            expected.len()
                        ),
                    ));
                }
            }
        }
        let p = raw.values.len();
        let n = raw.values[0].len();
        let mut matrix = Matrix::zeros(p, n);
        let mut flags = vec![true; p * n];
        let mut any_missing = false;
        for i in 0..p {
            for j in 0..n {
                match raw.values[i][j] {
                    Some(v) => matrix[(i, j)] = v,
                    None => {
                        flags[i * n + j] = false;
                        any_missing = true;
                    }
                }
            }
        }

        if manifest.center_rows || manifest.scale_rows {
            for i in 0..p {
                let observed: Vec<f64> = (0..n)
                    .filter(|&j| flags[i * n + j])
                    .map(|j| matrix[(i, j)])
                    .collect();
                let m = observed.iter().sum::<f64>() / observed.len() as f64;
                if manifest.center_rows {
                    for j in 0..n {
                        matrix[(i, j)] -= m;
                    }
                }
                if manifest.scale_rows {
                    let var = observed
                        .iter()
                        .map(|x| {
                            let d = x - m;
                            d * d
                        })
                        .sum::<f64>()
                        / (observed.len().max(2) - 1) as f64;
                    if var == 0.0 {
                        return Err(parse_error(
                            &csv_path,
                            format!(
                                "variable '{}' has zero variance, cannot scale",
                                raw.variable_ids[i]
                            ),
                        ));
                    }
                    let sd = var.sqrt();
                    for j in 0..n {
                        matrix[(i, j)] /= sd;
                    }
                }
            }
        }

        let mask = if any_missing {
            Some(
                MissingMask::new(p, n, flags)
                    .map_err(|e| parse_error(&csv_path, e.to_string()))?,
            )
        } else {
            None
        };
        blocks.push(matrix);
        masks.push(mask);
        names.push(entry.name.clone());
        variable_ids.push(raw.variable_ids);
    }

    let data = MultiBlockDataset::new(blocks, masks, names)?;
    Ok(LoadedDataset {
        data,
        subject_ids: subject_ids.unwrap_or_default(),
        variable_ids,
    })
}

/// Six-significant-digit formatting for TSV summaries.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let mag = x.abs().log10().floor() as i32;
    if (-4..6).contains(&mag) {
        let decimals = (5 - mag).max(0) as usize;
        let s = format!("{:.*}", decimals, x);
        // trim trailing zeros but keep at least one digit
        let trimmed = s.trim_end_matches('0').trim_end_matches('.');
        if trimmed.is_empty() || trimmed == "-" {
            "0".to_string()
        } else {
            trimmed.to_string()
        }
    } else {
        format!("{:.5e}", x)
    }
}

/// Writes through a temp file in the same directory, then renames.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile_in(dir)?;
    tmp.1.write_all(bytes)?;
    tmp.1.sync_all().ok();
    drop(tmp.1);
    fs::rename(&tmp.0, path)?;
    Ok(())
}

fn tempfile_in(dir: &Path) -> Result<(PathBuf, fs::File)> {
    for attempt in 0..1000u32 {
        let candidate = dir.join(format!(".jivekit-tmp-{}-{attempt}", std::process::id()));
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&candidate)
        {
            Ok(f) => return Ok((candidate, f)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Err(Error::invalid("could not create temporary file"))
}

/// Top-level JSON report for a single decomposition run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecomposeReport {
    pub schema_version: String,
    pub backend: String,
    pub config: AjiveConfig,
    pub joint_rank: usize,
    pub individual_ranks: Vec<usize>,
    pub block_names: Vec<String>,
    pub variance: Vec<BlockVariance>,
    pub m_singular_values: Vec<f64>,
    pub threshold: f64,
    pub warnings: Vec<String>,
    /// Largest |X - J - I - E| cell over all blocks.
    pub additivity_max_error: f64,
    pub outputs: Vec<String>,
}

fn write_component_csv(
    path: &Path,
    matrix: &Matrix,
    variable_ids: &[String],
    subject_ids: &[String],
) -> Result<()> {
    let mut out = String::new();
    out.push_str("variable");
    for id in subject_ids {
        out.push(',');
        out.push_str(id);
    }
    out.push('\n');
    for i in 0..matrix.nrows() {
        out.push_str(&variable_ids[i]);
        for j in 0..matrix.ncols() {
            out.push(',');
            out.push_str(&format!("{}", matrix[(i, j)]));
        }
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

/// Writes report.json, per-block component CSVs, joint scores and the
/// variance TSV for one decomposition.
pub fn write_decompose_outputs(
    out_dir: &Path,
    loaded: &LoadedDataset,
    config: &AjiveConfig,
    result: &AjiveResult,
    variance: &[BlockVariance],
) -> Result<DecomposeReport> {
    fs::create_dir_all(out_dir)?;
    let mut outputs = Vec::new();
    let mut additivity = 0.0f64;
    for (k, block) in result.per_block.iter().enumerate() {
        let name = &loaded.data.block_names()[k];
        let x = loaded.data.block(k);
        let recon = &block.joint + &block.individual + &block.noise;
        for j in 0..x.ncols() {
            for i in 0..x.nrows() {
                let observed = loaded.data.masks()[k]
                    .as_ref()
                    .map_or(true, |m| m.observed(i, j));
                if observed {
                    additivity = additivity.max((recon[(i, j)] - x[(i, j)]).abs());
                }
            }
        }
        for (tag, m) in [
            ("joint", &block.joint),
            ("individual", &block.individual),
            ("noise", &block.noise),
        ] {
            let file = format!("{name}_{tag}.csv");
            write_component_csv(
                &out_dir.join(&file),
                m,
                &loaded.variable_ids[k],
                &loaded.subject_ids,
            )?;
            outputs.push(file);
        }
    }

    // joint scores: subjects x r
    let mut scores = String::new();
    scores.push_str("subject");
    for c in 0..result.joint_rank {
        scores.push_str(&format!(",score{}", c + 1));
    }
    scores.push('\n');
    for (i, id) in loaded.subject_ids.iter().enumerate() {
        scores.push_str(id);
        for c in 0..result.joint_rank {
            scores.push_str(&format!(",{}", result.joint_scores[(i, c)]));
        }
        scores.push('\n');
    }
    atomic_write(&out_dir.join("joint_scores.csv"), scores.as_bytes())?;
    outputs.push("joint_scores.csv".to_string());

    let mut tsv = String::from("block\tcomponent\tfraction\n");
    for (k, v) in variance.iter().enumerate() {
        let name = &loaded.data.block_names()[k];
        for (comp, val) in [
            ("joint", v.joint),
            ("individual", v.individual),
            ("residual", v.residual),
        ] {
            tsv.push_str(&format!("{name}\t{comp}\t{}\n", format_sig6(val)));
        }
    }
    atomic_write(&out_dir.join("variance_explained.tsv"), tsv.as_bytes())?;
    outputs.push("variance_explained.tsv".to_string());

    let report = DecomposeReport {
        schema_version: SCHEMA_VERSION.to_string(),
        backend: config.backend.to_string(),
        config: config.clone(),
        joint_rank: result.joint_rank,
        individual_ranks: result.per_block.iter().map(|b| b.individual_rank).collect(),
        block_names: loaded.data.block_names().to_vec(),
        variance: variance.to_vec(),
        m_singular_values: result.diagnostics.m_singular_values.clone(),
        threshold: result.diagnostics.threshold,
        warnings: result.diagnostics.warnings.clone(),
        additivity_max_error: additivity,
        outputs,
    };
    for v in &report.m_singular_values {
        if !v.is_finite() {
            return Err(Error::invalid("non-finite value in report"));
        }
    }
    let json = serde_json::to_string_pretty(&report)?;
    atomic_write(&out_dir.join("report.json"), json.as_bytes())?;
    Ok(report)
}

/// Study config file: a StudyConfig plus the schema version marker.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyFile {
    pub schema_version: String,
    #[serde(flatten)]
    pub study: StudyConfig,
}

pub fn read_study_config(path: &Path) -> Result<StudyConfig> {
    let text = fs::read_to_string(path)?;
    let file: StudyFile =
        serde_json::from_str(&text).map_err(|e| parse_error(path, e.to_string()))?;
    check_schema_version(&file.schema_version)?;
    Ok(file.study)
}

/// Decompose config file: an AjiveConfig plus the schema version marker.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AjiveConfigFile {
    pub schema_version: String,
    #[serde(flatten)]
    pub config: AjiveConfig,
}

pub fn read_ajive_config(path: &Path) -> Result<AjiveConfig> {
    let text = fs::read_to_string(path)?;
    let file: AjiveConfigFile =
        serde_json::from_str(&text).map_err(|e| parse_error(path, e.to_string()))?;
    check_schema_version(&file.schema_version)?;
    Ok(file.config)
}

pub fn read_study_report(path: &Path) -> Result<StudyReport> {
    let text = fs::read_to_string(path)?;
    let report: StudyReport =
        serde_json::from_str(&text).map_err(|e| parse_error(path, e.to_string()))?;
    check_schema_version(&report.schema_version)?;
    Ok(report)
}

/// Writes study_report.json plus the four TSV summaries. `cmd_report`
/// reuses the same writer so regenerated TSVs are byte-identical.
pub fn write_study_outputs(out_dir: &Path, report: &StudyReport) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let json = serde_json::to_string_pretty(report)?;
    atomic_write(&out_dir.join("study_report.json"), json.as_bytes())?;
    write_study_tsvs(out_dir, report)
}

pub fn write_study_tsvs(out_dir: &Path, report: &StudyReport) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let n_blocks = report.config.generator.p.len();

    let mut ranks = String::from("scenario\tmethod\tjoint");
    for k in 0..n_blocks {
        ranks.push_str(&format!("\tindividual{}", k + 1));
    }
    ranks.push('\n');
    for row in &report.aggregates {
        ranks.push_str(&format!(
            "{}\t{}\t{}",
            row.scenario,
            row.method,
            format_sig6(row.median_joint_rank)
        ));
        for v in &row.median_individual_ranks {
            ranks.push_str(&format!("\t{}", format_sig6(*v)));
        }
        ranks.push('\n');
    }
    atomic_write(&out_dir.join("ranks_median.tsv"), ranks.as_bytes())?;

    let mut sre = String::from("replication\tscenario\tmethod\tsre\n");
    let mut auc = String::from("replication\tscenario\tmethod\tauc\n");
    let mut var = String::from(
        "replication\tscenario\tmethod\tblock\tjoint\tindividual\tresidual\n",
    );
    for rep in &report.replications {
        if !rep.errors.is_empty() {
            continue;
        }
        for rec in &rep.records {
            sre.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                rep.index,
                rec.scenario,
                rec.method,
                format_sig6(rec.sre)
            ));
            auc.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                rep.index,
                rec.scenario,
                rec.method,
                format_sig6(rec.auc)
            ));
            for (k, v) in rec.variance.iter().enumerate() {
                var.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                    rep.index,
                    rec.scenario,
                    rec.method,
                    k + 1,
                    format_sig6(v.joint),
                    format_sig6(v.individual),
                    format_sig6(v.residual)
                ));
            }
        }
    }
    atomic_write(&out_dir.join("sre.tsv"), sre.as_bytes())?;
    atomic_write(&out_dir.join("auc.tsv"), auc.as_bytes())?;
    atomic_write(&out_dir.join("variance.tsv"), var.as_bytes())?;
    Ok(())
}
