//! Tabular ingestion, mixed-type encoding and role assignment.
//!
//! Raw columns are declared `continuous`, `categorical` or `binary`. Encoding
//! produces the numeric design blocks: continuous feature columns are
//! mean-imputed and standardized, categorical columns are multi-hot encoded
//! and shifted to {-0.5, +0.5} (a missing value encodes as all -0.5, the
//! absence of every level), and the attribute is mapped to {0, 1}. The
//! outcome keeps its scale: binary outcomes map to {0, 1}, continuous
//! outcomes are only mean-imputed, so effect estimates stay in outcome units.
//!
//! Standardization statistics are computed on the full dataset before any
//! splitting.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::{Error, Result};

/// Declared kind of a raw column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Continuous,
    Categorical,
    Binary,
}

/// One raw cell.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Missing,
    Number(f64),
    Text(String),
}

#[derive(Debug, Clone)]
pub struct ColumnMeta {
    pub name: String,
    pub kind: ColumnKind,
}

/// A parsed table: all rows share the column set; `n >= 1`.
#[derive(Debug, Clone)]
pub struct RawDataset {
    pub columns: Vec<ColumnMeta>,
    pub rows: Vec<Vec<Cell>>,
}

impl RawDataset {
    pub fn n(&self) -> usize {
        self.rows.len()
    }

    fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }
}

/// Role assignment for one analysis pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoleConfig {
    pub attribute: String,
    pub outcome: String,
    #[serde(default)]
    pub confounders: Vec<String>,
    #[serde(default)]
    pub z_proxies: Vec<String>,
    #[serde(default)]
    pub x_proxies: Vec<String>,
    #[serde(default = "default_true")]
    pub exclude_attribute_from_confounders: bool,
}

fn default_true() -> bool {
    true
}

/// Which encoded columns a source column produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncodedSource {
    pub source: String,
    pub kind: ColumnKind,
    pub encoded: Vec<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EncodingReport {
    pub w: Vec<EncodedSource>,
    pub z: Vec<EncodedSource>,
    pub x: Vec<EncodedSource>,
    pub attribute_levels: Vec<String>,
    pub dropped_from_w: Vec<String>,
}

/// Encoded design blocks for one analysis pair.
#[derive(Debug, Clone)]
pub struct DesignMatrices {
    pub w: DMatrix<f64>,
    pub d: DVector<f64>,
    pub z: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub w_labels: Vec<String>,
    pub z_labels: Vec<String>,
    pub x_labels: Vec<String>,
    pub d_label: String,
    pub y_label: String,
    pub report: EncodingReport,
}

impl DesignMatrices {
    pub fn n(&self) -> usize {
        self.d.len()
    }

    /// Restricts all blocks to the given rows.
    pub fn select(&self, rows: &[usize]) -> DesignMatrices {
        DesignMatrices {
            w: self.w.select_rows(rows),
            d: self.d.select_rows(rows),
            z: self.z.select_rows(rows),
            x: self.x.select_rows(rows),
            y: self.y.select_rows(rows),
            w_labels: self.w_labels.clone(),
            z_labels: self.z_labels.clone(),
            x_labels: self.x_labels.clone(),
            d_label: self.d_label.clone(),
            y_label: self.y_label.clone(),
            report: self.report.clone(),
        }
    }
}

/// Loads a headered CSV, parsing each cell by its declared kind.
///
/// Columns not present in `kinds` default to `continuous`. Empty cells are
/// recorded as missing.
pub fn load_csv(path: &Path, kinds: &BTreeMap<String, ColumnKind>) -> Result<RawDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::Parse(format!("open {}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse(format!("header: {e}")))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    for name in kinds.keys() {
        if !headers.iter().any(|h| h == name) {
            return Err(Error::Parse(format!(
                "unknown column `{name}` in kinds map (not in CSV header)"
            )));
        }
    }
    let columns: Vec<ColumnMeta> = headers
        .iter()
        .map(|h| ColumnMeta {
            name: h.clone(),
            kind: kinds.get(h).copied().unwrap_or(ColumnKind::Continuous),
        })
        .collect();

    let mut rows = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { pos, .. } => {
                let line = pos.as_ref().map(|p| p.line()).unwrap_or(idx as u64 + 2);
                Error::Parse(format!("row length mismatch at line {line}"))
            }
            _ => Error::Parse(format!("csv record {}: {e}", idx + 2)),
        })?;
        let mut row = Vec::with_capacity(columns.len());
        for (j, field) in record.iter().enumerate() {
            let field = field.trim();
            if field.is_empty() {
                row.push(Cell::Missing);
                continue;
            }
            match columns[j].kind {
                ColumnKind::Continuous => {
                    let v: f64 = field.parse().map_err(|_| {
                        Error::Parse(format!(
                            "unparseable numeric `{field}` in column `{}` at line {}",
                            columns[j].name,
                            idx + 2
                        ))
                    })?;
                    row.push(Cell::Number(v));
                }
                ColumnKind::Categorical | ColumnKind::Binary => {
                    row.push(Cell::Text(field.to_string()));
                }
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse("CSV has no data rows".into()));
    }
    Ok(RawDataset { columns, rows })
}

fn observed_levels(raw: &RawDataset, col: usize) -> Vec<String> {
    let mut levels = BTreeSet::new();
    for row in &raw.rows {
        match &row[col] {
            Cell::Text(t) => {
                levels.insert(t.clone());
            }
            Cell::Number(v) => {
                levels.insert(trim_float(*v));
            }
            Cell::Missing => {}
        }
    }
    levels.into_iter().collect()
}

fn trim_float(v: f64) -> String {
    // Stable textual form for numeric levels.
    format!("{v}")
}

fn cell_level(cell: &Cell) -> Option<String> {
    match cell {
        Cell::Text(t) => Some(t.clone()),
        Cell::Number(v) => Some(trim_float(*v)),
        Cell::Missing => None,
    }
}

struct EncodedBlock {
    columns: Vec<DVector<f64>>,
    labels: Vec<String>,
    sources: Vec<EncodedSource>,
}

/// Encodes one feature column into numeric columns.
fn encode_feature(raw: &RawDataset, col: usize, standardize: bool) -> Result<EncodedBlock> {
    let meta = &raw.columns[col];
    let n = raw.n();
    match meta.kind {
        ColumnKind::Continuous => {
            let mut vals = Vec::with_capacity(n);
            let mut sum = 0.0;
            let mut count = 0usize;
            for row in &raw.rows {
                match &row[col] {
                    Cell::Number(v) => {
                        vals.push(Some(*v));
                        sum += v;
                        count += 1;
                    }
                    Cell::Missing => vals.push(None),
                    Cell::Text(t) => {
                        return Err(Error::Parse(format!(
                            "unparseable numeric `{t}` in continuous column `{}`",
                            meta.name
                        )))
                    }
                }
            }
            if count == 0 {
                return Err(Error::InvalidInput(format!(
                    "column `{}` has no observed values",
                    meta.name
                )));
            }
            let mean = sum / count as f64;
            let filled: Vec<f64> = vals.iter().map(|v| v.unwrap_or(mean)).collect();
            let full_mean = filled.iter().sum::<f64>() / n as f64;
            let var = filled.iter().map(|v| (v - full_mean).powi(2)).sum::<f64>() / n as f64;
            if standardize {
                if var <= 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "constant continuous column `{}` (sd = 0)",
                        meta.name
                    )));
                }
                let sd = var.sqrt();
                let col_vec = DVector::from_iterator(n, filled.iter().map(|v| (v - full_mean) / sd));
                Ok(EncodedBlock {
                    columns: vec![col_vec],
                    labels: vec![meta.name.clone()],
                    sources: vec![EncodedSource {
                        source: meta.name.clone(),
                        kind: meta.kind,
                        encoded: vec![meta.name.clone()],
                    }],
                })
            } else {
                Ok(EncodedBlock {
                    columns: vec![DVector::from_vec(filled)],
                    labels: vec![meta.name.clone()],
                    sources: vec![EncodedSource {
                        source: meta.name.clone(),
                        kind: meta.kind,
                        encoded: vec![meta.name.clone()],
                    }],
                })
            }
        }
        ColumnKind::Binary => {
            let levels = observed_levels(raw, col);
            if levels.len() > 2 {
                return Err(Error::InvalidInput(format!(
                    "binary column `{}` has {} levels",
                    meta.name,
                    levels.len()
                )));
            }
            // Sorted levels: first maps to -0.5, second to +0.5; a missing
            // cell behaves as the absent level (-0.5).
            let hi = levels.last().cloned().unwrap_or_default();
            let col_vec = DVector::from_iterator(
                n,
                raw.rows.iter().map(|row| match cell_level(&row[col]) {
                    Some(l) if levels.len() == 2 && l == hi => 0.5,
                    Some(_) if levels.len() == 2 => -0.5,
                    Some(_) => 0.5,
                    None => -0.5,
                }),
            );
            Ok(EncodedBlock {
                columns: vec![col_vec],
                labels: vec![meta.name.clone()],
                sources: vec![EncodedSource {
                    source: meta.name.clone(),
                    kind: meta.kind,
                    encoded: vec![meta.name.clone()],
                }],
            })
        }
        ColumnKind::Categorical => {
            let levels = observed_levels(raw, col);
            let mut columns = Vec::with_capacity(levels.len());
            let mut labels = Vec::with_capacity(levels.len());
            for level in &levels {
                let col_vec = DVector::from_iterator(
                    n,
                    raw.rows.iter().map(|row| match cell_level(&row[col]) {
                        Some(l) if &l == level => 0.5,
                        _ => -0.5,
                    }),
                );
                columns.push(col_vec);
                labels.push(format!("{}={level}", meta.name));
            }
            Ok(EncodedBlock {
                columns,
                labels: labels.clone(),
                sources: vec![EncodedSource {
                    source: meta.name.clone(),
                    kind: meta.kind,
                    encoded: labels,
                }],
            })
        }
    }
}

fn encode_role_block(raw: &RawDataset, names: &[String]) -> Result<EncodedBlock> {
    let mut columns = Vec::new();
    let mut labels = Vec::new();
    let mut sources = Vec::new();
    for name in names {
        let col = raw
            .column_index(name)
            .ok_or_else(|| Error::InvalidInput(format!("role column `{name}` not in dataset")))?;
        let block = encode_feature(raw, col, true)?;
        columns.extend(block.columns);
        labels.extend(block.labels);
        sources.extend(block.sources);
    }
    Ok(EncodedBlock {
        columns,
        labels,
        sources,
    })
}

fn block_to_matrix(n: usize, block: &EncodedBlock) -> DMatrix<f64> {
    if block.columns.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&block.columns.iter().map(|c| c.column(0)).collect::<Vec<_>>())
    }
}

/// Encodes a raw dataset into design matrices for one analysis pair.
pub fn encode(raw: &RawDataset, roles: &RoleConfig) -> Result<DesignMatrices> {
    validate_roles(roles)?;
    let n = raw.n();

    // Attribute: exactly two observed levels, encoded {0, 1} in sorted order.
    let d_col = raw.column_index(&roles.attribute).ok_or_else(|| {
        Error::InvalidInput(format!("attribute column `{}` not in dataset", roles.attribute))
    })?;
    let d_levels = observed_levels(raw, d_col);
    if d_levels.len() != 2 {
        return Err(Error::InvalidInput(format!(
            "attribute `{}` must have exactly 2 observed levels, found {}",
            roles.attribute,
            d_levels.len()
        )));
    }
    let mut d = DVector::zeros(n);
    for (i, row) in raw.rows.iter().enumerate() {
        match cell_level(&row[d_col]) {
            Some(l) => d[i] = if l == d_levels[1] { 1.0 } else { 0.0 },
            None => {
                return Err(Error::InvalidInput(format!(
                    "missing attribute value at row {i}"
                )))
            }
        }
    }

    // Outcome: binary maps to {0, 1}; continuous is mean-imputed but kept on
    // its own scale so the effect estimate stays in outcome units.
    let y_col = raw.column_index(&roles.outcome).ok_or_else(|| {
        Error::InvalidInput(format!("outcome column `{}` not in dataset", roles.outcome))
    })?;
    let y = match raw.columns[y_col].kind {
        ColumnKind::Continuous => {
            let block = encode_feature(raw, y_col, false)?;
            block.columns[0].clone()
        }
        ColumnKind::Binary | ColumnKind::Categorical => {
            let levels = observed_levels(raw, y_col);
            if levels.len() != 2 {
                return Err(Error::InvalidInput(format!(
                    "outcome `{}` must be binary or continuous, found {} levels",
                    roles.outcome,
                    levels.len()
                )));
            }
            DVector::from_iterator(
                n,
                raw.rows.iter().enumerate().map(|(i, row)| {
                    match cell_level(&row[y_col]) {
                        Some(l) => {
                            if l == levels[1] {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        None => {
                            // Surfaced below; poison with NaN here.
                            let _ = i;
                            f64::NAN
                        }
                    }
                }),
            )
        }
    };
    if y.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidInput(format!(
            "missing outcome value in `{}`",
            roles.outcome
        )));
    }

    // Confounders, with the attribute-derived columns optionally dropped.
    let mut w_names = roles.confounders.clone();
    let mut dropped = Vec::new();
    if roles.exclude_attribute_from_confounders {
        w_names.retain(|name| {
            if name == &roles.attribute {
                dropped.push(name.clone());
                false
            } else {
                true
            }
        });
    }
    let w_block = encode_role_block(raw, &w_names)?;
    let z_block = encode_role_block(raw, &roles.z_proxies)?;
    let x_block = encode_role_block(raw, &roles.x_proxies)?;

    let report = EncodingReport {
        w: w_block.sources.clone(),
        z: z_block.sources.clone(),
        x: x_block.sources.clone(),
        attribute_levels: d_levels,
        dropped_from_w: dropped,
    };
    Ok(DesignMatrices {
        w: block_to_matrix(n, &w_block),
        d,
        z: block_to_matrix(n, &z_block),
        x: block_to_matrix(n, &x_block),
        y,
        w_labels: w_block.labels,
        z_labels: z_block.labels,
        x_labels: x_block.labels,
        d_label: roles.attribute.clone(),
        y_label: roles.outcome.clone(),
        report,
    })
}

fn validate_roles(roles: &RoleConfig) -> Result<()> {
    let mut seen = BTreeSet::new();
    for (name, role) in roles
        .z_proxies
        .iter()
        .map(|n| (n, "z_proxies"))
        .chain(roles.x_proxies.iter().map(|n| (n, "x_proxies")))
        .chain(roles.confounders.iter().map(|n| (n, "confounders")))
    {
        if !seen.insert(name.clone()) {
            return Err(Error::InvalidInput(format!(
                "column `{name}` assigned to more than one role (last: {role})"
            )));
        }
    }
    for name in roles.z_proxies.iter().chain(roles.x_proxies.iter()) {
        if name == &roles.attribute || name == &roles.outcome {
            return Err(Error::InvalidInput(format!(
                "column `{name}` cannot be both a proxy and the attribute/outcome"
            )));
        }
    }
    if seen.contains(&roles.outcome) {
        return Err(Error::InvalidInput(format!(
            "outcome `{}` cannot appear in another role",
            roles.outcome
        )));
    }
    Ok(())
}

/// Deterministic disjoint row split with sizes `floor(f n)` and `n - floor(f n)`.
pub fn split(
    data: &DesignMatrices,
    fraction: f64,
    seed: u64,
) -> Result<(DesignMatrices, DesignMatrices)> {
    if !(0.0 < fraction && fraction < 1.0) {
        return Err(Error::InvalidInput(format!(
            "split fraction {fraction} outside (0,1)"
        )));
    }
    let n = data.n();
    if n < 2 {
        return Err(Error::InvalidInput("cannot split: need n >= 2".into()));
    }
    let (first, second) = split_indices(n, fraction, seed);
    Ok((data.select(&first), data.select(&second)))
}

/// The index partition used by [`split`], exposed for callers that split
/// residual matrices by rows.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let k = ((fraction * n as f64).floor() as usize).clamp(1, n - 1);
    let mut first = idx[..k].to_vec();
    let mut second = idx[k..].to_vec();
    first.sort_unstable();
    second.sort_unstable();
    (first, second)
}

/// Writes design matrices back out as a plain numeric CSV with the same
/// header schema `load_csv` ingests.
pub fn write_csv(data: &DesignMatrices, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::Parse(format!("create {}: {e}", path.display())))?;
    let mut header: Vec<String> = Vec::new();
    header.extend(data.w_labels.iter().cloned());
    header.push(data.d_label.clone());
    header.extend(data.z_labels.iter().cloned());
    header.extend(data.x_labels.iter().cloned());
    header.push(data.y_label.clone());
    writer
        .write_record(&header)
        .map_err(|e| Error::Parse(format!("csv write: {e}")))?;
    for i in 0..data.n() {
        let mut record: Vec<String> = Vec::with_capacity(header.len());
        for j in 0..data.w.ncols() {
            record.push(format!("{:.17e}", data.w[(i, j)]));
        }
        record.push(format!("{}", data.d[i] as i64));
        for j in 0..data.z.ncols() {
            record.push(format!("{:.17e}", data.z[(i, j)]));
        }
        for j in 0..data.x.ncols() {
            record.push(format!("{:.17e}", data.x[(i, j)]));
        }
        record.push(format!("{:.17e}", data.y[i]));
        writer
            .write_record(&record)
            .map_err(|e| Error::Parse(format!("csv write: {e}")))?;
    }
    writer
        .flush()
        .map_err(|e| Error::Parse(format!("csv flush: {e}")))?;
    Ok(())
}
