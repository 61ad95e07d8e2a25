//! Long-format CSV ingestion and writing.
//!
//! One record per observation: a row label, a column label, an optional
//! replicate label, the response and any number of numeric covariates.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use crossre::design::{decompose_covariate, CenteredDesign, CovariateBlocks};
use crossre::layout::{BalancedLayout, ResponseTable};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Where a covariate enters the design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Constant within each row.
    Row,
    /// Constant within each column.
    Column,
    /// Constant within each cell.
    Interaction,
    /// Varies freely across observations.
    Within,
    /// Split into row, column, cell and within-cell parts.
    Auto,
}

impl FromStr for Role {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "row" => Ok(Role::Row),
            "column" | "col" => Ok(Role::Column),
            "interaction" | "cell" => Ok(Role::Interaction),
            "within" => Ok(Role::Within),
            "auto" => Ok(Role::Auto),
            other => Err(IngestError::Schema(format!(
                "unknown covariate role '{other}' (expected row, column, interaction, within or auto)"
            ))),
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Role::Row => "row",
            Role::Column => "column",
            Role::Interaction => "interaction",
            Role::Within => "within",
            Role::Auto => "auto",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    pub role: Role,
}

/// Parses `name=role,name=role`; a bare name means `auto`.
pub fn parse_roles(roles: &str) -> Result<Vec<CovariateSpec>, IngestError> {
    let mut out: Vec<CovariateSpec> = Vec::new();
    for item in roles.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (name, role) = match item.split_once('=') {
            Some((n, r)) => (n.trim(), r.parse()?),
            None => (item, Role::Auto),
        };
        if name.is_empty() {
            return Err(IngestError::Schema(format!("empty covariate name in '{item}'")));
        }
        if out.iter().any(|c| c.name == name) {
            return Err(IngestError::Schema(format!("covariate '{name}' listed twice")));
        }
        out.push(CovariateSpec { name: name.to_string(), role });
    }
    Ok(out)
}

/// Column names and covariate roles for a long-format file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub row_id: String,
    pub col_id: String,
    pub rep_id: Option<String>,
    pub response: String,
    pub covariates: Vec<CovariateSpec>,
    /// z-score each covariate before it enters the design.
    pub standardize: bool,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            row_id: "row".into(),
            col_id: "col".into(),
            rep_id: None,
            response: "y".into(),
            covariates: Vec::new(),
            standardize: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("missing column '{0}' in header")]
    MissingColumn(String),
    #[error("line {line}: column '{column}' value '{value}' is not a finite number")]
    NotNumeric { line: u64, column: String, value: String },
    #[error("line {line}: duplicate key {key} (first seen on line {first})")]
    Duplicate { line: u64, first: u64, key: String },
    #[error("unbalanced design: {count} missing {what}: {listed}{more}")]
    Unbalanced { count: usize, what: &'static str, listed: String, more: String },
    #[error("covariate '{name}' declared {role} varies within {level} '{label}' (lines {first} and {line})")]
    NotConstant { name: String, role: Role, level: &'static str, label: String, first: u64, line: u64 },
    #[error("{0}")]
    Layout(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Covariate {
    pub name: String,
    pub role: Role,
    /// One value per observation, in flat layout order.
    pub values: Vec<f64>,
}

/// A validated balanced data set with its label maps.
#[derive(Debug, Clone, PartialEq)]
pub struct LongData {
    pub schema: Schema,
    pub layout: BalancedLayout,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    /// Replicate labels shared by every cell; empty without a replicate column.
    pub rep_labels: Vec<String>,
    /// Response in flat layout order.
    pub response: Vec<f64>,
    pub covariates: Vec<Covariate>,
}

struct Labels {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Labels {
    fn new() -> Self {
        Self { names: Vec::new(), index: HashMap::new() }
    }

    fn intern(&mut self, label: &str) -> usize {
        if let Some(&k) = self.index.get(label) {
            return k;
        }
        self.names.push(label.to_string());
        self.index.insert(label.to_string(), self.names.len() - 1);
        self.names.len() - 1
    }
}

fn parse_number(raw: &str, line: u64, column: &str) -> Result<f64, IngestError> {
    raw.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| IngestError::NotNumeric { line, column: column.to_string(), value: raw.to_string() })
}

const MAX_LISTED: usize = 20;

/// Reads a long-format CSV and checks that the row x column (x replicate) cross is complete.
pub fn ingest_csv<R: Read>(reader: R, schema: &Schema) -> Result<LongData, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| IngestError::MissingColumn(name.to_string()))
    };
    let row_col = find(&schema.row_id)?;
    let col_col = find(&schema.col_id)?;
    let rep_col = schema.rep_id.as_deref().map(find).transpose()?;
    let y_col = find(&schema.response)?;
    let cov_cols: Vec<usize> = schema.covariates.iter().map(|c| find(&c.name)).collect::<Result<_, _>>()?;

    let (mut rows, mut cols, mut reps) = (Labels::new(), Labels::new(), Labels::new());
    let mut seen: HashMap<(usize, usize, usize), (u64, f64, Vec<f64>)> = HashMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |k: usize| record.get(k).unwrap_or("");
        let i = rows.intern(field(row_col).trim());
        let j = cols.intern(field(col_col).trim());
        let k = rep_col.map_or(0, |c| reps.intern(field(c).trim()));
        let y = parse_number(field(y_col), line, &schema.response)?;
        let x = schema
            .covariates
            .iter()
            .zip(&cov_cols)
            .map(|(c, &col)| parse_number(field(col), line, &c.name))
            .collect::<Result<Vec<_>, _>>()?;
        if let Some((first, _, _)) = seen.get(&(i, j, k)) {
            let mut key = format!("({}, {}", rows.names[i], cols.names[j]);
            if rep_col.is_some() {
                key.push_str(&format!(", {}", reps.names[k]));
            }
            key.push(')');
            return Err(IngestError::Duplicate { line, first: *first, key });
        }
        seen.insert((i, j, k), (line, y, x));
    }
    if seen.is_empty() {
        return Err(IngestError::Layout("no data records".into()));
    }
    let m = if rep_col.is_some() { reps.names.len() } else { 1 };
    let layout = BalancedLayout::new(rows.names.len(), cols.names.len(), m).map_err(|e| IngestError::Layout(e.to_string()))?;

    let mut missing = Vec::new();
    for i in 0..layout.g() {
        for j in 0..layout.h() {
            for k in 0..m {
                if !seen.contains_key(&(i, j, k)) {
                    missing.push(if rep_col.is_some() {
                        format!("({}, {}, {})", rows.names[i], cols.names[j], reps.names[k])
                    } else {
                        format!("({}, {})", rows.names[i], cols.names[j])
                    });
                }
            }
        }
    }
    if !missing.is_empty() {
        let count = missing.len();
        let more = if count > MAX_LISTED { format!(" and {} more", count - MAX_LISTED) } else { String::new() };
        missing.truncate(MAX_LISTED);
        return Err(IngestError::Unbalanced {
            count,
            what: if rep_col.is_some() { "(row, column, replicate) records" } else { "(row, column) cells" },
            listed: missing.join(", "),
            more,
        });
    }

    let n = layout.n();
    let mut response = vec![0.0; n];
    let mut values = vec![vec![0.0; n]; schema.covariates.len()];
    let mut lines = vec![0u64; n];
    for (&(i, j, k), (line, y, x)) in &seen {
        let p = layout.flat_index(i, j, k).map_err(|e| IngestError::Layout(e.to_string()))?;
        response[p] = *y;
        lines[p] = *line;
        for (c, v) in x.iter().enumerate() {
            values[c][p] = *v;
        }
    }
    let mut covariates = Vec::with_capacity(values.len());
    for (cov, mut v) in schema.covariates.iter().zip(values) {
        check_constant(&layout, cov, &v, &lines, &rows.names, &cols.names)?;
        if schema.standardize {
            standardize(&mut v);
        }
        covariates.push(Covariate { name: cov.name.clone(), role: cov.role, values: v });
    }
    Ok(LongData {
        schema: schema.clone(),
        layout,
        row_labels: rows.names,
        col_labels: cols.names,
        rep_labels: if rep_col.is_some() { reps.names } else { Vec::new() },
        response,
        covariates,
    })
}

fn check_constant(
    layout: &BalancedLayout,
    cov: &CovariateSpec,
    v: &[f64],
    lines: &[u64],
    row_labels: &[String],
    col_labels: &[String],
) -> Result<(), IngestError> {
    let (level, key): (&'static str, Box<dyn Fn(usize, usize) -> usize>) = match cov.role {
        Role::Row => ("row", Box::new(|i, _| i)),
        Role::Column => ("column", Box::new(|_, j| j)),
        Role::Interaction => ("cell", Box::new(move |i, j| i * layout.h() + j)),
        Role::Within | Role::Auto => return Ok(()),
    };
    let mut first: HashMap<usize, usize> = HashMap::new();
    for p in 0..layout.n() {
        let (i, j, _) = layout.unflatten(p).map_err(|e| IngestError::Layout(e.to_string()))?;
        let q = *first.entry(key(i, j)).or_insert(p);
        if (v[q] - v[p]).abs() > 1e-9 * (1.0 + v[q].abs()) {
            let label = match cov.role {
                Role::Row => row_labels[i].clone(),
                Role::Column => col_labels[j].clone(),
                _ => format!("{}/{}", row_labels[i], col_labels[j]),
            };
            let (a, b) = if lines[q] < lines[p] { (lines[q], lines[p]) } else { (lines[p], lines[q]) };
            return Err(IngestError::NotConstant { name: cov.name.clone(), role: cov.role, level, label, first: a, line: b });
        }
    }
    Ok(())
}

fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let scale = if sd > 0.0 { sd } else { 1.0 };
    for x in v {
        *x = (*x - mean) / scale;
    }
}

/// Writes the data in long format, one record per observation in layout order.
pub fn write_csv<W: Write>(data: &LongData, writer: W) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(writer);
    let s = &data.schema;
    let mut header = vec![s.row_id.clone(), s.col_id.clone()];
    if let Some(r) = &s.rep_id {
        header.push(r.clone());
    }
    header.push(s.response.clone());
    header.extend(data.covariates.iter().map(|c| c.name.clone()));
    w.write_record(&header)?;
    let l = data.layout;
    for p in 0..l.n() {
        let (i, j, k) = l.unflatten(p).map_err(|e| IngestError::Layout(e.to_string()))?;
        let mut rec = vec![data.row_labels[i].clone(), data.col_labels[j].clone()];
        if s.rep_id.is_some() {
            rec.push(data.rep_labels[k].clone());
        }
        rec.push(data.response[p].to_string());
        rec.extend(data.covariates.iter().map(|c| c.values[p].to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

impl LongData {
    pub fn table(&self) -> ResponseTable {
        ResponseTable::new(self.layout, self.response.clone()).expect("response length matches layout")
    }

    /// Builds the centred design; `auto` covariates are split by level and
    /// parts that vanish identically are dropped.
    pub fn design(&self) -> crossre::Result<CenteredDesign> {
        let l = self.layout;
        let mut row: Vec<(String, Vec<f64>)> = Vec::new();
        let mut col = Vec::new();
        let mut cell = Vec::new();
        let mut within = Vec::new();
        let at = |v: &[f64], i: usize, j: usize| v[(i * l.h() + j) * l.m()];
        for c in &self.covariates {
            let v = &c.values;
            match c.role {
                Role::Row => row.push((c.name.clone(), (0..l.g()).map(|i| at(v, i, 0)).collect())),
                Role::Column => col.push((c.name.clone(), (0..l.h()).map(|j| at(v, 0, j)).collect())),
                Role::Interaction => cell.push((c.name.clone(), (0..l.cells()).map(|q| v[q * l.m()]).collect())),
                Role::Within => within.push((c.name.clone(), v.clone())),
                Role::Auto => {
                    let parts = decompose_covariate(&l, v)?;
                    let scale = 1e-10 * (1.0 + v.iter().fold(0.0f64, |a, x| a.max(x.abs())));
                    let keep = |p: &[f64]| p.iter().any(|x| x.abs() > scale);
                    if keep(&parts.row) {
                        row.push((format!("{}_row_cent", c.name), parts.row));
                    }
                    if keep(&parts.col) {
                        col.push((format!("{}_column_cent", c.name), parts.col));
                    }
                    if keep(&parts.cell) {
                        cell.push((format!("{}_cell_cent", c.name), parts.cell));
                    }
                    if l.is_replicated() && keep(&parts.within) {
                        within.push((format!("{}_within_cent", c.name), parts.within));
                    }
                }
            }
        }
        // without replicates a cell-level covariate is an observation-level one
        if !l.is_replicated() {
            within.splice(0..0, cell.drain(..));
        }
        let block = |cols: &[(String, Vec<f64>)], rows: usize| -> (DMatrix<f64>, Vec<String>) {
            let m = DMatrix::from_fn(rows, cols.len(), |r, c| cols[c].1[r]);
            (m, cols.iter().map(|(n, _)| n.clone()).collect())
        };
        let (rb, rn) = block(&row, l.g());
        let (cb, cn) = block(&col, l.h());
        let (ib, inames) = block(&cell, l.cells());
        let (wb, wn) = block(&within, l.n());
        let mut blocks = CovariateBlocks::empty(&l);
        if !rn.is_empty() {
            blocks = blocks.with_row(rb, rn);
        }
        if !cn.is_empty() {
            blocks = blocks.with_col(cb, cn);
        }
        if !inames.is_empty() {
            blocks = blocks.with_interaction(ib, inames);
        }
        if !wn.is_empty() {
            blocks = blocks.with_within(wb, wn);
        }
        CenteredDesign::new(&l, blocks)
    }
}
