//! Observation ingestion, covariate transforms and design assembly.
//!
//! All ingestion is from local CSV (UTF-8, dot decimal, header required).
//! Schemas:
//!
//! - observations: `source,x,y,t,i,vessel,z,y` plus one column per named
//!   covariate. `source` is `FID` or `FDD`; `t` is the time-unit label;
//!   `i` is the absolute day index of the subperiod (used to join daily
//!   covariates); absences are stored as `z=0, y=0`.
//! - vessels: `vessel,length_m,power_kw`.
//! - daily covariates: `date,x,y,name,value` with `date` the absolute day
//!   index.
//!
//! Lag-weighted covariates `K(C, c, l)` average the daily series over
//! lags `0..=l` with triangular weights peaking at lag `c` (normalized to
//! sum 1); `K(C, 0, 0)` is the same-day value. The kernel is pluggable
//! behind [`lag_weights`].

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Observation origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    Fid,
    Fdd,
}

impl Source {
    pub fn as_str(&self) -> &'static str {
        match self {
            Source::Fid => "FID",
            Source::Fdd => "FDD",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "FID" => Ok(Source::Fid),
            "FDD" => Ok(Source::Fdd),
            other => Err(Error::SchemaMismatch(format!("unknown source `{other}`"))),
        }
    }
}

/// Columnar set of tagged observation records from both sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ObservationSet {
    pub source: Vec<Source>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub t_label: Vec<String>,
    /// Subperiod: absolute day index within the time unit.
    pub subperiod: Vec<i64>,
    pub vessel: Vec<usize>,
    pub z: Vec<u8>,
    pub y_val: Vec<f64>,
    pub covariate_names: Vec<String>,
    /// Column-major covariate values, aligned with `covariate_names`.
    pub covariate_columns: Vec<Vec<f64>>,
}

/// Validation toggles for application-specific conventions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationRules {
    /// Enforce `vessel == 1 ⇔ source == FID` (research-vessel convention).
    pub research_vessel_is_fid: bool,
}

impl Default for ValidationRules {
    fn default() -> Self {
        ValidationRules { research_vessel_is_fid: true }
    }
}

impl ObservationSet {
    pub fn n_rows(&self) -> usize {
        self.z.len()
    }

    pub fn covariate(&self, name: &str) -> Result<&[f64]> {
        let idx = self
            .covariate_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Lookup(format!("missing covariate column `{name}`")))?;
        Ok(&self.covariate_columns[idx])
    }

    pub fn has_covariate(&self, name: &str) -> bool {
        self.covariate_names.iter().any(|n| n == name)
    }

    pub fn add_covariate(&mut self, name: String, values: Vec<f64>) -> Result<()> {
        if values.len() != self.n_rows() {
            return Err(Error::invalid(format!(
                "covariate `{name}` has {} values for {} rows",
                values.len(),
                self.n_rows()
            )));
        }
        if self.has_covariate(&name) {
            return Err(Error::invalid(format!("covariate `{name}` already present")));
        }
        self.covariate_names.push(name);
        self.covariate_columns.push(values);
        Ok(())
    }

    /// Row indices with positive biomass.
    pub fn positive_rows(&self) -> Vec<usize> {
        (0..self.n_rows()).filter(|&r| self.z[r] == 1).collect()
    }

    /// Copy containing only rows from one source.
    pub fn filter_source(&self, keep: Source) -> ObservationSet {
        let rows: Vec<usize> = (0..self.n_rows()).filter(|&r| self.source[r] == keep).collect();
        ObservationSet {
            source: rows.iter().map(|&r| self.source[r]).collect(),
            x: rows.iter().map(|&r| self.x[r]).collect(),
            y: rows.iter().map(|&r| self.y[r]).collect(),
            t_label: rows.iter().map(|&r| self.t_label[r].clone()).collect(),
            subperiod: rows.iter().map(|&r| self.subperiod[r]).collect(),
            vessel: rows.iter().map(|&r| self.vessel[r]).collect(),
            z: rows.iter().map(|&r| self.z[r]).collect(),
            y_val: rows.iter().map(|&r| self.y_val[r]).collect(),
            covariate_names: self.covariate_names.clone(),
            covariate_columns: self
                .covariate_columns
                .iter()
                .map(|col| rows.iter().map(|&r| col[r]).collect())
                .collect(),
        }
    }

    /// Checks the hurdle invariant and vessel convention on every row.
    pub fn validate(&self, rules: &ValidationRules) -> Result<()> {
        for r in 0..self.n_rows() {
            if self.z[r] > 1 {
                return Err(Error::InvariantViolation {
                    row: r,
                    message: format!("z must be 0 or 1, got {}", self.z[r]),
                });
            }
            if self.z[r] == 0 && self.y_val[r] != 0.0 {
                return Err(Error::InvariantViolation {
                    row: r,
                    message: format!("absence recorded with positive biomass y = {}", self.y_val[r]),
                });
            }
            if self.z[r] == 1 && !(self.y_val[r] > 0.0) {
                return Err(Error::InvariantViolation {
                    row: r,
                    message: format!("presence recorded with non-positive biomass y = {}", self.y_val[r]),
                });
            }
            if rules.research_vessel_is_fid {
                let is_fid = self.source[r] == Source::Fid;
                let is_research = self.vessel[r] == crate::hurdle::RESEARCH_VESSEL;
                if is_fid != is_research {
                    return Err(Error::InvariantViolation {
                        row: r,
                        message: format!(
                            "vessel {} with source {} violates the research-vessel convention",
                            self.vessel[r],
                            self.source[r].as_str()
                        ),
                    });
                }
            }
            if !self.x[r].is_finite() || !self.y[r].is_finite() || !self.y_val[r].is_finite() {
                return Err(Error::InvariantViolation {
                    row: r,
                    message: "non-finite coordinate or biomass value".into(),
                });
            }
        }
        Ok(())
    }

    /// Per `(source, time)` counts: rows, positives, and summed biomass.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut grouped: BTreeMap<(String, String), (usize, usize, f64)> = BTreeMap::new();
        for r in 0..self.n_rows() {
            let key = (self.source[r].as_str().to_string(), self.t_label[r].clone());
            let entry = grouped.entry(key).or_insert((0, 0, 0.0));
            entry.0 += 1;
            if self.z[r] == 1 {
                entry.1 += 1;
            }
            entry.2 += self.y_val[r];
        }
        grouped
            .into_iter()
            .map(|((source, t), (rows, positives, total))| SummaryRow {
                source,
                t,
                rows,
                positives,
                total_biomass: total,
            })
            .collect()
    }

    /// Writes the observation CSV with the documented column order.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(out, "source,x,y,t,i,vessel,z,y")?;
        for name in &self.covariate_names {
            write!(out, ",{name}")?;
        }
        writeln!(out)?;
        for r in 0..self.n_rows() {
            write!(
                out,
                "{},{},{},{},{},{},{},{}",
                self.source[r].as_str(),
                self.x[r],
                self.y[r],
                self.t_label[r],
                self.subperiod[r],
                self.vessel[r],
                self.z[r],
                self.y_val[r]
            )?;
            for col in &self.covariate_columns {
                write!(out, ",{}", col[r])?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub source: String,
    pub t: String,
    pub rows: usize,
    pub positives: usize,
    pub total_biomass: f64,
}

/// Covariate transform applied when building design matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "transform", rename_all = "snake_case")]
pub enum Transform {
    Identity,
    /// Triangular lag average `K(name, peak, window)`.
    LagWeighted { peak: usize, window: usize },
    /// Spline basis expansion with `knots` basis columns.
    SplineBasis { kind: SplineKind, knots: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplineKind {
    /// Cubic B-spline basis (partition of unity).
    Bs,
    /// Natural cubic regression spline cardinal basis.
    Cr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    pub transform: Transform,
}

impl CovariateSpec {
    pub fn identity(name: &str) -> Self {
        CovariateSpec { name: name.into(), transform: Transform::Identity }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.transform {
            Transform::Identity => Ok(()),
            Transform::LagWeighted { peak, window } => {
                if peak > window {
                    return Err(Error::invalid(format!(
                        "lag spec for `{}`: peak {peak} exceeds window {window}",
                        self.name
                    )));
                }
                Ok(())
            }
            Transform::SplineBasis { knots, .. } => {
                if *knots < 3 {
                    return Err(Error::invalid(format!(
                        "spline spec for `{}` needs at least 3 knots, got {knots}",
                        self.name
                    )));
                }
                Ok(())
            }
        }
    }

    /// Name of the observation column this spec reads.
    pub fn source_column(&self) -> String {
        match &self.transform {
            Transform::LagWeighted { peak, window } => lagged_column_name(&self.name, *peak, *window),
            _ => self.name.clone(),
        }
    }
}

pub fn lagged_column_name(name: &str, peak: usize, window: usize) -> String {
    format!("K({name},{peak},{window})")
}

/// Loads and validates the observation CSV. Covariate columns referenced
/// by identity or spline specs must be present; lag-weighted specs may be
/// attached later from the daily table.
pub fn load_observations(path: &Path, specs: &[CovariateSpec], rules: &ValidationRules) -> Result<ObservationSet> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let required = ["source", "x", "y", "t", "i", "vessel", "z", "y"];
    // `y` appears twice in spirit (coordinate and biomass); the schema fixes
    // the column order: position 2 is the coordinate, position 7 the value.
    if headers.len() < required.len() {
        return Err(Error::SchemaMismatch(format!(
            "expected at least {} columns, found {}",
            required.len(),
            headers.len()
        )));
    }
    for (pos, name) in required.iter().enumerate() {
        if headers.get(pos).map(str::trim) != Some(*name) {
            return Err(Error::SchemaMismatch(format!(
                "column {pos} must be `{name}`, found `{}`",
                headers.get(pos).unwrap_or("<missing>")
            )));
        }
    }
    let covariate_names: Vec<String> = headers.iter().skip(8).map(|s| s.trim().to_string()).collect();

    let mut set = ObservationSet {
        covariate_names: covariate_names.clone(),
        covariate_columns: vec![Vec::new(); covariate_names.len()],
        ..Default::default()
    };

    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        let field = |pos: usize| -> Result<&str> {
            record.get(pos).ok_or_else(|| Error::SchemaMismatch(format!("row {row_idx}: missing field {pos}")))
        };
        let parse_f64 = |pos: usize, what: &str| -> Result<f64> {
            field(pos)?.trim().parse::<f64>().map_err(|_| Error::InvariantViolation {
                row: row_idx,
                message: format!("cannot parse {what} `{}`", record.get(pos).unwrap_or("")),
            })
        };
        set.source.push(Source::parse(field(0)?).map_err(|_| Error::InvariantViolation {
            row: row_idx,
            message: format!("unknown source `{}`", record.get(0).unwrap_or("")),
        })?);
        set.x.push(parse_f64(1, "x")?);
        set.y.push(parse_f64(2, "y")?);
        set.t_label.push(field(3)?.trim().to_string());
        set.subperiod.push(field(4)?.trim().parse::<i64>().map_err(|_| Error::InvariantViolation {
            row: row_idx,
            message: format!("cannot parse subperiod `{}`", record.get(4).unwrap_or("")),
        })?);
        set.vessel.push(field(5)?.trim().parse::<usize>().map_err(|_| Error::InvariantViolation {
            row: row_idx,
            message: format!("cannot parse vessel `{}`", record.get(5).unwrap_or("")),
        })?);
        set.z.push(parse_f64(6, "z")? as u8);
        set.y_val.push(parse_f64(7, "y")?);
        for (c, col) in set.covariate_columns.iter_mut().enumerate() {
            col.push(parse_f64(8 + c, &format!("covariate `{}`", covariate_names[c]))?);
        }
    }

    set.validate(rules)?;
    for spec in specs {
        spec.validate()?;
        if matches!(spec.transform, Transform::Identity | Transform::SplineBasis { .. })
            && !set.has_covariate(&spec.source_column())
        {
            return Err(Error::SchemaMismatch(format!(
                "covariate `{}` required by the design is not in the file",
                spec.source_column()
            )));
        }
    }
    Ok(set)
}

/// Triangular lag weights over `0..=window`, peaking at `peak` and
/// normalized to sum 1. Strictly positive across the window.
pub fn lag_weights(peak: usize, window: usize) -> Vec<f64> {
    let denom = peak.max(window - peak) as f64 + 1.0;
    let raw: Vec<f64> = (0..=window)
        .map(|k| 1.0 - (k as f64 - peak as f64).abs() / denom)
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Weighted lag average of a daily series. `series[k]` is the value `k`
/// days before the observation day; it must cover lags `0..=window`.
pub fn lag_weight(series: &[f64], peak: usize, window: usize) -> Result<f64> {
    if peak > window {
        return Err(Error::invalid(format!("peak lag {peak} exceeds window {window}")));
    }
    if series.len() < window + 1 {
        return Err(Error::MissingData(format!(
            "series covers {} lags, need lags 0..={window}",
            series.len()
        )));
    }
    let weights = lag_weights(peak, window);
    Ok(series.iter().zip(&weights).map(|(v, w)| v * w).sum())
}

/// Daily covariate table: `name → day → sampled points`.
#[derive(Debug, Clone, Default)]
pub struct DailyCovariates {
    by_name: BTreeMap<String, BTreeMap<i64, Vec<(f64, f64, f64)>>>,
}

impl DailyCovariates {
    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
        let headers = reader.headers()?.clone();
        for (pos, name) in ["date", "x", "y", "name", "value"].iter().enumerate() {
            if headers.get(pos).map(str::trim) != Some(*name) {
                return Err(Error::SchemaMismatch(format!(
                    "daily covariates column {pos} must be `{name}`"
                )));
            }
        }
        let mut table = DailyCovariates::default();
        for (row_idx, record) in reader.records().enumerate() {
            let record = record?;
            let date: i64 = record[0].trim().parse().map_err(|_| Error::InvariantViolation {
                row: row_idx,
                message: format!("cannot parse date `{}`", &record[0]),
            })?;
            let x: f64 = record[1].trim().parse().map_err(|_| Error::InvariantViolation {
                row: row_idx,
                message: "cannot parse x".into(),
            })?;
            let y: f64 = record[2].trim().parse().map_err(|_| Error::InvariantViolation {
                row: row_idx,
                message: "cannot parse y".into(),
            })?;
            let name = record[3].trim().to_string();
            let value: f64 = record[4].trim().parse().map_err(|_| Error::InvariantViolation {
                row: row_idx,
                message: "cannot parse value".into(),
            })?;
            table
                .by_name
                .entry(name)
                .or_default()
                .entry(date)
                .or_default()
                .push((x, y, value));
        }
        Ok(table)
    }

    pub fn insert(&mut self, name: &str, date: i64, x: f64, y: f64, value: f64) {
        self.by_name
            .entry(name.to_string())
            .or_default()
            .entry(date)
            .or_default()
            .push((x, y, value));
    }

    /// Value of `name` on `date` at the sampled point nearest to `(x, y)`.
    pub fn value_at(&self, name: &str, date: i64, x: f64, y: f64) -> Result<f64> {
        let days = self
            .by_name
            .get(name)
            .ok_or_else(|| Error::Lookup(format!("daily covariate `{name}` not loaded")))?;
        let points = days.get(&date).ok_or_else(|| {
            Error::MissingData(format!("daily covariate `{name}` has no records for day {date}"))
        })?;
        let mut best = f64::INFINITY;
        let mut value = f64::NAN;
        for &(px, py, v) in points {
            let d2 = (px - x) * (px - x) + (py - y) * (py - y);
            if d2 < best {
                best = d2;
                value = v;
            }
        }
        Ok(value)
    }
}

/// Computes `K(name, peak, window)` for every observation row and adds it
/// as a derived column. Requires daily history over the full lag range of
/// each row's subperiod day.
pub fn attach_lagged(
    obs: &mut ObservationSet,
    daily: &DailyCovariates,
    name: &str,
    peak: usize,
    window: usize,
) -> Result<()> {
    if peak > window {
        return Err(Error::invalid(format!("peak lag {peak} exceeds window {window}")));
    }
    let mut column = Vec::with_capacity(obs.n_rows());
    for r in 0..obs.n_rows() {
        let day = obs.subperiod[r];
        let mut series = Vec::with_capacity(window + 1);
        for lag in 0..=window as i64 {
            let value = daily.value_at(name, day - lag, obs.x[r], obs.y[r]).map_err(|e| match e {
                Error::MissingData(_) => Error::MissingData(format!(
                    "row {r}: `{name}` requires days {}..={day} ({e})",
                    day - window as i64
                )),
                other => other,
            })?;
            series.push(value);
        }
        column.push(lag_weight(&series, peak, window)?);
    }
    obs.add_covariate(lagged_column_name(name, peak, window), column)
}

/// Row-major design matrix with named columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMatrix {
    pub names: Vec<String>,
    data: Vec<f64>,
    n_rows: usize,
}

impl DesignMatrix {
    pub fn empty(n_rows: usize) -> Self {
        DesignMatrix { names: Vec::new(), data: Vec::new(), n_rows }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.names.len()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let p = self.n_cols();
        &self.data[r * p..(r + 1) * p]
    }

    pub fn dot(&self, r: usize, coefs: &[f64]) -> f64 {
        self.row(r).iter().zip(coefs).map(|(x, c)| x * c).sum()
    }

    /// Builds a design matrix from named columns of equal length.
    pub fn from_columns(names: Vec<String>, columns: Vec<Vec<f64>>, n_rows: usize) -> Self {
        assert_eq!(names.len(), columns.len());
        let p = names.len();
        let mut data = vec![0.0; n_rows * p];
        for (c, col) in columns.iter().enumerate() {
            assert_eq!(col.len(), n_rows, "column `{}` length mismatch", names[c]);
            for (r, &v) in col.iter().enumerate() {
                data[r * p + c] = v;
            }
        }
        DesignMatrix { names, data, n_rows }
    }
}

/// Builds one design matrix from the given specs. Spline knots are placed
/// at equally spaced quantiles of the training covariate; column order
/// follows the spec order and is stable under later additions.
pub fn build_design(obs: &ObservationSet, specs: &[CovariateSpec]) -> Result<DesignMatrix> {
    let mut names = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for spec in specs {
        let column_name = spec.source_column();
        let values = obs.covariate(&column_name)?;
        let (mut col_names, mut cols) = expand_columns(&column_name, values, spec)?;
        names.append(&mut col_names);
        columns.append(&mut cols);
    }
    Ok(DesignMatrix::from_columns(names, columns, obs.n_rows()))
}

/// Expands one covariate under its transform into named design columns.
fn expand_columns(column_name: &str, values: &[f64], spec: &CovariateSpec) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    spec.validate()?;
    match &spec.transform {
        Transform::Identity | Transform::LagWeighted { .. } => {
            Ok((vec![column_name.to_string()], vec![values.to_vec()]))
        }
        Transform::SplineBasis { kind, knots } => {
            let basis = match kind {
                SplineKind::Bs => bspline_basis(values, *knots)?,
                SplineKind::Cr => natural_cubic_basis(values, *knots)?,
            };
            let names = (0..basis.len())
                .map(|k| format!("{column_name}:{}{}", kind_tag(kind), k + 1))
                .collect();
            Ok((names, basis))
        }
    }
}

/// Per-vessel attribute design rows for the catchability fixed terms.
/// Specs reference the attribute columns `length_m` and `power_kw`.
pub fn vessel_design(
    vessels: &[VesselRecord],
    specs: &[CovariateSpec],
) -> Result<(Vec<String>, BTreeMap<usize, Vec<f64>>)> {
    let mut names = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for spec in specs {
        let values: Vec<f64> = match spec.name.as_str() {
            "length_m" => vessels.iter().map(|v| v.length_m).collect(),
            "power_kw" => vessels.iter().map(|v| v.power_kw).collect(),
            other => {
                return Err(Error::Lookup(format!(
                    "unknown vessel attribute `{other}` (expected length_m or power_kw)"
                )))
            }
        };
        let (mut col_names, mut cols) = expand_columns(&spec.name, &values, spec)?;
        names.append(&mut col_names);
        columns.append(&mut cols);
    }
    let mut rows = BTreeMap::new();
    for (k, vessel) in vessels.iter().enumerate() {
        rows.insert(vessel.vessel, columns.iter().map(|col| col[k]).collect());
    }
    Ok((names, rows))
}

fn kind_tag(kind: &SplineKind) -> &'static str {
    match kind {
        SplineKind::Bs => "bs",
        SplineKind::Cr => "cr",
    }
}

/// Equally spaced quantiles (type-7 interpolation) of a sample.
fn quantile_knots(values: &[f64], count: usize) -> Vec<f64> {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    (0..count)
        .map(|k| {
            let q = k as f64 / (count - 1) as f64;
            let pos = q * (sorted.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let frac = pos - lo as f64;
            if lo + 1 < sorted.len() {
                sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
            } else {
                sorted[lo]
            }
        })
        .collect()
}

/// Cubic B-spline basis with `df` columns on a clamped knot vector whose
/// interior knots sit at equally spaced quantiles. Rows sum to 1.
fn bspline_basis(values: &[f64], df: usize) -> Result<Vec<Vec<f64>>> {
    if df < 4 {
        return Err(Error::invalid(format!("B-spline basis needs at least 4 columns, got {df}")));
    }
    let degree = 3usize;
    let n_interior = df - degree - 1;
    let quants = quantile_knots(values, n_interior + 2);
    let (lo, hi) = (quants[0], quants[quants.len() - 1]);
    if !(hi > lo) {
        return Err(Error::invalid("spline covariate is constant"));
    }
    let mut knots = Vec::with_capacity(df + degree + 1);
    for _ in 0..=degree {
        knots.push(lo);
    }
    knots.extend_from_slice(&quants[1..quants.len() - 1]);
    for _ in 0..=degree {
        knots.push(hi);
    }

    let mut columns = vec![vec![0.0; values.len()]; df];
    for (r, &raw) in values.iter().enumerate() {
        let x = raw.clamp(lo, hi);
        for (j, col) in columns.iter_mut().enumerate() {
            col[r] = cox_de_boor(&knots, j, degree, x, hi);
        }
    }
    Ok(columns)
}

/// Cox–de Boor recursion; the right boundary is closed so the basis sums
/// to 1 at `x = hi`.
fn cox_de_boor(knots: &[f64], j: usize, degree: usize, x: f64, hi: f64) -> f64 {
    if degree == 0 {
        let upper_closed = knots[j + 1] >= hi && x >= knots[j] && x <= knots[j + 1];
        return if (x >= knots[j] && x < knots[j + 1]) || upper_closed {
            1.0
        } else {
            0.0
        };
    }
    let mut left = 0.0;
    if knots[j + degree] > knots[j] {
        left = (x - knots[j]) / (knots[j + degree] - knots[j]) * cox_de_boor(knots, j, degree - 1, x, hi);
    }
    let mut right = 0.0;
    if knots[j + degree + 1] > knots[j + 1] {
        right = (knots[j + degree + 1] - x) / (knots[j + degree + 1] - knots[j + 1])
            * cox_de_boor(knots, j + 1, degree - 1, x, hi);
    }
    left + right
}

/// Natural cubic regression spline cardinal basis: column `k` is the
/// natural cubic interpolant of the indicator at knot `k`.
fn natural_cubic_basis(values: &[f64], n_knots: usize) -> Result<Vec<Vec<f64>>> {
    if n_knots < 3 {
        return Err(Error::invalid("natural cubic basis needs at least 3 knots"));
    }
    let knots = quantile_knots(values, n_knots);
    if knots.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("spline knots are not distinct; covariate too discrete"));
    }

    let mut columns = Vec::with_capacity(n_knots);
    for k in 0..n_knots {
        let mut fk = vec![0.0; n_knots];
        fk[k] = 1.0;
        let m = natural_spline_second_derivatives(&knots, &fk);
        let col = values
            .iter()
            .map(|&raw| {
                let x = raw.clamp(knots[0], knots[n_knots - 1]);
                eval_cubic_spline(&knots, &fk, &m, x)
            })
            .collect();
        columns.push(col);
    }
    Ok(columns)
}

/// Second derivatives of the natural cubic interpolant (tridiagonal solve).
fn natural_spline_second_derivatives(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut m = vec![0.0; n];
    if n < 3 {
        return m;
    }
    let mut diag = vec![0.0; n - 2];
    let mut rhs = vec![0.0; n - 2];
    let mut sub = vec![0.0; n - 2];
    let mut sup = vec![0.0; n - 2];
    for i in 1..n - 1 {
        let h0 = xs[i] - xs[i - 1];
        let h1 = xs[i + 1] - xs[i];
        diag[i - 1] = 2.0 * (h0 + h1);
        sub[i - 1] = h0;
        sup[i - 1] = h1;
        rhs[i - 1] = 6.0 * ((ys[i + 1] - ys[i]) / h1 - (ys[i] - ys[i - 1]) / h0);
    }
    // Thomas algorithm.
    for i in 1..n - 2 {
        let w = sub[i] / diag[i - 1];
        diag[i] -= w * sup[i - 1];
        rhs[i] -= w * rhs[i - 1];
    }
    let mut sol = vec![0.0; n - 2];
    sol[n - 3] = rhs[n - 3] / diag[n - 3];
    for i in (0..n - 3).rev() {
        sol[i] = (rhs[i] - sup[i] * sol[i + 1]) / diag[i];
    }
    m[1..n - 1].copy_from_slice(&sol);
    m
}

fn eval_cubic_spline(xs: &[f64], ys: &[f64], m: &[f64], x: f64) -> f64 {
    let n = xs.len();
    let mut seg = n - 2;
    for i in 0..n - 1 {
        if x <= xs[i + 1] {
            seg = i;
            break;
        }
    }
    let h = xs[seg + 1] - xs[seg];
    let a = (xs[seg + 1] - x) / h;
    let b = (x - xs[seg]) / h;
    a * ys[seg] + b * ys[seg + 1]
        + ((a * a * a - a) * m[seg] + (b * b * b - b) * m[seg + 1]) * h * h / 6.0
}

/// Vessel attribute record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VesselRecord {
    pub vessel: usize,
    pub length_m: f64,
    pub power_kw: f64,
}

/// Loads the vessel table (`vessel,length_m,power_kw`).
pub fn load_vessels(path: &Path) -> Result<Vec<VesselRecord>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    for (pos, name) in ["vessel", "length_m", "power_kw"].iter().enumerate() {
        if headers.get(pos).map(str::trim) != Some(*name) {
            return Err(Error::SchemaMismatch(format!("vessel column {pos} must be `{name}`")));
        }
    }
    let mut records = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        let rec = VesselRecord {
            vessel: record[0].trim().parse().map_err(|_| Error::InvariantViolation {
                row: row_idx,
                message: "cannot parse vessel id".into(),
            })?,
            length_m: record[1].trim().parse().map_err(|_| Error::InvariantViolation {
                row: row_idx,
                message: "cannot parse length_m".into(),
            })?,
            power_kw: record[2].trim().parse().map_err(|_| Error::InvariantViolation {
                row: row_idx,
                message: "cannot parse power_kw".into(),
            })?,
        };
        if !(rec.length_m > 0.0) || !(rec.power_kw > 0.0) {
            return Err(Error::InvariantViolation {
                row: row_idx,
                message: "vessel attributes must be positive".into(),
            });
        }
        records.push(rec);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn sample_obs() -> ObservationSet {
        let mut obs = ObservationSet::default();
        for r in 0..6 {
            obs.source.push(if r < 3 { Source::Fid } else { Source::Fdd });
            obs.x.push(0.1 * r as f64);
            obs.y.push(0.05 + 0.1 * r as f64);
            obs.t_label.push(if r % 2 == 0 { "t1".into() } else { "t2".into() });
            obs.subperiod.push(100 + r as i64);
            obs.vessel.push(if r < 3 { 1 } else { 2 });
            obs.z.push(if r % 3 == 0 { 0 } else { 1 });
            obs.y_val.push(if r % 3 == 0 { 0.0 } else { 1.5 + r as f64 });
        }
        obs.covariate_names = vec!["sst".into()];
        obs.covariate_columns = vec![(0..6).map(|r| 14.0 + r as f64 * 0.5).collect()];
        obs
    }

    #[test]
    fn roundtrip_preserves_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.csv");
        let obs = sample_obs();
        obs.write_csv(&path).unwrap();
        let loaded = load_observations(&path, &[CovariateSpec::identity("sst")], &ValidationRules::default()).unwrap();
        assert_eq!(obs, loaded);
    }

    #[test]
    fn hurdle_invariant_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(
            &path,
            "source,x,y,t,i,vessel,z,y\nFID,0.1,0.2,t1,5,1,0,2.5\n",
        )
        .unwrap();
        let err = load_observations(&path, &[], &ValidationRules::default()).unwrap_err();
        match err {
            Error::InvariantViolation { row, message } => {
                assert_eq!(row, 0);
                assert!(message.contains("absence"), "{message}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn vessel_convention_is_configurable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mix.csv");
        std::fs::write(&path, "source,x,y,t,i,vessel,z,y\nFID,0.1,0.2,t1,5,2,1,2.5\n").unwrap();
        assert!(load_observations(&path, &[], &ValidationRules::default()).is_err());
        let relaxed = ValidationRules { research_vessel_is_fid: false };
        assert!(load_observations(&path, &[], &relaxed).is_ok());
    }

    #[test]
    fn summary_reproduces_2015_style_counts() {
        // 152 survey rows with 31 positive; 106 commercial rows with 65.
        let mut obs = ObservationSet::default();
        let mut push = |source: Source, vessel: usize, z: u8| {
            let r = obs.z.len();
            obs.source.push(source);
            obs.x.push((r % 13) as f64 * 0.07);
            obs.y.push((r % 11) as f64 * 0.09);
            obs.t_label.push("2015".into());
            obs.subperiod.push(365 * 2 + r as i64 % 30);
            obs.vessel.push(vessel);
            obs.z.push(z);
            obs.y_val.push(if z == 1 { 1.0 + r as f64 } else { 0.0 });
        };
        for r in 0..152 {
            push(Source::Fid, 1, u8::from(r < 31));
        }
        for r in 0..106 {
            push(Source::Fdd, 2 + r % 5, u8::from(r < 65));
        }
        obs.validate(&ValidationRules::default()).unwrap();
        let summary = obs.summary();
        let fid = summary.iter().find(|s| s.source == "FID" && s.t == "2015").unwrap();
        assert_eq!((fid.rows, fid.positives), (152, 31));
        let fdd = summary.iter().find(|s| s.source == "FDD" && s.t == "2015").unwrap();
        assert_eq!((fdd.rows, fdd.positives), (106, 65));
    }

    #[test]
    fn lag_weight_examples() {
        // Degenerate window: the same-day value.
        assert_eq!(lag_weight(&[7.25], 0, 0).unwrap(), 7.25);
        // Constant series is preserved for any (peak, window).
        for (c, l) in [(0, 3), (2, 5), (1, 1)] {
            assert_relative_eq!(lag_weight(&vec![3.3; l + 1], c, l).unwrap(), 3.3, max_relative = 1e-12);
        }
        // Triangular weights (0.25, 0.5, 0.25) for peak 1, window 2.
        assert_relative_eq!(lag_weight(&[1.0, 2.0, 3.0], 1, 2).unwrap(), 2.0, max_relative = 1e-12);
        let w = lag_weights(1, 2);
        assert_relative_eq!(w[0], 0.25, max_relative = 1e-12);
        assert_relative_eq!(w[1], 0.5, max_relative = 1e-12);
        assert_relative_eq!(w[2], 0.25, max_relative = 1e-12);

        assert!(lag_weight(&[1.0, 2.0], 1, 2).is_err());
        assert!(lag_weight(&[1.0, 2.0, 3.0], 3, 2).is_err());
    }

    proptest! {
        #[test]
        fn lag_weight_is_linear(a in -5.0f64..5.0, b in -5.0f64..5.0, seed in 0u64..1000) {
            let mut rng = crate::rng::rng_from_seed(seed);
            use rand::Rng;
            let s1: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let s2: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let combo: Vec<f64> = s1.iter().zip(&s2).map(|(x, y)| a * x + b * y).collect();
            let lhs = lag_weight(&combo, 1, 4).unwrap();
            let rhs = a * lag_weight(&s1, 1, 4).unwrap() + b * lag_weight(&s2, 1, 4).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn attach_lagged_from_daily_table() {
        let mut obs = sample_obs();
        let mut daily = DailyCovariates::default();
        for day in 95..=106 {
            for r in 0..6 {
                daily.insert("chl", day, 0.1 * r as f64, 0.05 + 0.1 * r as f64, day as f64 * 0.1);
            }
        }
        attach_lagged(&mut obs, &daily, "chl", 1, 2).unwrap();
        let col = obs.covariate("K(chl,1,2)").unwrap();
        // Row 0: day 100; series (10.0, 9.9, 9.8)·(0.25, 0.5, 0.25) = 9.9.
        assert_relative_eq!(col[0], 9.9, max_relative = 1e-12);

        // Missing history is reported with the required range.
        let mut obs2 = sample_obs();
        obs2.subperiod[0] = 94;
        let err = attach_lagged(&mut obs2, &daily, "chl", 1, 2).unwrap_err();
        assert!(matches!(err, Error::MissingData(_)));
    }

    #[test]
    fn design_identity_matches_columns() {
        let obs = sample_obs();
        let design = build_design(&obs, &[CovariateSpec::identity("sst")]).unwrap();
        assert_eq!(design.n_cols(), 1);
        for r in 0..obs.n_rows() {
            assert_eq!(design.row(r)[0], obs.covariate("sst").unwrap()[r]);
        }
    }

    #[test]
    fn design_is_stable_under_added_columns() {
        let obs = sample_obs();
        let base = build_design(&obs, &[CovariateSpec::identity("sst")]).unwrap();
        let mut obs2 = obs.clone();
        obs2.add_covariate("depth".into(), vec![10.0; obs.n_rows()]).unwrap();
        let extended = build_design(
            &obs2,
            &[CovariateSpec::identity("sst"), CovariateSpec::identity("depth")],
        )
        .unwrap();
        for r in 0..obs.n_rows() {
            assert_eq!(base.row(r)[0], extended.row(r)[0]);
        }
    }

    #[test]
    fn bspline_partition_of_unity() {
        let values: Vec<f64> = (0..80).map(|k| (k as f64 * 0.17).sin() * 3.0).collect();
        let mut obs = sample_obs();
        obs.covariate_names = vec!["sst".into()];
        obs.covariate_columns = vec![values.clone()];
        // Resize bookkeeping columns to match.
        let n = values.len();
        obs.source = vec![Source::Fid; n];
        obs.x = vec![0.0; n];
        obs.y = vec![0.0; n];
        obs.t_label = vec!["t1".into(); n];
        obs.subperiod = vec![0; n];
        obs.vessel = vec![1; n];
        obs.z = vec![1; n];
        obs.y_val = vec![1.0; n];

        for knots in [5, 7, 11] {
            let design = build_design(
                &obs,
                &[CovariateSpec {
                    name: "sst".into(),
                    transform: Transform::SplineBasis { kind: SplineKind::Bs, knots },
                }],
            )
            .unwrap();
            assert_eq!(design.n_cols(), knots);
            for r in 0..n {
                let total: f64 = design.row(r).iter().sum();
                assert_relative_eq!(total, 1.0, max_relative = 1e-10);
                assert!(design.row(r).iter().all(|&v| v >= -1e-12));
            }
        }
    }

    #[test]
    fn natural_cubic_basis_interpolates_indicators() {
        let values: Vec<f64> = (0..50).map(|k| k as f64 / 49.0 * 4.0 - 2.0).collect();
        let basis = natural_cubic_basis(&values, 5).unwrap();
        let knots = quantile_knots(&values, 5);
        // At each knot, column k is 1 and the others are 0.
        for (k, knot) in knots.iter().enumerate() {
            for (c, col) in basis.iter().enumerate() {
                let row = values.iter().position(|v| (v - knot).abs() < 1e-9);
                if let Some(r) = row {
                    let expect = if c == k { 1.0 } else { 0.0 };
                    assert_relative_eq!(col[r], expect, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn vessel_table_loads_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vessels.csv");
        std::fs::write(&path, "vessel,length_m,power_kw\n2,21.5,320\n3,18.0,250\n").unwrap();
        let vessels = load_vessels(&path).unwrap();
        assert_eq!(vessels.len(), 2);
        assert_eq!(vessels[0].vessel, 2);

        std::fs::write(&path, "vessel,length_m,power_kw\n2,-1.0,320\n").unwrap();
        assert!(load_vessels(&path).is_err());
    }
}
