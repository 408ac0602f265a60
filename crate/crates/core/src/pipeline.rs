//! Country x variable x date panels: ingestion, filtering, imputation,
//! standardisation, stage windows and matrix assembly.
//!
//! The fixed order is
//! `load -> filter_missing -> impute_linear -> filter_population -> [select_stage] -> zscore_panel -> assemble_matrix`.
//! Stage runs standardise within their own window.
//!
//! Missing cells are stored as `NaN`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

pub use chrono::NaiveDate;

use chrono::Days;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::geometry::{DataMatrix, GeometryError};

pub const DEFAULT_MISSING_THRESHOLD: f64 = 0.20;
pub const DEFAULT_MIN_POPULATION: f64 = 1_000_000.0;
pub const DATE_FORMAT: &str = "%Y-%m-%d";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },
    #[error("dates jump from {after} to {before}")]
    DateGap { after: NaiveDate, before: NaiveDate },
    #[error("{0}")]
    Coverage(String),
    #[error("no country survives {0}")]
    AllFiltered(String),
    #[error("{country} has fewer than 2 observed values of {variable}")]
    TooFewObserved { country: String, variable: String },
    #[error("{0} has no population")]
    MissingPopulation(String),
    #[error("{0} has zero pooled variance")]
    ZeroVariance(String),
    #[error("{country}/{variable} is missing on {date}")]
    NotImputed {
        country: String,
        variable: String,
        date: NaiveDate,
    },
    #[error("panel is already standardised")]
    AlreadyStandardised,
    #[error("unknown variable {0:?}")]
    UnknownVariable(String),
    #[error("threshold {0} must lie in [0, 1]")]
    InvalidThreshold(f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Country {
    pub id: String,
    pub name: String,
    pub population: Option<f64>,
    pub income_group: Option<String>,
    /// `(lat, lon)` in degrees.
    pub centroid: Option<(f64, f64)>,
}

impl Country {
    fn bare(id: &str) -> Self {
        Self {
            id: id.to_string(),
            name: id.to_string(),
            population: None,
            income_group: None,
            centroid: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub name: String,
    pub params: serde_json::Value,
    pub dropped: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub steps: Vec<Step>,
    pub standardised: bool,
    /// Stage number when the panel was cut to one window.
    pub stage: Option<u8>,
}

impl Provenance {
    fn push(&mut self, name: &str, params: serde_json::Value, dropped: Vec<String>) {
        self.steps.push(Step {
            name: name.to_string(),
            params,
            dropped,
        });
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub countries: Vec<Country>,
    pub variables: Vec<String>,
    pub dates: Vec<NaiveDate>,
    /// One `countries x dates` block per variable.
    pub data: Vec<Array2<f64>>,
    pub provenance: Provenance,
}

impl Panel {
    pub fn n_countries(&self) -> usize {
        self.countries.len()
    }

    pub fn n_dates(&self) -> usize {
        self.dates.len()
    }

    pub fn variable_index(&self, name: &str) -> Result<usize, PipelineError> {
        self.variables
            .iter()
            .position(|v| v == name)
            .ok_or_else(|| PipelineError::UnknownVariable(name.to_string()))
    }

    pub fn series(&self, variable: usize, country: usize) -> ndarray::ArrayView1<'_, f64> {
        self.data[variable].row(country)
    }

    fn select_rows(&self, keep: &[bool]) -> Panel {
        let rows: Vec<usize> = (0..keep.len()).filter(|&i| keep[i]).collect();
        Panel {
            countries: rows.iter().map(|&i| self.countries[i].clone()).collect(),
            variables: self.variables.clone(),
            dates: self.dates.clone(),
            data: self
                .data
                .iter()
                .map(|a| a.select(ndarray::Axis(0), &rows))
                .collect(),
            provenance: self.provenance.clone(),
        }
    }

    fn select_dates(&self, from: usize, to: usize) -> Panel {
        Panel {
            countries: self.countries.clone(),
            variables: self.variables.clone(),
            dates: self.dates[from..to].to_vec(),
            data: self
                .data
                .iter()
                .map(|a| a.slice(ndarray::s![.., from..to]).to_owned())
                .collect(),
            provenance: self.provenance.clone(),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> PipelineError {
    PipelineError::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

pub fn parse_date(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), DATE_FORMAT).ok()
}

fn parse_cell(s: &str) -> Result<f64, String> {
    let s = s.trim();
    if s.is_empty() || s == "NA" {
        return Ok(f64::NAN);
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(format!("cannot parse {s:?} as a number")),
    }
}

type WideFile = (Vec<String>, BTreeMap<NaiveDate, Vec<f64>>);

fn read_wide(path: &Path) -> Result<WideFile, PipelineError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| io_err(path, e))?;
    let header = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    if header.get(0).map(str::trim) != Some("date") {
        return Err(parse_err(path, 1, "first column must be `date`"));
    }
    let ids: Vec<String> = header
        .iter()
        .skip(1)
        .map(|s| s.trim().to_string())
        .collect();
    let mut seen = BTreeSet::new();
    for id in &ids {
        if id.is_empty() || !seen.insert(id.as_str()) {
            return Err(parse_err(
                path,
                1,
                format!("empty or repeated country id {id:?}"),
            ));
        }
    }
    let mut rows = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let date = parse_date(&rec[0])
            .ok_or_else(|| parse_err(path, line, format!("bad date {:?}", &rec[0])))?;
        let values = rec
            .iter()
            .skip(1)
            .map(parse_cell)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|m| parse_err(path, line, m))?;
        if rows.insert(date, values).is_some() {
            return Err(parse_err(path, line, format!("repeated date {date}")));
        }
    }
    Ok((ids, rows))
}

fn read_metadata(path: &Path) -> Result<HashMap<String, Country>, PipelineError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let header = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    let col = |name: &str| header.iter().position(|h| h.trim() == name);
    let id_col = col("id").ok_or_else(|| parse_err(path, 1, "missing `id` column"))?;
    let name_col = col("name");
    let pop_col = col("population");
    let inc_col = col("income_group");
    let (lat_col, lon_col) = (col("lat"), col("lon"));
    let mut out = HashMap::new();
    for rec in rdr.records() {
        let rec =
            rec.map_err(|e| parse_err(path, e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let get = |c: Option<usize>| {
            c.and_then(|c| rec.get(c))
                .map(str::trim)
                .filter(|s| !s.is_empty() && *s != "NA")
        };
        let num = |c: Option<usize>| -> Result<Option<f64>, PipelineError> {
            get(c)
                .map(|s| parse_cell(s).map_err(|m| parse_err(path, line, m)))
                .transpose()
        };
        let id = get(Some(id_col)).ok_or_else(|| parse_err(path, line, "empty id"))?;
        let centroid = match (num(lat_col)?, num(lon_col)?) {
            (Some(a), Some(b)) => Some((a, b)),
            _ => None,
        };
        let country = Country {
            id: id.to_string(),
            name: get(name_col).unwrap_or(id).to_string(),
            population: num(pop_col)?,
            income_group: get(inc_col).map(str::to_string),
            centroid,
        };
        if out.insert(id.to_string(), country).is_some() {
            return Err(parse_err(path, line, format!("repeated id {id:?}")));
        }
    }
    Ok(out)
}

/// Reads one wide CSV per variable (`date,<id>,<id>,...`) and aligns them.
///
/// Countries are the union over files, sorted by id; a country absent from a
/// file is all-missing for that variable. Dates are sorted, must be daily and
/// contiguous, and are cut to `date_range` (inclusive) when given.
pub fn load_panel(
    sources: &[(String, PathBuf)],
    metadata: Option<&Path>,
    date_range: Option<(NaiveDate, NaiveDate)>,
) -> Result<Panel, PipelineError> {
    let files = sources
        .iter()
        .map(|(_, p)| read_wide(p))
        .collect::<Result<Vec<_>, _>>()?;
    let ids: BTreeSet<&str> = files
        .iter()
        .flat_map(|(ids, _)| ids.iter().map(String::as_str))
        .collect();
    let mut dates: Vec<NaiveDate> = files
        .iter()
        .flat_map(|(_, rows)| rows.keys().copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if dates.is_empty() {
        return Err(PipelineError::Coverage("no dates in input".into()));
    }
    for w in dates.windows(2) {
        if w[0].checked_add_days(Days::new(1)) != Some(w[1]) {
            return Err(PipelineError::DateGap {
                after: w[0],
                before: w[1],
            });
        }
    }
    if let Some((from, to)) = date_range {
        if from > to || from < dates[0] || to > *dates.last().unwrap() {
            return Err(PipelineError::Coverage(format!(
                "requested {from}..{to}, input covers {}..{}",
                dates[0],
                dates.last().unwrap()
            )));
        }
        dates.retain(|d| (from..=to).contains(d));
    }
    let row_of: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let col_of: HashMap<NaiveDate, usize> =
        dates.iter().enumerate().map(|(t, &d)| (d, t)).collect();
    let mut data = Vec::with_capacity(files.len());
    for (file_ids, rows) in &files {
        let mut block = Array2::from_elem((ids.len(), dates.len()), f64::NAN);
        for (date, values) in rows {
            let Some(&t) = col_of.get(date) else { continue };
            for (id, &v) in file_ids.iter().zip(values) {
                block[[row_of[id.as_str()], t]] = v;
            }
        }
        data.push(block);
    }
    let meta = metadata.map(read_metadata).transpose()?.unwrap_or_default();
    let countries = ids
        .iter()
        .map(|id| meta.get(*id).cloned().unwrap_or_else(|| Country::bare(id)))
        .collect();
    let mut provenance = Provenance::default();
    provenance.push(
        "load",
        json!({
            "variables": sources.iter().map(|(v, _)| v).collect::<Vec<_>>(),
            "start": dates[0].to_string(),
            "end": dates.last().unwrap().to_string(),
        }),
        vec![],
    );
    Ok(Panel {
        countries,
        variables: sources.iter().map(|(v, _)| v.clone()).collect(),
        dates,
        data,
        provenance,
    })
}

/// Drops every country whose missing fraction exceeds `threshold` in any variable.
pub fn filter_missing(panel: &Panel, threshold: f64) -> Result<Panel, PipelineError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(PipelineError::InvalidThreshold(threshold));
    }
    let t = panel.n_dates() as f64;
    let keep: Vec<bool> = (0..panel.n_countries())
        .map(|i| {
            panel.data.iter().all(|block| {
                let missing = block.row(i).iter().filter(|v| v.is_nan()).count();
                missing as f64 / t <= threshold
            })
        })
        .collect();
    finish_filter(
        panel,
        &keep,
        "filter_missing",
        json!({ "threshold": threshold }),
    )
}

/// Drops countries with population strictly below `min_pop`.
pub fn filter_population(panel: &Panel, min_pop: f64) -> Result<Panel, PipelineError> {
    let mut keep = Vec::with_capacity(panel.n_countries());
    for c in &panel.countries {
        if min_pop <= 0.0 {
            keep.push(true);
            continue;
        }
        let pop = c
            .population
            .ok_or_else(|| PipelineError::MissingPopulation(c.id.clone()))?;
        keep.push(pop >= min_pop);
    }
    finish_filter(
        panel,
        &keep,
        "filter_population",
        json!({ "min_pop": min_pop }),
    )
}

fn finish_filter(
    panel: &Panel,
    keep: &[bool],
    step: &str,
    params: serde_json::Value,
) -> Result<Panel, PipelineError> {
    if !keep.iter().any(|&k| k) {
        return Err(PipelineError::AllFiltered(step.to_string()));
    }
    let dropped = panel
        .countries
        .iter()
        .zip(keep)
        .filter(|(_, &k)| !k)
        .map(|(c, _)| c.id.clone())
        .collect();
    let mut out = panel.select_rows(keep);
    out.provenance.push(step, params, dropped);
    Ok(out)
}

/// Linear interpolation over the time index for interior gaps; edge gaps
/// take the nearest observed value.
pub fn impute_series(series: &[f64]) -> Option<Vec<f64>> {
    let observed: Vec<usize> = (0..series.len()).filter(|&t| !series[t].is_nan()).collect();
    if observed.len() < 2 {
        return None;
    }
    let mut out = series.to_vec();
    let (first, last) = (observed[0], *observed.last().unwrap());
    for v in &mut out[..first] {
        *v = series[first];
    }
    for v in &mut out[last + 1..] {
        *v = series[last];
    }
    for w in observed.windows(2) {
        let (a, b) = (w[0], w[1]);
        let span = (b - a) as f64;
        for t in a + 1..b {
            let f = (t - a) as f64 / span;
            out[t] = series[a] + f * (series[b] - series[a]);
        }
    }
    Some(out)
}

pub fn impute_linear(panel: &Panel) -> Result<Panel, PipelineError> {
    let mut out = panel.clone();
    let mut filled = 0usize;
    for (v, block) in out.data.iter_mut().enumerate() {
        for (i, mut row) in block.rows_mut().into_iter().enumerate() {
            let series = row.to_vec();
            let gaps = series.iter().filter(|x| x.is_nan()).count();
            if gaps == 0 {
                continue;
            }
            let imputed = impute_series(&series).ok_or_else(|| PipelineError::TooFewObserved {
                country: panel.countries[i].id.clone(),
                variable: panel.variables[v].clone(),
            })?;
            row.assign(&ndarray::ArrayView1::from(&imputed));
            filled += gaps;
        }
    }
    out.provenance.push(
        "impute_linear",
        json!({ "method": "linear_interpolation", "edges": "nearest", "cells_filled": filled }),
        vec![],
    );
    Ok(out)
}

fn first_missing(panel: &Panel) -> Option<PipelineError> {
    for (v, block) in panel.data.iter().enumerate() {
        if let Some(((i, t), _)) = block.indexed_iter().find(|(_, x)| x.is_nan()) {
            return Some(PipelineError::NotImputed {
                country: panel.countries[i].id.clone(),
                variable: panel.variables[v].clone(),
                date: panel.dates[t],
            });
        }
    }
    None
}

/// Pooled z-scores: one mean and sample sd per variable over all countries and dates.
pub fn zscore_panel(panel: &Panel) -> Result<Panel, PipelineError> {
    if panel.provenance.standardised {
        return Err(PipelineError::AlreadyStandardised);
    }
    if let Some(e) = first_missing(panel) {
        return Err(e);
    }
    let mut out = panel.clone();
    let mut params = Vec::new();
    for (v, block) in out.data.iter_mut().enumerate() {
        let first = block[[0, 0]];
        if block.iter().all(|&x| x == first) {
            return Err(PipelineError::ZeroVariance(panel.variables[v].clone()));
        }
        let n = block.len() as f64;
        let mean = block.sum() / n;
        let sd = (block.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt();
        block.mapv_inplace(|x| (x - mean) / sd);
        params.push(json!({ "variable": panel.variables[v], "mean": mean, "sd": sd }));
    }
    out.provenance.standardised = true;
    out.provenance
        .push("zscore", json!({ "pooled": params }), vec![]);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageWindow {
    pub label: u8,
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl StageWindow {
    pub fn contains(&self, d: NaiveDate) -> bool {
        self.start <= d && d <= self.end
    }
}

fn ymd(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).expect("valid calendar date")
}

/// The four pandemic stages, inclusive on both ends.
pub fn stage_windows() -> [StageWindow; 4] {
    [
        StageWindow {
            label: 1,
            start: ymd(2020, 3, 1),
            end: ymd(2020, 6, 23),
        },
        StageWindow {
            label: 2,
            start: ymd(2020, 6, 24),
            end: ymd(2020, 10, 15),
        },
        StageWindow {
            label: 3,
            start: ymd(2020, 10, 16),
            end: ymd(2021, 2, 6),
        },
        StageWindow {
            label: 4,
            start: ymd(2021, 2, 7),
            end: ymd(2021, 5, 29),
        },
    ]
}

pub fn stage_of(date: NaiveDate) -> Option<u8> {
    stage_windows()
        .iter()
        .find(|w| w.contains(date))
        .map(|w| w.label)
}

/// Cuts the panel to one stage window, clipped to the panel's own dates.
pub fn select_stage(panel: &Panel, stage: u8) -> Result<Panel, PipelineError> {
    let window = stage_windows()
        .into_iter()
        .find(|w| w.label == stage)
        .ok_or_else(|| PipelineError::Coverage(format!("no stage {stage}")))?;
    let from = panel.dates.partition_point(|&d| d < window.start);
    let to = panel.dates.partition_point(|&d| d <= window.end);
    if from >= to {
        return Err(PipelineError::Coverage(format!(
            "panel has no dates in stage {stage} ({}..{})",
            window.start, window.end
        )));
    }
    let mut out = panel.select_dates(from, to);
    out.provenance.stage = Some(stage);
    out.provenance.push(
        "select_stage",
        json!({
            "stage": stage,
            "window": [window.start.to_string(), window.end.to_string()],
            "days": to - from,
        }),
        vec![],
    );
    Ok(out)
}

pub fn stratify_stages(panel: &Panel) -> Result<[Panel; 4], PipelineError> {
    Ok([
        select_stage(panel, 1)?,
        select_stage(panel, 2)?,
        select_stage(panel, 3)?,
        select_stage(panel, 4)?,
    ])
}

/// Country `i`, variable `v`, date `t` lands at row `i`, column `v * T + t`,
/// with `v` the position in `variable_order`.
pub fn assemble_matrix(
    panel: &Panel,
    variable_order: &[&str],
) -> Result<DataMatrix, PipelineError> {
    if let Some(e) = first_missing(panel) {
        return Err(e);
    }
    let idx = variable_order
        .iter()
        .map(|v| panel.variable_index(v))
        .collect::<Result<Vec<_>, _>>()?;
    let t = panel.n_dates();
    let mut m = Array2::zeros((panel.n_countries(), t * idx.len()));
    for (k, &v) in idx.iter().enumerate() {
        m.slice_mut(ndarray::s![.., k * t..(k + 1) * t])
            .assign(&panel.data[v]);
    }
    let ids = panel.countries.iter().map(|c| c.id.clone()).collect();
    Ok(DataMatrix::new(m, ids)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageSelection {
    Full,
    #[serde(untagged)]
    Stage(u8),
}

impl std::str::FromStr for StageSelection {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Self::Full),
            "1" | "2" | "3" | "4" => Ok(Self::Stage(s.parse().unwrap())),
            _ => Err(format!("stage must be 1, 2, 3, 4 or full, got {s:?}")),
        }
    }
}

impl std::fmt::Display for StageSelection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Full => f.write_str("full"),
            Self::Stage(s) => write!(f, "{s}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessOptions {
    pub missing_threshold: f64,
    pub min_population: f64,
    pub stage: StageSelection,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            missing_threshold: DEFAULT_MISSING_THRESHOLD,
            min_population: DEFAULT_MIN_POPULATION,
            stage: StageSelection::Full,
        }
    }
}

/// Runs every step after loading, returning the standardised panel.
pub fn preprocess(panel: &Panel, opts: &PreprocessOptions) -> Result<Panel, PipelineError> {
    let p = filter_missing(panel, opts.missing_threshold)?;
    let p = impute_linear(&p)?;
    let p = filter_population(&p, opts.min_population)?;
    let p = match opts.stage {
        StageSelection::Full => p,
        StageSelection::Stage(s) => select_stage(&p, s)?,
    };
    zscore_panel(&p)
}

fn fmt_cell(v: f64) -> String {
    if v.is_nan() {
        "NA".to_string()
    } else {
        v.to_string()
    }
}

/// Writes `<variable>.csv` in the input wide format plus `countries.csv`.
pub fn write_panel(panel: &Panel, dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut written = Vec::new();
    for (v, name) in panel.variables.iter().enumerate() {
        let path = dir.join(format!("{name}.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(|e| io_err(&path, e))?;
        let mut header = vec!["date".to_string()];
        header.extend(panel.countries.iter().map(|c| c.id.clone()));
        w.write_record(&header).map_err(|e| io_err(&path, e))?;
        for (t, d) in panel.dates.iter().enumerate() {
            let mut rec = vec![d.format(DATE_FORMAT).to_string()];
            rec.extend((0..panel.n_countries()).map(|i| fmt_cell(panel.data[v][[i, t]])));
            w.write_record(&rec).map_err(|e| io_err(&path, e))?;
        }
        w.flush().map_err(|e| io_err(&path, e))?;
        written.push(path);
    }
    let path = dir.join("countries.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| io_err(&path, e))?;
    w.write_record(["id", "name", "population", "income_group", "lat", "lon"])
        .map_err(|e| io_err(&path, e))?;
    for c in &panel.countries {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        w.write_record([
            c.id.clone(),
            c.name.clone(),
            opt(c.population),
            c.income_group.clone().unwrap_or_default(),
            opt(c.centroid.map(|p| p.0)),
            opt(c.centroid.map(|p| p.1)),
        ])
        .map_err(|e| io_err(&path, e))?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn d(s: &str) -> NaiveDate {
        parse_date(s).unwrap()
    }

    fn panel(ids: &[&str], t: usize, blocks: Vec<Vec<Vec<f64>>>) -> Panel {
        let start = d("2020-03-01");
        Panel {
            countries: ids.iter().map(|id| Country::bare(id)).collect(),
            variables: (0..blocks.len()).map(|v| format!("v{v}")).collect(),
            dates: (0..t).map(|k| start + Days::new(k as u64)).collect(),
            data: blocks
                .into_iter()
                .map(|rows| Array2::from_shape_vec((ids.len(), t), rows.concat()).unwrap())
                .collect(),
            provenance: Provenance::default(),
        }
    }

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p)
            .unwrap()
            .write_all(body.as_bytes())
            .unwrap();
        p
    }

    const NAN: f64 = f64::NAN;

    #[test]
    fn impute_examples() {
        assert_eq!(
            impute_series(&[1.0, NAN, 3.0]).unwrap(),
            vec![1.0, 2.0, 3.0]
        );
        assert_eq!(
            impute_series(&[NAN, 5.0, 5.0, NAN]).unwrap(),
            vec![5.0, 5.0, 5.0, 5.0]
        );
        assert_eq!(impute_series(&[NAN, 5.0, NAN]), None);
    }

    #[test]
    fn impute_matches_piecewise_oracle() {
        let truth: Vec<f64> = (0..30).map(|t| ((t * t) % 17) as f64).collect();
        let gaps = [3usize, 4, 12, 25];
        let mut s = truth.clone();
        for &g in &gaps {
            s[g] = NAN;
        }
        let got = impute_series(&s).unwrap();
        // Oracle: each gap lies on the chord between its observed neighbours.
        for t in 0..30 {
            if !gaps.contains(&t) {
                assert_eq!(got[t], truth[t]);
                continue;
            }
            let lo = (0..t).rev().find(|k| !gaps.contains(k)).unwrap();
            let hi = (t + 1..30).find(|k| !gaps.contains(k)).unwrap();
            let want = truth[lo] + (truth[hi] - truth[lo]) * (t - lo) as f64 / (hi - lo) as f64;
            assert!((got[t] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn impute_reports_sparse_series() {
        let p = panel(
            &["A", "B"],
            3,
            vec![vec![vec![1.0, 2.0, 3.0], vec![NAN, 2.0, NAN]]],
        );
        assert_eq!(
            impute_linear(&p),
            Err(PipelineError::TooFewObserved {
                country: "B".into(),
                variable: "v0".into()
            })
        );
    }

    #[test]
    fn missing_rule_is_strict() {
        // 100 days: 21 missing is dropped, exactly 20 is kept.
        let mut a = vec![1.0; 100];
        let mut b = vec![1.0; 100];
        for v in &mut a[..21] {
            *v = NAN;
        }
        for v in &mut b[..20] {
            *v = NAN;
        }
        let p = panel(&["A", "B"], 100, vec![vec![a, b], vec![vec![0.0; 100]; 2]]);
        let f = filter_missing(&p, DEFAULT_MISSING_THRESHOLD).unwrap();
        assert_eq!(f.countries.len(), 1);
        assert_eq!(f.countries[0].id, "B");
        assert_eq!(f.provenance.steps.last().unwrap().dropped, vec!["A"]);
        assert_eq!(filter_missing(&p, 1.0).unwrap().countries.len(), 2);
    }

    #[test]
    fn missing_rule_on_crafted_fixture() {
        // Missing counts over 10 days per (country, variable).
        let counts = [[0, 0], [2, 0], [3, 0], [0, 3], [2, 2]];
        let rows = |v: usize| {
            counts
                .iter()
                .map(|c| (0..10).map(|t| if t < c[v] { NAN } else { 1.0 }).collect())
                .collect()
        };
        let p = panel(&["A", "B", "C", "D", "E"], 10, vec![rows(0), rows(1)]);
        let ids: Vec<String> = filter_missing(&p, 0.2)
            .unwrap()
            .countries
            .into_iter()
            .map(|c| c.id)
            .collect();
        assert_eq!(ids, vec!["A", "B", "E"]);
        let all_bad = panel(&["A"], 2, vec![vec![vec![NAN, NAN]]]);
        assert!(matches!(
            filter_missing(&all_bad, 0.2),
            Err(PipelineError::AllFiltered(_))
        ));
    }

    #[test]
    fn population_rule_is_strict() {
        let mut p = panel(&["A", "B", "C"], 2, vec![vec![vec![1.0, 2.0]; 3]]);
        p.countries[0].population = Some(999_999.0);
        p.countries[1].population = Some(1_000_000.0);
        p.countries[2].population = Some(5e7);
        let f = filter_population(&p, DEFAULT_MIN_POPULATION).unwrap();
        let ids: Vec<&str> = f.countries.iter().map(|c| c.id.as_str()).collect();
        assert_eq!(ids, vec!["B", "C"]);
        assert_eq!(f.data[0], p.data[0].slice(ndarray::s![1.., ..]));
        let same = filter_population(&p, 0.0).unwrap();
        assert_eq!(same.countries, p.countries);
        p.countries[2].population = None;
        assert_eq!(
            filter_population(&p, 1.0),
            Err(PipelineError::MissingPopulation("C".into()))
        );
    }

    #[test]
    fn zscore_hand_values() {
        let p = panel(&["A", "B"], 2, vec![vec![vec![1.0, 2.0], vec![3.0, 6.0]]]);
        let z = zscore_panel(&p).unwrap();
        // mean 3, sd sqrt(14/3)
        let sd = (14.0f64 / 3.0).sqrt();
        let want = [-2.0 / sd, -1.0 / sd, 0.0, 3.0 / sd];
        for (g, w) in z.data[0].iter().zip(want) {
            assert!((g - w).abs() < 1e-15);
        }
        assert_eq!(zscore_panel(&z), Err(PipelineError::AlreadyStandardised));
        let flat = panel(&["A", "B"], 2, vec![vec![vec![4.0; 2]; 2]]);
        assert_eq!(
            zscore_panel(&flat),
            Err(PipelineError::ZeroVariance("v0".into()))
        );
    }

    #[test]
    fn zscore_moments() {
        let rows: Vec<Vec<f64>> = (0..7)
            .map(|i| {
                (0..40)
                    .map(|t| ((i * 31 + t * 7) % 23) as f64 * 1.7 - 3.0)
                    .collect()
            })
            .collect();
        let ids = ["a", "b", "c", "d", "e", "f", "g"];
        let z = zscore_panel(&panel(&ids, 40, vec![rows.clone(), rows])).unwrap();
        for block in &z.data {
            let n = block.len() as f64;
            let mean = block.sum() / n;
            let sd = (block.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            assert!(mean.abs() < 1e-12 && (sd - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stage_windows_partition_the_range() {
        let w = stage_windows();
        assert_eq!(w[0].start, d("2020-03-01"));
        assert_eq!(w[0].end, d("2020-06-23"));
        assert_eq!(w[1].start, d("2020-06-24"));
        assert_eq!(w[1].end, d("2020-10-15"));
        assert_eq!(w[2].start, d("2020-10-16"));
        assert_eq!(w[2].end, d("2021-02-06"));
        assert_eq!(w[3].start, d("2021-02-07"));
        assert_eq!(w[3].end, d("2021-05-29"));
        for pair in w.windows(2) {
            assert_eq!(pair[0].end + Days::new(1), pair[1].start);
        }
        for (date, stage) in [
            ("2020-03-01", 1),
            ("2020-05-05", 1),
            ("2020-06-24", 2),
            ("2020-09-30", 2),
            ("2020-12-25", 3),
            ("2021-02-07", 4),
            ("2021-05-29", 4),
        ] {
            assert_eq!(stage_of(d(date)), Some(stage), "{date}");
        }
        assert_eq!(stage_of(d("2021-05-30")), None);
        assert_eq!(stage_of(d("2020-02-29")), None);
    }

    #[test]
    fn stratify_454_day_fixture() {
        let p = panel(&["A"], 454, vec![vec![(0..454).map(f64::from).collect()]]);
        assert_eq!(*p.dates.last().unwrap(), d("2021-05-28"));
        let stages = stratify_stages(&p).unwrap();
        let days: Vec<usize> = stages.iter().map(Panel::n_dates).collect();
        assert_eq!(days.iter().sum::<usize>(), 454);
        assert_eq!(days, vec![115, 114, 114, 111]);
        assert_eq!(stages[1].data[0][[0, 0]], 115.0);
        let short = panel(&["A"], 10, vec![vec![vec![1.0; 10]]]);
        assert!(matches!(
            stratify_stages(&short),
            Err(PipelineError::Coverage(_))
        ));
    }

    #[test]
    fn assembly_layout() {
        let p = panel(
            &["A", "B", "C"],
            3,
            vec![
                vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![0.0; 3]],
                vec![vec![7.0, 8.0, 9.0], vec![10.0, 11.0, 12.0], vec![1.0; 3]],
            ],
        );
        let m = assemble_matrix(&p, &["v1", "v0"]).unwrap();
        assert_eq!(m.row(0).to_vec(), vec![7.0, 8.0, 9.0, 1.0, 2.0, 3.0]);
        assert_eq!(m.row(1).to_vec(), vec![10.0, 11.0, 12.0, 4.0, 5.0, 6.0]);
        assert_eq!(
            m.row_ids(),
            &["A".to_string(), "B".to_string(), "C".to_string()]
        );
        let one = panel(
            &["A", "B", "C"],
            1,
            vec![vec![vec![1.0], vec![2.0], vec![3.0]]],
        );
        let m = assemble_matrix(&one, &["v0"]).unwrap();
        assert_eq!(m.ncols(), 1);
        assert_eq!(m.values().column(0).to_vec(), vec![1.0, 2.0, 3.0]);
        assert!(matches!(
            assemble_matrix(&one, &["zz"]),
            Err(PipelineError::UnknownVariable(_))
        ));
        let gap = panel(
            &["A", "B", "C"],
            2,
            vec![vec![vec![1.0, 2.0], vec![1.0, NAN], vec![3.0, 2.0]]],
        );
        assert!(matches!(
            assemble_matrix(&gap, &["v0"]),
            Err(PipelineError::NotImputed { .. })
        ));
    }

    #[test]
    fn paper_shaped_assembly() {
        let n = 4;
        let ids: Vec<String> = (0..n).map(|i| format!("C{i}")).collect();
        let idr: Vec<&str> = ids.iter().map(String::as_str).collect();
        let block = |v: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|i| (0..454).map(|t| (i * 1000 + t * 3 + v) as f64).collect())
                .collect()
        };
        let p = panel(&idr, 454, vec![block(0), block(1), block(2)]);
        let m = assemble_matrix(&p, &["v0", "v1", "v2"]).unwrap();
        assert_eq!(m.ncols(), 1362);
        let mut k = 7u64;
        for _ in 0..50 {
            k = k
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            let (i, v, t) = (
                (k >> 33) as usize % n,
                (k >> 20) as usize % 3,
                (k >> 5) as usize % 454,
            );
            assert_eq!(m.values()[[i, v * 454 + t]], p.data[v][[i, t]]);
        }
    }

    #[test]
    fn load_aligns_files() {
        let dir = tempfile::tempdir().unwrap();
        let cases = write(
            dir.path(),
            "cases.csv",
            "date,AAA,BBB\n2020-03-01,1,2\n2020-03-02,NA,3\n2020-03-03,3,\n",
        );
        let deaths = write(
            dir.path(),
            "deaths.csv",
            "date,BBB\n2020-03-01,0\n2020-03-02,1\n2020-03-03,2\n",
        );
        let meta = write(
            dir.path(),
            "meta.csv",
            "id,name,population,income_group,lat,lon\nAAA,Aland,2000000,High,60,20\nBBB,Bravo,500,,,\n",
        );
        let p = load_panel(
            &[("cases".into(), cases), ("deaths".into(), deaths)],
            Some(&meta),
            None,
        )
        .unwrap();
        assert_eq!(p.n_dates(), 3);
        assert_eq!(p.countries[0].name, "Aland");
        assert_eq!(p.countries[0].centroid, Some((60.0, 20.0)));
        assert_eq!(p.countries[1].population, Some(500.0));
        assert!(p.data[0][[0, 1]].is_nan());
        assert!(p.data[0][[1, 2]].is_nan());
        assert!(p.data[1].row(0).iter().all(|v| v.is_nan()));
        assert_eq!(p.data[1].row(1).to_vec(), vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn load_is_row_order_independent() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(
            dir.path(),
            "a.csv",
            "date,X,Y\n2020-03-01,1,2\n2020-03-02,3,4\n2020-03-03,5,6\n",
        );
        let b = write(
            dir.path(),
            "b.csv",
            "date,Y,X\n2020-03-03,6,5\n2020-03-01,2,1\n2020-03-02,4,3\n",
        );
        let pa = load_panel(&[("v".into(), a)], None, None).unwrap();
        let pb = load_panel(&[("v".into(), b)], None, None).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        let gap = write(
            dir.path(),
            "gap.csv",
            "date,X\n2020-03-01,1\n2020-03-03,2\n",
        );
        assert!(matches!(
            load_panel(&[("v".into(), gap)], None, None),
            Err(PipelineError::DateGap { .. })
        ));
        let bad = write(
            dir.path(),
            "bad.csv",
            "date,X\n2020-03-01,1\n2020-03-02,abc\n",
        );
        match load_panel(&[("v".into(), bad)], None, None) {
            Err(PipelineError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let ok = write(dir.path(), "ok.csv", "date,X\n2020-03-01,1\n2020-03-02,2\n");
        assert!(matches!(
            load_panel(
                &[("v".into(), ok.clone())],
                None,
                Some((d("2020-02-01"), d("2020-03-02")))
            ),
            Err(PipelineError::Coverage(_))
        ));
        let cut = load_panel(
            &[("v".into(), ok)],
            None,
            Some((d("2020-03-02"), d("2020-03-02"))),
        )
        .unwrap();
        assert_eq!(cut.data[0].row(0).to_vec(), vec![2.0]);
        assert!(matches!(
            load_panel(&[("v".into(), dir.path().join("nope.csv"))], None, None),
            Err(PipelineError::Io { .. })
        ));
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = panel(
            &["A", "B"],
            3,
            vec![vec![vec![1.5, NAN, -2.0], vec![0.1, 0.2, 0.3]]],
        );
        p.countries[0].population = Some(3e6);
        p.countries[1].centroid = Some((1.0, -2.5));
        write_panel(&p, dir.path()).unwrap();
        let back = load_panel(
            &[("v0".into(), dir.path().join("v0.csv"))],
            Some(&dir.path().join("countries.csv")),
            None,
        )
        .unwrap();
        assert_eq!(back.countries, p.countries);
        assert_eq!(back.dates, p.dates);
        assert_eq!(back.data[0][[0, 0]], 1.5);
        assert!(back.data[0][[0, 1]].is_nan());
        assert_eq!(back.data[0].row(1), p.data[0].row(1));
    }

    #[test]
    fn stage_selection_parses() {
        assert_eq!(
            "full".parse::<StageSelection>().unwrap(),
            StageSelection::Full
        );
        assert_eq!(
            "3".parse::<StageSelection>().unwrap(),
            StageSelection::Stage(3)
        );
        assert!("5".parse::<StageSelection>().is_err());
        let j: StageSelection = serde_json::from_str("2").unwrap();
        assert_eq!(j, StageSelection::Stage(2));
        let j: StageSelection = serde_json::from_str("\"full\"").unwrap();
        assert_eq!(j, StageSelection::Full);
    }
}
