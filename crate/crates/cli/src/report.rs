//! Consolidated report plus the plot-ready tables behind it.

use std::path::PathBuf;

use manifold_id::io::{read_csv, read_json, read_matrix_csv, write_csv, write_json};
use manifold_id::pipeline::{load_panel, Panel};
use serde::Serialize;
use serde_json::Value;

use crate::commands::*;
use crate::config::RunConfig;
use crate::error::CliError;

pub const REPORT_FILE: &str = "report.json";
pub const SCHEMA_FILE: &str = "report.schema.json";
pub const TRAJECTORIES_FILE: &str = "trajectories.csv";
pub const DENSITIES_FILE: &str = "densities.csv";
pub const QQ_FILE: &str = "twonn_qq.csv";

pub const REPORT_SCHEMA: &str = include_str!("../schema/report.schema.json");

const KDE_POINTS: usize = 128;

#[derive(Debug, Serialize)]
struct Observation {
    id: String,
    name: String,
    cluster: usize,
    median_id: f64,
}

#[derive(Debug, Serialize)]
struct PartitionInfo {
    #[serde(rename = "K")]
    k: usize,
    vi_score: f64,
    sizes: Vec<usize>,
}

#[derive(Debug, Serialize)]
struct Files {
    trajectories: String,
    densities: String,
    twonn_qq: String,
    schema: String,
}

#[derive(Debug, Serialize)]
struct Report {
    source: String,
    stage: String,
    n: usize,
    nominal_dimension: usize,
    variables: Vec<String>,
    nsim: usize,
    components: usize,
    twonn: TwoNnRecord,
    partition: PartitionInfo,
    observations: Vec<Observation>,
    clusters: Value,
    moran: Option<Value>,
    ks: Option<Value>,
    files: Files,
}

/// Gaussian KDE on an even grid, Silverman's rule-of-thumb bandwidth.
pub fn kde(samples: &[f64], points: usize) -> Vec<(f64, f64)> {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let sd = if samples.len() > 1 {
        (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let h = (sorted.len() - 1) as f64 * p;
        let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    };
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let mut h = 0.9 * spread * n.powf(-0.2);
    if h <= 0.0 {
        h = 1e-3 * mean.abs().max(1.0);
    }
    let (lo, hi) = (sorted[0] - 3.0 * h, sorted[sorted.len() - 1] + 3.0 * h);
    let norm = 1.0 / (n * h * (2.0 * std::f64::consts::PI).sqrt());
    (0..points)
        .map(|g| {
            let x = lo + (hi - lo) * g as f64 / (points - 1) as f64;
            let dens: f64 = sorted
                .iter()
                .map(|s| (-0.5 * ((x - s) / h).powi(2)).exp())
                .sum();
            (x, dens * norm)
        })
        .collect()
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (m, sd)
}

/// Standardised series per observation: `(variable, dates, rows)` where
/// `rows[v][i]` is observation `i`'s series of variable `v`.
type Series = (Vec<String>, Vec<String>, Vec<Vec<Vec<f64>>>);

fn load_series(
    cfg: &RunConfig,
    record: &PreprocessRecord,
    ids: &[String],
) -> Result<(Series, Vec<String>), CliError> {
    let pre = stage_dir(cfg, PREPROCESS);
    if record.source == "panel" {
        let panel_dir = pre.join(PANEL_DIR);
        let sources: Vec<(String, PathBuf)> = record
            .variables
            .iter()
            .map(|v| (v.clone(), panel_dir.join(format!("{v}.csv"))))
            .collect();
        for (_, p) in &sources {
            require(PREPROCESS, p)?;
        }
        let panel: Panel = load_panel(&sources, Some(&panel_dir.join(COUNTRIES_FILE)), None)?;
        let row_of: std::collections::HashMap<&str, usize> = panel
            .countries
            .iter()
            .enumerate()
            .map(|(i, c)| (c.id.as_str(), i))
            .collect();
        let rows = ids
            .iter()
            .map(|id| {
                row_of.get(id.as_str()).copied().ok_or_else(|| {
                    CliError::Data(format!(
                        "{id} is in the fit but not in the preprocessed panel"
                    ))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let data = panel
            .data
            .iter()
            .map(|block| rows.iter().map(|&i| block.row(i).to_vec()).collect())
            .collect();
        let dates = panel.dates.iter().map(|d| d.to_string()).collect();
        let names = rows
            .iter()
            .map(|&i| panel.countries[i].name.clone())
            .collect();
        Ok(((panel.variables.clone(), dates, data), names))
    } else {
        let m = read_matrix_csv(&pre.join(MATRIX_FILE))?;
        if m.row_ids() != ids {
            return Err(CliError::Data(
                "matrix rows do not match the fitted observations".into(),
            ));
        }
        let data = vec![(0..m.nrows()).map(|i| m.row(i).to_vec()).collect()];
        let dates = vec![String::new(); m.ncols()];
        Ok(((vec!["x".into()], dates, data), ids.to_vec()))
    }
}

pub fn cmd_report(cfg: &RunConfig) -> Result<String, CliError> {
    let record = read_preprocess_record(cfg)?;
    let fit = stage_dir(cfg, FIT);
    let post = stage_dir(cfg, POSTPROCESS);
    let twonn_path = fit.join(TWONN_FILE);
    require(FIT, &twonn_path)?;
    let twonn: TwoNnRecord = read_json(&twonn_path)?;
    let fit_cfg: manifold_id::HidalgoConfig = {
        let p = fit.join(manifold_id::io::CONFIG_FILE);
        require(FIT, &p)?;
        read_json(&p)?
    };
    let part_path = post.join(PARTITION_FILE);
    require(POSTPROCESS, &part_path)?;
    let partition: PartitionRecord = read_json(&part_path)?;
    let (ids, medians, clusters) = read_medians(cfg)?;
    let summary_path = post.join(SUMMARY_FILE);
    require(POSTPROCESS, &summary_path)?;
    let summaries: Value = read_json(&summary_path)?;

    let spatial = stage_dir(cfg, SPATIAL);
    let moran_path = spatial.join(MORAN_FILE);
    let moran: Option<Value> = if moran_path.exists() {
        Some(read_json(&moran_path)?)
    } else if weight_source(cfg).is_some() {
        return Err(CliError::MissingArtifact {
            stage: SPATIAL.into(),
            path: moran_path.display().to_string(),
        });
    } else {
        None
    };
    let ks_path = spatial.join(KS_FILE);
    let ks: Option<Value> = if ks_path.exists() {
        Some(read_json(&ks_path)?)
    } else {
        None
    };

    let ((variables, dates, series), names) = load_series(cfg, &record, &ids)?;
    let k = partition.k;
    let members: Vec<Vec<usize>> = (1..=k)
        .map(|c| (0..ids.len()).filter(|&i| clusters[i] == c).collect())
        .collect();

    let dir = stage_dir(cfg, REPORT);
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    for stale in [
        REPORT_FILE,
        TRAJECTORIES_FILE,
        DENSITIES_FILE,
        QQ_FILE,
        SCHEMA_FILE,
    ] {
        let p = dir.join(stale);
        if p.exists() {
            std::fs::remove_file(&p)
                .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        }
    }

    let mut traj = Vec::new();
    for (c, mem) in members.iter().enumerate() {
        for (v, name) in variables.iter().enumerate() {
            for (t, date) in dates.iter().enumerate() {
                let vals: Vec<f64> = mem.iter().map(|&i| series[v][i][t]).collect();
                let (m, sd) = mean_sd(&vals);
                traj.push([
                    (c + 1).to_string(),
                    name.clone(),
                    t.to_string(),
                    date.clone(),
                    m.to_string(),
                    sd.to_string(),
                ]);
            }
        }
    }
    write_csv(
        &dir.join(TRAJECTORIES_FILE),
        &["cluster", "variable", "t", "date", "mean", "sd"].map(String::from),
        traj,
    )?;

    let samples_path = post.join(DENSITY_SAMPLES_FILE);
    require(POSTPROCESS, &samples_path)?;
    let (_, rows) = read_csv(&samples_path)?;
    let mut by_cluster: Vec<Vec<f64>> = vec![Vec::new(); k];
    for r in &rows {
        let c: usize = r[0]
            .parse()
            .map_err(|_| CliError::Data(format!("bad cluster {:?}", r[0])))?;
        let d: f64 = r[2]
            .parse()
            .map_err(|_| CliError::Data(format!("bad sample {:?}", r[2])))?;
        if (1..=k).contains(&c) {
            by_cluster[c - 1].push(d);
        }
    }
    let mut dens = Vec::new();
    for (c, s) in by_cluster.iter().enumerate().filter(|(_, s)| !s.is_empty()) {
        for (x, y) in kde(s, KDE_POINTS) {
            dens.push([(c + 1).to_string(), x.to_string(), y.to_string()]);
        }
    }
    write_csv(
        &dir.join(DENSITIES_FILE),
        &["cluster", "d", "density"].map(String::from),
        dens,
    )?;

    let mu_path = fit.join(MU_FILE);
    require(FIT, &mu_path)?;
    let (_, mu_rows) = read_csv(&mu_path)?;
    let mut log_mu: Vec<f64> = mu_rows
        .iter()
        .map(|r| r[1].parse::<f64>().map(f64::ln))
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Data(format!("{}: bad ratio", mu_path.display())))?;
    log_mu.sort_by(f64::total_cmp);
    let n = log_mu.len() as f64;
    write_csv(
        &dir.join(QQ_FILE),
        &["rank", "log_mu", "neg_log_survival"].map(String::from),
        log_mu.iter().enumerate().map(|(i, &l)| {
            let surv = 1.0 - (i + 1) as f64 / (n + 1.0);
            [(i + 1).to_string(), l.to_string(), (-surv.ln()).to_string()]
        }),
    )?;

    let report = Report {
        source: record.source.clone(),
        stage: record.stage.clone(),
        n: ids.len(),
        nominal_dimension: record.nominal_dimension,
        variables: variables.clone(),
        nsim: fit_cfg.nsim,
        components: fit_cfg.components,
        twonn,
        partition: PartitionInfo {
            k,
            vi_score: partition.vi_score,
            sizes: members.iter().map(Vec::len).collect(),
        },
        observations: (0..ids.len())
            .map(|i| Observation {
                id: ids[i].clone(),
                name: names[i].clone(),
                cluster: clusters[i],
                median_id: medians[i],
            })
            .collect(),
        clusters: summaries,
        moran,
        ks,
        files: Files {
            trajectories: TRAJECTORIES_FILE.into(),
            densities: DENSITIES_FILE.into(),
            twonn_qq: QQ_FILE.into(),
            schema: SCHEMA_FILE.into(),
        },
    };
    write_json(&dir.join(REPORT_FILE), &report)?;
    std::fs::write(dir.join(SCHEMA_FILE), REPORT_SCHEMA)
        .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    Ok(format!(
        "report: {} observations, K = {k} -> {}",
        ids.len(),
        dir.display()
    ))
}
