//! One function per subcommand. Each reads only the documented artifacts of
//! earlier stages under `<out>/<stage>/` and rewrites its own directory.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use manifold_id::io::{
    read_csv, read_json, read_matrix_csv, read_traces, write_csv, write_json, write_matrix_csv,
    write_pcm_csv, write_traces, LABELS_FILE,
};
use manifold_id::pipeline::{assemble_matrix, load_panel, preprocess, write_panel, Provenance};
use manifold_id::posterior::{
    cluster_id_summary_with_components, component_id_chains, vi_partition_from_traces,
};
use manifold_id::rng::derive_seed;
use manifold_id::spatial::{
    build_knn_weights, ks_two_sample, moran_permutation_test, KsResult, SpatialWeights,
};
use manifold_id::synthkit::{mix_manifolds, ManifoldSpec};
use manifold_id::twonn::{twonn_mle, IdEstimate, DEFAULT_CI_LEVEL};
use manifold_id::{
    co_clustering, hidalgo_fit, mu_ratios, nearest_neighbors, remap_observation_chains,
};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;

pub const PREPROCESS: &str = "preprocess";
pub const FIT: &str = "fit";
pub const POSTPROCESS: &str = "postprocess";
pub const SPATIAL: &str = "spatial";
pub const REPORT: &str = "report";

pub const MATRIX_FILE: &str = "matrix.csv";
pub const PROVENANCE_FILE: &str = "provenance.json";
pub const PANEL_DIR: &str = "panel";
pub const COUNTRIES_FILE: &str = "countries.csv";
pub const TRUTH_FILE: &str = "truth.csv";
pub const MU_FILE: &str = "mu.csv";
pub const TWONN_FILE: &str = "twonn.json";
pub const PCM_FILE: &str = "pcm.csv";
pub const PARTITION_FILE: &str = "partition.json";
pub const MEDIANS_FILE: &str = "medians.csv";
pub const SUMMARY_FILE: &str = "cluster_summary.json";
pub const DENSITY_SAMPLES_FILE: &str = "density_samples.csv";
pub const MORAN_FILE: &str = "moran.json";
pub const KS_FILE: &str = "ks.json";

pub fn stage_dir(cfg: &RunConfig, stage: &str) -> PathBuf {
    cfg.out.join(stage)
}

/// Removes and recreates a stage directory so no stale files survive.
fn fresh_dir(dir: &Path) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Data(format!("{}: {e}", dir.display()));
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(io)?;
    }
    std::fs::create_dir_all(dir).map_err(io)
}

pub fn require(stage: &str, path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingArtifact {
            stage: stage.to_string(),
            path: path.display().to_string(),
        })
    }
}

fn f(v: f64) -> String {
    v.to_string()
}

/// Contents of `preprocess/provenance.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreprocessRecord {
    pub source: String,
    pub variables: Vec<String>,
    pub n: usize,
    pub nominal_dimension: usize,
    pub stage: String,
    /// Step log for panel input.
    pub provenance: Option<Provenance>,
    /// Generator specs, with the seeds actually used, for synthetic input.
    pub synth: Option<Vec<ManifoldSpec>>,
    pub separation: Option<f64>,
}

pub fn cmd_preprocess(cfg: &RunConfig) -> Result<String, CliError> {
    let inputs = cfg
        .inputs
        .as_ref()
        .ok_or_else(|| CliError::Config("no `inputs` in the run configuration".into()))?;
    let sources: Vec<(String, PathBuf)> = inputs
        .variables
        .iter()
        .map(|v| (v.name.clone(), v.path.clone()))
        .collect();
    let panel = load_panel(&sources, inputs.metadata.as_deref(), cfg.date_range())?;
    let processed = preprocess(&panel, &cfg.preprocess)?;
    let order: Vec<&str> = processed.variables.iter().map(String::as_str).collect();
    let matrix = assemble_matrix(&processed, &order)?;
    let dir = stage_dir(cfg, PREPROCESS);
    fresh_dir(&dir)?;
    write_panel(&processed, &dir.join(PANEL_DIR))?;
    write_matrix_csv(&dir.join(MATRIX_FILE), &matrix)?;
    write_json(
        &dir.join(PROVENANCE_FILE),
        &PreprocessRecord {
            source: "panel".into(),
            variables: processed.variables.clone(),
            n: matrix.nrows(),
            nominal_dimension: matrix.ncols(),
            stage: cfg.preprocess.stage.to_string(),
            provenance: Some(processed.provenance.clone()),
            synth: None,
            separation: None,
        },
    )?;
    Ok(format!(
        "preprocess: {} countries x {} columns ({} days) -> {}",
        matrix.nrows(),
        matrix.ncols(),
        processed.n_dates(),
        dir.display()
    ))
}

/// Writes a synthetic matrix in place of the preprocess stage.
pub fn cmd_synth(cfg: &RunConfig) -> Result<String, CliError> {
    let synth = cfg
        .synth
        .as_ref()
        .ok_or_else(|| CliError::Config("no `synth` in the run configuration".into()))?;
    let specs: Vec<ManifoldSpec> = synth
        .specs
        .iter()
        .enumerate()
        .map(|(g, s)| ManifoldSpec {
            seed: derive_seed(cfg.seed, &format!("synth/{g}")),
            ..s.clone()
        })
        .collect();
    let (matrix, labels) = mix_manifolds(&specs, synth.separation)?;
    let dir = stage_dir(cfg, PREPROCESS);
    fresh_dir(&dir)?;
    write_matrix_csv(&dir.join(MATRIX_FILE), &matrix)?;
    write_csv(
        &dir.join(TRUTH_FILE),
        &["id".into(), "label".into()],
        matrix
            .row_ids()
            .iter()
            .zip(&labels)
            .map(|(id, l)| [id.clone(), l.to_string()]),
    )?;
    write_json(
        &dir.join(PROVENANCE_FILE),
        &PreprocessRecord {
            source: "synth".into(),
            variables: vec!["x".into()],
            n: matrix.nrows(),
            nominal_dimension: matrix.ncols(),
            stage: "full".into(),
            provenance: None,
            synth: Some(specs),
            separation: Some(synth.separation),
        },
    )?;
    Ok(format!(
        "synth: {} points x {} columns -> {}",
        matrix.nrows(),
        matrix.ncols(),
        dir.display()
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TwoNnRecord {
    pub estimate: IdEstimate,
    pub nominal_dimension: usize,
    pub exceeds_nominal: bool,
}

pub fn cmd_fit(cfg: &RunConfig) -> Result<String, CliError> {
    let matrix_path = stage_dir(cfg, PREPROCESS).join(MATRIX_FILE);
    require(PREPROCESS, &matrix_path)?;
    let data = read_matrix_csv(&matrix_path)?;
    let mut h = cfg.hidalgo.clone();
    h.seed = derive_seed(cfg.seed, "fit");
    let traces = hidalgo_fit(&data, &h)?;
    let mu = mu_ratios(&nearest_neighbors(&data, 2)?)?;
    let est = twonn_mle(&mu, DEFAULT_CI_LEVEL)?;
    let dir = stage_dir(cfg, FIT);
    fresh_dir(&dir)?;
    write_traces(&dir, &traces, data.row_ids())?;
    write_csv(
        &dir.join(MU_FILE),
        &["id".into(), "mu".into()],
        data.row_ids()
            .iter()
            .zip(mu.values())
            .map(|(id, &m)| [id.clone(), f(m)]),
    )?;
    write_json(
        &dir.join(TWONN_FILE),
        &TwoNnRecord {
            estimate: est,
            nominal_dimension: data.ncols(),
            exceeds_nominal: est.exceeds_nominal(data.ncols()),
        },
    )?;
    Ok(format!(
        "fit: {} iterations x {} observations, L = {} -> {}",
        traces.nsim(),
        traces.n(),
        traces.components(),
        dir.display()
    ))
}

/// Contents of `postprocess/partition.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionRecord {
    #[serde(rename = "K")]
    pub k: usize,
    pub vi_score: f64,
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
}

pub fn cmd_postprocess(cfg: &RunConfig) -> Result<String, CliError> {
    let fit = stage_dir(cfg, FIT);
    require(FIT, &fit.join(LABELS_FILE))?;
    let (traces, ids) = read_traces(&fit)?;
    let pcm = co_clustering(&traces);
    let partition = vi_partition_from_traces(&pcm, &traces)?;
    let chains = remap_observation_chains(&traces)?;
    let ci = cfg.posterior.ci_level;
    let summaries = cluster_id_summary_with_components(&partition, &chains, &traces, ci)?;
    let component = component_id_chains(&partition, &traces)?;

    let dir = stage_dir(cfg, POSTPROCESS);
    fresh_dir(&dir)?;
    write_pcm_csv(&dir.join(PCM_FILE), &pcm, &ids)?;
    write_json(
        &dir.join(PARTITION_FILE),
        &PartitionRecord {
            k: partition.k,
            vi_score: partition.vi_score,
            ids: ids.clone(),
            labels: partition.labels.clone(),
        },
    )?;
    write_csv(
        &dir.join(MEDIANS_FILE),
        &["id".into(), "median_id".into(), "cluster".into()],
        (0..ids.len()).map(|i| {
            [
                ids[i].clone(),
                f(chains.medians[i]),
                partition.labels[i].to_string(),
            ]
        }),
    )?;
    write_json(&dir.join(SUMMARY_FILE), &summaries)?;
    write_csv(
        &dir.join(DENSITY_SAMPLES_FILE),
        &["cluster".into(), "iteration".into(), "d".into()],
        component.iter().enumerate().flat_map(|(k, chain)| {
            chain
                .iter()
                .enumerate()
                .map(move |(t, &d)| [(k + 1).to_string(), t.to_string(), f(d)])
        }),
    )?;
    Ok(format!(
        "postprocess: K = {} clusters (sizes {:?}) -> {}",
        partition.k,
        partition.sizes(),
        dir.display()
    ))
}

/// `(ids, median IDs, cluster labels)` from `postprocess/medians.csv`.
pub fn read_medians(cfg: &RunConfig) -> Result<(Vec<String>, Vec<f64>, Vec<usize>), CliError> {
    let path = stage_dir(cfg, POSTPROCESS).join(MEDIANS_FILE);
    require(POSTPROCESS, &path)?;
    let (_, rows) = read_csv(&path)?;
    let mut ids = Vec::new();
    let mut med = Vec::new();
    let mut cl = Vec::new();
    for (line, r) in rows.iter().enumerate() {
        let bad = || CliError::Data(format!("{}:{}: malformed row", path.display(), line + 2));
        ids.push(r.first().ok_or_else(bad)?.clone());
        med.push(r.get(1).and_then(|s| s.parse().ok()).ok_or_else(bad)?);
        cl.push(r.get(2).and_then(|s| s.parse().ok()).ok_or_else(bad)?);
    }
    Ok((ids, med, cl))
}

#[derive(Debug, Clone, PartialEq)]
pub enum WeightSource {
    Adjacency(PathBuf),
    Centroids(PathBuf),
}

impl WeightSource {
    fn name(&self) -> &'static str {
        match self {
            Self::Adjacency(_) => "adjacency",
            Self::Centroids(_) => "centroids",
        }
    }
}

fn has_centroid_columns(path: &Path) -> bool {
    let Ok((header, rows)) = read_csv(path) else {
        return false;
    };
    let (Some(la), Some(lo)) = (
        header.iter().position(|h| h == "lat"),
        header.iter().position(|h| h == "lon"),
    ) else {
        return false;
    };
    !rows.is_empty() && rows.iter().all(|r| !r[la].is_empty() && !r[lo].is_empty())
}

/// Adjacency first, then configured centroids, then centroids carried in the
/// panel metadata.
pub fn weight_source(cfg: &RunConfig) -> Option<WeightSource> {
    if let Some(p) = &cfg.spatial.adjacency {
        return Some(WeightSource::Adjacency(p.clone()));
    }
    if let Some(p) = &cfg.spatial.centroids {
        return Some(WeightSource::Centroids(p.clone()));
    }
    let meta = stage_dir(cfg, PREPROCESS)
        .join(PANEL_DIR)
        .join(COUNTRIES_FILE);
    has_centroid_columns(&meta).then_some(WeightSource::Centroids(meta))
}

fn load_weights(
    source: &WeightSource,
    ids: &[String],
    k: usize,
) -> Result<SpatialWeights, CliError> {
    let (path, header, rows) = match source {
        WeightSource::Adjacency(p) | WeightSource::Centroids(p) => {
            let (h, r) = read_csv(p)?;
            (p, h, r)
        }
    };
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Data(format!("{}: no `{name}` column", path.display())))
    };
    match source {
        WeightSource::Adjacency(_) => {
            let (a, b) = (col("from")?, col("to")?);
            let known: std::collections::HashSet<&str> = ids.iter().map(String::as_str).collect();
            // Edges to countries removed by preprocessing are dropped.
            let edges: Vec<(&str, &str)> = rows
                .iter()
                .map(|r| (r[a].as_str(), r[b].as_str()))
                .filter(|(x, y)| known.contains(x) && known.contains(y))
                .collect();
            Ok(SpatialWeights::from_edges(ids, &edges)?)
        }
        WeightSource::Centroids(_) => {
            let (i, la, lo) = (col("id")?, col("lat")?, col("lon")?);
            let mut map = HashMap::new();
            for (line, r) in rows.iter().enumerate() {
                let num = |s: &str| {
                    s.parse::<f64>().map_err(|_| {
                        CliError::Data(format!(
                            "{}:{}: bad coordinate {s:?}",
                            path.display(),
                            line + 2
                        ))
                    })
                };
                if r[la].is_empty() || r[lo].is_empty() {
                    continue;
                }
                map.insert(r[i].clone(), (num(&r[la])?, num(&r[lo])?));
            }
            let coords = ids
                .iter()
                .map(|id| {
                    map.get(id).copied().ok_or_else(|| {
                        CliError::Data(format!("{}: no centroid for {id}", path.display()))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(build_knn_weights(&coords, ids.to_vec(), k)?)
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MoranRecord {
    #[serde(flatten)]
    pub result: manifold_id::spatial::MoranResult,
    pub weights: String,
    pub knn: Option<usize>,
    pub edges: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KsRecord {
    pub covariate: String,
    pub cluster_a: usize,
    pub cluster_b: usize,
    pub n_a: usize,
    pub n_b: usize,
    #[serde(flatten)]
    pub result: KsResult,
}

fn ks_records(path: &Path, ids: &[String], clusters: &[usize]) -> Result<Vec<KsRecord>, CliError> {
    let (header, rows) = read_csv(path)?;
    let id_col = header
        .iter()
        .position(|h| h == "id")
        .ok_or_else(|| CliError::Data(format!("{}: no `id` column", path.display())))?;
    let cluster_of: HashMap<&str, usize> = ids
        .iter()
        .map(String::as_str)
        .zip(clusters.iter().copied())
        .collect();
    let mut out = Vec::new();
    if clusters.iter().copied().max().unwrap_or(0) < 2 {
        return Ok(out);
    }
    for (c, name) in header.iter().enumerate() {
        if c == id_col {
            continue;
        }
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for r in &rows {
            let Some(&k) = cluster_of.get(r[id_col].as_str()) else {
                continue;
            };
            let Ok(v) = r[c].parse::<f64>() else { continue };
            match k {
                1 => a.push(v),
                2 => b.push(v),
                _ => {}
            }
        }
        if a.is_empty() || b.is_empty() {
            continue;
        }
        out.push(KsRecord {
            covariate: name.clone(),
            cluster_a: 1,
            cluster_b: 2,
            n_a: a.len(),
            n_b: b.len(),
            result: ks_two_sample(&a, &b)?,
        });
    }
    Ok(out)
}

pub fn cmd_spatial(cfg: &RunConfig) -> Result<String, CliError> {
    let (ids, medians, clusters) = read_medians(cfg)?;
    let source = weight_source(cfg).ok_or_else(|| {
        CliError::Config("no spatial adjacency or centroid source is available".into())
    })?;
    let weights = load_weights(&source, &ids, cfg.spatial.knn)?;
    let seed = derive_seed(cfg.seed, "spatial");
    let result = moran_permutation_test(&medians, &weights, cfg.spatial.n_perm, seed)?;
    let edges = weights.matrix().iter().filter(|&&w| w > 0.0).count();
    let dir = stage_dir(cfg, SPATIAL);
    fresh_dir(&dir)?;
    let summary = format!(
        "spatial: Moran's I = {:.4}, p = {:.4} ({} permutations) -> {}",
        result.statistic,
        result.p_value,
        result.n_perm,
        dir.display()
    );
    write_json(
        &dir.join(MORAN_FILE),
        &MoranRecord {
            result,
            weights: source.name().into(),
            knn: matches!(source, WeightSource::Centroids(_)).then_some(cfg.spatial.knn),
            edges,
        },
    )?;
    if let Some(cov) = &cfg.spatial.covariates {
        write_json(&dir.join(KS_FILE), &ks_records(cov, &ids, &clusters)?)?;
    }
    Ok(summary)
}

pub fn read_preprocess_record(cfg: &RunConfig) -> Result<PreprocessRecord, CliError> {
    let path = stage_dir(cfg, PREPROCESS).join(PROVENANCE_FILE);
    require(PREPROCESS, &path)?;
    Ok(read_json(&path)?)
}
