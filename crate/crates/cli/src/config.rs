use std::path::{Path, PathBuf};

use manifold_id::pipeline::{parse_date, NaiveDate, PreprocessOptions, StageSelection};
use manifold_id::posterior::DEFAULT_CREDIBLE_LEVEL;
use manifold_id::spatial::{DEFAULT_KNN, DEFAULT_N_PERM};
use manifold_id::synthkit::ManifoldSpec;
use manifold_id::HidalgoConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariableSource {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    pub variables: Vec<VariableSource>,
    #[serde(default)]
    pub metadata: Option<PathBuf>,
    /// Inclusive `YYYY-MM-DD` bounds of the analysis window.
    #[serde(default)]
    pub start: Option<String>,
    #[serde(default)]
    pub end: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub specs: Vec<ManifoldSpec>,
    #[serde(default)]
    pub separation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PosteriorOptions {
    pub ci_level: f64,
}

impl Default for PosteriorOptions {
    fn default() -> Self {
        Self {
            ci_level: DEFAULT_CREDIBLE_LEVEL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpatialOptions {
    /// CSV with `from,to` edges between observation ids.
    pub adjacency: Option<PathBuf>,
    /// CSV with `id,lat,lon`; used for k-NN weights when no adjacency is given.
    pub centroids: Option<PathBuf>,
    pub knn: usize,
    pub n_perm: usize,
    /// CSV with `id,<covariate>,...` compared between the two largest clusters.
    pub covariates: Option<PathBuf>,
}

impl Default for SpatialOptions {
    fn default() -> Self {
        Self {
            adjacency: None,
            centroids: None,
            knn: DEFAULT_KNN,
            n_perm: DEFAULT_N_PERM,
            covariates: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub inputs: Option<InputConfig>,
    pub synth: Option<SynthConfig>,
    pub preprocess: PreprocessOptions,
    pub hidalgo: HidalgoConfig,
    pub posterior: PosteriorOptions,
    pub spatial: SpatialOptions,
    pub out: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            inputs: None,
            synth: None,
            preprocess: PreprocessOptions::default(),
            hidalgo: HidalgoConfig::default(),
            posterior: PosteriorOptions::default(),
            spatial: SpatialOptions::default(),
            out: PathBuf::from("out"),
            seed: 1,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub stage: Option<StageSelection>,
    pub nsim: Option<usize>,
    pub burnin: Option<usize>,
    pub components: Option<usize>,
    pub alpha: Option<f64>,
    pub zeta: Option<f64>,
    pub q: Option<usize>,
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(inputs) = &mut cfg.inputs {
            for v in &mut inputs.variables {
                rebase(base, &mut v.path);
            }
            if let Some(m) = &mut inputs.metadata {
                rebase(base, m);
            }
        }
        for p in [
            &mut cfg.spatial.adjacency,
            &mut cfg.spatial.centroids,
            &mut cfg.spatial.covariates,
        ]
        .into_iter()
        .flatten()
        {
            rebase(base, p);
        }
        rebase(base, &mut cfg.out);
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = &o.out {
            self.out = p.clone();
        }
        if let Some(s) = o.stage {
            self.preprocess.stage = s;
        }
        let h = &mut self.hidalgo;
        h.nsim = o.nsim.unwrap_or(h.nsim);
        h.burnin = o.burnin.unwrap_or(h.burnin);
        h.components = o.components.unwrap_or(h.components);
        h.alpha = o.alpha.unwrap_or(h.alpha);
        h.zeta = o.zeta.unwrap_or(h.zeta);
        h.q = o.q.unwrap_or(h.q);
    }

    /// Checks parameters and that every referenced file exists.
    pub fn validate(&self) -> Result<(), CliError> {
        self.hidalgo
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        let lvl = self.posterior.ci_level;
        if !(lvl > 0.0 && lvl < 1.0) {
            return Err(CliError::Config(format!(
                "posterior.ci_level {lvl} must lie in (0, 1)"
            )));
        }
        if self.spatial.n_perm == 0 {
            return Err(CliError::Config("spatial.n_perm must be at least 1".into()));
        }
        if self.spatial.knn == 0 {
            return Err(CliError::Config("spatial.knn must be at least 1".into()));
        }
        let t = self.preprocess.missing_threshold;
        if !(0.0..=1.0).contains(&t) {
            return Err(CliError::Config(format!(
                "preprocess.missing_threshold {t} must lie in [0, 1]"
            )));
        }
        if let StageSelection::Stage(s) = self.preprocess.stage {
            if !(1..=4).contains(&s) {
                return Err(CliError::Config(format!(
                    "stage {s} must be 1-4 or \"full\""
                )));
            }
        }
        let mut files: Vec<&PathBuf> = Vec::new();
        if let Some(inputs) = &self.inputs {
            if inputs.variables.is_empty() {
                return Err(CliError::Config("inputs.variables is empty".into()));
            }
            files.extend(inputs.variables.iter().map(|v| &v.path));
            files.extend(inputs.metadata.iter());
            for d in [&inputs.start, &inputs.end].into_iter().flatten() {
                if parse_date(d).is_none() {
                    return Err(CliError::Config(format!("bad date {d:?}")));
                }
            }
            if inputs.start.is_some() != inputs.end.is_some() {
                return Err(CliError::Config(
                    "give both inputs.start and inputs.end or neither".into(),
                ));
            }
        }
        files.extend(
            [
                &self.spatial.adjacency,
                &self.spatial.centroids,
                &self.spatial.covariates,
            ]
            .into_iter()
            .flatten(),
        );
        for f in files {
            if !f.is_file() {
                return Err(CliError::Config(format!("{} does not exist", f.display())));
            }
        }
        Ok(())
    }

    pub fn date_range(&self) -> Option<(NaiveDate, NaiveDate)> {
        let inputs = self.inputs.as_ref()?;
        Some((
            parse_date(inputs.start.as_ref()?)?,
            parse_date(inputs.end.as_ref()?)?,
        ))
    }
}
