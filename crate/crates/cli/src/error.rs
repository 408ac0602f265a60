use manifold_id::io::IoError;
use manifold_id::pipeline::PipelineError;
use manifold_id::spatial::SpatialError;
use manifold_id::synthkit::SynthError;
use manifold_id::{GeometryError, HidalgoError, PosteriorError, TwoNnError};
use serde_json::json;
use thiserror::Error;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DOMAIN: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("missing {stage} artifact {path}; run `{stage}` first")]
    MissingArtifact { stage: String, path: String },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Hidalgo(#[from] HidalgoError),
    #[error(transparent)]
    Posterior(#[from] PosteriorError),
    #[error(transparent)]
    Spatial(#[from] SpatialError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    TwoNn(#[from] TwoNnError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{0}")]
    Data(String),
}

/// The variant name from a `Debug` rendering, e.g. `ZeroVariance` or `DateGap`.
fn variant(debug: String) -> String {
    debug
        .split(|c: char| !c.is_alphanumeric() && c != '_')
        .next()
        .unwrap_or_default()
        .to_string()
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Hidalgo(HidalgoError::ConfigInvalid(_)) => EXIT_USAGE,
            _ => EXIT_DOMAIN,
        }
    }

    pub fn kind(&self) -> String {
        match self {
            Self::Config(_) => "Config".into(),
            Self::MissingArtifact { .. } => "MissingArtifact".into(),
            Self::Data(_) => "Data".into(),
            Self::Pipeline(e) => variant(format!("{e:?}")),
            Self::Hidalgo(e) => variant(format!("{e:?}")),
            Self::Posterior(e) => variant(format!("{e:?}")),
            Self::Spatial(e) => variant(format!("{e:?}")),
            Self::Synth(e) => variant(format!("{e:?}")),
            Self::Geometry(e) => variant(format!("{e:?}")),
            Self::TwoNn(e) => variant(format!("{e:?}")),
            Self::Io(e) => variant(format!("{e:?}")),
        }
    }

    /// One-line JSON for stderr.
    pub fn to_json(&self, command: &str) -> String {
        json!({
            "error": self.kind(),
            "command": command,
            "message": self.to_string(),
            "exit_code": self.exit_code(),
        })
        .to_string()
    }
}
