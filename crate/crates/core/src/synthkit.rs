//! Seeded flat manifolds with a known intrinsic dimension.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{DataMatrix, GeometryError};
use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("intrinsic dimension {d_true} must be in 1..={embed_dim}")]
    BadDimension { d_true: usize, embed_dim: usize },
    #[error("need at least 3 samples, got {0}")]
    TooFewSamples(usize),
    #[error("offset has {got} entries, expected {expected}")]
    OffsetLength { got: usize, expected: usize },
    #[error("manifolds live in different ambient dimensions ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("no manifold specs given")]
    Empty,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifoldKind {
    /// Unit interval in each intrinsic coordinate.
    UniformHypercube,
    /// Unit-variance normal in each intrinsic coordinate.
    IsotropicGaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldSpec {
    pub kind: ManifoldKind,
    pub d_true: usize,
    pub n: usize,
    pub embed_dim: usize,
    /// Translation of every point; empty means the origin.
    #[serde(default)]
    pub offset: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl ManifoldSpec {
    fn validate(&self) -> Result<(), SynthError> {
        if self.d_true == 0 || self.d_true > self.embed_dim {
            return Err(SynthError::BadDimension {
                d_true: self.d_true,
                embed_dim: self.embed_dim,
            });
        }
        if self.n < 3 {
            return Err(SynthError::TooFewSamples(self.n));
        }
        if !self.offset.is_empty() && self.offset.len() != self.embed_dim {
            return Err(SynthError::OffsetLength {
                got: self.offset.len(),
                expected: self.embed_dim,
            });
        }
        Ok(())
    }

    fn values(&self) -> Array2<f64> {
        let mut r = rng::seeded(self.seed);
        let offset = |c: usize| self.offset.get(c).copied().unwrap_or(0.0);
        let mut x = Array2::zeros((self.n, self.embed_dim));
        for i in 0..self.n {
            for c in 0..self.embed_dim {
                let v = if c < self.d_true {
                    match self.kind {
                        ManifoldKind::UniformHypercube => r.random::<f64>(),
                        ManifoldKind::IsotropicGaussian => r.sample::<f64, _>(StandardNormal),
                    }
                } else {
                    0.0
                };
                x[[i, c]] = v + offset(c);
            }
        }
        x
    }
}

/// `n` points whose first `d_true` coordinates are random and the rest fixed.
pub fn sample_manifold(spec: &ManifoldSpec) -> Result<DataMatrix, SynthError> {
    spec.validate()?;
    Ok(DataMatrix::from_array(spec.values())?)
}

/// Concatenates several manifolds, shifting the `g`-th by `g * separation`
/// along the first axis. Labels are one-based group numbers.
pub fn mix_manifolds(
    specs: &[ManifoldSpec],
    separation: f64,
) -> Result<(DataMatrix, Vec<usize>), SynthError> {
    let first = specs.first().ok_or(SynthError::Empty)?;
    let dim = first.embed_dim;
    let mut blocks = Vec::with_capacity(specs.len());
    let mut labels = Vec::new();
    for (g, spec) in specs.iter().enumerate() {
        if spec.embed_dim != dim {
            return Err(SynthError::DimensionMismatch(dim, spec.embed_dim));
        }
        spec.validate()?;
        let mut block = spec.values();
        block
            .column_mut(0)
            .mapv_inplace(|v| v + g as f64 * separation);
        blocks.push(block);
        labels.extend(std::iter::repeat_n(g + 1, spec.n));
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    let values = ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths");
    Ok((DataMatrix::from_array(values)?, labels))
}
