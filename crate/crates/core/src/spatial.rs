//! Moran's I with permutation inference, k-NN centroid weights, and the
//! two-sample Kolmogorov-Smirnov test.

use std::collections::HashMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

pub const DEFAULT_N_PERM: usize = 999;
pub const DEFAULT_KNN: usize = 5;
pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpatialError {
    #[error("all values are equal; Moran's I is undefined")]
    ZeroVariance,
    #[error("{values} values for {weights} weight rows")]
    DimensionMismatch { values: usize, weights: usize },
    #[error("value {index} is not finite")]
    NonFinite { index: usize },
    #[error("observation {0} has no neighbours")]
    IsolatedObservation(String),
    #[error("unknown observation id {0:?} in adjacency")]
    UnknownId(String),
    #[error("weight matrix must be square, non-negative, with a zero diagonal")]
    InvalidWeights,
    #[error("k = {k} needs 1 <= k < n = {n}")]
    InvalidK { k: usize, n: usize },
    #[error("at least one permutation is required")]
    NoPermutations,
    #[error("empty sample")]
    EmptySample,
}

/// Non-negative weights with a zero diagonal and no empty rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialWeights {
    w: Array2<f64>,
    w_sum: f64,
    ids: Vec<String>,
    edges: Vec<(usize, usize, f64)>,
}

impl SpatialWeights {
    pub fn new(w: Array2<f64>, ids: Vec<String>) -> Result<Self, SpatialError> {
        let n = w.nrows();
        if w.ncols() != n || ids.len() != n {
            return Err(SpatialError::InvalidWeights);
        }
        let mut edges = Vec::new();
        for i in 0..n {
            if w[[i, i]] != 0.0 {
                return Err(SpatialError::InvalidWeights);
            }
            let mut any = false;
            for j in 0..n {
                let v = w[[i, j]];
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(SpatialError::InvalidWeights);
                }
                if v > 0.0 {
                    edges.push((i, j, v));
                    any = true;
                }
            }
            if !any {
                return Err(SpatialError::IsolatedObservation(ids[i].clone()));
            }
        }
        let w_sum = edges.iter().map(|e| e.2).sum();
        Ok(Self {
            w,
            w_sum,
            ids,
            edges,
        })
    }

    /// Binary weights from directed `(from, to)` id pairs. Self-loops are
    /// ignored and repeated edges count once.
    pub fn from_edges<S: AsRef<str>>(
        ids: &[String],
        edges: &[(S, S)],
    ) -> Result<Self, SpatialError> {
        let index: HashMap<&str, usize> = ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let lookup = |s: &str| {
            index
                .get(s)
                .copied()
                .ok_or_else(|| SpatialError::UnknownId(s.to_string()))
        };
        let n = ids.len();
        let mut w = Array2::zeros((n, n));
        for (a, b) in edges {
            let (i, j) = (lookup(a.as_ref())?, lookup(b.as_ref())?);
            if i != j {
                w[[i, j]] = 1.0;
            }
        }
        Self::new(w, ids.to_vec())
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.w
    }

    pub fn w_sum(&self) -> f64 {
        self.w_sum
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoranResult {
    #[serde(rename = "I")]
    pub statistic: f64,
    pub p_value: f64,
    pub n_perm: usize,
    pub seed: u64,
}

fn centred(values: &[f64], weights: &SpatialWeights) -> Result<Vec<f64>, SpatialError> {
    if values.len() != weights.len() {
        return Err(SpatialError::DimensionMismatch {
            values: values.len(),
            weights: weights.len(),
        });
    }
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(SpatialError::NonFinite { index });
    }
    let first = values[0];
    if values.iter().all(|&v| v == first) {
        return Err(SpatialError::ZeroVariance);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok(values.iter().map(|v| v - mean).collect())
}

fn moran_centred(z: &[f64], weights: &SpatialWeights, denom: f64) -> f64 {
    let num: f64 = weights.edges.iter().map(|&(i, j, w)| w * z[i] * z[j]).sum();
    z.len() as f64 / weights.w_sum * num / denom
}

/// `I = (N / W) sum_ij w_ij (x_i - m)(x_j - m) / sum_i (x_i - m)^2`.
pub fn morans_i(values: &[f64], weights: &SpatialWeights) -> Result<f64, SpatialError> {
    let z = centred(values, weights)?;
    let denom: f64 = z.iter().map(|v| v * v).sum();
    Ok(moran_centred(&z, weights, denom))
}

/// One-sided test for positive autocorrelation. Permutation `p` shuffles the
/// values with its own stream of `seed`, so results do not depend on threading.
pub fn moran_permutation_test(
    values: &[f64],
    weights: &SpatialWeights,
    n_perm: usize,
    seed: u64,
) -> Result<MoranResult, SpatialError> {
    if n_perm == 0 {
        return Err(SpatialError::NoPermutations);
    }
    let z = centred(values, weights)?;
    let denom: f64 = z.iter().map(|v| v * v).sum();
    let observed = moran_centred(&z, weights, denom);
    let exceed = (0..n_perm)
        .into_par_iter()
        .filter(|&p| {
            let mut r = rng::stream(seed, p as u64);
            let mut shuffled = z.clone();
            shuffled.shuffle(&mut r);
            moran_centred(&shuffled, weights, denom) >= observed
        })
        .count();
    Ok(MoranResult {
        statistic: observed,
        p_value: (1 + exceed) as f64 / (1 + n_perm) as f64,
        n_perm,
        seed,
    })
}

/// Great-circle distance in km between `(lat, lon)` points given in degrees.
pub fn haversine_km(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (la1, lo1) = (a.0.to_radians(), a.1.to_radians());
    let (la2, lo2) = (b.0.to_radians(), b.1.to_radians());
    let h = ((la2 - la1) / 2.0).sin().powi(2)
        + la1.cos() * la2.cos() * ((lo2 - lo1) / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Directed binary k-NN weights; distance ties go to the lower index.
pub fn build_knn_weights(
    centroids: &[(f64, f64)],
    ids: Vec<String>,
    k: usize,
) -> Result<SpatialWeights, SpatialError> {
    let n = centroids.len();
    if k == 0 || k >= n {
        return Err(SpatialError::InvalidK { k, n });
    }
    if ids.len() != n {
        return Err(SpatialError::DimensionMismatch {
            values: ids.len(),
            weights: n,
        });
    }
    let mut w = Array2::zeros((n, n));
    for i in 0..n {
        let mut others: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (haversine_km(centroids[i], centroids[j]), j))
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in &others[..k] {
            w[[i, j]] = 1.0;
        }
    }
    SpatialWeights::new(w, ids)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Survival function of the Kolmogorov distribution, `P(K > lambda)`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        // Jacobi theta form of the CDF converges fast for small lambda.
        let c = -std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda);
        let s: f64 = (0..6)
            .map(|j| {
                let m = (2 * j + 1) as f64;
                (c * m * m).exp()
            })
            .sum();
        let cdf = (2.0 * std::f64::consts::PI).sqrt() / lambda * s;
        return (1.0 - cdf).clamp(0.0, 1.0);
    }
    let a = -2.0 * lambda * lambda;
    let s: f64 = (1..=100)
        .map(|j| {
            let sign = if j % 2 == 1 { 2.0 } else { -2.0 };
            sign * (a * (j * j) as f64).exp()
        })
        .sum();
    s.clamp(0.0, 1.0)
}

/// `D = sup |F_a - F_b|` by a merged sweep; all tied values step together.
/// The p-value uses the asymptotic distribution at the effective size
/// `sqrt(nm / (n + m))` with the usual small-sample correction.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult, SpatialError> {
    if a.is_empty() || b.is_empty() {
        return Err(SpatialError::EmptySample);
    }
    if let Some(index) = a.iter().chain(b).position(|v| !v.is_finite()) {
        return Err(SpatialError::NonFinite { index });
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] == x {
            i += 1;
        }
        while j < b.len() && b[j] == x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let en = (n * m / (n + m)).sqrt();
    Ok(KsResult {
        statistic: d,
        p_value: kolmogorov_sf((en + 0.12 + 0.11 / en) * d),
    })
}
