//! Post-processing of Hidalgo traces.
//!
//! Everything here is built from label *equality* within an iteration or from
//! the component a given observation sits in, so none of it depends on how the
//! sampler happened to number its components.

use std::collections::HashMap;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hidalgo::McmcTraces;

pub const DEFAULT_CREDIBLE_LEVEL: f64 = 0.90;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PosteriorError {
    #[error("no candidate partitions")]
    EmptyCandidates,
    #[error("candidate {index} has {got} labels, expected {expected}")]
    LengthMismatch {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error(
        "label {label} at iteration {iteration}, observation {obs} is outside 1..={components}"
    )]
    LabelOutOfRange {
        iteration: usize,
        obs: usize,
        label: u32,
        components: usize,
    },
    #[error("credible level {0} must lie in (0, 1)")]
    InvalidLevel(f64),
}

/// `p_ij`: fraction of iterations in which `i` and `j` share a component.
#[derive(Debug, Clone, PartialEq)]
pub struct CoClusteringMatrix {
    p: Array2<f64>,
}

impl CoClusteringMatrix {
    pub fn matrix(&self) -> &Array2<f64> {
        &self.p
    }

    pub fn n(&self) -> usize {
        self.p.nrows()
    }
}

pub fn co_clustering(traces: &McmcTraces) -> CoClusteringMatrix {
    let (nsim, n) = traces.labels().dim();
    let labels = traces.labels().as_standard_layout();
    let counts: Vec<Vec<u32>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut row = vec![0u32; n - i - 1];
            for t in 0..nsim {
                let lab = labels.row(t);
                let lab = lab.as_slice().expect("standard layout");
                let li = lab[i];
                for (c, &lj) in row.iter_mut().zip(&lab[i + 1..]) {
                    *c += u32::from(lj == li);
                }
            }
            row
        })
        .collect();
    let mut p = Array2::eye(n);
    let denom = nsim as f64;
    for (i, row) in counts.iter().enumerate() {
        for (off, &c) in row.iter().enumerate() {
            let j = i + 1 + off;
            let v = f64::from(c) / denom;
            p[[i, j]] = v;
            p[[j, i]] = v;
        }
    }
    CoClusteringMatrix { p }
}

/// A hard clustering with labels `1..=k`, numbered by decreasing cluster size
/// (ties: smallest member index first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub labels: Vec<usize>,
    pub k: usize,
    pub vi_score: f64,
}

impl Partition {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &c)| (c == cluster).then_some(i))
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &c in &self.labels {
            s[c - 1] += 1;
        }
        s
    }
}

/// Relabels any label vector to the canonical `1..=k` numbering.
pub fn canonical_labels<T: Copy + Eq + std::hash::Hash>(labels: &[T]) -> Vec<usize> {
    let mut first: HashMap<T, (usize, usize)> = HashMap::new();
    for (i, &l) in labels.iter().enumerate() {
        first.entry(l).or_insert((i, 0)).1 += 1;
    }
    let mut groups: Vec<(T, usize, usize)> =
        first.into_iter().map(|(l, (i, s))| (l, i, s)).collect();
    groups.sort_by(|a, b| b.2.cmp(&a.2).then(a.1.cmp(&b.1)));
    let rank: HashMap<T, usize> = groups
        .iter()
        .enumerate()
        .map(|(r, g)| (g.0, r + 1))
        .collect();
    labels.iter().map(|l| rank[l]).collect()
}

fn cluster_members(labels: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut m = vec![Vec::new(); k];
    for (i, &c) in labels.iter().enumerate() {
        m[c - 1].push(i);
    }
    m
}

/// PCM lower bound of the posterior expected variation of information,
/// `sum_i [log2 |C(i)| + log2 sum_j p_ij - 2 log2 sum_{j in C(i)} p_ij]`.
///
/// `labels` must be canonical (see [`canonical_labels`]).
pub fn expected_vi_bound(pcm: &CoClusteringMatrix, labels: &[usize], row_sums: &[f64]) -> f64 {
    let k = labels.iter().copied().max().unwrap_or(0);
    let p = pcm.matrix();
    let mut total = 0.0;
    for members in cluster_members(labels, k) {
        let size = (members.len() as f64).log2();
        for &i in &members {
            let within: f64 = members.iter().map(|&j| p[[i, j]]).sum();
            total += size + row_sums[i].log2() - 2.0 * within.log2();
        }
    }
    total
}

/// Picks the candidate minimising [`expected_vi_bound`].
///
/// Candidates are canonicalised and deduplicated first. Ties go to fewer
/// clusters, then to the earliest candidate.
pub fn vi_partition<T: Copy + Eq + std::hash::Hash + Sync>(
    pcm: &CoClusteringMatrix,
    candidates: &[Vec<T>],
) -> Result<Partition, PosteriorError> {
    if candidates.is_empty() {
        return Err(PosteriorError::EmptyCandidates);
    }
    let n = pcm.n();
    for (index, c) in candidates.iter().enumerate() {
        if c.len() != n {
            return Err(PosteriorError::LengthMismatch {
                index,
                got: c.len(),
                expected: n,
            });
        }
    }
    let canon = dedup_canonical(candidates.iter().map(|c| c.as_slice()));
    Ok(best_candidate(pcm, canon))
}

/// [`vi_partition`] over the sampled label vectors of `traces`.
pub fn vi_partition_from_traces(
    pcm: &CoClusteringMatrix,
    traces: &McmcTraces,
) -> Result<Partition, PosteriorError> {
    let labels = traces.labels().as_standard_layout();
    let rows = labels
        .rows()
        .into_iter()
        .map(|r| r.to_slice().expect("standard layout"));
    let canon = dedup_canonical(rows);
    if canon.is_empty() {
        return Err(PosteriorError::EmptyCandidates);
    }
    Ok(best_candidate(pcm, canon))
}

fn dedup_canonical<'a, T, I>(rows: I) -> Vec<Vec<usize>>
where
    T: Copy + Eq + std::hash::Hash + 'a,
    I: Iterator<Item = &'a [T]>,
{
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for r in rows {
        let c = canonical_labels(r);
        if seen.insert(c.clone()) {
            out.push(c);
        }
    }
    out
}

fn best_candidate(pcm: &CoClusteringMatrix, canon: Vec<Vec<usize>>) -> Partition {
    let row_sums: Vec<f64> = pcm.matrix().rows().into_iter().map(|r| r.sum()).collect();
    let scores: Vec<f64> = canon
        .par_iter()
        .map(|c| expected_vi_bound(pcm, c, &row_sums))
        .collect();
    let k_of = |c: &[usize]| c.iter().copied().max().unwrap_or(0);
    let mut best = 0;
    for idx in 1..canon.len() {
        let better = scores[idx] < scores[best]
            || (scores[idx] == scores[best] && k_of(&canon[idx]) < k_of(&canon[best]));
        if better {
            best = idx;
        }
    }
    let labels = canon.into_iter().nth(best).expect("non-empty");
    Partition {
        k: k_of(&labels),
        labels,
        vi_score: scores[best],
    }
}

/// Variation of information between two label vectors, in bits.
pub fn variation_of_information<A, B>(a: &[A], b: &[B]) -> f64
where
    A: Copy + Eq + std::hash::Hash,
    B: Copy + Eq + std::hash::Hash,
{
    let n = a.len() as f64;
    let mut joint: HashMap<(A, B), f64> = HashMap::new();
    let mut pa: HashMap<A, f64> = HashMap::new();
    let mut pb: HashMap<B, f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1.0;
        *pa.entry(x).or_default() += 1.0;
        *pb.entry(y).or_default() += 1.0;
    }
    let mut vi = 0.0;
    for (&(x, y), &nxy) in &joint {
        let pxy = nxy / n;
        vi -= pxy * ((nxy / pa[&x]).log2() + (nxy / pb[&y]).log2());
    }
    vi.max(0.0)
}

/// Per-observation ID chains `d_{c_i(t)}(t)` and their medians.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationIdChains {
    pub chains: Array2<f64>,
    pub medians: Vec<f64>,
}

fn median_of_sorted(v: &[f64]) -> f64 {
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

pub fn remap_observation_chains(
    traces: &McmcTraces,
) -> Result<ObservationIdChains, PosteriorError> {
    let (nsim, n) = traces.labels().dim();
    let l = traces.components();
    let mut chains = Array2::zeros((nsim, n));
    for t in 0..nsim {
        for i in 0..n {
            let label = traces.labels()[[t, i]];
            if label == 0 || label as usize > l {
                return Err(PosteriorError::LabelOutOfRange {
                    iteration: t,
                    obs: i,
                    label,
                    components: l,
                });
            }
            chains[[t, i]] = traces.ids()[[t, label as usize - 1]];
        }
    }
    let medians = chains
        .columns()
        .into_iter()
        .map(|c| {
            let mut v = c.to_vec();
            v.sort_by(f64::total_cmp);
            median_of_sorted(&v)
        })
        .collect();
    Ok(ObservationIdChains { chains, medians })
}

/// Location and spread of a set of posterior ID samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdSummary {
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub ci_level: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster: usize,
    pub size: usize,
    /// Pooled observation chains of the cluster's members.
    pub pooled: IdSummary,
    /// Chain of the component holding most of the cluster at each iteration.
    pub component: Option<IdSummary>,
}

/// Type-7 (linear interpolation) quantile of sorted data.
fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Summary statistics of a sample in its given order.
pub fn summarize(samples: &[f64], ci_level: f64) -> Result<IdSummary, PosteriorError> {
    if !(ci_level > 0.0 && ci_level < 1.0) {
        return Err(PosteriorError::InvalidLevel(ci_level));
    }
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let tail = (1.0 - ci_level) / 2.0;
    Ok(IdSummary {
        mean,
        sd: var.sqrt(),
        median: median_of_sorted(&sorted),
        ci_low: quantile_sorted(&sorted, tail),
        ci_high: quantile_sorted(&sorted, 1.0 - tail),
        ci_level,
        samples: n,
    })
}

/// Pools the observation chains of every cluster's members (member order,
/// then iteration order) and summarises them.
pub fn cluster_id_summary(
    partition: &Partition,
    obs_chains: &ObservationIdChains,
    ci_level: f64,
) -> Result<Vec<ClusterSummary>, PosteriorError> {
    let nsim = obs_chains.chains.nrows();
    (1..=partition.k)
        .map(|cluster| {
            let members = partition.members(cluster);
            let mut pooled = Vec::with_capacity(members.len() * nsim);
            for &i in &members {
                pooled.extend(obs_chains.chains.column(i).iter().copied());
            }
            Ok(ClusterSummary {
                cluster,
                size: members.len(),
                pooled: summarize(&pooled, ci_level)?,
                component: None,
            })
        })
        .collect()
}

/// For each cluster, the per-iteration ID of the component that holds most of
/// its members; a tie goes to the component of the earliest such member.
pub fn component_id_chains(
    partition: &Partition,
    traces: &McmcTraces,
) -> Result<Vec<Vec<f64>>, PosteriorError> {
    let l = traces.components();
    let mut out = Vec::with_capacity(partition.k);
    for cluster in 1..=partition.k {
        let members = partition.members(cluster);
        let mut chain = Vec::with_capacity(traces.nsim());
        for t in 0..traces.nsim() {
            let mut count = vec![0usize; l + 1];
            let mut best: Option<u32> = None;
            for &i in &members {
                let label = traces.labels()[[t, i]];
                if label == 0 || label as usize > l {
                    return Err(PosteriorError::LabelOutOfRange {
                        iteration: t,
                        obs: i,
                        label,
                        components: l,
                    });
                }
                count[label as usize] += 1;
            }
            for &i in &members {
                let label = traces.labels()[[t, i]];
                if best.is_none_or(|b| count[label as usize] > count[b as usize]) {
                    best = Some(label);
                }
            }
            let label = best.expect("clusters are non-empty");
            chain.push(traces.ids()[[t, label as usize - 1]]);
        }
        out.push(chain);
    }
    Ok(out)
}

/// [`cluster_id_summary`] with the component-conditional summaries filled in.
pub fn cluster_id_summary_with_components(
    partition: &Partition,
    obs_chains: &ObservationIdChains,
    traces: &McmcTraces,
    ci_level: f64,
) -> Result<Vec<ClusterSummary>, PosteriorError> {
    let mut summaries = cluster_id_summary(partition, obs_chains, ci_level)?;
    for (s, chain) in summaries
        .iter_mut()
        .zip(component_id_chains(partition, traces)?)
    {
        s.component = Some(summarize(&chain, ci_level)?);
    }
    Ok(summaries)
}
