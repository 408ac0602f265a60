//! Heterogeneous intrinsic-dimension estimation for high-dimensional panels.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: exact Euclidean k-NN, second-to-first neighbour ratios and
//!   the directed q-NN graph.
//! - [`twonn`]: single-manifold TWO-NN estimate (Pareto shape MLE with an exact
//!   Gamma confidence interval).
//! - [`hidalgo`]: the Hidalgo mixture of Pareto ratio likelihoods with a
//!   local-homogeneity term, fitted by a seeded Gibbs sampler.
//! - [`posterior`]: co-clustering matrix, VI point partition, observation-specific
//!   ID chains and cluster summaries.
//! - [`spatial`]: Moran's I with permutation inference, k-NN great-circle
//!   weights and the two-sample Kolmogorov-Smirnov test.
//! - [`pipeline`]: country x date panel ingestion and preprocessing.
//! - [`synthkit`]: seeded flat manifolds with known intrinsic dimension.
//! - [`io`]: CSV/JSON serialisation of matrices and traces.

pub mod geometry;
pub mod hidalgo;
pub mod io;
pub mod pipeline;
pub mod posterior;
pub mod rng;
pub mod spatial;
pub mod synthkit;
pub mod twonn;

pub use geometry::{
    mu_ratios, nearest_neighbors, neighbor_graph, DataMatrix, GeometryError, NeighborGraph,
    NeighborTable, RatioVector,
};
pub use hidalgo::{
    hidalgo_fit, ChainState, HidalgoConfig, HidalgoError, HomogeneityNorm, McmcTraces,
};
pub use posterior::{
    cluster_id_summary, co_clustering, remap_observation_chains, vi_partition, CoClusteringMatrix,
    ObservationIdChains, Partition, PosteriorError,
};
pub use twonn::{twonn_discard_fraction, twonn_mle, IdEstimate, TwoNnError};
