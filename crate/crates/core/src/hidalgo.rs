//! Hidalgo: a mixture of Pareto ratio likelihoods with local homogeneity.
//!
//! Each observation carries a latent label `c_i` in `1..=L`. Given the labels,
//! the ratio `mu_i` is `Pareto(1, d_{c_i})`; the labels carry a categorical
//! prior with weights `pi ~ Dirichlet(alpha, ..., alpha)` and each `d_l` a
//! `Gamma(a_d, b_d)` prior. The homogeneity term scores every directed edge of
//! the q-NN graph touching `i` as an independent Bernoulli: probability `zeta`
//! when both ends share a label and `1 - zeta` otherwise. With that
//! normalisation the full conditional of `c_i` is
//!
//! ```text
//! P(c_i = l | ...) ∝ pi_l d_l mu_i^-(d_l + 1) zeta^m (1 - zeta)^(q + r_i - m)
//! ```
//!
//! where `m` counts neighbours (out-going and in-coming edges) labelled `l`
//! and `r_i` is the in-degree of `i`.
//!
//! `normalisation = "component_size"` instead divides each point's neighbour
//! term by its expectation over uniformly drawn neighbour sets, which depends
//! on the size of the point's component. That variant rewards splitting even
//! homogeneous data into spatially coherent pieces.
//!
//! A sweep updates `c` (row order), then `d`, then `pi`. Inside each step the
//! components are visited in increasing order of their current `d` (ties by
//! index), so relabelling the components of a state relabels the whole chain
//! without changing a single draw.
//!
//! Random stream (stream 0 of the seed): `n` initial labels, then `L` draws of
//! `d` and `L` of `pi` in component order, then per sweep one uniform per
//! observation followed by the `d` and `pi` draws.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    mu_ratios, nearest_neighbors, neighbor_graph, DataMatrix, GeometryError, NeighborGraph,
    RatioVector,
};
use crate::rng::{self, SeededRng};

/// Maximum rejection attempts for a truncated Gamma draw before clamping.
const TRUNCATION_RETRIES: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HidalgoError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("need more observations ({n}) than mixture components ({l})")]
    TooFewObservations { n: usize, l: usize },
    #[error("inconsistent traces: {0}")]
    TraceShape(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HidalgoConfig {
    /// Upper bound on populated components.
    #[serde(rename = "L")]
    pub components: usize,
    /// Dirichlet concentration of every component.
    pub alpha: f64,
    pub a_d: f64,
    pub b_d: f64,
    /// Probability that a neighbour shares the point's label.
    pub zeta: f64,
    pub q: usize,
    pub nsim: usize,
    pub burnin: usize,
    pub seed: u64,
    /// Upper truncation of sampled IDs; `None` means the nominal dimension.
    pub d_max: Option<f64>,
    pub normalisation: HomogeneityNorm,
}

impl Default for HidalgoConfig {
    fn default() -> Self {
        Self {
            components: 6,
            alpha: 0.05,
            a_d: 1.0,
            b_d: 1.0,
            zeta: 0.75,
            q: 3,
            nsim: 25_000,
            burnin: 1_000,
            seed: 1,
            d_max: None,
            normalisation: HomogeneityNorm::Unit,
        }
    }
}

impl HidalgoConfig {
    pub fn validate(&self) -> Result<(), HidalgoError> {
        let bad = |m: &str| Err(HidalgoError::ConfigInvalid(m.to_string()));
        let positive = |x: f64| x > 0.0 && x.is_finite();
        if self.components == 0 {
            return bad("L must be at least 1");
        }
        if !positive(self.alpha) {
            return bad("alpha must be positive");
        }
        if !positive(self.a_d) || !positive(self.b_d) {
            return bad("a_d and b_d must be positive");
        }
        // 0.5 itself is admitted: it switches the homogeneity term off.
        if !(0.5..1.0).contains(&self.zeta) {
            return bad("zeta must lie in [0.5, 1)");
        }
        if self.q == 0 {
            return bad("q must be at least 1");
        }
        if self.nsim == 0 {
            return bad("nsim must be at least 1");
        }
        if let Some(d) = self.d_max {
            if !positive(d) {
                return bad("d_max must be positive");
            }
        }
        Ok(())
    }
}

/// One state of the chain. `c` holds zero-based component indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub d: Vec<f64>,
    pub pi: Vec<f64>,
    pub c: Vec<usize>,
}

impl ChainState {
    pub fn components(&self) -> usize {
        self.d.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut n = vec![0; self.d.len()];
        for &c in &self.c {
            n[c] += 1;
        }
        n
    }

    /// The same state with component `l` renamed `perm[l]`.
    pub fn relabeled(&self, perm: &[usize]) -> ChainState {
        let mut d = vec![0.0; self.d.len()];
        let mut pi = vec![0.0; self.pi.len()];
        for (l, &p) in perm.iter().enumerate() {
            d[p] = self.d[l];
            pi[p] = self.pi[l];
        }
        ChainState {
            d,
            pi,
            c: self.c.iter().map(|&c| perm[c]).collect(),
        }
    }

    /// Components ordered by increasing `d`, ties by index.
    fn visit_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.d.len()).collect();
        order.sort_by(|&a, &b| self.d[a].total_cmp(&self.d[b]).then(a.cmp(&b)));
        order
    }
}

/// The three output matrices of a fit.
///
/// `labels` are one-based (`1..=L`); row `t` of every matrix is the `t`-th
/// retained iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct McmcTraces {
    labels: Array2<u32>,
    weights: Array2<f64>,
    ids: Array2<f64>,
    config: HidalgoConfig,
}

impl McmcTraces {
    pub fn new(
        labels: Array2<u32>,
        weights: Array2<f64>,
        ids: Array2<f64>,
        config: HidalgoConfig,
    ) -> Result<Self, HidalgoError> {
        let shape = |m: String| Err(HidalgoError::TraceShape(m));
        let nsim = labels.nrows();
        let l = weights.ncols();
        if nsim == 0 {
            return shape("no iterations".into());
        }
        if weights.nrows() != nsim || ids.nrows() != nsim {
            return shape(format!(
                "row counts differ: labels {nsim}, weights {}, ids {}",
                weights.nrows(),
                ids.nrows()
            ));
        }
        if ids.ncols() != l || l == 0 {
            return shape(format!("weights have {l} columns, ids {}", ids.ncols()));
        }
        for (t, row) in weights.rows().into_iter().enumerate() {
            let s: f64 = row.sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|&w| !(w >= 0.0)) {
                return shape(format!("weights row {t} is not on the simplex"));
            }
        }
        if ids.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
            return shape("non-positive ID sample".into());
        }
        Ok(Self {
            labels,
            weights,
            ids,
            config,
        })
    }

    pub fn nsim(&self) -> usize {
        self.labels.nrows()
    }

    pub fn n(&self) -> usize {
        self.labels.ncols()
    }

    pub fn components(&self) -> usize {
        self.weights.ncols()
    }

    pub fn labels(&self) -> &Array2<u32> {
        &self.labels
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn ids(&self) -> &Array2<f64> {
        &self.ids
    }

    pub fn config(&self) -> &HidalgoConfig {
        &self.config
    }
}

/// Log-weight of the local-homogeneity term for one candidate label.
///
/// `agreements` of the `edges` directed edges touching the point would join
/// two equally labelled points.
pub trait LocalHomogeneity {
    fn log_weight(&self, agreements: usize, edges: usize) -> f64;

    /// Change in the log normalising constants when a point joins a
    /// component that already holds `others` points.
    fn log_size_weight(&self, _others: usize) -> f64 {
        0.0
    }
}

/// How the neighbour-agreement term is normalised.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HomogeneityNorm {
    /// `Z = 1`: every edge is scored on its own.
    #[default]
    Unit,
    /// `Z_i` is the agreement probability of a uniformly drawn set of `q`
    /// neighbours given the size of the point's component, so that each
    /// point's neighbour set is a proper distribution over `q`-subsets.
    ComponentSize,
}

/// Each edge is an independent `Bernoulli(zeta)` agreement event.
#[derive(Debug, Clone)]
pub struct BernoulliAgreement {
    log_agree: f64,
    log_disagree: f64,
    /// `n ln Z(n)` for component sizes `0..=N`, when size-normalised.
    size_terms: Option<Vec<f64>>,
}

fn ln_choose(n: usize, k: usize) -> f64 {
    if k > n {
        f64::NEG_INFINITY
    } else {
        statrs::function::factorial::ln_binomial(n as u64, k as u64)
    }
}

impl BernoulliAgreement {
    pub fn new(zeta: f64) -> Self {
        Self {
            log_agree: zeta.ln(),
            log_disagree: (1.0 - zeta).ln(),
            size_terms: None,
        }
    }

    /// Normalised by component size for `n` points with `q` out-neighbours each.
    pub fn size_normalised(zeta: f64, q: usize, n: usize) -> Self {
        let base = Self::new(zeta);
        let total = ln_choose(n - 1, q);
        let mut terms = vec![0.0; n + 1];
        for (size, t) in terms.iter_mut().enumerate().skip(1) {
            let z: f64 = (0..=q)
                .map(|k| {
                    let ln_p = ln_choose(size - 1, k) + ln_choose(n - size, q - k) - total;
                    (ln_p + base.log_weight(k, q)).exp()
                })
                .sum();
            *t = size as f64 * z.ln();
        }
        Self {
            size_terms: Some(terms),
            ..base
        }
    }

    pub fn from_config(config: &HidalgoConfig, n: usize) -> Self {
        match config.normalisation {
            HomogeneityNorm::Unit => Self::new(config.zeta),
            HomogeneityNorm::ComponentSize => Self::size_normalised(config.zeta, config.q, n),
        }
    }
}

impl LocalHomogeneity for BernoulliAgreement {
    fn log_weight(&self, agreements: usize, edges: usize) -> f64 {
        agreements as f64 * self.log_agree + (edges - agreements) as f64 * self.log_disagree
    }

    fn log_size_weight(&self, others: usize) -> f64 {
        match &self.size_terms {
            Some(t) => t[others] - t[others + 1],
            None => 0.0,
        }
    }
}

fn truncated_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, d_max: f64, rng: &mut R) -> f64 {
    let g = Gamma::new(shape, 1.0 / rate).expect("positive Gamma parameters");
    for _ in 0..TRUNCATION_RETRIES {
        let x = g.sample(rng);
        if x > 0.0 && x <= d_max {
            return x;
        }
    }
    d_max
}

/// `ln X` for `X ~ Gamma(shape, 1)`, stable for tiny shapes where `X` underflows.
fn log_gamma_draw<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    if shape < 1.0 {
        let g = Gamma::new(shape + 1.0, 1.0).expect("positive shape");
        let u: f64 = 1.0 - rng.random::<f64>();
        g.sample(rng).ln() + u.ln() / shape
    } else {
        Gamma::new(shape, 1.0)
            .expect("positive shape")
            .sample(rng)
            .ln()
    }
}

fn update_d<R: Rng + ?Sized>(
    state: &mut ChainState,
    log_mu: &[f64],
    config: &HidalgoConfig,
    d_max: f64,
    rng: &mut R,
) {
    let l = state.components();
    let mut n_l = vec![0usize; l];
    let mut s_l = vec![0.0f64; l];
    for (&c, &lm) in state.c.iter().zip(log_mu) {
        n_l[c] += 1;
        s_l[c] += lm;
    }
    for k in state.visit_order() {
        state.d[k] = truncated_gamma(config.a_d + n_l[k] as f64, config.b_d + s_l[k], d_max, rng);
    }
}

fn update_pi<R: Rng + ?Sized>(state: &mut ChainState, config: &HidalgoConfig, rng: &mut R) {
    let counts = state.counts();
    let order = state.visit_order();
    let mut logs = vec![0.0; counts.len()];
    for &k in &order {
        logs[k] = log_gamma_draw(config.alpha + counts[k] as f64, rng);
    }
    let top = order
        .iter()
        .map(|&k| logs[k])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for &k in &order {
        state.pi[k] = (logs[k] - top).exp();
        total += state.pi[k];
    }
    for &k in &order {
        state.pi[k] /= total;
    }
}

/// Unnormalised log-masses of `c_i = l` for every component `l`.
pub fn c_conditional_log_masses<H: LocalHomogeneity>(
    state: &ChainState,
    i: usize,
    log_mu_i: f64,
    graph: &NeighborGraph,
    homogeneity: &H,
) -> Vec<f64> {
    let mut others = state.counts();
    others[state.c[i]] -= 1;
    log_masses(state, &others, i, log_mu_i, graph, homogeneity)
}

fn log_masses<H: LocalHomogeneity>(
    state: &ChainState,
    others: &[usize],
    i: usize,
    log_mu_i: f64,
    graph: &NeighborGraph,
    homogeneity: &H,
) -> Vec<f64> {
    let l = state.components();
    let mut agree = vec![0usize; l];
    let out = graph.neighbors(i);
    let inc = graph.incoming(i);
    for &j in out.iter().chain(inc) {
        agree[state.c[j]] += 1;
    }
    let edges = out.len() + inc.len();
    (0..l)
        .map(|k| {
            state.pi[k].ln() + state.d[k].ln() - (state.d[k] + 1.0) * log_mu_i
                + homogeneity.log_weight(agree[k], edges)
                + homogeneity.log_size_weight(others[k])
        })
        .collect()
}

fn update_c<R: Rng + ?Sized, H: LocalHomogeneity>(
    state: &mut ChainState,
    log_mu: &[f64],
    graph: &NeighborGraph,
    homogeneity: &H,
    rng: &mut R,
) {
    let order = state.visit_order();
    let mut cum = vec![0.0; order.len()];
    let mut others = state.counts();
    for i in 0..state.c.len() {
        others[state.c[i]] -= 1;
        let w = log_masses(state, &others, i, log_mu[i], graph, homogeneity);
        let top = order
            .iter()
            .map(|&k| w[k])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (slot, &k) in order.iter().enumerate() {
            total += (w[k] - top).exp();
            cum[slot] = total;
        }
        let u = rng.random::<f64>() * total;
        let slot = cum.iter().position(|&c| u < c).unwrap_or(order.len() - 1);
        state.c[i] = order[slot];
        others[state.c[i]] += 1;
    }
}

fn log_ratios(ratios: &RatioVector) -> Vec<f64> {
    ratios.values().iter().map(|m| m.ln()).collect()
}

/// Draws every `d_l` from `Gamma(a_d + n_l, b_d + sum_{c_i = l} ln mu_i)`
/// truncated to `(0, d_max]`. Empty components draw from the prior.
pub fn sample_d_conditional<R: Rng + ?Sized>(
    state: &mut ChainState,
    ratios: &RatioVector,
    config: &HidalgoConfig,
    d_max: f64,
    rng: &mut R,
) {
    update_d(state, &log_ratios(ratios), config, d_max, rng);
}

/// Draws `pi ~ Dirichlet(alpha + n_1, ..., alpha + n_L)`.
pub fn sample_pi_conditional<R: Rng + ?Sized>(
    state: &mut ChainState,
    config: &HidalgoConfig,
    rng: &mut R,
) {
    update_pi(state, config, rng);
}

/// Resamples every label in row order from its full conditional.
pub fn sample_c_conditional<R: Rng + ?Sized>(
    state: &mut ChainState,
    ratios: &RatioVector,
    graph: &NeighborGraph,
    config: &HidalgoConfig,
    rng: &mut R,
) {
    let h = BernoulliAgreement::from_config(config, ratios.len());
    update_c(state, &log_ratios(ratios), graph, &h, rng);
}

/// A running Gibbs chain over `(c, d, pi)`.
pub struct GibbsSampler<'g, H = BernoulliAgreement> {
    log_mu: Vec<f64>,
    graph: &'g NeighborGraph,
    config: HidalgoConfig,
    d_max: f64,
    homogeneity: H,
    rng: SeededRng,
    state: ChainState,
}

impl<'g> GibbsSampler<'g, BernoulliAgreement> {
    /// Starts a chain with uniformly random labels, then `d | c` and `pi | c`.
    pub fn new(
        ratios: &RatioVector,
        graph: &'g NeighborGraph,
        config: &HidalgoConfig,
        d_max: f64,
    ) -> Result<Self, HidalgoError> {
        config.validate()?;
        check_inputs(ratios, graph, config)?;
        let mut rng = rng::seeded(config.seed);
        let l = config.components;
        let c = (0..ratios.len()).map(|_| rng.random_range(0..l)).collect();
        let mut state = ChainState {
            d: vec![1.0; l],
            pi: vec![1.0 / l as f64; l],
            c,
        };
        let log_mu = log_ratios(ratios);
        update_d(&mut state, &log_mu, config, d_max, &mut rng);
        update_pi(&mut state, config, &mut rng);
        Ok(Self {
            log_mu,
            graph,
            config: config.clone(),
            d_max,
            homogeneity: BernoulliAgreement::from_config(config, ratios.len()),
            rng,
            state,
        })
    }

    /// Resumes from an explicit state using stream 0 of `config.seed`.
    pub fn from_state(
        state: ChainState,
        ratios: &RatioVector,
        graph: &'g NeighborGraph,
        config: &HidalgoConfig,
        d_max: f64,
    ) -> Result<Self, HidalgoError> {
        Self::with_homogeneity(
            state,
            ratios,
            graph,
            config,
            d_max,
            BernoulliAgreement::from_config(config, ratios.len()),
        )
    }
}

impl<'g, H: LocalHomogeneity> GibbsSampler<'g, H> {
    /// Resumes from an explicit state with a custom homogeneity term.
    pub fn with_homogeneity(
        state: ChainState,
        ratios: &RatioVector,
        graph: &'g NeighborGraph,
        config: &HidalgoConfig,
        d_max: f64,
        homogeneity: H,
    ) -> Result<Self, HidalgoError> {
        config.validate()?;
        check_inputs(ratios, graph, config)?;
        let l = config.components;
        if state.d.len() != l
            || state.pi.len() != l
            || state.c.len() != ratios.len()
            || state.c.iter().any(|&c| c >= l)
        {
            return Err(HidalgoError::ConfigInvalid(
                "initial state does not match L and n".into(),
            ));
        }
        Ok(Self {
            log_mu: log_ratios(ratios),
            graph,
            config: config.clone(),
            d_max,
            homogeneity,
            rng: rng::seeded(config.seed),
            state,
        })
    }

    pub fn state(&self) -> &ChainState {
        &self.state
    }

    /// One full sweep: `c`, then `d`, then `pi`.
    pub fn sweep(&mut self) {
        update_c(
            &mut self.state,
            &self.log_mu,
            self.graph,
            &self.homogeneity,
            &mut self.rng,
        );
        update_d(
            &mut self.state,
            &self.log_mu,
            &self.config,
            self.d_max,
            &mut self.rng,
        );
        update_pi(&mut self.state, &self.config, &mut self.rng);
    }

    /// Runs `burnin` discarded sweeps followed by `nsim` recorded ones.
    pub fn run(mut self) -> McmcTraces {
        for _ in 0..self.config.burnin {
            self.sweep();
        }
        let (nsim, n, l) = (self.config.nsim, self.log_mu.len(), self.config.components);
        let mut labels = Array2::zeros((nsim, n));
        let mut weights = Array2::zeros((nsim, l));
        let mut ids = Array2::zeros((nsim, l));
        for t in 0..nsim {
            self.sweep();
            for (dst, &c) in labels.row_mut(t).iter_mut().zip(&self.state.c) {
                *dst = c as u32 + 1;
            }
            for k in 0..l {
                weights[[t, k]] = self.state.pi[k];
                ids[[t, k]] = self.state.d[k];
            }
        }
        let mut config = self.config;
        config.d_max = Some(self.d_max);
        McmcTraces {
            labels,
            weights,
            ids,
            config,
        }
    }
}

fn check_inputs(
    ratios: &RatioVector,
    graph: &NeighborGraph,
    config: &HidalgoConfig,
) -> Result<(), HidalgoError> {
    let n = ratios.len();
    if n <= config.components {
        return Err(HidalgoError::TooFewObservations {
            n,
            l: config.components,
        });
    }
    if graph.len() != n {
        return Err(HidalgoError::ConfigInvalid(format!(
            "graph has {} nodes for {n} ratios",
            graph.len()
        )));
    }
    if let Some(i) = ratios.values().iter().position(|&m| !(m > 1.0)) {
        return Err(GeometryError::DegenerateRatio(i).into());
    }
    Ok(())
}

/// Fits the model to precomputed ratios and neighbour graph.
pub fn hidalgo_fit_ratios(
    ratios: &RatioVector,
    graph: &NeighborGraph,
    config: &HidalgoConfig,
    d_max: f64,
) -> Result<McmcTraces, HidalgoError> {
    Ok(GibbsSampler::new(ratios, graph, config, d_max)?.run())
}

/// Computes ratios and the q-NN graph of `data` and runs the sampler.
///
/// `d_max` defaults to the number of columns of `data`.
pub fn hidalgo_fit(data: &DataMatrix, config: &HidalgoConfig) -> Result<McmcTraces, HidalgoError> {
    config.validate()?;
    if data.nrows() <= config.components {
        return Err(HidalgoError::TooFewObservations {
            n: data.nrows(),
            l: config.components,
        });
    }
    let table = nearest_neighbors(data, config.q.max(2))?;
    let ratios = mu_ratios(&table)?;
    let graph = neighbor_graph(&table, config.q)?;
    let d_max = config.d_max.unwrap_or(data.ncols() as f64);
    hidalgo_fit_ratios(&ratios, &graph, config, d_max)
}
