//! Exact Euclidean nearest neighbours and the statistics built on them.
//!
//! Neighbours are ranked by squared distance with ties broken by the lower row
//! index, so the ordering is a strict total order and every search path
//! returns the same table. Up to [`BRUTE_FORCE_LIMIT`] rows a full pairwise
//! scan with partial selection is used; above it a k-d tree whose pruning
//! bound never exceeds the exact squared distance (so no tied candidate is
//! lost).

use std::cmp::Ordering;
use std::collections::HashSet;

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use thiserror::Error;

/// Row count above which [`NnStrategy::Auto`] switches to the k-d tree.
pub const BRUTE_FORCE_LIMIT: usize = 10_000;

const LEAF_SIZE: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("data matrix needs at least 3 rows, got {0}")]
    TooFewRows(usize),
    #[error("data matrix needs at least 1 column")]
    NoColumns,
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("{ids} row ids for {rows} rows")]
    IdCountMismatch { ids: usize, rows: usize },
    #[error("duplicate row id {0:?}")]
    DuplicateId(String),
    #[error("rows {0} and {1} are identical")]
    DuplicateRows(usize, usize),
    #[error("k = {k} must be smaller than the number of rows ({n})")]
    KTooLarge { k: usize, n: usize },
    #[error("k must be at least {0}")]
    KTooSmall(usize),
    #[error("first and second neighbour of row {0} are equidistant")]
    DegenerateRatio(usize),
    #[error("q = {q} exceeds the {k} neighbours stored per row")]
    QTooLarge { q: usize, k: usize },
}

/// An `n x D` matrix of observations with unique row labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    values: Array2<f64>,
    row_ids: Vec<String>,
}

impl DataMatrix {
    pub fn new(values: Array2<f64>, row_ids: Vec<String>) -> Result<Self, GeometryError> {
        let (n, d) = values.dim();
        if n < 3 {
            return Err(GeometryError::TooFewRows(n));
        }
        if d == 0 {
            return Err(GeometryError::NoColumns);
        }
        if row_ids.len() != n {
            return Err(GeometryError::IdCountMismatch {
                ids: row_ids.len(),
                rows: n,
            });
        }
        if let Some(((row, col), _)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(GeometryError::NonFinite { row, col });
        }
        let mut seen = HashSet::with_capacity(n);
        for id in &row_ids {
            if !seen.insert(id.as_str()) {
                return Err(GeometryError::DuplicateId(id.clone()));
            }
        }
        Ok(Self { values, row_ids })
    }

    /// Builds a matrix with row ids `"0"`, `"1"`, ...
    pub fn from_array(values: Array2<f64>) -> Result<Self, GeometryError> {
        let ids = (0..values.nrows()).map(|i| i.to_string()).collect();
        Self::new(values, ids)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, GeometryError> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        if flat.len() != n * d {
            return Err(GeometryError::NoColumns);
        }
        let values = Array2::from_shape_vec((n, d), flat).expect("shape checked");
        Self::from_array(values)
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.values.row(i)
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn into_parts(self) -> (Array2<f64>, Vec<String>) {
        (self.values, self.row_ids)
    }
}

/// Per-row neighbour lists ordered by increasing distance.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborTable {
    indices: Array2<usize>,
    distances: Array2<f64>,
}

impl NeighborTable {
    pub fn k(&self) -> usize {
        self.indices.ncols()
    }

    pub fn len(&self) -> usize {
        self.indices.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `n x k` neighbour row indices (column `j` is the `(j+1)`-th neighbour).
    pub fn indices(&self) -> &Array2<usize> {
        &self.indices
    }

    /// `n x k` Euclidean distances matching [`NeighborTable::indices`].
    pub fn distances(&self) -> &Array2<f64> {
        &self.distances
    }
}

/// Second-to-first neighbour distance ratios, one per observation.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioVector(Vec<f64>);

impl RatioVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl From<Vec<f64>> for RatioVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Directed q-nearest-neighbour graph, with the reverse adjacency cached.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    q: usize,
    out: Vec<Vec<usize>>,
    incoming: Vec<Vec<usize>>,
}

impl NeighborGraph {
    /// Builds a graph from explicit out-neighbour lists. Every list must have
    /// the same length and must not contain its own index.
    pub fn from_lists(out: Vec<Vec<usize>>) -> Option<Self> {
        let n = out.len();
        let q = out.first().map_or(0, Vec::len);
        let mut incoming = vec![Vec::new(); n];
        for (i, nbrs) in out.iter().enumerate() {
            if nbrs.len() != q {
                return None;
            }
            for &j in nbrs {
                if j == i || j >= n {
                    return None;
                }
                incoming[j].push(i);
            }
        }
        Some(Self { q, out, incoming })
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn len(&self) -> usize {
        self.out.len()
    }

    pub fn is_empty(&self) -> bool {
        self.out.is_empty()
    }

    /// `N_i`: the q nearest neighbours of `i`.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.out[i]
    }

    /// Points that count `i` among their q nearest neighbours.
    pub fn incoming(&self, i: usize) -> &[usize] {
        &self.incoming[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NnStrategy {
    /// Brute force up to [`BRUTE_FORCE_LIMIT`] rows, k-d tree above.
    #[default]
    Auto,
    BruteForce,
    KdTree,
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    d2: f64,
    idx: usize,
}

impl Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then_with(|| self.idx.cmp(&other.idx))
    }
}

#[inline]
fn squared_distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let t = x - y;
        s += t * t;
    }
    s
}

/// Exact Euclidean k-NN of every row.
pub fn nearest_neighbors(data: &DataMatrix, k: usize) -> Result<NeighborTable, GeometryError> {
    nearest_neighbors_with(data, k, NnStrategy::Auto)
}

pub fn nearest_neighbors_with(
    data: &DataMatrix,
    k: usize,
    strategy: NnStrategy,
) -> Result<NeighborTable, GeometryError> {
    let n = data.nrows();
    if k == 0 {
        return Err(GeometryError::KTooSmall(1));
    }
    if k >= n {
        return Err(GeometryError::KTooLarge { k, n });
    }
    let use_tree = match strategy {
        NnStrategy::Auto => n > BRUTE_FORCE_LIMIT,
        NnStrategy::BruteForce => false,
        NnStrategy::KdTree => true,
    };
    let rows: Vec<Vec<Candidate>> = if use_tree {
        let tree = KdTree::build(data.values());
        (0..n)
            .into_par_iter()
            .map(|i| tree.query(data.values(), i, k))
            .collect()
    } else {
        (0..n)
            .into_par_iter()
            .map(|i| brute_force_row(data.values(), i, k))
            .collect()
    };

    let mut indices = Array2::zeros((n, k));
    let mut distances = Array2::zeros((n, k));
    for (i, row) in rows.iter().enumerate() {
        if row[0].d2 == 0.0 {
            return Err(GeometryError::DuplicateRows(i, row[0].idx));
        }
        for (j, c) in row.iter().enumerate() {
            indices[[i, j]] = c.idx;
            distances[[i, j]] = c.d2.sqrt();
        }
    }
    Ok(NeighborTable { indices, distances })
}

fn brute_force_row(values: &Array2<f64>, i: usize, k: usize) -> Vec<Candidate> {
    let q = values.row(i);
    let mut cands: Vec<Candidate> = (0..values.nrows())
        .filter(|&j| j != i)
        .map(|j| Candidate {
            d2: squared_distance(q, values.row(j)),
            idx: j,
        })
        .collect();
    if k < cands.len() {
        cands.select_nth_unstable_by(k - 1, Candidate::cmp);
        cands.truncate(k);
    }
    cands.sort_unstable_by(Candidate::cmp);
    cands
}

enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        left: usize,
        right: usize,
        dim: usize,
        value: f64,
    },
}

struct KdTree {
    nodes: Vec<Node>,
    lo: Vec<Vec<f64>>,
    hi: Vec<Vec<f64>>,
    order: Vec<usize>,
}

impl KdTree {
    fn build(values: &Array2<f64>) -> Self {
        let mut tree = KdTree {
            nodes: Vec::new(),
            lo: Vec::new(),
            hi: Vec::new(),
            order: (0..values.nrows()).collect(),
        };
        let n = values.nrows();
        tree.build_node(values, 0, n);
        tree
    }

    fn build_node(&mut self, values: &Array2<f64>, start: usize, end: usize) -> usize {
        let d = values.ncols();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for &p in &self.order[start..end] {
            for (c, &v) in values.row(p).iter().enumerate() {
                lo[c] = lo[c].min(v);
                hi[c] = hi[c].max(v);
            }
        }
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { start, end });
        let (dim, spread) =
            (0..d)
                .map(|c| (c, hi[c] - lo[c]))
                .fold(
                    (0, f64::NEG_INFINITY),
                    |acc, x| if x.1 > acc.1 { x } else { acc },
                );
        self.lo.push(lo);
        self.hi.push(hi);
        if end - start <= LEAF_SIZE || spread <= 0.0 {
            return id;
        }
        let mid = start + (end - start) / 2;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            values[[a, dim]]
                .total_cmp(&values[[b, dim]])
                .then(a.cmp(&b))
        });
        let value = values[[self.order[mid], dim]];
        let left = self.build_node(values, start, mid);
        let right = self.build_node(values, mid, end);
        self.nodes[id] = Node::Split {
            left,
            right,
            dim,
            value,
        };
        id
    }

    fn box_bound(&self, node: usize, q: ArrayView1<'_, f64>) -> f64 {
        let mut s = 0.0;
        for (c, &x) in q.iter().enumerate() {
            let lo = self.lo[node][c];
            let hi = self.hi[node][c];
            let t = if x < lo {
                lo - x
            } else if x > hi {
                x - hi
            } else {
                0.0
            };
            s += t * t;
        }
        s
    }

    fn query(&self, values: &Array2<f64>, i: usize, k: usize) -> Vec<Candidate> {
        let mut best: Vec<Candidate> = Vec::with_capacity(k + 1);
        self.search(values, 0, i, k, &mut best);
        best
    }

    fn search(
        &self,
        values: &Array2<f64>,
        node: usize,
        i: usize,
        k: usize,
        best: &mut Vec<Candidate>,
    ) {
        let q = values.row(i);
        if best.len() == k && self.box_bound(node, q) > best[k - 1].d2 {
            return;
        }
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &j in &self.order[start..end] {
                    if j == i {
                        continue;
                    }
                    let c = Candidate {
                        d2: squared_distance(q, values.row(j)),
                        idx: j,
                    };
                    if best.len() == k {
                        if c.cmp(&best[k - 1]) != Ordering::Less {
                            continue;
                        }
                        best.pop();
                    }
                    let pos = best.partition_point(|b| b.cmp(&c) == Ordering::Less);
                    best.insert(pos, c);
                }
            }
            Node::Split {
                left,
                right,
                dim,
                value,
            } => {
                let (first, second) = if q[dim] < value {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(values, first, i, k, best);
                self.search(values, second, i, k, best);
            }
        }
    }
}

/// `mu_i = r_{i,2} / r_{i,1}` for every row.
pub fn mu_ratios(table: &NeighborTable) -> Result<RatioVector, GeometryError> {
    if table.k() < 2 {
        return Err(GeometryError::KTooSmall(2));
    }
    let d = table.distances();
    let mut out = Vec::with_capacity(table.len());
    for i in 0..table.len() {
        let (r1, r2) = (d[[i, 0]], d[[i, 1]]);
        let mu = r2 / r1;
        if r2 == r1 || mu <= 1.0 {
            return Err(GeometryError::DegenerateRatio(i));
        }
        out.push(mu);
    }
    Ok(RatioVector(out))
}

/// Directed adjacency of the `q` nearest neighbours of each point.
pub fn neighbor_graph(table: &NeighborTable, q: usize) -> Result<NeighborGraph, GeometryError> {
    if q > table.k() {
        return Err(GeometryError::QTooLarge { q, k: table.k() });
    }
    let out = table
        .indices()
        .rows()
        .into_iter()
        .map(|r| r.iter().take(q).copied().collect())
        .collect();
    Ok(NeighborGraph::from_lists(out).expect("table rows exclude self"))
}
