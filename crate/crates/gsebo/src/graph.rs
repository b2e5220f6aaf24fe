//! Graph construction, normalization constants, synthetic graph generation,
//! and the inter-class noise-injection protocol.
//!
//! Undirected edges are stored symmetrically (both directions in CSR); the
//! canonical external representation is one `u < v` pair per edge.

use std::collections::BTreeSet;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{DenseMatrix, RngStream, SparsePattern};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Graph {
    pattern: Rc<SparsePattern>,
    has_self_loops: bool,
}

impl Graph {
    /// Build from canonical undirected edges (u < v, no loops).
    pub fn from_undirected_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for &(u, v) in edges {
            if u >= v {
                return Err(Error::data(format!("edge ({},{}) must satisfy u < v", u, v)));
            }
            if v >= n {
                return Err(Error::data(format!("edge ({},{}) out of range for n={}", u, v, n)));
            }
            if !adj[u].insert(v) {
                return Err(Error::data(format!("duplicate edge ({},{})", u, v)));
            }
            adj[v].insert(u);
        }
        let rows: Vec<Vec<usize>> = adj.into_iter().map(|s| s.into_iter().collect()).collect();
        Ok(Graph {
            pattern: Rc::new(SparsePattern::from_adjacency(&rows)?),
            has_self_loops: false,
        })
    }

    pub fn n(&self) -> usize {
        self.pattern.n()
    }

    pub fn pattern(&self) -> &Rc<SparsePattern> {
        &self.pattern
    }

    pub fn has_self_loops(&self) -> bool {
        self.has_self_loops
    }

    pub fn nnz(&self) -> usize {
        self.pattern.nnz()
    }

    /// Undirected non-loop edge count (stored pairs counted once).
    pub fn num_undirected_edges(&self) -> usize {
        let loops = (0..self.n()).filter(|&i| self.pattern.has_entry(i, i)).count();
        (self.nnz() - loops) / 2
    }

    /// Canonical u < v edge list, sorted.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        self.pattern.entries().filter(|&(u, v)| u < v).collect()
    }

    /// The graph with diagonal entries added (A -> A + I).
    pub fn add_self_loops(&self) -> Result<Graph> {
        if self.has_self_loops {
            return Err(Error::contract("graph already has self loops"));
        }
        let n = self.n();
        let mut rows: Vec<Vec<usize>> = (0..n).map(|i| self.pattern.neighbors(i).to_vec()).collect();
        for (i, row) in rows.iter_mut().enumerate() {
            let pos = row.binary_search(&i).unwrap_err();
            row.insert(pos, i);
        }
        Ok(Graph {
            pattern: Rc::new(SparsePattern::from_adjacency(&rows)?),
            has_self_loops: true,
        })
    }

    /// Per-row nonzero counts.
    pub fn degrees(&self) -> Vec<usize> {
        (0..self.n()).map(|i| self.pattern.neighbors(i).len()).collect()
    }

    /// 1/sqrt(d_i d_j) per stored entry. Requires self loops, so every
    /// degree is at least 1 and all values lie in (0, 1].
    pub fn sym_norm_values(&self) -> Result<Vec<f64>> {
        if !self.has_self_loops {
            return Err(Error::contract("sym_norm_values requires self loops"));
        }
        let deg = self.degrees();
        Ok(self
            .pattern
            .entries()
            .map(|(i, j)| 1.0 / ((deg[i] * deg[j]) as f64).sqrt())
            .collect())
    }

    /// 1/d_i per stored entry of row i, on the loop-free adjacency.
    /// Zero-degree rows have no entries, so they contribute nothing.
    pub fn row_norm_values(&self) -> Result<Vec<f64>> {
        if self.has_self_loops {
            return Err(Error::contract("row_norm_values expects the loop-free adjacency"));
        }
        let deg = self.degrees();
        Ok(self.pattern.entries().map(|(i, _)| 1.0 / deg[i] as f64).collect())
    }

    /// Fraction of undirected non-loop edges whose endpoints differ in label.
    pub fn inter_class_ratio(&self, labels: &[usize]) -> Result<f64> {
        if labels.len() != self.n() {
            return Err(Error::shape("labels must cover all nodes"));
        }
        let mut total = 0usize;
        let mut inter = 0usize;
        for (u, v) in self.pattern.entries() {
            if u < v {
                total += 1;
                if labels[u] != labels[v] {
                    inter += 1;
                }
            }
        }
        if total == 0 {
            return Ok(0.0);
        }
        Ok(inter as f64 / total as f64)
    }

    /// A new graph with exactly `k` additional undirected edges whose
    /// endpoints carry different labels. Sampling is uniform with rejection
    /// of duplicates and loops; deterministic given the rng state.
    pub fn inject_inter_class_edges(
        &self,
        labels: &[usize],
        k: usize,
        rng: &mut RngStream,
    ) -> Result<Graph> {
        if self.has_self_loops {
            return Err(Error::contract("inject edges before adding self loops"));
        }
        if labels.len() != self.n() {
            return Err(Error::shape("labels must cover all nodes"));
        }
        let n = self.n();
        let classes = labels.iter().max().map_or(0, |&m| m + 1);
        if classes < 2 {
            return Err(Error::contract("need at least 2 classes to add inter-class edges"));
        }

        // candidate budget: differing-label pairs minus existing inter edges
        let mut class_counts = vec![0usize; classes];
        for &l in labels {
            class_counts[l] += 1;
        }
        let differing_pairs =
            (n * n - class_counts.iter().map(|c| c * c).sum::<usize>()) / 2;
        let existing_inter = self
            .pattern
            .entries()
            .filter(|&(u, v)| u < v && labels[u] != labels[v])
            .count();
        if k > differing_pairs - existing_inter {
            return Err(Error::contract(format!(
                "requested {} inter-class edges but only {} candidate pairs remain",
                k,
                differing_pairs - existing_inter
            )));
        }

        let mut edges: BTreeSet<(usize, usize)> = self.undirected_edges().into_iter().collect();
        let mut added = 0usize;
        while added < k {
            let u = rng.next_index(n);
            let v = rng.next_index(n);
            if u == v || labels[u] == labels[v] {
                continue;
            }
            let key = (u.min(v), u.max(v));
            if edges.insert(key) {
                added += 1;
            }
        }
        let all: Vec<(usize, usize)> = edges.into_iter().collect();
        Graph::from_undirected_edges(n, &all)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl DataSplit {
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (name, set) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            if set.is_empty() {
                return Err(Error::data(format!("{} split is empty", name)));
            }
            for &i in set {
                if i >= n {
                    return Err(Error::data(format!("{} split index {} out of range", name, i)));
                }
                if seen[i] {
                    return Err(Error::data(format!("node {} appears in multiple splits", i)));
                }
                seen[i] = true;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub graph: Graph,
    pub features: DenseMatrix,
    pub labels: Vec<usize>,
    pub split: DataSplit,
    pub name: String,
}

impl DatasetBundle {
    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.graph.n();
        if self.features.rows() != n || self.labels.len() != n {
            return Err(Error::data(format!(
                "feature rows {} / labels {} must equal node count {}",
                self.features.rows(),
                self.labels.len(),
                n
            )));
        }
        self.split.validate(n)
    }
}

/// Stochastic block model bundle: `classes` equal-sized blocks, intra-block
/// edge probability `p_intra`, inter-block `p_inter`. Features are the
/// one-hot class centroid in `feature_dim` plus Gaussian noise, and the
/// split is drawn 10:20:70.
#[allow(clippy::too_many_arguments)]
pub fn generate_sbm(
    n: usize,
    classes: usize,
    p_intra: f64,
    p_inter: f64,
    feature_dim: usize,
    feature_noise: f64,
    rng: &mut RngStream,
) -> Result<DatasetBundle> {
    if classes < 2 {
        return Err(Error::contract("sbm needs at least 2 classes"));
    }
    if n < classes * 2 {
        return Err(Error::contract("sbm needs at least 2 nodes per class"));
    }
    if feature_dim < classes {
        return Err(Error::contract("feature_dim must be >= classes"));
    }
    for p in [p_intra, p_inter] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::contract("edge probabilities must lie in [0,1]"));
        }
    }

    let labels: Vec<usize> = (0..n).map(|i| i * classes / n).collect();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if labels[u] == labels[v] { p_intra } else { p_inter };
            if rng.next_f64() < p {
                edges.push((u, v));
            }
        }
    }
    let graph = Graph::from_undirected_edges(n, &edges)?;

    let mut feat = Vec::with_capacity(n * feature_dim);
    for &l in &labels {
        for d in 0..feature_dim {
            let centroid = if d == l { 1.0 } else { 0.0 };
            feat.push(centroid + feature_noise * rng.normal());
        }
    }
    let features = DenseMatrix::new(n, feature_dim, feat)?;

    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let n_train = (n / 10).max(1);
    let n_val = (n * 2 / 10).max(1);
    let split = DataSplit {
        train: {
            let mut s = order[..n_train].to_vec();
            s.sort_unstable();
            s
        },
        val: {
            let mut s = order[n_train..n_train + n_val].to_vec();
            s.sort_unstable();
            s
        },
        test: {
            let mut s = order[n_train + n_val..].to_vec();
            s.sort_unstable();
            s
        },
    };

    let bundle = DatasetBundle { graph, features, labels, split, name: "sbm".into() };
    bundle.validate()?;
    Ok(bundle)
}
