//! Segment similarity: logit covariance, probability affinity, modularity
//! clustering and a 2D layout.
//!
//! The affinity between segments `i` and `j` is the mean probability the
//! classifier assigns to `j` over images of `i`, plus the converse. Its
//! off-diagonal entries weight the similarity graph that Louvain clusters.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnet::EvalResult;

/// Convergence threshold on modularity gain.
pub const EPSILON: f64 = 1e-9;
/// Smallest gain that counts as a strict improvement in a local move.
const MOVE_TOL: f64 = 1e-12;

/// Unbiased sample covariance of the columns of `x` (rows are images).
/// Each unordered pair is computed once and mirrored.
pub fn covariance(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, s) = x.shape();
    if n < 2 {
        return Err(Error::Input(format!("covariance needs at least 2 rows, got {n}")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("logit matrix has non-finite entries".into()));
    }
    let means: Vec<f64> = (0..s).map(|j| x.column(j).sum() / n as f64).collect();
    let mut q = DMatrix::zeros(s, s);
    for j in 0..s {
        for k in j..s {
            let mut acc = 0.0;
            for i in 0..n {
                acc += (x[(i, j)] - means[j]) * (x[(i, k)] - means[k]);
            }
            let v = acc / (n - 1) as f64;
            q[(j, k)] = v;
            q[(k, j)] = v;
        }
    }
    Ok(q)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentAffinity {
    /// Segment id of each row and column.
    pub ids: Vec<u32>,
    pub p: DMatrix<f64>,
    /// Evaluated images per segment.
    pub counts: Vec<usize>,
}

/// `P_ij = mean_{a in i} y_j(a) + mean_{b in j} y_i(b)`.
pub fn affinity(eval: &EvalResult, ids: &[u32]) -> Result<SegmentAffinity> {
    let s = eval.num_classes;
    if ids.len() != s {
        return Err(Error::Input(format!("{} segment ids for {s} classes", ids.len())));
    }
    let mut sums = DMatrix::<f64>::zeros(s, s);
    let mut counts = vec![0usize; s];
    for p in &eval.predictions {
        counts[p.label] += 1;
        for (j, v) in p.probs.iter().enumerate() {
            sums[(p.label, j)] += v;
        }
    }
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Input(format!("segment {} has no evaluated images", ids[c])));
    }
    let mut p = DMatrix::zeros(s, s);
    for i in 0..s {
        for j in i..s {
            let v = sums[(i, j)] / counts[i] as f64 + sums[(j, i)] / counts[j] as f64;
            p[(i, j)] = v;
            p[(j, i)] = v;
        }
    }
    Ok(SegmentAffinity {
        ids: ids.to_vec(),
        p,
        counts,
    })
}

/// The `n` highest off-diagonal entries as `(i, j, value)` with `i < j`,
/// sorted by value descending, ties by `(i, j)` ascending.
pub fn top_pairs(p: &DMatrix<f64>, n: usize) -> Vec<(usize, usize, f64)> {
    let s = p.nrows();
    let mut pairs: Vec<(usize, usize, f64)> = (0..s)
        .flat_map(|i| (i + 1..s).map(move |j| (i, j)))
        .map(|(i, j)| (i, j, p[(i, j)]))
        .collect();
    if n > pairs.len() {
        log::warn!("requested {n} pairs but only {} exist", pairs.len());
    }
    pairs.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    pairs.truncate(n);
    pairs
}

/// Index of the largest off-diagonal entry in row `i`; lowest index wins ties.
pub fn best_partner(p: &DMatrix<f64>, i: usize) -> Option<usize> {
    (0..p.ncols())
        .filter(|&j| j != i)
        .fold(None, |best: Option<usize>, j| match best {
            Some(b) if p[(i, b)] >= p[(i, j)] => Some(b),
            _ => Some(j),
        })
}

/// Undirected weighted graph on a dense adjacency matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityGraph {
    a: DMatrix<f64>,
    degrees: Vec<f64>,
    two_m: f64,
}

impl SimilarityGraph {
    /// Validates symmetry and non-negativity. Self-loops are kept only when
    /// `self_loops` is set.
    pub fn new(mut a: DMatrix<f64>, self_loops: bool) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Dimension(format!("adjacency is {}x{}", n, a.ncols())));
        }
        for i in 0..n {
            for j in 0..n {
                let v = a[(i, j)];
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Input(format!("edge ({i}, {j}) has weight {v}")));
                }
                if v != a[(j, i)] {
                    return Err(Error::Input(format!("adjacency not symmetric at ({i}, {j})")));
                }
            }
            if !self_loops {
                a[(i, i)] = 0.0;
            }
        }
        let degrees: Vec<f64> = (0..n).map(|i| a.row(i).sum()).collect();
        let two_m = degrees.iter().sum();
        Ok(Self { a, degrees, two_m })
    }

    /// Edge weights from an affinity matrix, diagonal dropped.
    pub fn from_affinity(p: &DMatrix<f64>) -> Result<Self> {
        Self::new(p.clone(), false)
    }

    /// Edge weights from a covariance matrix with negative entries clipped.
    pub fn from_covariance(q: &DMatrix<f64>) -> Result<Self> {
        Self::new(q.map(|v| v.max(0.0)), false)
    }

    pub fn len(&self) -> usize {
        self.a.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.a[(i, j)]
    }

    pub fn degree(&self, i: usize) -> f64 {
        self.degrees[i]
    }

    /// Total edge weight counted in both directions, `2m`.
    pub fn two_m(&self) -> f64 {
        self.two_m
    }

    fn check(&self, partition: &[usize]) -> Result<()> {
        if self.two_m <= 0.0 {
            return Err(Error::Input("graph has no edge weight".into()));
        }
        if partition.len() != self.len() {
            return Err(Error::Dimension(format!(
                "partition has {} labels for {} nodes",
                partition.len(),
                self.len()
            )));
        }
        Ok(())
    }
}

/// `Q = 1/2m sum_ij [A_ij - k_i k_j / 2m] delta(c_i, c_j)`.
pub fn modularity(g: &SimilarityGraph, partition: &[usize]) -> Result<f64> {
    g.check(partition)?;
    // Per community: internal weight (both directions) and total degree.
    let mut inner: BTreeMap<usize, f64> = BTreeMap::new();
    let mut tot: BTreeMap<usize, f64> = BTreeMap::new();
    for i in 0..g.len() {
        *tot.entry(partition[i]).or_default() += g.degree(i);
        for j in 0..g.len() {
            if partition[i] == partition[j] {
                *inner.entry(partition[i]).or_default() += g.weight(i, j);
            }
        }
    }
    let two_m = g.two_m();
    Ok(tot
        .iter()
        .map(|(c, t)| inner[c] / two_m - (t / two_m).powi(2))
        .sum())
}

/// Gives `node` a label no other node uses.
pub fn isolate(partition: &[usize], node: usize) -> Vec<usize> {
    let mut out = partition.to_vec();
    out[node] = partition.iter().copied().max().unwrap_or(0) + 1;
    out
}

/// Gain from inserting `node`, taken as already isolated, into community
/// `target`: `k_i,in / m - Sigma_tot * k_i / (2 m^2)`. Labels range over
/// `0..n`; a label nobody carries is an empty community with zero gain.
pub fn delta_q(g: &SimilarityGraph, partition: &[usize], node: usize, target: usize) -> Result<f64> {
    g.check(partition)?;
    if node >= g.len() {
        return Err(Error::Input(format!("unknown node {node}")));
    }
    if target >= g.len() {
        return Err(Error::Input(format!("unknown community {target}")));
    }
    let mut k_in = 0.0;
    let mut sigma_tot = 0.0;
    for j in 0..g.len() {
        if j != node && partition[j] == target {
            k_in += g.weight(node, j);
            sigma_tot += g.degree(j);
        }
    }
    let m = g.two_m() / 2.0;
    Ok(k_in / m - sigma_tot * g.degree(node) / (2.0 * m * m))
}

/// Change in modularity from pulling `node` out of its community into a
/// community of its own.
pub fn removal_delta(g: &SimilarityGraph, partition: &[usize], node: usize) -> Result<f64> {
    Ok(-delta_q(g, partition, node, partition[node])?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommunityPartition {
    /// Community of each node, numbered by first appearance.
    pub communities: Vec<usize>,
    pub modularity: f64,
    /// Modularity of the initial singleton partition, then after each phase.
    pub trace: Vec<f64>,
}

impl CommunityPartition {
    pub fn num_communities(&self) -> usize {
        self.communities.iter().max().map_or(0, |m| m + 1)
    }

    /// JSON `{communities: {segment_id: community}, modularity, q_trace}`.
    pub fn to_json(&self, ids: &[u32]) -> serde_json::Value {
        let map: BTreeMap<String, usize> = ids
            .iter()
            .zip(&self.communities)
            .map(|(id, c)| (id.to_string(), *c))
            .collect();
        serde_json::json!({
            "communities": map,
            "modularity": self.modularity,
            "q_trace": self.trace,
        })
    }
}

fn relabel(labels: &[usize]) -> Vec<usize> {
    let mut map = BTreeMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

/// Repeated passes of single-node moves on a dense weighted matrix (self
/// loops allowed). Only strict improvements move a node; scanning ids in
/// ascending order, the lowest id wins ties. Returns whether anything moved.
fn local_moves(a: &DMatrix<f64>, comm: &mut [usize], rng: &mut ChaCha8Rng) -> bool {
    let n = a.nrows();
    let k: Vec<f64> = (0..n).map(|i| a.row(i).sum()).collect();
    let m = k.iter().sum::<f64>() / 2.0;
    let mut tot = vec![0.0; n];
    for i in 0..n {
        tot[comm[i]] += k[i];
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut any = false;
    let mut k_in = vec![0.0; n];
    loop {
        order.shuffle(rng);
        let mut moved = false;
        for &i in &order {
            let own = comm[i];
            tot[own] -= k[i];
            k_in.iter_mut().for_each(|v| *v = 0.0);
            for j in 0..n {
                if j != i {
                    k_in[comm[j]] += a[(i, j)];
                }
            }
            let gain = |c: usize| k_in[c] / m - tot[c] * k[i] / (2.0 * m * m);
            let mut best = own;
            let mut best_gain = gain(own);
            // Neighbouring communities, plus empty ones (gain 0).
            for c in 0..n {
                if c == own || (k_in[c] == 0.0 && tot[c] != 0.0) {
                    continue;
                }
                let g = gain(c);
                if g > best_gain + MOVE_TOL {
                    best = c;
                    best_gain = g;
                }
            }
            tot[best] += k[i];
            if best != own {
                comm[i] = best;
                moved = true;
                any = true;
            }
        }
        if !moved {
            return any;
        }
    }
}

/// Greedy two-phase modularity optimization. Node visit order is shuffled
/// with a seeded stream each pass. After the aggregation phases stop
/// gaining, a final node-level pass on the original graph makes the result
/// a local optimum under single-node moves.
pub fn louvain(g: &SimilarityGraph, seed: u64) -> Result<CommunityPartition> {
    let n = g.len();
    let singletons: Vec<usize> = (0..n).collect();
    let mut q = modularity(g, &singletons)?;
    let mut trace = vec![q];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = singletons;
    let mut work = g.a.clone();
    loop {
        let size = work.nrows();
        let mut comm: Vec<usize> = (0..size).collect();
        if !local_moves(&work, &mut comm, &mut rng) {
            break;
        }
        let comm = relabel(&comm);
        let groups = comm.iter().max().unwrap() + 1;
        labels = labels.iter().map(|&l| comm[l]).collect();
        let q_new = modularity(g, &labels)?;
        let gain = q_new - q;
        if gain > 0.0 {
            q = q_new;
            trace.push(q);
        }
        if gain < EPSILON || groups == size {
            break;
        }
        let mut next = DMatrix::zeros(groups, groups);
        for i in 0..size {
            for j in 0..size {
                next[(comm[i], comm[j])] += work[(i, j)];
            }
        }
        work = next;
    }
    let mut fine = labels.clone();
    if local_moves(&g.a, &mut fine, &mut rng) {
        let q_fine = modularity(g, &fine)?;
        if q_fine > q {
            labels = fine;
            q = q_fine;
            trace.push(q);
        }
    }
    Ok(CommunityPartition {
        communities: relabel(&labels),
        modularity: q,
        trace,
    })
}

/// Best modularity over every set partition, by restricted growth strings.
/// `max_communities` bounds the number of blocks.
pub fn exhaustive_best(g: &SimilarityGraph, max_communities: usize) -> Result<(Vec<usize>, f64)> {
    let n = g.len();
    if n > 12 {
        return Err(Error::Input(format!("exhaustive search over {n} nodes is too large")));
    }
    let mut labels = vec![0usize; n];
    let mut best = (labels.clone(), modularity(g, &labels)?);
    fn rec(
        g: &SimilarityGraph,
        i: usize,
        used: usize,
        cap: usize,
        labels: &mut Vec<usize>,
        best: &mut (Vec<usize>, f64),
    ) -> Result<()> {
        if i == labels.len() {
            let q = modularity(g, labels)?;
            if q > best.1 {
                *best = (labels.clone(), q);
            }
            return Ok(());
        }
        for c in 0..=used.min(cap - 1) {
            labels[i] = c;
            rec(g, i + 1, used.max(c + 1), cap, labels, best)?;
        }
        Ok(())
    }
    if n > 0 {
        rec(g, 1, 1, max_communities.max(1), &mut labels, &mut best)?;
    }
    Ok(best)
}

/// Classical MDS on `d_ij = max(P) - P_ij` (zero diagonal). Eigenvector
/// signs are fixed so the largest-magnitude component is positive.
pub fn layout2d(p: &DMatrix<f64>) -> Result<Vec<[f64; 2]>> {
    let s = p.nrows();
    if s < 2 || p.ncols() != s {
        return Err(Error::Input(format!("layout needs a square matrix of size >= 2, got {}x{}", s, p.ncols())));
    }
    let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let d2 = DMatrix::from_fn(s, s, |i, j| if i == j { 0.0 } else { (max - p[(i, j)]).powi(2) });
    let row_means: Vec<f64> = (0..s).map(|i| d2.row(i).sum() / s as f64).collect();
    let grand = row_means.iter().sum::<f64>() / s as f64;
    let b = DMatrix::from_fn(s, s, |i, j| -0.5 * (d2[(i, j)] - row_means[i] - row_means[j] + grand));
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &c| eig.eigenvalues[c].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&c)));
    let mut coords = vec![[0.0; 2]; s];
    for (axis, &col) in order.iter().take(2).enumerate() {
        let lambda = eig.eigenvalues[col].max(0.0);
        let v = eig.eigenvectors.column(col);
        let pivot = (0..s).max_by(|&a, &c| v[a].abs().total_cmp(&v[c].abs()).then(c.cmp(&a))).unwrap();
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..s {
            coords[i][axis] = sign * v[i] * lambda.sqrt();
        }
    }
    Ok(coords)
}

/// Matrix with a header row and column of segment ids.
pub fn write_matrix_csv(path: &Path, ids: &[u32], m: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["segment_id".to_string()];
    header.extend(ids.iter().map(|i| i.to_string()));
    w.write_record(&header)?;
    for (r, id) in ids.iter().enumerate() {
        let mut row = vec![id.to_string()];
        row.extend((0..m.ncols()).map(|c| m[(r, c)].to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_layout_csv(path: &Path, ids: &[u32], coords: &[[f64; 2]]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["segment_id", "x", "y"])?;
    for (id, c) in ids.iter().zip(coords) {
        w.write_record([id.to_string(), c[0].to_string(), c[1].to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
