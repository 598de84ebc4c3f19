//! Grouping of past-cone configurations: z-scoring, K-means++ pre-clustering,
//! exact k-nearest-neighbor and δ-ball neighborhoods, and disjointification
//! of overlapping neighborhoods.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::matrix::{squared_distance, RowMatrix};
use crate::par;

/// Per-coordinate mean and standard deviation used to z-score cone rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardization {
    /// Column statistics of `rows`. Constant columns get unit scale.
    pub fn fit(rows: &RowMatrix) -> Result<Self> {
        let n = rows.rows();
        if n == 0 {
            return Err(Error::EmptySample);
        }
        let d = rows.cols();
        let mut mean = vec![0.0; d];
        for r in rows.iter_rows() {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for r in rows.iter_rows() {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let sd = var
            .into_iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 0.0 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, sd })
    }

    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], sd: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply_row(&self, row: &[f64], out: &mut [f64]) {
        for (((o, v), m), s) in out.iter_mut().zip(row).zip(&self.mean).zip(&self.sd) {
            *o = (v - m) / s;
        }
    }

    pub fn apply(&self, rows: &RowMatrix) -> Result<RowMatrix> {
        if rows.cols() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: rows.cols() });
        }
        let mut out = RowMatrix::zeros(rows.rows(), rows.cols());
        for i in 0..rows.rows() {
            self.apply_row(rows.row(i), out.row_mut(i));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub centroids: RowMatrix,
    pub k: usize,
    /// K-means objective (sum of squared distances to assigned centroids)
    /// after seeding and after each Lloyd iteration.
    pub objective_trace: Vec<f64>,
}

impl ClusterAssignment {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().unwrap_or(&0.0)
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.k];
        for (i, &l) in self.labels.iter().enumerate() {
            m[l].push(i);
        }
        m
    }
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
}

/// Index of the nearest centroid; ties go to the lower index.
pub fn nearest_centroid(row: &[f64], centroids: &RowMatrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter_rows().enumerate() {
        let d = squared_distance(row, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn assign_all(data: &RowMatrix, centroids: &RowMatrix) -> Vec<(usize, f64)> {
    par::map_range(data.rows(), |i| nearest_centroid(data.row(i), centroids))
}

/// Cluster means; an empty cluster keeps its previous centroid.
fn recompute_centroids(data: &RowMatrix, labels: &[usize], prev: &RowMatrix) -> RowMatrix {
    let k = prev.rows();
    let mut sums = RowMatrix::zeros(k, data.cols());
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (s, v) in sums.row_mut(l).iter_mut().zip(data.row(i)) {
            *s += v;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            sums.row_mut(c).iter_mut().for_each(|s| *s /= n as f64);
        } else {
            sums.row_mut(c).copy_from_slice(prev.row(c));
        }
    }
    sums
}

/// K-means++ seeding followed by Lloyd iterations.
///
/// Seeding runs on the rows in lexicographic order, so the result does not
/// depend on input row order: permuting rows permutes labels the same way.
/// Empty clusters are repaired by moving the worst-fit point of the largest
/// cluster into them.
pub fn kmeanspp_fit(plc: &RowMatrix, k: usize, seed: u64, max_iter: usize) -> Result<ClusterAssignment> {
    let n = plc.rows();
    if k == 0 {
        return Err(invalid("K must be positive"));
    }
    if k > n {
        return Err(invalid(format!("K = {k} exceeds the number of rows N = {n}")));
    }
    if max_iter == 0 {
        return Err(invalid("max_iter must be positive"));
    }
    if !plc.all_finite() {
        return Err(Error::NonFinite("cluster input"));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| lex_cmp(plc.row(a), plc.row(b)).then(a.cmp(&b)));
    let data = plc.select_rows(&order);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(k);
    let mut is_chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen.push(first);
    is_chosen[first] = true;
    let mut d2: Vec<f64> = (0..n).map(|i| squared_distance(data.row(i), data.row(first))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            // Remaining points all coincide with a centroid.
            let free: Vec<usize> = (0..n).filter(|&i| !is_chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        is_chosen[next] = true;
        for (i, slot) in d2.iter_mut().enumerate() {
            *slot = slot.min(squared_distance(data.row(i), data.row(next)));
        }
    }
    let mut centroids = data.select_rows(&chosen);

    let mut assigned = assign_all(&data, &centroids);
    let mut labels: Vec<usize> = assigned.iter().map(|a| a.0).collect();
    let mut trace = vec![assigned.iter().map(|a| a.1).sum::<f64>()];
    for _ in 0..max_iter {
        let mut next = recompute_centroids(&data, &labels, &centroids);
        let mut new_assigned = assign_all(&data, &next);
        let mut new_labels: Vec<usize> = new_assigned.iter().map(|a| a.0).collect();
        repair_empty(&data, &mut next, &mut new_labels, &mut new_assigned);
        let objective: f64 = new_assigned.iter().map(|a| a.1).sum();
        let changed = new_labels != labels;
        labels = new_labels;
        assigned = new_assigned;
        centroids = next;
        trace.push(objective);
        if !changed {
            break;
        }
    }
    repair_empty(&data, &mut centroids, &mut labels, &mut assigned);

    let mut out_labels = vec![0; n];
    for (pos, &orig) in order.iter().enumerate() {
        out_labels[orig] = labels[pos];
    }
    Ok(ClusterAssignment { labels: out_labels, centroids, k, objective_trace: trace })
}

fn repair_empty(data: &RowMatrix, centroids: &mut RowMatrix, labels: &mut [usize], assigned: &mut [(usize, f64)]) {
    let k = centroids.rows();
    loop {
        let mut sizes = vec![0usize; k];
        for &l in labels.iter() {
            sizes[l] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else { return };
        let largest = (0..k).max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a))).unwrap();
        // Worst-fit member of the largest cluster; lowest index on ties.
        let victim = (0..labels.len())
            .filter(|&i| labels[i] == largest)
            .max_by(|&a, &b| assigned[a].1.total_cmp(&assigned[b].1).then(b.cmp(&a)))
            .unwrap();
        centroids.row_mut(empty).copy_from_slice(data.row(victim));
        labels[victim] = empty;
        assigned[victim] = (empty, 0.0);
    }
}

/// Largest within-cluster Euclidean distance over all clusters.
pub fn max_cluster_diameter(rows: &RowMatrix, assignment: &ClusterAssignment) -> f64 {
    let members = assignment.members();
    par::map_slice(&members, |m| {
        let mut best = 0.0f64;
        for (a, &i) in m.iter().enumerate() {
            for &j in &m[a + 1..] {
                best = best.max(squared_distance(rows.row(i), rows.row(j)));
            }
        }
        best.sqrt()
    })
    .into_iter()
    .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NeighborhoodMode {
    Delta(f64),
    Knn(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodIndex {
    pub anchor: usize,
    /// Sorted ascending.
    pub members: Vec<usize>,
    pub mode: NeighborhoodMode,
}

/// Row indices of the `k` nearest rows to `query` (Euclidean), ties broken
/// by lower index, in order of increasing distance.
pub fn nearest_rows(plc: &RowMatrix, query: &[f64], k: usize) -> Vec<usize> {
    let mut dist: Vec<(f64, usize)> = plc.iter_rows().enumerate().map(|(j, r)| (squared_distance(query, r), j)).collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < dist.len() {
        dist.select_nth_unstable_by(k, cmp);
        dist.truncate(k);
    }
    dist.sort_unstable_by(cmp);
    // A fresh allocation: collecting in place would keep the n-row capacity.
    let mut out = Vec::with_capacity(dist.len());
    out.extend(dist.iter().map(|&(_, j)| j));
    out
}

pub fn knn_neighborhood(plc: &RowMatrix, i: usize, k: usize) -> Result<NeighborhoodIndex> {
    let n = plc.rows();
    if i >= n {
        return Err(invalid(format!("anchor {i} out of range for {n} rows")));
    }
    if k == 0 || k > n {
        return Err(invalid(format!("k = {k} must lie in 1..={n}")));
    }
    let mut members = nearest_rows(plc, plc.row(i), k);
    // The anchor is at distance 0, but duplicates with lower index could crowd it out.
    if !members.contains(&i) {
        members.pop();
        members.push(i);
    }
    members.sort_unstable();
    Ok(NeighborhoodIndex { anchor: i, members, mode: NeighborhoodMode::Knn(k) })
}

/// k-nearest-neighbor sets for every row, computed in parallel.
pub fn knn_all(plc: &RowMatrix, k: usize) -> Result<Vec<NeighborhoodIndex>> {
    let n = plc.rows();
    if k == 0 || k > n {
        return Err(invalid(format!("k = {k} must lie in 1..={n}")));
    }
    par::map_range(n, |i| knn_neighborhood(plc, i, k)).into_iter().collect()
}

/// Rows strictly within Euclidean distance `delta` of row `i`.
pub fn delta_neighborhood(plc: &RowMatrix, i: usize, delta: f64) -> Result<NeighborhoodIndex> {
    if !(delta > 0.0) {
        return Err(invalid("δ must be positive"));
    }
    if i >= plc.rows() {
        return Err(invalid(format!("anchor {i} out of range for {} rows", plc.rows())));
    }
    let anchor = plc.row(i);
    let r2 = delta * delta;
    let members = plc.iter_rows().enumerate().filter(|(j, r)| *j == i || squared_distance(anchor, r) < r2).map(|(j, _)| j).collect();
    Ok(NeighborhoodIndex { anchor: i, members, mode: NeighborhoodMode::Delta(delta) })
}

/// Splits the overlap of two neighborhoods so the results are disjoint.
///
/// Each side keeps its anchor. The remaining shared rows are divided as
/// evenly as possible, the lower indices going to `a`.
pub fn disjointify(a: &NeighborhoodIndex, b: &NeighborhoodIndex) -> Result<(NeighborhoodIndex, NeighborhoodIndex)> {
    if a.anchor == b.anchor {
        return Err(invalid("neighborhoods share an anchor"));
    }
    let shared: Vec<usize> = a.members.iter().copied().filter(|m| b.members.binary_search(m).is_ok()).collect();
    if shared.is_empty() {
        return Ok((a.clone(), b.clone()));
    }
    let a_anchor_shared = shared.contains(&a.anchor);
    let b_anchor_shared = shared.contains(&b.anchor);
    let free: Vec<usize> = shared.iter().copied().filter(|&m| m != a.anchor && m != b.anchor).collect();
    let mut quota_a = shared.len().div_ceil(2) as isize - isize::from(a_anchor_shared);
    let quota_b = (shared.len() / 2) as isize - isize::from(b_anchor_shared);
    if quota_b < 0 {
        quota_a += quota_b;
    }
    let quota_a = quota_a.max(0) as usize;
    let (to_a, to_b) = free.split_at(quota_a.min(free.len()));

    let keep = |n: &NeighborhoodIndex, own: &[usize], own_anchor_shared: bool| {
        let mut members: Vec<usize> = n.members.iter().copied().filter(|m| shared.binary_search(m).is_err()).collect();
        members.extend_from_slice(own);
        if own_anchor_shared {
            members.push(n.anchor);
        }
        members.sort_unstable();
        NeighborhoodIndex { anchor: n.anchor, members, mode: n.mode }
    };
    Ok((keep(a, to_a, a_anchor_shared), keep(b, to_b, b_anchor_shared)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn rows(v: &[f64]) -> RowMatrix {
        RowMatrix::column(v.to_vec())
    }

    fn random_matrix(n: usize, d: usize, seed: u64) -> RowMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        RowMatrix::from_vec(n, d, data).unwrap()
    }

    #[test]
    fn k_equals_n_gives_zero_objective() {
        let m = random_matrix(30, 3, 1);
        let fit = kmeanspp_fit(&m, 30, 7, 20).unwrap();
        assert_eq!(fit.objective(), 0.0);
        assert!(fit.cluster_sizes().iter().all(|&s| s == 1));
    }

    #[test]
    fn duplicates_with_k_equal_n_stay_nonempty() {
        let m = rows(&[1.0, 1.0, 1.0, 2.0]);
        let fit = kmeanspp_fit(&m, 4, 3, 10).unwrap();
        assert!(fit.cluster_sizes().iter().all(|&s| s == 1));
        assert_eq!(fit.objective(), 0.0);
    }

    #[test]
    fn rejects_bad_k_and_non_finite() {
        let m = rows(&[0.0, 1.0]);
        assert!(kmeanspp_fit(&m, 3, 0, 10).is_err());
        assert!(kmeanspp_fit(&rows(&[0.0, f64::INFINITY]), 1, 0, 10).is_err());
    }

    #[test]
    fn objective_never_increases() {
        let m = random_matrix(400, 4, 2);
        let fit = kmeanspp_fit(&m, 12, 5, 100).unwrap();
        for w in fit.objective_trace.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", fit.objective_trace);
        }
    }

    #[test]
    fn knn_examples() {
        let m = rows(&[0.0, 1.0, 10.0]);
        assert_eq!(knn_neighborhood(&m, 0, 1).unwrap().members, vec![0]);
        assert_eq!(knn_neighborhood(&m, 0, 2).unwrap().members, vec![0, 1]);
        assert_eq!(knn_neighborhood(&m, 2, 3).unwrap().members, vec![0, 1, 2]);
    }

    #[test]
    fn knn_ties_prefer_lower_index() {
        let m = rows(&[0.0, -1.0, 1.0, 1.0]);
        assert_eq!(knn_neighborhood(&m, 0, 2).unwrap().members, vec![0, 1]);
        assert_eq!(knn_neighborhood(&m, 3, 1).unwrap().members, vec![3]);
    }

    #[test]
    fn delta_examples() {
        let m = rows(&[0.0, 0.5, 2.0]);
        assert_eq!(delta_neighborhood(&m, 0, 1.0).unwrap().members, vec![0, 1]);
        assert_eq!(delta_neighborhood(&m, 0, 0.1).unwrap().members, vec![0]);
        assert_eq!(delta_neighborhood(&m, 0, 1e9).unwrap().members, vec![0, 1, 2]);
        assert!(delta_neighborhood(&m, 0, 0.0).is_err());
    }

    fn hood(anchor: usize, members: &[usize]) -> NeighborhoodIndex {
        NeighborhoodIndex { anchor, members: members.to_vec(), mode: NeighborhoodMode::Knn(members.len()) }
    }

    #[test]
    fn disjointify_examples() {
        let (a, b) = disjointify(&hood(1, &[1, 2, 3, 4]), &hood(6, &[3, 4, 5, 6])).unwrap();
        assert_eq!(a.members, vec![1, 2, 3]);
        assert_eq!(b.members, vec![4, 5, 6]);

        let (a, b) = disjointify(&hood(1, &[1, 2]), &hood(7, &[7, 8])).unwrap();
        assert_eq!((a.members, b.members), (vec![1, 2], vec![7, 8]));

        let (a, b) = disjointify(&hood(0, &[0, 1, 2, 3, 4, 5]), &hood(5, &[0, 1, 2, 3, 4, 5])).unwrap();
        assert_eq!(a.members.len(), 3);
        assert_eq!(b.members.len(), 3);
        assert!(a.members.contains(&0) && b.members.contains(&5));

        assert!(disjointify(&hood(1, &[1]), &hood(1, &[1])).is_err());
    }

    #[test]
    fn standardization_handles_constant_columns() {
        let m = RowMatrix::from_rows(&[[1.0, 5.0], [3.0, 5.0]]).unwrap();
        let s = Standardization::fit(&m).unwrap();
        assert_eq!(s.apply(&m).unwrap().as_slice(), &[-1.0, 0.0, 1.0, 0.0]);
    }
}
