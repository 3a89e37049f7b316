//! Header-aware row clustering and representative-row selection.
//!
//! Rows are embedded, mixed with the header embedding
//! (`α·e_H + (1−α)·e_r`), grouped with k-means, and the member nearest each
//! centroid becomes that cluster's representative in the partial table.

use std::collections::HashSet;

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{check_dims, squared_distance, Embedding};
use crate::error::{Error, Result};
use crate::table::{serialize_partial_table, Row, Table};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteringConfig {
    /// Weight of the header embedding in the row mix.
    pub alpha: f64,
    /// Requested number of clusters.
    pub k: usize,
    pub max_iters: usize,
    /// Convergence threshold on the largest centroid move (Euclidean).
    pub tol: f64,
    pub seed: u64,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            k: 10,
            max_iters: 100,
            tol: 1e-6,
            seed: 42,
        }
    }
}

impl ClusteringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha must be in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be >= 1".into()));
        }
        if self.tol.is_nan() || self.tol <= 0.0 {
            return Err(Error::Config("tol must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    /// Cluster of each point, in `0..k_effective`.
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub k_effective: usize,
    pub iterations: usize,
    pub converged: bool,
}

impl ClusterAssignment {
    pub fn members(&self, cluster: usize) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(move |(_, &l)| l == cluster)
            .map(|(i, _)| i)
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k_effective];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

/// Representative rows, one per cluster, ordered by original row index.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialTable {
    pub table_id: String,
    pub header: Vec<String>,
    /// `(row, cluster index)`
    pub representatives: Vec<(Row, usize)>,
}

impl PartialTable {
    /// Partial table made of the first `min(k, n)` rows, as top-k sampling does.
    pub fn top_rows(table: &Table, k: usize) -> Self {
        Self {
            table_id: table.id().to_string(),
            header: table.header().to_vec(),
            representatives: table
                .rows()
                .iter()
                .take(k)
                .map(|r| (r.clone(), 0))
                .collect(),
        }
    }

    pub fn rows(&self) -> Vec<&Row> {
        self.representatives.iter().map(|(r, _)| r).collect()
    }

    pub fn row_indices(&self) -> Vec<usize> {
        self.representatives.iter().map(|(r, _)| r.index).collect()
    }

    pub fn text(&self) -> Result<String> {
        serialize_partial_table(&self.header, &self.rows())
    }

    pub fn len(&self) -> usize {
        self.representatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.representatives.is_empty()
    }
}

/// `α·e_H + (1−α)·e_rᵢ` for every row, without renormalization.
pub fn header_aware_embeddings(
    header: &Embedding,
    rows: &[Embedding],
    alpha: f64,
) -> Result<Vec<Vec<f64>>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!(
            "alpha must be in [0, 1], got {alpha}"
        )));
    }
    let h = header.as_slice();
    rows.iter()
        .map(|r| {
            check_dims(h.len(), r.dim())?;
            Ok(h.iter()
                .zip(r.as_slice())
                .map(|(hv, rv)| alpha * hv + (1.0 - alpha) * rv)
                .collect())
        })
        .collect()
}

fn distinct_count(points: &[Vec<f64>]) -> usize {
    points
        .iter()
        .map(|p| p.iter().map(|v| v.to_bits()).collect::<Vec<u64>>())
        .collect::<HashSet<_>>()
        .len()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn kmeans_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &centroids[0]))
        .collect();
    while centroids.len() < k {
        // k never exceeds the distinct point count, so some weight is positive.
        let next = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(rng),
            Err(_) => d2
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0),
        };
        let c = points[next].clone();
        for (slot, p) in d2.iter_mut().zip(points) {
            *slot = slot.min(squared_distance(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn means(points: &[Vec<f64>], labels: &[usize], k: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        for v in s.iter_mut() {
            *v /= n as f64;
        }
    }
    sums
}

/// Gives every empty cluster the point farthest from its own centroid,
/// taken from a cluster that can spare it.
fn repair_empty(points: &[Vec<f64>], labels: &mut [usize], centroids: &mut [Vec<f64>]) {
    let k = centroids.len();
    loop {
        let mut sizes = vec![0usize; k];
        for &l in labels.iter() {
            sizes[l] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let donor = points
            .iter()
            .enumerate()
            .filter(|(i, _)| sizes[labels[*i]] > 1)
            .map(|(i, p)| (i, squared_distance(p, &centroids[labels[i]])))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .expect("n >= k guarantees a cluster with two members");
        labels[donor] = empty;
        centroids[empty] = points[donor].clone();
    }
}

/// Lloyd's algorithm with seeded k-means++ initialization.
///
/// Uses `min(k, distinct points)` clusters and stops once no centroid moves
/// more than `tol`. Output is a pure function of `(points, k, seed,
/// max_iters, tol)`; returned centroids are the means of their members.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<ClusterAssignment> {
    if points.is_empty() {
        return Err(Error::Empty("k-means needs at least one point"));
    }
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    let dim = points[0].len();
    for p in points {
        check_dims(dim, p.len())?;
    }
    let k_eff = k.min(distinct_count(points));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(points, k_eff, &mut rng);
    let mut labels = vec![0usize; points.len()];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iters.max(1) {
        iterations += 1;
        for (l, p) in labels.iter_mut().zip(points) {
            *l = nearest(p, &centroids).0;
        }
        repair_empty(points, &mut labels, &mut centroids);
        let updated = means(points, &labels, k_eff, dim);
        let shift = centroids
            .iter()
            .zip(&updated)
            .map(|(a, b)| squared_distance(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        if shift <= tol {
            converged = true;
            break;
        }
    }

    Ok(ClusterAssignment {
        labels,
        centroids,
        k_effective: k_eff,
        iterations,
        converged,
    })
}

fn check_assignment(points: &[Vec<f64>], n_rows: usize, a: &ClusterAssignment) -> Result<()> {
    let bad = |msg: String| Err(Error::InconsistentAssignment(msg));
    if points.len() != n_rows {
        return bad(format!("{} points for {} rows", points.len(), n_rows));
    }
    if a.labels.len() != points.len() {
        return bad(format!(
            "{} labels for {} points",
            a.labels.len(),
            points.len()
        ));
    }
    if a.centroids.len() != a.k_effective {
        return bad(format!(
            "{} centroids for k_effective {}",
            a.centroids.len(),
            a.k_effective
        ));
    }
    if let Some(l) = a.labels.iter().find(|&&l| l >= a.k_effective) {
        return bad(format!("label {l} out of range 0..{}", a.k_effective));
    }
    if let Some(j) = a.cluster_sizes().iter().position(|&s| s == 0) {
        return bad(format!("cluster {j} is empty"));
    }
    Ok(())
}

/// Picks, per cluster, the member with the smallest squared distance to
/// the centroid. Ties go to the smaller original row index.
pub fn select_representatives(
    table_id: &str,
    header: &[String],
    points: &[Vec<f64>],
    rows: &[Row],
    assignment: &ClusterAssignment,
) -> Result<PartialTable> {
    check_assignment(points, rows.len(), assignment)?;
    let mut best: Vec<Option<(f64, usize, usize)>> = vec![None; assignment.k_effective];
    for (i, (p, &label)) in points.iter().zip(&assignment.labels).enumerate() {
        let d = squared_distance(p, &assignment.centroids[label]);
        let candidate = (d, rows[i].index, i);
        let slot = &mut best[label];
        let better = match slot {
            None => true,
            Some((bd, bidx, _)) => d < *bd || (d == *bd && rows[i].index < *bidx),
        };
        if better {
            *slot = Some(candidate);
        }
    }
    let mut representatives: Vec<(Row, usize)> = best
        .into_iter()
        .enumerate()
        .map(|(j, b)| {
            let (_, _, i) = b.expect("nonempty cluster");
            (rows[i].clone(), j)
        })
        .collect();
    representatives.sort_by_key(|(r, _)| r.index);
    Ok(PartialTable {
        table_id: table_id.to_string(),
        header: header.to_vec(),
        representatives,
    })
}

/// One sub-table per cluster with the parent header and the cluster's rows
/// in original order. Sub-table ids are `"{parent}#c{j}"`.
pub fn cluster_subtables(table: &Table, assignment: &ClusterAssignment) -> Result<Vec<Table>> {
    if assignment.labels.len() != table.num_rows() {
        return Err(Error::InconsistentAssignment(format!(
            "{} labels for {} rows",
            assignment.labels.len(),
            table.num_rows()
        )));
    }
    let mut buckets: Vec<Vec<Row>> = vec![Vec::new(); assignment.k_effective];
    for (row, &label) in table.rows().iter().zip(&assignment.labels) {
        buckets
            .get_mut(label)
            .ok_or_else(|| Error::InconsistentAssignment(format!("label {label} out of range")))?
            .push(row.clone());
    }
    Ok(buckets
        .into_iter()
        .enumerate()
        .map(|(j, rows)| table.subtable(format!("{}#c{j}", table.id()), rows))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> Embedding {
        Embedding::normalize(v.to_vec()).unwrap()
    }

    fn rows(n: usize) -> Vec<Row> {
        (0..n)
            .map(|i| Row {
                index: i,
                cells: vec![format!("r{i}")],
            })
            .collect()
    }

    #[test]
    fn header_mix_arithmetic() {
        let h = unit(&[1.0, 0.0, 0.0]);
        let r = unit(&[0.0, 1.0, 0.0]);
        let out = header_aware_embeddings(&h, std::slice::from_ref(&r), 0.2).unwrap();
        assert_eq!(out[0], vec![0.2, 0.8, 0.0]);
        assert_eq!(
            header_aware_embeddings(&h, std::slice::from_ref(&r), 0.0).unwrap()[0],
            r.as_slice()
        );
        assert_eq!(
            header_aware_embeddings(&h, std::slice::from_ref(&r), 1.0).unwrap()[0],
            h.as_slice()
        );
        let short = unit(&[1.0, 0.0]);
        assert!(matches!(
            header_aware_embeddings(&h, &[short], 0.5),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn two_tight_groups() {
        let pts = vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.99, 0.01],
            vec![0.01, 0.99],
        ];
        for seed in 0..20 {
            let a = kmeans(&pts, 2, seed, 100, 1e-9).unwrap();
            assert_eq!(a.k_effective, 2);
            assert_eq!(a.labels[0], a.labels[2]);
            assert_eq!(a.labels[1], a.labels[3]);
            assert_ne!(a.labels[0], a.labels[1]);
        }
    }

    #[test]
    fn identical_points_collapse_to_one_cluster() {
        let pts = vec![vec![0.5, 0.5]; 3];
        let a = kmeans(&pts, 10, 1, 100, 1e-6).unwrap();
        assert_eq!(a.k_effective, 1);
        assert_eq!(a.cluster_sizes(), vec![3]);
    }

    #[test]
    fn single_cluster_centroid_is_mean() {
        let pts = vec![vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, -1.0]];
        let a = kmeans(&pts, 1, 9, 100, 1e-6).unwrap();
        assert!((a.centroids[0][0] - 2.0).abs() < 1e-12);
        assert!((a.centroids[0][1] - 1.0).abs() < 1e-12);
        assert!(a.converged);
    }

    #[test]
    fn deterministic_for_seed() {
        let pts: Vec<Vec<f64>> = (0..30)
            .map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 1.3).cos()])
            .collect();
        assert_eq!(
            kmeans(&pts, 4, 5, 100, 1e-6).unwrap(),
            kmeans(&pts, 4, 5, 100, 1e-6).unwrap()
        );
    }

    #[test]
    fn empty_input_rejected() {
        assert!(kmeans(&[], 2, 0, 10, 1e-6).is_err());
    }

    #[test]
    fn representative_argmin_and_ties() {
        let rs = rows(3);
        let header = vec!["K".to_string()];
        // distances 0.5, 0.1, 0.9 from centroid at 0
        let pts = vec![vec![0.5], vec![0.1], vec![0.9]];
        let a = ClusterAssignment {
            labels: vec![0, 0, 0],
            centroids: vec![vec![0.0]],
            k_effective: 1,
            iterations: 1,
            converged: true,
        };
        let p = select_representatives("t", &header, &pts, &rs, &a).unwrap();
        assert_eq!(p.row_indices(), vec![1]);

        let tie = vec![vec![1.0], vec![-1.0], vec![2.0]];
        let p = select_representatives("t", &header, &tie, &rs, &a).unwrap();
        assert_eq!(p.row_indices(), vec![0]);

        let single = ClusterAssignment {
            labels: vec![1, 0, 1],
            centroids: vec![vec![9.0], vec![0.0]],
            k_effective: 2,
            iterations: 1,
            converged: true,
        };
        let p = select_representatives("t", &header, &pts, &rs, &single).unwrap();
        assert_eq!(p.row_indices(), vec![0, 1]);
        assert_eq!(p.representatives[1].1, 0);
    }

    #[test]
    fn inconsistent_assignment_detected() {
        let rs = rows(2);
        let header = vec!["K".to_string()];
        let pts = vec![vec![0.0], vec![1.0]];
        let a = ClusterAssignment {
            labels: vec![0, 2],
            centroids: vec![vec![0.0]],
            k_effective: 1,
            iterations: 1,
            converged: true,
        };
        assert!(matches!(
            select_representatives("t", &header, &pts, &rs, &a),
            Err(Error::InconsistentAssignment(_))
        ));
        assert!(matches!(
            select_representatives("t", &header, &pts[..1], &rs, &a),
            Err(Error::InconsistentAssignment(_))
        ));
    }

    #[test]
    fn subtables_partition_rows() {
        let table = Table::new(
            "t",
            vec!["K".into()],
            (0..10).map(|i| vec![i.to_string()]).collect(),
        )
        .unwrap();
        let labels = vec![0, 1, 0, 2, 0, 1, 0, 2, 0, 1];
        let a = ClusterAssignment {
            labels,
            centroids: vec![vec![0.0]; 3],
            k_effective: 3,
            iterations: 1,
            converged: true,
        };
        let subs = cluster_subtables(&table, &a).unwrap();
        let sizes: Vec<usize> = subs.iter().map(Table::num_rows).collect();
        assert_eq!(sizes, vec![5, 3, 2]);
        assert!(subs.iter().all(|s| s.header() == table.header()));
        let mut all: Vec<usize> = subs
            .iter()
            .flat_map(|s| s.rows().iter().map(|r| r.index))
            .collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());

        let one = ClusterAssignment {
            labels: vec![0; 10],
            centroids: vec![vec![0.0]],
            k_effective: 1,
            iterations: 1,
            converged: true,
        };
        assert_eq!(
            cluster_subtables(&table, &one).unwrap()[0].rows(),
            table.rows()
        );
    }
}
