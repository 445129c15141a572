//! Selection of a final kernel estimate from the multi-start solution set.
//!
//! High-cost runs are rejected by an exact 1-D Otsu threshold on the final
//! costs, the survivors are clustered on their per-region peak latencies
//! with complete-linkage agglomerative clustering, and the cluster with the
//! smallest diameter-to-size ratio wins. The reported kernels are the
//! sample-wise mean of the winning cluster's curves, normalized to unit
//! peak.

use ndarray::Array2;
use serde::Serialize;

use crate::btd::BtdSolution;
use crate::error::{Error, Result};
use crate::hrf::SampledFilter;

/// Exact Otsu threshold over real-valued samples.
///
/// Candidate thresholds are the midpoints between consecutive sorted unique
/// values; the one maximizing the between-class variance wins. Returns
/// `None` when fewer than two distinct finite values exist.
pub fn otsu_threshold(values: &[f64]) -> Option<f64> {
    let mut sorted: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if sorted.len() != values.len() {
        return None;
    }
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sorted.dedup();
    if sorted.len() < 2 {
        return None;
    }

    let n = values.len() as f64;
    let total: f64 = values.iter().sum();
    let mut best = (f64::NEG_INFINITY, 0.0);
    for pair in sorted.windows(2) {
        let candidate = 0.5 * (pair[0] + pair[1]);
        let (mut count_lo, mut sum_lo) = (0.0, 0.0);
        for &v in values {
            if v <= candidate {
                count_lo += 1.0;
                sum_lo += v;
            }
        }
        let count_hi = n - count_lo;
        let w_lo = count_lo / n;
        let w_hi = count_hi / n;
        let mean_lo = sum_lo / count_lo;
        let mean_hi = (total - sum_lo) / count_hi;
        let var_between = w_lo * w_hi * (mean_lo - mean_hi).powi(2);
        if var_between > best.0 {
            best = (var_between, candidate);
        }
    }
    Some(best.1)
}

/// Reject runs whose final cost lies above the Otsu threshold.
///
/// Returns the retained run indices in their original order. When all costs
/// are equal nothing is rejected. The global best-cost run can never be
/// rejected since the threshold sits strictly between cost values.
pub fn otsu_reject(costs: &[f64]) -> Result<Vec<usize>> {
    if costs.len() < 2 {
        return Err(Error::Stability(format!(
            "need at least 2 runs, got {}",
            costs.len()
        )));
    }
    let retained: Vec<usize> = match otsu_threshold(costs) {
        None => (0..costs.len()).collect(),
        Some(threshold) => costs
            .iter()
            .enumerate()
            .filter(|(_, &c)| c <= threshold)
            .map(|(i, _)| i)
            .collect(),
    };
    if retained.len() < 2 {
        return Err(Error::Stability(format!(
            "only {} runs survive outlier rejection",
            retained.len()
        )));
    }
    Ok(retained)
}

/// Peak-latency feature matrix over the retained runs: one row per run, one
/// column per region.
#[derive(Debug, Clone)]
pub struct SolutionFeatures {
    pub latencies: Array2<f64>,
    /// Original run index of each feature row.
    pub run_indices: Vec<usize>,
}

/// Analytic peak latencies of the retained solutions.
pub fn build_features(solutions: &[BtdSolution], retained: &[usize]) -> Result<SolutionFeatures> {
    if retained.is_empty() {
        return Err(Error::Stability("no retained runs".into()));
    }
    let m = solutions[retained[0]].variables.thetas.len();
    let mut latencies = Array2::zeros((retained.len(), m));
    for (row, &run) in retained.iter().enumerate() {
        for (col, theta) in solutions[run].variables.thetas.iter().enumerate() {
            let pl = (theta.shape - 1.0) / theta.rate;
            if !pl.is_finite() || pl <= 0.0 {
                return Err(Error::Stability(format!(
                    "run {run} has non-positive peak latency {pl}"
                )));
            }
            latencies[(row, col)] = pl;
        }
    }
    Ok(SolutionFeatures {
        latencies,
        run_indices: retained.to_vec(),
    })
}

/// One agglomerative merge, SciPy-style: clusters `left` and `right` (ids
/// below `n` are singletons) joined at `distance` into a cluster of `size`
/// observations with id `n + step`.
#[derive(Debug, Clone, Serialize)]
pub struct MergeStep {
    pub left: usize,
    pub right: usize,
    pub distance: f64,
    pub size: usize,
}

/// Flat clustering obtained by cutting the dendrogram.
#[derive(Debug, Clone)]
pub struct Clustering {
    /// Cluster id per observation, contiguous from 0.
    pub assignments: Vec<usize>,
    pub n_clusters: usize,
    /// Full merge history (beyond the cut), for export.
    pub merges: Vec<MergeStep>,
}

fn euclidean(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Complete-linkage agglomerative clustering of the feature rows, cut at
/// `cut` (links merged while their distance is <= cut).
pub fn cluster_latencies(features: &SolutionFeatures, cut: f64) -> Result<Clustering> {
    let n = features.latencies.nrows();
    if n < 2 {
        return Err(Error::Stability(format!(
            "need at least 2 observations to cluster, got {n}"
        )));
    }

    // Active clusters: (dendrogram id, member observation indices).
    let mut active: Vec<(usize, Vec<usize>)> = (0..n).map(|i| (i, vec![i])).collect();
    let mut merges = Vec::with_capacity(n - 1);
    let mut assignments_groups: Vec<Vec<usize>> = Vec::new();
    let mut cut_applied = false;

    let complete = |a: &[usize], b: &[usize]| -> f64 {
        let mut worst = 0.0f64;
        for &i in a {
            for &j in b {
                worst = worst.max(euclidean(
                    features.latencies.row(i),
                    features.latencies.row(j),
                ));
            }
        }
        worst
    };

    for step in 0..n - 1 {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..active.len() {
            for j in i + 1..active.len() {
                let d = complete(&active[i].1, &active[j].1);
                if best.is_none() || d < best.unwrap().0 {
                    best = Some((d, i, j));
                }
            }
        }
        let (distance, i, j) = best.expect("at least two active clusters");

        // Complete linkage is monotone, so the first merge above the cut
        // freezes the flat clustering.
        if distance > cut && !cut_applied {
            assignments_groups = active.iter().map(|(_, members)| members.clone()).collect();
            cut_applied = true;
        }

        let (id_j, members_j) = active.remove(j);
        let (id_i, members_i) = &mut active[i];
        let mut merged = members_i.clone();
        merged.extend(members_j);
        merges.push(MergeStep {
            left: *id_i,
            right: id_j,
            distance,
            size: merged.len(),
        });
        *id_i = n + step;
        *members_i = merged;
    }
    if !cut_applied {
        assignments_groups = active.iter().map(|(_, members)| members.clone()).collect();
    }

    let n_clusters = assignments_groups.len();
    let mut assignments = vec![0usize; n];
    for (cluster, members) in assignments_groups.iter().enumerate() {
        for &obs in members {
            assignments[obs] = cluster;
        }
    }
    Ok(Clustering {
        assignments,
        n_clusters,
        merges,
    })
}

/// Complete diameter distance over member count: the largest pairwise
/// Euclidean distance within the cluster divided by its size. Zero for
/// singletons (empty pair set).
pub fn intracluster_distance(points: &Array2<f64>) -> f64 {
    let n = points.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut diameter = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            diameter = diameter.max(euclidean(points.row(i), points.row(j)));
        }
    }
    diameter / n as f64
}

/// Per-cluster summary used in selection reports.
#[derive(Debug, Clone, Serialize)]
pub struct ClusterSummary {
    pub id: usize,
    /// Original run indices of the members.
    pub members: Vec<usize>,
    pub intracluster_distance: f64,
}

/// Outcome of the stability selection.
#[derive(Debug, Clone)]
pub struct ClusterReport {
    /// Runs surviving cost-based outlier rejection.
    pub retained: Vec<usize>,
    /// Cluster id per retained run (parallel to `retained`).
    pub assignments: Vec<usize>,
    pub clusters: Vec<ClusterSummary>,
    /// Id of the selected cluster.
    pub selected: usize,
    /// Sample-wise mean of the selected cluster's kernels, unit peak.
    pub mean_hrfs: Vec<SampledFilter>,
    pub merges: Vec<MergeStep>,
}

impl ClusterReport {
    pub fn selected_members(&self) -> &[usize] {
        &self.clusters[self.selected].members
    }
}

/// Full selection procedure over a multi-start solution set.
///
/// Rejects high-cost runs, clusters the survivors on peak latencies, scores
/// clusters with at least two members by their intracluster distance, and
/// averages the winning cluster's sampled kernels.
pub fn select_stable(solutions: &[BtdSolution], cut: f64) -> Result<ClusterReport> {
    let costs: Vec<f64> = solutions.iter().map(|s| s.final_cost).collect();
    let retained = otsu_reject(&costs)?;
    let features = build_features(solutions, &retained)?;
    let clustering = cluster_latencies(&features, cut)?;

    let mut clusters = Vec::with_capacity(clustering.n_clusters);
    for cluster in 0..clustering.n_clusters {
        let rows: Vec<usize> = (0..retained.len())
            .filter(|&r| clustering.assignments[r] == cluster)
            .collect();
        let mut points = Array2::zeros((rows.len(), features.latencies.ncols()));
        for (k, &r) in rows.iter().enumerate() {
            points.row_mut(k).assign(&features.latencies.row(r));
        }
        clusters.push(ClusterSummary {
            id: cluster,
            members: rows.iter().map(|&r| retained[r]).collect(),
            intracluster_distance: intracluster_distance(&points),
        });
    }

    // Singletons always score zero by the formula, so they are ineligible;
    // the procedure looks for recurrence across runs.
    let selected = clusters
        .iter()
        .filter(|c| c.members.len() >= 2)
        .min_by(|a, b| {
            a.intracluster_distance
                .partial_cmp(&b.intracluster_distance)
                .unwrap()
        })
        .map(|c| c.id);
    let selected = match selected {
        Some(id) => id,
        None => {
            let sizes: Vec<usize> = clusters.iter().map(|c| c.members.len()).collect();
            return Err(Error::Stability(format!(
                "no cluster with >= 2 members; cluster sizes {sizes:?}, \
                 retained runs {retained:?}, costs {costs:?}"
            )));
        }
    };

    let mean_hrfs = mean_unit_peak_hrfs(solutions, &clusters[selected].members)?;

    Ok(ClusterReport {
        retained,
        assignments: clustering.assignments,
        clusters,
        selected,
        mean_hrfs,
        merges: clustering.merges,
    })
}

/// Sample-wise mean of the member kernels per region, normalized to unit
/// positive peak.
fn mean_unit_peak_hrfs(solutions: &[BtdSolution], members: &[usize]) -> Result<Vec<SampledFilter>> {
    let first = &solutions[members[0]].sampled_hrfs;
    let m = first.len();
    let len = first[0].len();
    let dt = first[0].dt;
    let mut means = Vec::with_capacity(m);
    for region in 0..m {
        let mut taps = vec![0.0; len];
        for &run in members {
            let f = &solutions[run].sampled_hrfs[region];
            if f.len() != len {
                return Err(Error::Stability(
                    "kernel length mismatch across runs".into(),
                ));
            }
            for (acc, &v) in taps.iter_mut().zip(&f.taps) {
                *acc += v;
            }
        }
        for v in taps.iter_mut() {
            *v /= members.len() as f64;
        }
        means.push(SampledFilter::new(taps, dt)?.normalized_to_unit_peak()?);
    }
    Ok(means)
}
