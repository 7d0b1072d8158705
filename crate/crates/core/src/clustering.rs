//! Topic clusters over image embeddings.
//!
//! Lloyd's k-means with k-means++ seeding. Centroid sums and SSE are reduced
//! over fixed-size point chunks combined in chunk order, so serial and
//! parallel runs produce bit-identical results.

use std::collections::HashMap;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CaptionedImage, EmbeddingMatrix, ImageId};
use crate::rng::{rng_from_seed, PipelineRng};

pub const DEFAULT_K: usize = 4096;
pub const DEFAULT_MIN_CLUSTER_SIZE: usize = 32;
pub const DEFAULT_GROUP_SIZES: [usize; 3] = [2, 3, 4];

const REDUCE_CHUNK: usize = 1024;

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("k-means needs at least K={k} points, got {points}")]
    TooFewPoints { points: usize, k: usize },
    #[error("K must be positive")]
    ZeroK,
    #[error("non-finite embedding component in image {0}")]
    NonFinite(ImageId),
    #[error("corpus too small after pruning")]
    CorpusTooSmall,
    #[error("invalid group size choices {0:?}")]
    InvalidGroupSizes(Vec<usize>),
    #[error("image {0} is not in the catalog")]
    UnknownImage(ImageId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub k: usize,
    pub max_iters: usize,
    /// Stop once the largest centroid shift falls below this.
    pub tolerance: f64,
    pub seed: u64,
    /// L2-normalise vectors before clustering.
    pub normalize: bool,
    /// Use rayon for the assignment and reduction steps.
    pub parallel: bool,
}

impl Default for KMeansParams {
    fn default() -> Self {
        KMeansParams { k: DEFAULT_K, max_iters: 100, tolerance: 1e-4, seed: 0, normalize: false, parallel: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicCluster {
    pub cluster_id: u32,
    pub centroid: Vec<f32>,
    pub member_ids: Vec<ImageId>,
}

impl TopicCluster {
    pub fn len(&self) -> usize {
        self.member_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansOutcome {
    pub clusters: Vec<TopicCluster>,
    /// Cluster index of each input row.
    pub assignments: Vec<usize>,
    /// Within-cluster SSE after every update step, then after the final assignment.
    pub sse_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl KMeansOutcome {
    pub fn final_sse(&self) -> f64 {
        self.sse_history.last().copied().unwrap_or(0.0)
    }
}

struct Points {
    dim: usize,
    data: Vec<f64>,
}

impl Points {
    fn len(&self) -> usize {
        self.data.len() / self.dim.max(1)
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign(points: &Points, centroids: &[Vec<f64>], parallel: bool) -> Vec<(usize, f64)> {
    let n = points.len();
    if parallel {
        (0..n).into_par_iter().map(|i| nearest(points.row(i), centroids)).collect()
    } else {
        (0..n).map(|i| nearest(points.row(i), centroids)).collect()
    }
}

fn chunked_sum(values: &[f64], parallel: bool) -> f64 {
    let partial: Vec<f64> = if parallel {
        values.par_chunks(REDUCE_CHUNK).map(|c| c.iter().sum()).collect()
    } else {
        values.chunks(REDUCE_CHUNK).map(|c| c.iter().sum()).collect()
    };
    partial.into_iter().sum()
}

/// Per-cluster coordinate sums and counts.
fn centroid_sums(points: &Points, labels: &[usize], k: usize, parallel: bool) -> (Vec<f64>, Vec<usize>) {
    let dim = points.dim;
    let chunk_sums = |start: usize| {
        let end = (start + REDUCE_CHUNK).min(labels.len());
        let mut sums = vec![0f64; k * dim];
        let mut counts = vec![0usize; k];
        for i in start..end {
            let c = labels[i];
            counts[c] += 1;
            for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        (sums, counts)
    };
    let starts: Vec<usize> = (0..labels.len()).step_by(REDUCE_CHUNK).collect();
    let partials: Vec<(Vec<f64>, Vec<usize>)> = if parallel {
        starts.par_iter().map(|&s| chunk_sums(s)).collect()
    } else {
        starts.iter().map(|&s| chunk_sums(s)).collect()
    };
    let mut sums = vec![0f64; k * dim];
    let mut counts = vec![0usize; k];
    for (ps, pc) in partials {
        sums.iter_mut().zip(ps).for_each(|(a, b)| *a += b);
        counts.iter_mut().zip(pc).for_each(|(a, b)| *a += b);
    }
    (sums, counts)
}

fn sse(points: &Points, labels: &[usize], centroids: &[Vec<f64>], parallel: bool) -> f64 {
    let per_point: Vec<f64> = (0..labels.len()).map(|i| sq_dist(points.row(i), &centroids[labels[i]])).collect();
    chunked_sum(&per_point, parallel)
}

/// One D²-weighted draw: index `i` with probability `d2[i] / sum`.
fn d2_draw(d2: &[f64], rng: &mut PipelineRng) -> usize {
    let total: f64 = d2.iter().sum();
    if total <= 0.0 {
        return rng.random_range(0..d2.len());
    }
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &w) in d2.iter().enumerate() {
        acc += w;
        if w > 0.0 && acc > target {
            return i;
        }
    }
    // rounding can leave target just past the last positive weight
    d2.iter().rposition(|&w| w > 0.0).expect("positive total")
}

/// Greedy k-means++: each new centre is the best of `2 + ln k` D²-weighted
/// candidates, judged by the potential it leaves. Plain k-means++ lands two
/// seeds in one well-separated blob often enough to matter.
fn kmeans_plus_plus(points: &Points, k: usize, rng: &mut PipelineRng) -> Vec<Vec<f64>> {
    let n = points.len();
    let trials = 2 + (k as f64).ln().floor() as usize;
    let first = rng.random_range(0..n);
    let mut centroids = vec![points.row(first).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), &centroids[0])).collect();
    while centroids.len() < k {
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let c = d2_draw(&d2, rng);
            let updated: Vec<f64> = (0..n).map(|i| d2[i].min(sq_dist(points.row(i), points.row(c)))).collect();
            let potential: f64 = updated.iter().sum();
            if best.as_ref().is_none_or(|(p, _, _)| potential < *p) {
                best = Some((potential, c, updated));
            }
        }
        let (_, pick, updated) = best.expect("at least one trial");
        d2 = updated;
        centroids.push(points.row(pick).to_vec());
    }
    centroids
}

/// Move points into empty clusters. Each empty cluster (ascending id) takes the
/// point farthest from its centroid among clusters with more than one member,
/// lowest row index on ties, and is re-centred on it.
fn repair_empty(
    points: &Points,
    labels: &mut [usize],
    dists: &mut [f64],
    counts: &mut [usize],
    centroids: &mut [Vec<f64>],
) {
    for c in 0..counts.len() {
        if counts[c] != 0 {
            continue;
        }
        let mut donor: Option<usize> = None;
        for i in 0..labels.len() {
            if counts[labels[i]] > 1 && donor.is_none_or(|d| dists[i] > dists[d]) {
                donor = Some(i);
            }
        }
        let Some(i) = donor else { continue };
        counts[labels[i]] -= 1;
        labels[i] = c;
        counts[c] = 1;
        dists[i] = 0.0;
        centroids[c] = points.row(i).to_vec();
    }
}

/// Cluster the rows of `embeddings` into `params.k` groups.
pub fn kmeans(embeddings: &EmbeddingMatrix, params: &KMeansParams) -> Result<KMeansOutcome, ClusterError> {
    let (n, k, dim) = (embeddings.len(), params.k, embeddings.dimension);
    if k == 0 {
        return Err(ClusterError::ZeroK);
    }
    if n < k {
        return Err(ClusterError::TooFewPoints { points: n, k });
    }
    let mut data = Vec::with_capacity(n * dim);
    for (id, row) in embeddings.rows() {
        if row.iter().any(|x| !x.is_finite()) {
            return Err(ClusterError::NonFinite(id.clone()));
        }
        let start = data.len();
        data.extend(row.iter().map(|&x| f64::from(x)));
        if params.normalize {
            let norm = data[start..].iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                data[start..].iter_mut().for_each(|x| *x /= norm);
            }
        }
    }
    let points = Points { dim, data };
    let par = params.parallel;

    let mut rng = rng_from_seed(params.seed);
    let mut centroids = kmeans_plus_plus(&points, k, &mut rng);
    let mut labels = vec![0usize; n];
    let mut sse_history = Vec::new();
    let mut iterations = 0;
    let mut converged = false;

    while iterations < params.max_iters {
        iterations += 1;
        let assigned = assign(&points, &centroids, par);
        let mut dists: Vec<f64> = assigned.iter().map(|a| a.1).collect();
        labels = assigned.into_iter().map(|a| a.0).collect();
        let mut counts = vec![0usize; k];
        labels.iter().for_each(|&c| counts[c] += 1);
        repair_empty(&points, &mut labels, &mut dists, &mut counts, &mut centroids);

        let (sums, counts) = centroid_sums(&points, &labels, k, par);
        let mut shift = 0f64;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let inv = counts[c] as f64;
            let updated: Vec<f64> = sums[c * dim..(c + 1) * dim].iter().map(|s| s / inv).collect();
            shift = shift.max(sq_dist(&updated, &centroids[c]).sqrt());
            centroids[c] = updated;
        }
        sse_history.push(sse(&points, &labels, &centroids, par));
        if shift < params.tolerance {
            converged = true;
            break;
        }
    }

    // final assignment against the final centroids
    let assigned = assign(&points, &centroids, par);
    labels = assigned.iter().map(|a| a.0).collect();
    sse_history.push(chunked_sum(&assigned.iter().map(|a| a.1).collect::<Vec<_>>(), par));

    let mut members: Vec<Vec<ImageId>> = vec![Vec::new(); k];
    for (i, &c) in labels.iter().enumerate() {
        members[c].push(embeddings.ids[i].clone());
    }
    let clusters = centroids
        .into_iter()
        .zip(members)
        .enumerate()
        .map(|(c, (centroid, member_ids))| TopicCluster {
            cluster_id: c as u32,
            centroid: centroid.into_iter().map(|x| x as f32).collect(),
            member_ids,
        })
        .collect();
    Ok(KMeansOutcome { clusters, assignments: labels, sse_history, iterations, converged })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrunedCluster {
    pub cluster_id: u32,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PruneOutcome {
    pub survivors: Vec<TopicCluster>,
    pub pruned: Vec<PrunedCluster>,
    /// Members of pruned clusters; kept in the corpus but never sampled.
    pub unsampleable: Vec<ImageId>,
}

/// Keep clusters with at least `min_size` members.
pub fn prune_outlier_clusters(clusters: Vec<TopicCluster>, min_size: usize) -> PruneOutcome {
    let mut out = PruneOutcome::default();
    for cluster in clusters {
        if cluster.len() >= min_size {
            out.survivors.push(cluster);
        } else {
            out.pruned.push(PrunedCluster { cluster_id: cluster.cluster_id, size: cluster.len() });
            out.unsampleable.extend(cluster.member_ids);
        }
    }
    out
}

/// Images chosen for one conversation, all from one cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageGroup {
    pub cluster_id: u32,
    pub images: Vec<CaptionedImage>,
}

/// Draws image groups: a cluster uniformly from the eligible survivors, a
/// group size uniformly from the configured choices, then that many distinct
/// members uniformly without replacement.
#[derive(Debug)]
pub struct GroupSampler<'a> {
    eligible: Vec<&'a TopicCluster>,
    sizes: Vec<usize>,
}

impl<'a> GroupSampler<'a> {
    /// Clusters smaller than the largest group size are not eligible.
    pub fn new(survivors: &'a [TopicCluster], sizes: &[usize]) -> Result<Self, ClusterError> {
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(ClusterError::InvalidGroupSizes(sizes.to_vec()));
        }
        let largest = *sizes.iter().max().expect("nonempty");
        let eligible: Vec<_> = survivors.iter().filter(|c| c.len() >= largest).collect();
        if eligible.is_empty() {
            return Err(ClusterError::CorpusTooSmall);
        }
        Ok(GroupSampler { eligible, sizes: sizes.to_vec() })
    }

    pub fn eligible_clusters(&self) -> usize {
        self.eligible.len()
    }

    /// Returns the cluster id and the chosen member ids, in draw order.
    pub fn sample_ids(&self, rng: &mut impl Rng) -> (u32, Vec<ImageId>) {
        let cluster = self.eligible[rng.random_range(0..self.eligible.len())];
        let n = self.sizes[rng.random_range(0..self.sizes.len())];
        let picks = index::sample(rng, cluster.len(), n);
        (cluster.cluster_id, picks.into_iter().map(|i| cluster.member_ids[i].clone()).collect())
    }

    /// Like [`sample_ids`](Self::sample_ids), resolving ids through `catalog`.
    /// Embeddings are dropped from the returned images.
    pub fn sample(
        &self,
        catalog: &HashMap<ImageId, CaptionedImage>,
        rng: &mut impl Rng,
    ) -> Result<ImageGroup, ClusterError> {
        let (cluster_id, ids) = self.sample_ids(rng);
        let images = ids
            .into_iter()
            .map(|id| {
                catalog
                    .get(&id)
                    .map(|img| CaptionedImage { embedding: None, ..img.clone() })
                    .ok_or(ClusterError::UnknownImage(id))
            })
            .collect::<Result<_, _>>()?;
        Ok(ImageGroup { cluster_id, images })
    }
}

/// One image group drawn with a generator seeded from `rng_seed`.
pub fn sample_image_group(
    survivors: &[TopicCluster],
    catalog: &HashMap<ImageId, CaptionedImage>,
    sizes: &[usize],
    rng_seed: u64,
) -> Result<ImageGroup, ClusterError> {
    GroupSampler::new(survivors, sizes)?.sample(catalog, &mut rng_from_seed(rng_seed))
}
