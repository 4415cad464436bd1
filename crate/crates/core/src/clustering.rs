//! Coarse layouts from self-attention features: seeded k-means per frame and
//! cross-frame cluster matching.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng as _;

use crate::diffusion::Trajectory;
use crate::error::{Error, Result};
use crate::layout::{LayoutSet, Mask, RegionSpec};
use crate::rng::SeedStream;
use crate::scalar::Scalar;

/// Per-frame feature matrices, tokens x feature dim.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack<T> {
    pub frames: Vec<Array2<T>>,
}

pub fn collect_features<T: Scalar>(traj: &Trajectory<T>, block: usize, step: usize) -> Result<FeatureStack<T>> {
    let all = traj
        .features
        .get(&(block, step))
        .ok_or(Error::FeaturesNotCaptured { block, step })?;
    let n = traj.clean().dim().0;
    let per = all.nrows() / n;
    Ok(FeatureStack {
        frames: all
            .axis_chunks_iter(Axis(0), per)
            .map(|c| c.to_owned())
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub labels: Vec<usize>,
    pub centroids: Array2<f64>,
    /// Inertia after each assignment pass.
    pub inertia: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid per point, ties to the lower index.
fn assign(x: &Array2<f64>, c: &Array2<f64>) -> (Vec<usize>, Vec<f64>) {
    x.outer_iter()
        .map(|p| {
            c.outer_iter()
                .enumerate()
                .map(|(j, cj)| (j, sq_dist(p, cj)))
                .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
        })
        .unzip()
}

fn plus_plus(x: &Array2<f64>, k: usize, rng: &mut crate::rng::Rng) -> Array2<f64> {
    let n = x.nrows();
    let mut c = Array2::zeros((k, x.ncols()));
    c.row_mut(0).assign(&x.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = x.outer_iter().map(|p| sq_dist(p, c.row(0))).collect();
    for j in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            d2.iter()
                .position(|d| {
                    r -= d;
                    r < 0.0
                })
                .unwrap_or_else(|| d2.iter().rposition(|d| *d > 0.0).unwrap_or(0))
        } else {
            rng.random_range(0..n)
        };
        c.row_mut(j).assign(&x.row(pick));
        for (i, p) in x.outer_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, c.row(j)));
        }
    }
    c
}

/// Lloyd's algorithm from a k-means++ start. Empty clusters are moved to the
/// point farthest from its centroid when that distance is positive.
pub fn kmeans<T: Scalar>(features: ArrayView2<T>, k: usize, seed: u64, max_iters: usize, tol: f64) -> Result<KMeans> {
    let n = features.nrows();
    if k == 0 || k > n {
        return Err(Error::TooManyClusters { k, points: n });
    }
    let x = features.mapv(|v| v.as_f64());
    let mut rng = SeedStream::new(seed).substream("kmeans");
    let mut centroids = plus_plus(&x, k, &mut rng);
    let mut inertia: Vec<f64> = Vec::new();
    let mut iterations = 0;
    let mut done = false;
    loop {
        let (labels, dist) = assign(&x, &centroids);
        let total: f64 = dist.iter().sum();
        if let Some(prev) = inertia.last() {
            assert!(
                total <= prev + 1e-9 * prev.max(1.0),
                "k-means inertia increased: {prev} -> {total}"
            );
        }
        inertia.push(total);
        if done || iterations == max_iters {
            return Ok(KMeans {
                labels,
                centroids,
                inertia,
                iterations,
            });
        }
        iterations += 1;
        let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
        let mut counts = vec![0usize; k];
        for (p, &l) in x.outer_iter().zip(&labels) {
            sums.row_mut(l).scaled_add(1.0, &p);
            counts[l] += 1;
        }
        let mut next = centroids.clone();
        let mut taken = vec![false; n];
        for j in 0..k {
            if counts[j] > 0 {
                next.row_mut(j).assign(&(&sums.row(j) / counts[j] as f64));
                continue;
            }
            let far = (0..n)
                .filter(|i| !taken[*i])
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if dist[b] >= dist[i] => Some(b),
                    _ => Some(i),
                });
            if let Some(i) = far.filter(|i| dist[*i] > 0.0) {
                next.row_mut(j).assign(&x.row(i));
                taken[i] = true;
            }
        }
        let shift = centroids
            .outer_iter()
            .zip(next.outer_iter())
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        done = shift < tol;
    }
}

/// Adjusted Rand index of two labelings of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let n = a.len();
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut ra: BTreeMap<usize, u64> = BTreeMap::new();
    let mut rb: BTreeMap<usize, u64> = BTreeMap::new();
    for (x, y) in a.iter().zip(b) {
        *table.entry((*x, *y)).or_default() += 1;
        *ra.entry(*x).or_default() += 1;
        *rb.entry(*y).or_default() += 1;
    }
    let c2 = |v: u64| (v * v.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.values().map(|v| c2(*v)).sum();
    let sa: f64 = ra.values().map(|v| c2(*v)).sum();
    let sb: f64 = rb.values().map(|v| c2(*v)).sum();
    let total = c2(n as u64);
    let expected = if total > 0.0 { sa * sb / total } else { 0.0 };
    let max = (sa + sb) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Per-frame k-means result with frame-consistent ids after matching.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterLayout {
    pub k: usize,
    pub labels: Vec<Vec<usize>>,
    pub centroids: Vec<Array2<f64>>,
}

impl ClusterLayout {
    pub fn flat_labels(&self) -> Vec<usize> {
        self.labels.concat()
    }
}

pub fn cluster_frames<T: Scalar>(
    stack: &FeatureStack<T>,
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<ClusterLayout> {
    let mut labels = Vec::new();
    let mut centroids = Vec::new();
    for (f, x) in stack.frames.iter().enumerate() {
        let km = kmeans(x.view(), k, seed.wrapping_add(f as u64), max_iters, tol)?;
        labels.push(km.labels);
        centroids.push(km.centroids);
    }
    Ok(ClusterLayout { k, labels, centroids })
}

fn cosine(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(&b) / (na * nb)
    }
}

/// Minimum-cost perfect assignment on a square matrix (Hungarian method with
/// potentials). Returns `col_of_row`.
pub fn min_cost_assignment(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "assignment needs a square cost matrix");
    // 1-based arrays with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; n];
    for j in 1..=n {
        col_of_row[row_of[j] - 1] = j - 1;
    }
    col_of_row
}

/// For frame `f`, maps each of its cluster ids to the frame-0 id with which
/// the total centroid cosine similarity is maximal.
pub fn frame_mapping(reference: &Array2<f64>, other: &Array2<f64>) -> Vec<usize> {
    let k = reference.nrows();
    let cost = Array2::from_shape_fn((k, k), |(j, i)| -cosine(other.row(j), reference.row(i)));
    min_cost_assignment(&cost)
}

pub fn match_clusters(layout: &ClusterLayout) -> ClusterLayout {
    let mut out = layout.clone();
    let Some(reference) = layout.centroids.first() else {
        return out;
    };
    for f in 1..layout.labels.len() {
        let map = frame_mapping(reference, &layout.centroids[f]);
        out.labels[f] = layout.labels[f].iter().map(|l| map[*l]).collect();
        let mut c = layout.centroids[f].clone();
        for (j, &i) in map.iter().enumerate() {
            c.row_mut(i).assign(&layout.centroids[f].row(j));
        }
        out.centroids[f] = c;
    }
    out
}

/// Bound clusters become region masks, the rest background.
pub fn layout_from_clusters(
    clusters: &ClusterLayout,
    bindings: &BTreeMap<usize, RegionSpec>,
    resolution: (usize, usize),
) -> Result<LayoutSet> {
    let frames = clusters.labels.len();
    let mut layout = LayoutSet::new(frames, resolution)?;
    for (cid, spec) in bindings {
        if *cid >= clusters.k {
            return Err(Error::MissingCluster(*cid));
        }
        layout.add_region(spec.clone())?;
    }
    let tokens = resolution.0 * resolution.1;
    for (f, labels) in clusters.labels.iter().enumerate() {
        if labels.len() != tokens {
            return Err(Error::mismatch("cluster labels per frame", tokens, labels.len()));
        }
        for (cid, spec) in bindings {
            let mask = Mask::from_shape_fn(resolution, |(y, x)| labels[y * resolution.1 + x] == *cid);
            layout.set_mask(f, spec.id, mask)?;
        }
    }
    Ok(crate::layout::resolve_overlaps(&layout))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::RegionLevel;
    use crate::rng::normal;

    fn blobs(seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = SeedStream::new(seed).substream("blobs");
        let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for i in 0..60 {
            let c = centers[i % 3];
            pts.push(c[0] + normal::<f64>(&mut rng));
            pts.push(c[1] + normal::<f64>(&mut rng));
            truth.push(i % 3);
        }
        (Array2::from_shape_vec((60, 2), pts).unwrap(), truth)
    }

    fn ari_oracle(a: &[usize], b: &[usize]) -> f64 {
        // Pair counting over all unordered pairs.
        let n = a.len();
        let (mut ss, mut sd, mut ds, mut dd) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            for j in i + 1..n {
                match (a[i] == a[j], b[i] == b[j]) {
                    (true, true) => ss += 1.0,
                    (true, false) => sd += 1.0,
                    (false, true) => ds += 1.0,
                    (false, false) => dd += 1.0,
                }
            }
        }
        let num = 2.0 * (ss * dd - sd * ds);
        let den = (ss + sd) * (sd + dd) + (ss + ds) * (ds + dd);
        if den == 0.0 {
            1.0
        } else {
            num / den
        }
    }

    #[test]
    fn planted_blobs_recovered() {
        let (x, truth) = blobs(1);
        let km = kmeans(x.view(), 3, 7, 100, 1e-9).unwrap();
        assert_eq!(adjusted_rand_index(&km.labels, &truth), 1.0);
        assert!(km.inertia.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn single_cluster_is_mean() {
        let (x, _) = blobs(2);
        let km = kmeans(x.view(), 1, 1, 10, 1e-12).unwrap();
        assert!(km.labels.iter().all(|l| *l == 0));
        let mean = x.mean_axis(Axis(0)).unwrap();
        for (a, b) in km.centroids.row(0).iter().zip(mean.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_points_one_cluster() {
        let x = Array2::from_elem((6, 2), 3.0);
        let km = kmeans(x.view(), 2, 1, 10, 1e-9).unwrap();
        assert!(km.labels.iter().all(|l| *l == km.labels[0]));
        assert_eq!(*km.inertia.last().unwrap(), 0.0);
    }

    #[test]
    fn too_many_clusters() {
        let x = Array2::<f64>::zeros((2, 2));
        assert!(matches!(kmeans(x.view(), 3, 1, 10, 1e-9), Err(Error::TooManyClusters { .. })));
    }

    #[test]
    fn deterministic_under_seed() {
        let (x, _) = blobs(3);
        assert_eq!(kmeans(x.view(), 4, 5, 50, 1e-9).unwrap(), kmeans(x.view(), 4, 5, 50, 1e-9).unwrap());
    }

    #[test]
    fn ari_matches_pair_counting() {
        let mut rng = SeedStream::new(4).substream("labels");
        for _ in 0..20 {
            let a: Vec<usize> = (0..30).map(|_| rng.random_range(0..4)).collect();
            let b: Vec<usize> = (0..30).map(|_| rng.random_range(0..3)).collect();
            assert!((adjusted_rand_index(&a, &b) - ari_oracle(&a, &b)).abs() < 1e-12);
        }
        let a = vec![0, 0, 1, 1, 2];
        let relabeled = vec![2, 2, 0, 0, 1];
        assert_eq!(adjusted_rand_index(&a, &relabeled), 1.0);
    }

    fn permutations(k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(k - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, k - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = SeedStream::new(9).substream("cost");
        for k in 1..=5 {
            for _ in 0..10 {
                let cost = Array2::from_shape_simple_fn((k, k), || normal::<f64>(&mut rng));
                let got = min_cost_assignment(&cost);
                let total = |p: &[usize]| p.iter().enumerate().map(|(i, j)| cost[[i, *j]]).sum::<f64>();
                let best = permutations(k).iter().map(|p| total(p)).fold(f64::INFINITY, f64::min);
                assert!((total(&got) - best).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permuted_frame_recovers_inverse() {
        let mut rng = SeedStream::new(2).substream("centroids");
        let c0 = Array2::from_shape_simple_fn((4, 6), || normal::<f64>(&mut rng));
        let sigma = [2, 0, 3, 1];
        let mut c1 = c0.clone();
        for (i, &s) in sigma.iter().enumerate() {
            c1.row_mut(s).assign(&c0.row(i));
        }
        let labels0 = vec![0, 1, 2, 3, 3];
        let labels1: Vec<usize> = labels0.iter().map(|l| sigma[*l]).collect();
        let layout = ClusterLayout {
            k: 4,
            labels: vec![labels0.clone(), labels1],
            centroids: vec![c0.clone(), c1],
        };
        let map = frame_mapping(&c0, &layout.centroids[1]);
        for (i, &s) in sigma.iter().enumerate() {
            assert_eq!(map[s], i);
        }
        let matched = match_clusters(&layout);
        assert_eq!(matched.labels[1], labels0);
        assert_eq!(matched.centroids[1], c0);
    }

    #[test]
    fn noisy_centroids_match_noise_free_brute_force() {
        let mut rng = SeedStream::new(3).substream("noise");
        for k in 2..=5 {
            let c0 = Array2::from_shape_simple_fn((k, 5), || normal::<f64>(&mut rng));
            let noisy = c0.mapv(|v| v + 0.01 * normal::<f64>(&mut rng));
            let map = frame_mapping(&c0, &noisy);
            let score = |p: &[usize]| p.iter().enumerate().map(|(j, i)| cosine(noisy.row(j), c0.row(*i))).sum::<f64>();
            let best = permutations(k)
                .into_iter()
                .max_by(|a, b| score(a).total_cmp(&score(b)))
                .unwrap();
            assert_eq!(map, best);
            assert_eq!(map, (0..k).collect::<Vec<_>>());
        }
    }

    #[test]
    fn bindings_to_layout() {
        let labels = vec![vec![0, 0, 1, 1, 2, 2, 2, 0, 1]];
        let cl = ClusterLayout {
            k: 3,
            labels,
            centroids: vec![Array2::zeros((3, 1))],
        };
        let mut b = BTreeMap::new();
        b.insert(1, RegionSpec::new(1, "red square", RegionLevel::Instance, 1));
        b.insert(2, RegionSpec::new(2, "blue circle", RegionLevel::Instance, 1));
        let l = layout_from_clusters(&cl, &b, (3, 3)).unwrap();
        assert_eq!(l.mask(0, 1).iter().filter(|v| **v).count(), 3);
        assert_eq!(l.mask(0, 2).iter().filter(|v| **v).count(), 3);
        b.insert(0, RegionSpec::new(3, "gray", RegionLevel::Class, 0));
        let all = layout_from_clusters(&cl, &b, (3, 3)).unwrap();
        let labels = crate::layout::region_labels(&all);
        assert!(labels.flat().iter().all(|l| *l != 0));
        assert!(layout_from_clusters(&cl, &BTreeMap::from([(5, RegionSpec::new(1, "x", RegionLevel::Class, 0))]), (3, 3)).is_err());
        let none = layout_from_clusters(&cl, &BTreeMap::new(), (3, 3)).unwrap();
        assert!(crate::layout::region_labels(&none).flat().iter().all(|l| *l == 0));
    }
}
