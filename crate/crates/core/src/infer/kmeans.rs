//! Lloyd's k-means with deterministic farthest-point seeding.

use log::warn;

use crate::numcore::sqdist;

pub const MAX_ITERS: usize = 100;
pub const REL_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    /// Sum of squared distances to the assigned centroid, one entry per
    /// assignment step.
    pub objective_trace: Vec<f64>,
}

/// Clusters `points` into `k` groups. `k` is clamped to the number of points.
pub fn kmeans(points: &[&[f64]], k: usize) -> KMeans {
    assert!(!points.is_empty(), "k-means needs at least one point");
    let k = if k > points.len() {
        warn!("k = {k} exceeds {} points; using k = {}", points.len(), points.len());
        points.len()
    } else {
        k.max(1)
    };
    let mut centroids = farthest_point_init(points, k);
    let mut assignment = vec![0; points.len()];
    let mut trace = Vec::new();

    for _ in 0..MAX_ITERS {
        let obj = assign(points, &centroids, &mut assignment);
        if let Some(&prev) = trace.last() {
            trace.push(obj);
            if prev - obj <= REL_TOL * prev.abs().max(f64::MIN_POSITIVE) {
                break;
            }
        } else {
            trace.push(obj);
        }
        update(points, &mut centroids, &assignment);
    }
    // keep assignment consistent with the returned centroids
    let obj = assign(points, &centroids, &mut assignment);
    if trace.last() != Some(&obj) {
        trace.push(obj);
    }
    KMeans {
        centroids,
        assignment,
        objective_trace: trace,
    }
}

/// First centre: the point nearest the mean. Each next centre: the point
/// farthest from the chosen set (ties to the lower index).
fn farthest_point_init(points: &[&[f64]], k: usize) -> Vec<Vec<f64>> {
    let d = points[0].len();
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, v) in mean.iter_mut().zip(*p) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= points.len() as f64;
    }
    let first = argmin(points.iter().map(|p| sqdist(p, &mean)));
    let mut centroids = vec![points[first].to_vec()];
    let mut nearest: Vec<f64> = points.iter().map(|p| sqdist(p, points[first])).collect();
    while centroids.len() < k {
        let next = argmax(nearest.iter().copied());
        centroids.push(points[next].to_vec());
        for (n, p) in nearest.iter_mut().zip(points) {
            *n = n.min(sqdist(p, points[next]));
        }
    }
    centroids
}

fn assign(points: &[&[f64]], centroids: &[Vec<f64>], assignment: &mut [usize]) -> f64 {
    let mut total = 0.0;
    for (a, p) in assignment.iter_mut().zip(points) {
        let (best, dist) = centroids
            .iter()
            .enumerate()
            .map(|(j, c)| (j, sqdist(p, c)))
            .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
        *a = best;
        total += dist;
    }
    total
}

fn update(points: &[&[f64]], centroids: &mut [Vec<f64>], assignment: &[usize]) {
    let d = points[0].len();
    let mut sums = vec![vec![0.0; d]; centroids.len()];
    let mut counts = vec![0usize; centroids.len()];
    for (p, &a) in points.iter().zip(assignment) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(*p) {
            *s += v;
        }
    }
    for j in 0..centroids.len() {
        if counts[j] > 0 {
            centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
        }
    }
    // empty clusters take the point farthest from its centroid
    for j in 0..centroids.len() {
        if counts[j] == 0 {
            let far = argmax(
                points
                    .iter()
                    .zip(assignment)
                    .map(|(p, &a)| sqdist(p, &centroids[a])),
            );
            centroids[j] = points[far].to_vec();
        }
    }
}

fn argmin(it: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, v) in it.enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn argmax(it: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}
