//! k-means with k-means++ seeding and restarts.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;

pub const MAX_LLOYD_ITERATIONS: usize = 300;
pub const DEFAULT_RESTARTS: usize = 10;

pub type Point = [f64; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    /// Cluster index for each point.
    pub assignments: Vec<usize>,
    pub centroids: Vec<Point>,
    pub inertia: f64,
    pub seed: u64,
    pub restarts: usize,
    /// Index of the restart that produced this result.
    pub best_restart: usize,
    /// Inertia after every Lloyd iteration of the winning restart.
    pub trace: Vec<f64>,
    pub restart_inertias: Vec<f64>,
}

impl ClusterResult {
    pub fn g(&self) -> usize {
        self.centroids.len()
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == cluster)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.g()];
        for &c in &self.assignments {
            sizes[c] += 1;
        }
        sizes
    }
}

pub fn dist2(a: &Point, b: &Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Sum of squared distances of each point to its cluster mean.
pub fn partition_inertia(points: &[Point], assignments: &[usize], g: usize) -> f64 {
    let centroids = centroids_of(points, assignments, g);
    points
        .iter()
        .zip(assignments)
        .map(|(p, &c)| dist2(p, &centroids[c]))
        .sum()
}

fn centroids_of(points: &[Point], assignments: &[usize], g: usize) -> Vec<Point> {
    let mut sums = vec![[0.0; 3]; g];
    let mut counts = vec![0usize; g];
    for (p, &c) in points.iter().zip(assignments) {
        for k in 0..3 {
            sums[c][k] += p[k];
        }
        counts[c] += 1;
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &n)| {
            if n == 0 {
                [f64::NAN; 3]
            } else {
                [s[0] / n as f64, s[1] / n as f64, s[2] / n as f64]
            }
        })
        .collect()
}

fn nearest(p: &Point, centroids: &[Point]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

fn plus_plus_init<R: Rng>(points: &[Point], g: usize, rng: &mut R) -> Vec<Point> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < g {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            // all remaining points coincide with a centroid
            rng.gen_range(0..points.len())
        };
        centroids.push(points[pick]);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(dist2(p, &points[pick]));
        }
    }
    centroids
}

struct Run {
    assignments: Vec<usize>,
    centroids: Vec<Point>,
    inertia: f64,
    trace: Vec<f64>,
}

/// Closest centroid, keeping `current` when it is among the closest.
fn nearest_keeping(p: &Point, centroids: &[Point], current: usize) -> usize {
    let best = nearest(p, centroids);
    if dist2(p, &centroids[current]) <= dist2(p, &centroids[best]) {
        current
    } else {
        best
    }
}

/// Centroids of `assignments`, moving the point farthest from its centroid
/// into any cluster left empty.
fn repaired_centroids(points: &[Point], assignments: &mut [usize], g: usize) -> Vec<Point> {
    let mut centroids = centroids_of(points, assignments, g);
    for c in 0..g {
        if !centroids[c][0].is_nan() {
            continue;
        }
        let mut sizes = vec![0usize; g];
        assignments.iter().for_each(|&a| sizes[a] += 1);
        let far = (0..points.len())
            .filter(|&i| sizes[assignments[i]] > 1)
            .max_by(|&a, &b| {
                dist2(&points[a], &centroids[assignments[a]])
                    .total_cmp(&dist2(&points[b], &centroids[assignments[b]]))
                    .then(b.cmp(&a))
            })
            .expect("g <= n guarantees a cluster with two members");
        assignments[far] = c;
        centroids = centroids_of(points, assignments, g);
    }
    centroids
}

/// Hartigan single-point transfers: move a point to another cluster while
/// that strictly lowers the inertia. Returns whether anything moved.
fn transfer_refine(points: &[Point], assignments: &mut [usize], g: usize) -> bool {
    let mut sizes = vec![0usize; g];
    assignments.iter().for_each(|&a| sizes[a] += 1);
    let mut centroids = centroids_of(points, assignments, g);
    let mut moved = false;
    for _ in 0..MAX_LLOYD_ITERATIONS {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let a = assignments[i];
            if sizes[a] < 2 {
                continue;
            }
            let na = sizes[a] as f64;
            let removal = na / (na - 1.0) * dist2(p, &centroids[a]);
            let mut best = (a, 0.0);
            for b in (0..g).filter(|&b| b != a) {
                let nb = sizes[b] as f64;
                let delta = nb / (nb + 1.0) * dist2(p, &centroids[b]) - removal;
                if delta < best.1 - 1e-12 * removal.max(1e-300) {
                    best = (b, delta);
                }
            }
            let b = best.0;
            if b == a {
                continue;
            }
            let (na, nb) = (sizes[a] as f64, sizes[b] as f64);
            for k in 0..3 {
                centroids[a][k] = (centroids[a][k] * na - p[k]) / (na - 1.0);
                centroids[b][k] = (centroids[b][k] * nb + p[k]) / (nb + 1.0);
            }
            sizes[a] -= 1;
            sizes[b] += 1;
            assignments[i] = b;
            changed = true;
            moved = true;
        }
        if !changed {
            break;
        }
    }
    moved
}

fn lloyd(points: &[Point], init: Vec<Point>) -> Run {
    let g = init.len();
    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, &init)).collect();
    let mut trace = Vec::new();
    let mut centroids = repaired_centroids(points, &mut assignments, g);
    for _ in 0..MAX_LLOYD_ITERATIONS {
        let inertia: f64 = points
            .iter()
            .zip(&assignments)
            .map(|(p, &c)| dist2(p, &centroids[c]))
            .sum();
        trace.push(inertia);
        let mut next: Vec<usize> = points
            .iter()
            .zip(&assignments)
            .map(|(p, &c)| nearest_keeping(p, &centroids, c))
            .collect();
        if next == assignments {
            break;
        }
        centroids = repaired_centroids(points, &mut next, g);
        assignments = next;
    }
    if transfer_refine(points, &mut assignments, g) {
        centroids = centroids_of(points, &assignments, g);
        trace.push(
            points
                .iter()
                .zip(&assignments)
                .map(|(p, &c)| dist2(p, &centroids[c]))
                .sum(),
        );
    }
    let inertia = points
        .iter()
        .zip(&assignments)
        .map(|(p, &c)| dist2(p, &centroids[c]))
        .sum();
    Run {
        assignments,
        centroids,
        inertia,
        trace,
    }
}

/// Cluster `points` into `g` groups. The restart with the lowest inertia
/// wins; ties go to the earliest restart.
pub fn kmeans(points: &[Point], g: usize, seed: u64, restarts: usize) -> Result<ClusterResult> {
    if g == 0 || g > points.len() {
        return Err(Error::Config(format!(
            "cluster count g={g} must be in 1..={} (point count)",
            points.len()
        )));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite sensor coordinate".into()));
    }
    let restarts = restarts.max(1);
    let runs: Vec<Run> = (0..restarts)
        .map(|r| {
            let mut rng = rng_for(seed, "kmeans", r as u64);
            lloyd(points, plus_plus_init(points, g, &mut rng))
        })
        .collect();
    let restart_inertias: Vec<f64> = runs.iter().map(|r| r.inertia).collect();
    let best = (0..runs.len())
        .min_by(|&a, &b| runs[a].inertia.total_cmp(&runs[b].inertia).then(a.cmp(&b)))
        .expect("restarts >= 1");
    let run = runs.into_iter().nth(best).expect("index in range");
    Ok(ClusterResult {
        assignments: run.assignments,
        centroids: run.centroids,
        inertia: run.inertia,
        seed,
        restarts,
        best_restart: best,
        trace: run.trace,
        restart_inertias,
    })
}
