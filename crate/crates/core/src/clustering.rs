//! k-means over un-normalized embeddings: k-means++ seeding followed by
//! Lloyd iterations.
//!
//! Assignment ties go to the lowest cluster index. Iteration stops when the
//! assignment step changes nothing, or at the iteration cap. A cluster that
//! ends up empty is re-seeded with the sample farthest from its centroid,
//! taken from a cluster with at least two members, so the objective never
//! increases and all `k` clusters stay populated.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{PulError, Result};
use crate::types::ClusterState;

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_shape(features: &[Vec<f64>], k: usize) -> Result<usize> {
    if k == 0 {
        return Err(PulError::invalid("k must be >= 1"));
    }
    if k > features.len() {
        return Err(PulError::invalid(format!(
            "k = {k} exceeds the number of samples {}",
            features.len()
        )));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(PulError::invalid("feature rows have different dimensions"));
    }
    Ok(dim)
}

/// Indices of the k-means++ seeds: the first uniformly, each following one
/// with probability proportional to its squared distance to the nearest seed
/// chosen so far. If every remaining row coincides with a seed, the next seed
/// is drawn uniformly among the unchosen rows.
pub fn kmeans_pp_seed_indices<R: Rng + ?Sized>(
    features: &[Vec<f64>],
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    check_shape(features, k)?;
    let n = features.len();
    let mut seeds = Vec::with_capacity(k);
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    seeds.push(first);
    chosen[first] = true;
    let mut nearest: Vec<f64> = features
        .iter()
        .map(|f| squared_distance(f, &features[first]))
        .collect();

    while seeds.len() < k {
        let next = match WeightedIndex::new(&nearest) {
            Ok(dist) => dist.sample(rng),
            Err(_) => {
                let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
                free[rng.random_range(0..free.len())]
            }
        };
        seeds.push(next);
        chosen[next] = true;
        for (d, f) in nearest.iter_mut().zip(features) {
            *d = d.min(squared_distance(f, &features[next]));
        }
        nearest[next] = 0.0;
    }
    Ok(seeds)
}

pub fn kmeans_pp_init<R: Rng + ?Sized>(
    features: &[Vec<f64>],
    k: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    Ok(kmeans_pp_seed_indices(features, k, rng)?
        .into_iter()
        .map(|i| features[i].clone())
        .collect())
}

/// Nearest centroid and its squared distance; ties go to the lower index.
pub fn nearest_centroid(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = squared_distance(x, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Sum of squared distances from each sample to its assigned centroid.
pub fn kmeans_objective(features: &[Vec<f64>], state: &ClusterState) -> Result<f64> {
    if features.len() != state.assignments.len() {
        return Err(PulError::invalid(format!(
            "{} features for {} assignments",
            features.len(),
            state.assignments.len()
        )));
    }
    let mut total = 0.0;
    for (f, &a) in features.iter().zip(&state.assignments) {
        let centroid = state
            .centroids
            .get(a)
            .ok_or_else(|| PulError::invalid(format!("assignment {a} has no centroid")))?;
        if centroid.len() != f.len() {
            return Err(PulError::invalid("centroid and feature dimensions differ"));
        }
        total += squared_distance(f, centroid);
    }
    Ok(total)
}

fn means(features: &[Vec<f64>], assignments: &[usize], k: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (f, &a) in features.iter().zip(assignments) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(f) {
            *s += v;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            s.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    sums
}

/// Moves samples into empty clusters. Returns whether anything moved.
fn repair_empty(
    features: &[Vec<f64>],
    assignments: &mut [usize],
    centroids: &[Vec<f64>],
) -> bool {
    let k = centroids.len();
    let mut repaired = false;
    loop {
        let mut counts = vec![0usize; k];
        for &a in assignments.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return repaired;
        };
        // farthest sample among clusters that can spare one; lowest index on ties
        let mut donor: Option<(usize, f64)> = None;
        for (i, (f, &a)) in features.iter().zip(assignments.iter()).enumerate() {
            if counts[a] < 2 {
                continue;
            }
            let d = squared_distance(f, &centroids[a]);
            if donor.is_none_or(|(_, best)| d > best) {
                donor = Some((i, d));
            }
        }
        let (i, _) = donor.expect("n >= k guarantees a cluster with two members");
        assignments[i] = empty;
        repaired = true;
    }
}

/// Outcome of a k-means run.
#[derive(Debug, Clone)]
pub struct KMeansOutcome {
    /// Assignments and centroids; center fields are left empty.
    pub state: ClusterState,
    /// Objective after each Lloyd iteration (assignment + mean update).
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    /// Assignments were stable before the iteration cap.
    pub converged: bool,
}

impl KMeansOutcome {
    pub fn objective(&self) -> f64 {
        self.objective_trace.last().copied().unwrap_or(0.0)
    }
}

/// Lloyd's algorithm from given initial centroids.
pub fn lloyd(features: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iters: usize) -> Result<KMeansOutcome> {
    let k = centroids.len();
    let dim = check_shape(features, k)?;
    if centroids.iter().any(|c| c.len() != dim) {
        return Err(PulError::invalid("centroid dimension differs from features"));
    }
    let mut assignments: Vec<usize> = Vec::new();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < max_iters {
        let mut next: Vec<usize> = features.iter().map(|f| nearest_centroid(f, &centroids).0).collect();
        repair_empty(features, &mut next, &centroids);
        if next == assignments {
            converged = true;
            break;
        }
        assignments = next;
        centroids = means(features, &assignments, k, dim);
        iterations += 1;
        let state = ClusterState {
            assignments: assignments.clone(),
            centroids: centroids.clone(),
            center_indices: Vec::new(),
            center_features: Vec::new(),
        };
        trace.push(kmeans_objective(features, &state)?);
    }

    Ok(KMeansOutcome {
        state: ClusterState {
            assignments,
            centroids,
            center_indices: Vec::new(),
            center_features: Vec::new(),
        },
        objective_trace: trace,
        iterations,
        converged,
    })
}

/// k-means++ seeding followed by at most `max_iters` Lloyd iterations.
pub fn kmeans<R: Rng + ?Sized>(
    features: &[Vec<f64>],
    k: usize,
    max_iters: usize,
    rng: &mut R,
) -> Result<KMeansOutcome> {
    if max_iters == 0 {
        return Err(PulError::invalid("max_iters must be >= 1"));
    }
    let init = kmeans_pp_init(features, k, rng)?;
    lloyd(features, init, max_iters)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    #[test]
    fn k_equal_n_seeds_every_row() {
        let feats: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let mut idx = kmeans_pp_seed_indices(&feats, 6, &mut seeded_rng(4)).unwrap();
        idx.sort();
        assert_eq!(idx, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn k_equal_n_with_duplicates_is_still_a_permutation() {
        let feats = vec![vec![1.0]; 5];
        let mut idx = kmeans_pp_seed_indices(&feats, 5, &mut seeded_rng(9)).unwrap();
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn single_seed_is_an_input_row() {
        let feats: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        let c = kmeans_pp_init(&feats, 1, &mut seeded_rng(2)).unwrap();
        assert!(feats.contains(&c[0]));
    }

    #[test]
    fn k_larger_than_n_is_rejected() {
        let feats = vec![vec![0.0], vec![1.0]];
        assert!(matches!(kmeans(&feats, 3, 10, &mut seeded_rng(0)), Err(PulError::InvalidInput(_))));
        assert!(kmeans_pp_init(&feats, 0, &mut seeded_rng(0)).is_err());
    }

    #[test]
    fn two_far_points_get_their_own_clusters() {
        let feats = vec![vec![0.0, 0.0], vec![6.0, 8.0]];
        let out = kmeans(&feats, 2, 300, &mut seeded_rng(1)).unwrap();
        assert_ne!(out.state.assignments[0], out.state.assignments[1]);
        assert_eq!(out.objective(), 0.0);
        assert!(out.converged);
    }

    #[test]
    fn identical_points_fill_all_clusters() {
        let feats = vec![vec![2.0, 2.0]; 7];
        let out = kmeans(&feats, 3, 300, &mut seeded_rng(5)).unwrap();
        assert_eq!(out.objective(), 0.0);
        assert!(out.state.cluster_sizes().iter().all(|&s| s > 0));
        out.state.validate(&feats).unwrap();
    }

    #[test]
    fn empty_cluster_is_repaired_from_farthest_sample() {
        // both centroids start on the left, the right point is farthest
        let feats = vec![vec![0.0], vec![0.1], vec![10.0]];
        let out = lloyd(&feats, vec![vec![0.0], vec![-5.0]], 300).unwrap();
        assert!(out.state.cluster_sizes().iter().all(|&s| s > 0));
        assert_eq!(out.state.assignments[0], out.state.assignments[1]);
        assert_ne!(out.state.assignments[0], out.state.assignments[2]);
    }

    #[test]
    fn objective_hand_case() {
        let feats = vec![vec![0.0], vec![2.0]];
        let out = kmeans(&feats, 1, 300, &mut seeded_rng(0)).unwrap();
        assert_eq!(out.state.centroids[0], vec![1.0]);
        assert_eq!(out.objective(), 2.0);
        let dup = vec![vec![1.0, 1.0], vec![1.0, 1.0], vec![3.0, 0.0]];
        let state = ClusterState {
            assignments: vec![0, 0, 1],
            centroids: vec![vec![1.0, 1.0], vec![3.0, 0.0]],
            center_indices: vec![],
            center_features: vec![],
        };
        assert_eq!(kmeans_objective(&dup, &state).unwrap(), 0.0);
    }

    #[test]
    fn nearest_centroid_ties_go_low() {
        let centroids = vec![vec![1.0], vec![-1.0], vec![1.0]];
        assert_eq!(nearest_centroid(&[0.0], &centroids).0, 0);
        assert_eq!(nearest_centroid(&[1.0], &centroids).0, 0);
    }

    #[test]
    fn max_iters_cap_is_respected() {
        let mut rng = seeded_rng(8);
        let feats: Vec<Vec<f64>> = (0..200).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
        let out = kmeans(&feats, 10, 1, &mut seeded_rng(1)).unwrap();
        assert_eq!(out.iterations, 1);
    }
}
