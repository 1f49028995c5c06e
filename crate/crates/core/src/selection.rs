//! Reliable sample selection.
//!
//! Each cluster gets a center: the member nearest (Euclidean) to the
//! centroid, ties to the lowest sample index. A sample is reliable when the
//! inner product of its unit feature with its cluster's unit center feature
//! is strictly greater than `lambda`. The center itself is always kept, so
//! every cluster contributes at least one sample, including at `lambda = 1`.

use crate::clustering::squared_distance;
use crate::error::{PulError, Result};
use crate::types::{ClusterState, SelectionMask};

/// Unit-norm rows plus a flag per row that was all-zero (left as zeros).
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub features: Vec<Vec<f64>>,
    pub degenerate: Vec<bool>,
}

impl Normalized {
    pub fn degenerate_count(&self) -> usize {
        self.degenerate.iter().filter(|&&d| d).count()
    }
}

pub fn l2_normalize_row(row: &[f64]) -> (Vec<f64>, bool) {
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        (row.to_vec(), true)
    } else {
        (row.iter().map(|v| v / norm).collect(), false)
    }
}

pub fn l2_normalize(features: &[Vec<f64>]) -> Normalized {
    let (features, degenerate) = features.iter().map(|r| l2_normalize_row(r)).unzip();
    Normalized { features, degenerate }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Inner product of two unit vectors, clamped to the cosine range.
pub fn cosine_of_units(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b).clamp(-1.0, 1.0)
}

/// Fills `center_indices` and `center_features` of a clustering computed on
/// `features` (un-normalized).
pub fn select_center_features(features: &[Vec<f64>], state: &ClusterState) -> Result<ClusterState> {
    if features.len() != state.assignments.len() {
        return Err(PulError::invalid(format!(
            "{} features for {} assignments",
            features.len(),
            state.assignments.len()
        )));
    }
    let mut best: Vec<Option<(usize, f64)>> = vec![None; state.k()];
    for (i, (f, &c)) in features.iter().zip(&state.assignments).enumerate() {
        let d = squared_distance(f, &state.centroids[c]);
        if best[c].is_none_or(|(_, bd)| d < bd) {
            best[c] = Some((i, d));
        }
    }
    let mut center_indices = Vec::with_capacity(state.k());
    for (c, b) in best.into_iter().enumerate() {
        let (i, _) = b.ok_or_else(|| PulError::Invariant(format!("cluster {c} is empty")))?;
        center_indices.push(i);
    }
    let center_features = center_indices
        .iter()
        .map(|&i| l2_normalize_row(&features[i]).0)
        .collect();
    Ok(ClusterState {
        center_indices,
        center_features,
        ..state.clone()
    })
}

/// Threshold selection against the cluster center features.
pub fn select_reliable(unit_features: &[Vec<f64>], state: &ClusterState, lambda: f64) -> Result<SelectionMask> {
    if !state.has_centers() {
        return Err(PulError::Invariant("center features have not been selected".into()));
    }
    if unit_features.len() != state.assignments.len() {
        return Err(PulError::invalid(format!(
            "{} features for {} assignments",
            unit_features.len(),
            state.assignments.len()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(PulError::invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    let mut selected: Vec<bool> = unit_features
        .iter()
        .zip(&state.assignments)
        .map(|(f, &c)| cosine_of_units(f, &state.center_features[c]) > lambda)
        .collect();
    for &i in &state.center_indices {
        selected[i] = true;
    }
    Ok(SelectionMask::new(selected, lambda))
}

pub fn selected_fraction(mask: &SelectionMask, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        mask.selected_count() as f64 / n as f64
    }
}
