//! Shared data types: datasets, the embedder model, clustering and selection
//! state, run configuration and run history.
//!
//! Cluster indices are 0-based in storage (`0..k`).

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{PulError, Result};
use crate::evaluation::RetrievalMetrics;

/// Feature vectors with optional identity labels and camera ids.
///
/// Samples are stored row-major as `f32`, which is also the on-disk
/// representation, so file round-trips are bit-exact.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    samples: Vec<f32>,
    labels: Option<Vec<u32>>,
    camera_ids: Option<Vec<u32>>,
}

impl Dataset {
    pub fn new(
        dim: usize,
        samples: Vec<f32>,
        labels: Option<Vec<u32>>,
        camera_ids: Option<Vec<u32>>,
    ) -> Result<Self> {
        let ds = Dataset {
            dim,
            samples,
            labels,
            camera_ids,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn from_rows(
        rows: &[Vec<f32>],
        labels: Option<Vec<u32>>,
        camera_ids: Option<Vec<u32>>,
    ) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if let Some(bad) = rows.iter().position(|r| r.len() != dim) {
            return Err(PulError::invalid(format!(
                "row {bad} has dimension {}, expected {dim}",
                rows[bad].len()
            )));
        }
        let samples = rows.iter().flatten().copied().collect();
        Dataset::new(dim, samples, labels, camera_ids)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(PulError::invalid("sample dimension must be >= 1"));
        }
        if self.samples.is_empty() || self.samples.len() % self.dim != 0 {
            return Err(PulError::invalid(format!(
                "{} values do not form a non-empty matrix with {} columns",
                self.samples.len(),
                self.dim
            )));
        }
        let n = self.len();
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(PulError::invalid(format!(
                    "{} labels for {n} samples",
                    labels.len()
                )));
            }
        }
        if let Some(cams) = &self.camera_ids {
            if cams.len() != n {
                return Err(PulError::invalid(format!(
                    "{} camera ids for {n} samples",
                    cams.len()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.samples[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| v as f64).collect()
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.samples.chunks_exact(self.dim)
    }

    pub fn rows_f64(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.row_f64(i)).collect()
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn camera_ids(&self) -> Option<&[u32]> {
        self.camera_ids.as_deref()
    }

    /// Rows at `indices`, in that order, with their labels and camera ids.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(PulError::invalid(format!(
                "subset index {bad} out of range for {} samples",
                self.len()
            )));
        }
        let samples = indices.iter().flat_map(|&i| self.row(i)).copied().collect();
        let pick = |v: &Option<Vec<u32>>| v.as_ref().map(|v| indices.iter().map(|&i| v[i]).collect());
        Dataset::new(self.dim, samples, pick(&self.labels), pick(&self.camera_ids))
    }

    pub fn without_labels(&self) -> Dataset {
        Dataset {
            labels: None,
            ..self.clone()
        }
    }

    pub fn with_labels(mut self, labels: Option<Vec<u32>>) -> Result<Dataset> {
        self.labels = labels;
        self.validate()?;
        Ok(self)
    }
}

/// Embedder layout. Every embedder layer is followed by a rectifier, so the
/// embedding is entry-wise nonnegative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Architecture {
    /// `D -> E`, rectified.
    Linear,
    /// `D -> H -> E`, both rectified.
    Hidden { hidden_dim: usize },
}

/// Fully connected layer `y = W x + b`; `weight` is `outputs x inputs`,
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn zeros_like(other: &Dense) -> Self {
        Dense::zeros(other.inputs, other.outputs)
    }

    pub fn same_shape(&self, other: &Dense) -> bool {
        self.inputs == other.inputs && self.outputs == other.outputs
    }

    pub fn is_consistent(&self) -> bool {
        self.weight.len() == self.inputs * self.outputs && self.bias.len() == self.outputs
    }

    pub fn row(&self, out: usize) -> &[f64] {
        &self.weight[out * self.inputs..(out + 1) * self.inputs]
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                self.row(o)
                    .iter()
                    .zip(x)
                    .fold(self.bias[o], |acc, (w, v)| acc + w * v)
            })
            .collect()
    }

    pub(crate) fn params(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(self.bias.iter())
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }
}

/// The embedder `phi(.; theta)` plus its softmax classifier head `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedModel {
    /// Rectified layers, applied in order.
    pub embedder: Vec<Dense>,
    /// Classifier over the embedding, `E -> C` logits.
    pub head: Dense,
}

impl EmbedModel {
    pub fn input_dim(&self) -> usize {
        self.embedder[0].inputs
    }

    pub fn embed_dim(&self) -> usize {
        self.embedder.last().map(|l| l.outputs).unwrap_or(0)
    }

    pub fn num_classes(&self) -> usize {
        self.head.outputs
    }

    pub fn architecture(&self) -> Architecture {
        match self.embedder.len() {
            1 => Architecture::Linear,
            _ => Architecture::Hidden {
                hidden_dim: self.embedder[0].outputs,
            },
        }
    }

    pub fn num_params(&self) -> usize {
        self.embedder
            .iter()
            .chain(std::iter::once(&self.head))
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedder.is_empty() || self.embedder.len() > 2 {
            return Err(PulError::invalid(format!(
                "embedder must have 1 or 2 layers, found {}",
                self.embedder.len()
            )));
        }
        let mut width = self.embedder[0].inputs;
        for (i, layer) in self.embedder.iter().chain([&self.head]).enumerate() {
            if !layer.is_consistent() || layer.inputs != width || layer.inputs == 0 || layer.outputs == 0 {
                return Err(PulError::invalid(format!("layer {i} has inconsistent shape")));
            }
            width = layer.outputs;
        }
        Ok(())
    }
}

/// Result of one clustering + center selection pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    /// Cluster of each sample, in `0..k`.
    pub assignments: Vec<usize>,
    /// Cluster means in the un-normalized embedding space.
    pub centroids: Vec<Vec<f64>>,
    /// Sample index of each cluster's center; empty until centers are selected.
    pub center_indices: Vec<usize>,
    /// Unit-norm feature of each cluster's center sample.
    pub center_features: Vec<Vec<f64>>,
}

impl ClusterState {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }

    pub fn has_centers(&self) -> bool {
        self.center_indices.len() == self.k()
    }

    /// Checks the state against the features it was computed from.
    pub fn validate(&self, features: &[Vec<f64>]) -> Result<()> {
        let k = self.k();
        if k == 0 {
            return Err(PulError::Invariant("no clusters".into()));
        }
        if self.assignments.len() != features.len() {
            return Err(PulError::Invariant(format!(
                "{} assignments for {} samples",
                self.assignments.len(),
                features.len()
            )));
        }
        if let Some(bad) = self.assignments.iter().find(|&&a| a >= k) {
            return Err(PulError::Invariant(format!("assignment {bad} >= k = {k}")));
        }
        let dim = features.first().map(Vec::len).unwrap_or(0);
        for (c, centroid) in self.centroids.iter().enumerate() {
            let members: Vec<&Vec<f64>> = features
                .iter()
                .zip(&self.assignments)
                .filter(|(_, &a)| a == c)
                .map(|(f, _)| f)
                .collect();
            if members.is_empty() {
                continue;
            }
            for d in 0..dim {
                let mean = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
                if (mean - centroid[d]).abs() > 1e-9 {
                    return Err(PulError::Invariant(format!(
                        "centroid {c} differs from its members' mean in dimension {d}"
                    )));
                }
            }
        }
        if self.has_centers() {
            if self.center_features.len() != k {
                return Err(PulError::Invariant("center features missing".into()));
            }
            for (c, (&idx, f)) in self.center_indices.iter().zip(&self.center_features).enumerate() {
                if idx >= features.len() || self.assignments[idx] != c {
                    return Err(PulError::Invariant(format!(
                        "center of cluster {c} is not one of its members"
                    )));
                }
                let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
                let source_norm = features[idx].iter().map(|v| v * v).sum::<f64>().sqrt();
                if source_norm > 0.0 && (norm - 1.0).abs() > 1e-9 {
                    return Err(PulError::Invariant(format!(
                        "center feature {c} has norm {norm}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// The binary selection vector `v` over all samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionMask {
    selected: Vec<bool>,
    selected_count: usize,
    lambda: f64,
}

impl SelectionMask {
    pub fn new(selected: Vec<bool>, lambda: f64) -> Self {
        let selected_count = selected.iter().filter(|&&s| s).count();
        SelectionMask {
            selected,
            selected_count,
            lambda,
        }
    }

    pub fn all(n: usize, lambda: f64) -> Self {
        SelectionMask::new(vec![true; n], lambda)
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn is_selected(&self, i: usize) -> bool {
        self.selected[i]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.selected
    }

    pub fn selected_count(&self) -> usize {
        self.selected_count
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn selected_indices(&self) -> Vec<usize> {
        self.selected
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| s.then_some(i))
            .collect()
    }

    /// Every non-empty cluster must keep at least one selected member.
    pub fn validate(&self, state: &ClusterState) -> Result<()> {
        if self.selected.len() != state.assignments.len() {
            return Err(PulError::Invariant("mask length differs from sample count".into()));
        }
        let mut kept = vec![false; state.k()];
        let mut present = vec![false; state.k()];
        for (&a, &s) in state.assignments.iter().zip(&self.selected) {
            present[a] = true;
            kept[a] |= s;
        }
        if let Some(c) = (0..state.k()).find(|&c| present[c] && !kept[c]) {
            return Err(PulError::Invariant(format!("cluster {c} has no selected sample")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs_per_iter: usize,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.001,
            momentum: 0.9,
            epochs_per_iter: 20,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceConfig {
    /// Consecutive iterations the selected count must stay stable.
    pub patience: usize,
    /// Stability threshold on `|delta selected_count| / N`.
    pub rel_tol: f64,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        ConvergenceConfig {
            patience: 3,
            rel_tol: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub embed_dim: usize,
    /// Epochs of supervised training on the source set when building the
    /// original model. Zero leaves the random initialization untouched.
    pub init_epochs: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            architecture: Architecture::Hidden { hidden_dim: 32 },
            embed_dim: 16,
            init_epochs: 20,
        }
    }
}

/// Everything that parameterizes a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PulConfig {
    /// Number of clusters.
    pub k: usize,
    /// Reliability threshold on cosine similarity to the cluster center.
    pub lambda: f64,
    pub max_pul_iters: usize,
    pub kmeans_max_iters: usize,
    pub seed: u64,
    /// Fine-tune from the original model every iteration (otherwise continue
    /// from the current one).
    pub fine_tune_from_original: bool,
    /// `false` trains on every clustered sample.
    pub selection_enabled: bool,
    pub sgd: SgdConfig,
    pub convergence: ConvergenceConfig,
    pub model: ModelConfig,
}

impl Default for PulConfig {
    fn default() -> Self {
        PulConfig {
            k: 15,
            lambda: 0.85,
            max_pul_iters: 25,
            kmeans_max_iters: 300,
            seed: 0,
            fine_tune_from_original: true,
            selection_enabled: true,
            sgd: SgdConfig::default(),
            convergence: ConvergenceConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl PulConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PulError::Config(m.to_string()));
        if self.k < 1 {
            return bad("k must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if self.max_pul_iters < 1 || self.kmeans_max_iters < 1 {
            return bad("iteration caps must be >= 1");
        }
        if self.sgd.epochs_per_iter < 1 || self.sgd.batch_size < 1 {
            return bad("epochs_per_iter and batch_size must be >= 1");
        }
        if !(self.sgd.learning_rate > 0.0 && self.sgd.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if !(0.0..1.0).contains(&self.sgd.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.convergence.patience < 1 || !(self.convergence.rel_tol >= 0.0) {
            return bad("patience must be >= 1 and rel_tol >= 0");
        }
        if self.model.embed_dim < 1 {
            return bad("embed_dim must be >= 1");
        }
        if let Architecture::Hidden { hidden_dim: 0 } = self.model.architecture {
            return bad("hidden_dim must be >= 1");
        }
        Ok(())
    }
}

/// One line of run history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub selected_count: usize,
    pub selected_fraction: f64,
    pub kmeans_objective: f64,
    pub train_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<RetrievalMetrics>,
}

/// Snapshot of a run after `iteration` completed iterations.
#[derive(Debug, Clone)]
pub struct PulRunState {
    pub iteration: usize,
    pub current: EmbedModel,
    original: Arc<EmbedModel>,
    pub history: Vec<IterationRecord>,
}

impl PulRunState {
    pub fn new(original: EmbedModel) -> Self {
        PulRunState {
            iteration: 0,
            current: original.clone(),
            original: Arc::new(original),
            history: Vec::new(),
        }
    }

    pub fn original(&self) -> &EmbedModel {
        &self.original
    }

    pub fn selected_counts(&self) -> Vec<usize> {
        self.history.iter().map(|r| r.selected_count).collect()
    }
}
