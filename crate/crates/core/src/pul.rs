//! The progressive unsupervised learning loop.
//!
//! Each iteration embeds the target set with the current model, clusters
//! the raw embeddings, selects reliable samples on the unit embeddings, and
//! fine-tunes (from the original model by default) on the selected samples
//! with their cluster indices as class labels and a fresh classifier head.
//! The loop stops once the selected count stays stable for `patience`
//! iterations or the iteration cap is hit.
//!
//! The semi-supervised variant appends labeled samples to every iteration's
//! training set, in classifier slots `k..k + L` after the `k` pseudo-classes.
//! Labeled samples never take part in clustering or selection.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::kmeans;
use crate::embedder::{embed_dataset, fine_tune_examples, masked_examples, train_classifier, TrainOutcome};
use crate::error::{PulError, Result};
use crate::evaluation::RetrievalMetrics;
use crate::selection::{l2_normalize, select_center_features, select_reliable, selected_fraction};
use crate::types::{ClusterState, Dataset, EmbedModel, IterationRecord, PulConfig, PulRunState, SelectionMask};

/// Maps identity labels to dense class indices in ascending label order.
pub fn class_index(labels: &[u32]) -> BTreeMap<u32, usize> {
    let mut map = BTreeMap::new();
    for &l in labels {
        map.entry(l).or_insert(0);
    }
    for (i, v) in map.values_mut().enumerate() {
        *v = i;
    }
    map
}

fn labeled_examples(dataset: &Dataset, offset: usize) -> Result<(Vec<(Vec<f64>, usize)>, usize)> {
    let labels = dataset
        .labels()
        .ok_or_else(|| PulError::invalid("labeled dataset has no labels"))?;
    let classes = class_index(labels);
    let examples = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (dataset.row_f64(i), offset + classes[l]))
        .collect();
    Ok((examples, classes.len()))
}

/// Supervised training of a fresh model on the labeled source set; the
/// result is the original model every run starts from.
pub fn init_original_model<R: Rng + ?Sized>(
    source: &Dataset,
    config: &PulConfig,
    rng: &mut R,
) -> Result<TrainOutcome> {
    config.validate()?;
    let (examples, classes) = labeled_examples(source, 0)?;
    if classes < 2 {
        return Err(PulError::invalid("source set needs at least two identities"));
    }
    let model = EmbedModel::random(
        config.model.architecture,
        source.dim(),
        config.model.embed_dim,
        classes,
        rng,
    )?;
    train_classifier(model, &examples, &config.sgd, config.model.init_epochs, rng)
}

/// Why a run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// The selected count saturated.
    Converged,
    /// The iteration cap was reached first.
    MaxIterations,
}

/// Saturation test on the selected-count history: the last `patience`
/// changes are each below `rel_tol * n` in magnitude. Returns `None` while
/// the run should continue.
pub fn check_convergence(
    selected_counts: &[usize],
    n: usize,
    patience: usize,
    rel_tol: f64,
    max_iters: usize,
) -> Option<StopReason> {
    let n = n.max(1) as f64;
    let stable = selected_counts.len() > patience
        && selected_counts[selected_counts.len() - patience - 1..]
            .windows(2)
            .all(|w| (w[1] as f64 - w[0] as f64).abs() / n < rel_tol);
    if stable {
        Some(StopReason::Converged)
    } else if selected_counts.len() >= max_iters {
        Some(StopReason::MaxIterations)
    } else {
        None
    }
}

/// Clustering and selection of one iteration, kept for inspection.
#[derive(Debug, Clone)]
pub struct IterationDetail {
    pub clustering: Option<ClusterState>,
    pub mask: Option<SelectionMask>,
    pub epoch_losses: Vec<f64>,
}

/// Per-iteration evaluation callback; its metrics go into the history.
pub type EvalHook<'a> = dyn FnMut(&EmbedModel) -> Result<RetrievalMetrics> + 'a;

struct LabeledPart {
    examples: Vec<(Vec<f64>, usize)>,
    classes: usize,
}

fn iterate<R: Rng + ?Sized>(
    state: &PulRunState,
    unlabeled: Option<&Dataset>,
    labeled: Option<&LabeledPart>,
    config: &PulConfig,
    rng: &mut R,
) -> Result<(PulRunState, IterationDetail)> {
    let k = config.k;
    let mut examples = Vec::new();
    let mut clustering = None;
    let mut mask = None;
    let mut objective = 0.0;
    let mut n = 0;

    if let Some(target) = unlabeled {
        n = target.len();
        let embeddings = embed_dataset(&state.current, target)?;
        let km = kmeans(&embeddings, k, config.kmeans_max_iters, rng)?;
        objective = km.objective();
        let clusters = select_center_features(&embeddings, &km.state)?;
        let selection = if config.selection_enabled {
            let unit = l2_normalize(&embeddings).features;
            select_reliable(&unit, &clusters, config.lambda)?
        } else {
            SelectionMask::all(n, config.lambda)
        };
        examples = masked_examples(target, &clusters.assignments, &selection, k)?;
        clustering = Some(clusters);
        mask = Some(selection);
    }
    let mut num_classes = k;
    if let Some(part) = labeled {
        examples.extend(part.examples.iter().cloned());
        num_classes += part.classes;
    }

    let base = if config.fine_tune_from_original {
        state.original()
    } else {
        &state.current
    };
    let trained = fine_tune_examples(base, examples, num_classes, &config.sgd, rng)?;

    let selected_count = mask.as_ref().map_or(0, SelectionMask::selected_count);
    let mut next = state.clone();
    next.iteration += 1;
    next.current = trained.model;
    next.history.push(IterationRecord {
        iter: next.iteration,
        selected_count,
        selected_fraction: mask.as_ref().map_or(0.0, |m| selected_fraction(m, n)),
        kmeans_objective: objective,
        train_loss: trained.epoch_losses.last().copied().unwrap_or(0.0),
        metrics: None,
    });
    Ok((
        next,
        IterationDetail {
            clustering,
            mask,
            epoch_losses: trained.epoch_losses,
        },
    ))
}

/// One unsupervised iteration, with its clustering and mask.
pub fn run_iteration_detailed<R: Rng + ?Sized>(
    state: &PulRunState,
    target: &Dataset,
    config: &PulConfig,
    rng: &mut R,
) -> Result<(PulRunState, IterationDetail)> {
    config.validate()?;
    iterate(state, Some(target), None, config, rng)
}

pub fn run_iteration<R: Rng + ?Sized>(
    state: &PulRunState,
    target: &Dataset,
    config: &PulConfig,
    rng: &mut R,
) -> Result<PulRunState> {
    Ok(run_iteration_detailed(state, target, config, rng)?.0)
}

/// Final state of a run.
#[derive(Debug, Clone)]
pub struct PulRun {
    pub state: PulRunState,
    pub stop: StopReason,
}

impl PulRun {
    pub fn model(&self) -> &EmbedModel {
        &self.state.current
    }

    pub fn history(&self) -> &[IterationRecord] {
        &self.state.history
    }
}

fn run_loop<R: Rng + ?Sized>(
    unlabeled: Option<&Dataset>,
    labeled: Option<&Dataset>,
    original: &EmbedModel,
    config: &PulConfig,
    rng: &mut R,
    mut hook: Option<&mut EvalHook>,
) -> Result<PulRun> {
    config.validate()?;
    original.validate()?;
    let labeled = match labeled {
        Some(ds) => {
            if ds.dim() != original.input_dim() {
                return Err(PulError::invalid("labeled set dimension does not match the model"));
            }
            let (examples, classes) = labeled_examples(ds, config.k)?;
            Some(LabeledPart { examples, classes })
        }
        None => None,
    };
    if unlabeled.is_none() && labeled.is_none() {
        return Err(PulError::invalid("nothing to train on"));
    }
    let n = unlabeled.map_or(0, Dataset::len);

    let mut state = PulRunState::new(original.clone());
    loop {
        let (mut next, _) = iterate(&state, unlabeled, labeled.as_ref(), config, rng)?;
        if let Some(hook) = hook.as_deref_mut() {
            let metrics = hook(&next.current)?;
            next.history.last_mut().unwrap().metrics = Some(metrics);
        }
        state = next;
        let c = &config.convergence;
        if let Some(stop) = check_convergence(&state.selected_counts(), n, c.patience, c.rel_tol, config.max_pul_iters) {
            return Ok(PulRun { state, stop });
        }
    }
}

/// Runs iterations on the unlabeled target set until saturation or the cap.
pub fn run_pul<R: Rng + ?Sized>(
    target: &Dataset,
    original: &EmbedModel,
    config: &PulConfig,
    rng: &mut R,
) -> Result<PulRun> {
    run_loop(Some(target), None, original, config, rng, None)
}

/// [`run_pul`] with an evaluation callback after every iteration.
pub fn run_pul_with_eval<R: Rng + ?Sized>(
    target: &Dataset,
    original: &EmbedModel,
    config: &PulConfig,
    rng: &mut R,
    hook: &mut EvalHook,
) -> Result<PulRun> {
    run_loop(Some(target), None, original, config, rng, Some(hook))
}

/// Semi-supervised run. `labeled` must carry identity labels; `None`
/// reduces to [`run_pul`]. With no unlabeled set the run is plain supervised
/// fine-tuning on the labeled samples.
pub fn run_semi_supervised<R: Rng + ?Sized>(
    unlabeled: Option<&Dataset>,
    labeled: Option<&Dataset>,
    original: &EmbedModel,
    config: &PulConfig,
    rng: &mut R,
    hook: Option<&mut EvalHook>,
) -> Result<PulRun> {
    run_loop(unlabeled, labeled, original, config, rng, hook)
}
