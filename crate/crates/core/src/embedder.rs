//! The trainable embedder and its classification fine-tuning.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{PulError, Result};
use crate::types::{Architecture, Dataset, Dense, EmbedModel, SelectionMask, SgdConfig};

/// Gradients of the mean cross-entropy over a batch, laid out like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub embedder: Vec<Dense>,
    pub head: Dense,
    pub batch_loss: f64,
}

/// Momentum buffer, laid out like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Velocity {
    pub embedder: Vec<Dense>,
    pub head: Dense,
}

impl Velocity {
    pub fn zeros_like(model: &EmbedModel) -> Self {
        Velocity {
            embedder: model.embedder.iter().map(Dense::zeros_like).collect(),
            head: Dense::zeros_like(&model.head),
        }
    }
}

/// Initial bias of rectified layers; keeps units active at the start.
const RECTIFIED_BIAS_INIT: f64 = 0.1;

/// Uniform in `[-bound, bound]` with `bound = sqrt(6 / fan_in)`.
fn he_uniform<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Dense {
    let bound = (6.0 / inputs as f64).sqrt();
    let mut layer = Dense::zeros(inputs, outputs);
    for w in &mut layer.weight {
        *w = rng.random_range(-bound..=bound);
    }
    layer.bias.fill(RECTIFIED_BIAS_INIT);
    layer
}

/// Fresh classifier head, uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn random_head<R: Rng + ?Sized>(embed_dim: usize, num_classes: usize, rng: &mut R) -> Dense {
    let bound = 1.0 / (embed_dim as f64).sqrt();
    let mut head = Dense::zeros(embed_dim, num_classes);
    for p in head.params_mut() {
        *p = rng.random_range(-bound..=bound);
    }
    head
}

impl EmbedModel {
    pub fn random<R: Rng + ?Sized>(
        architecture: Architecture,
        input_dim: usize,
        embed_dim: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || embed_dim == 0 || num_classes == 0 {
            return Err(PulError::invalid("model dimensions must be >= 1"));
        }
        let embedder = match architecture {
            Architecture::Linear => vec![he_uniform(input_dim, embed_dim, rng)],
            Architecture::Hidden { hidden_dim } => {
                if hidden_dim == 0 {
                    return Err(PulError::invalid("hidden_dim must be >= 1"));
                }
                vec![
                    he_uniform(input_dim, hidden_dim, rng),
                    he_uniform(hidden_dim, embed_dim, rng),
                ]
            }
        };
        let head = random_head(embed_dim, num_classes, rng);
        Ok(EmbedModel { embedder, head })
    }

    pub fn zeros(architecture: Architecture, input_dim: usize, embed_dim: usize, num_classes: usize) -> Self {
        let embedder = match architecture {
            Architecture::Linear => vec![Dense::zeros(input_dim, embed_dim)],
            Architecture::Hidden { hidden_dim } => vec![
                Dense::zeros(input_dim, hidden_dim),
                Dense::zeros(hidden_dim, embed_dim),
            ],
        };
        EmbedModel {
            embedder,
            head: Dense::zeros(embed_dim, num_classes),
        }
    }
}

fn check_input(model: &EmbedModel, x: &[f64]) -> Result<()> {
    if x.len() != model.input_dim() {
        return Err(PulError::invalid(format!(
            "input has dimension {}, model expects {}",
            x.len(),
            model.input_dim()
        )));
    }
    Ok(())
}

/// Activations of every embedder layer: `acts[0]` is the input, `acts[l+1]`
/// the rectified output of layer `l`.
fn forward_trace(model: &EmbedModel, x: &[f64]) -> Vec<Vec<f64>> {
    let mut acts = Vec::with_capacity(model.embedder.len() + 1);
    acts.push(x.to_vec());
    for layer in &model.embedder {
        let mut z = layer.apply(acts.last().unwrap());
        z.iter_mut().for_each(|v| *v = v.max(0.0));
        acts.push(z);
    }
    acts
}

/// Embedding of `x`; every entry is `>= 0`.
pub fn forward(model: &EmbedModel, x: &[f64]) -> Result<Vec<f64>> {
    check_input(model, x)?;
    Ok(forward_trace(model, x).pop().unwrap())
}

/// Embeddings of every dataset row, un-normalized.
pub fn embed_dataset(model: &EmbedModel, dataset: &Dataset) -> Result<Vec<Vec<f64>>> {
    if dataset.dim() != model.input_dim() {
        return Err(PulError::invalid(format!(
            "dataset dimension {} does not match model input {}",
            dataset.dim(),
            model.input_dim()
        )));
    }
    Ok((0..dataset.len())
        .map(|i| forward_trace(model, &dataset.row_f64(i)).pop().unwrap())
        .collect())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn logits(model: &EmbedModel, x: &[f64]) -> Result<Vec<f64>> {
    Ok(model.head.apply(&forward(model, x)?))
}

/// Class probabilities of the head.
pub fn classify(model: &EmbedModel, x: &[f64]) -> Result<Vec<f64>> {
    Ok(softmax(&logits(model, x)?))
}

/// Mean cross-entropy over `batch` and its gradient by backpropagation.
pub fn loss_and_grad(model: &EmbedModel, batch: &[(&[f64], usize)]) -> Result<GradientSet> {
    if batch.is_empty() {
        return Err(PulError::invalid("empty batch"));
    }
    let classes = model.num_classes();
    let mut grads = GradientSet {
        embedder: model.embedder.iter().map(Dense::zeros_like).collect(),
        head: Dense::zeros_like(&model.head),
        batch_loss: 0.0,
    };
    let scale = 1.0 / batch.len() as f64;

    for &(x, label) in batch {
        check_input(model, x)?;
        if label >= classes {
            return Err(PulError::invalid(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let acts = forward_trace(model, x);
        let embedding = acts.last().unwrap();
        let logits = model.head.apply(embedding);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let log_norm = max + sum_exp.ln();
        grads.batch_loss += (log_norm - logits[label]) * scale;

        // d loss / d logits = softmax - onehot
        let mut delta: Vec<f64> = logits
            .iter()
            .enumerate()
            .map(|(c, l)| ((l - log_norm).exp() - if c == label { 1.0 } else { 0.0 }) * scale)
            .collect();

        let mut upstream = accumulate_layer(&mut grads.head, &model.head, embedding, &delta);
        for (l, layer) in model.embedder.iter().enumerate().rev() {
            let out = &acts[l + 1];
            delta = upstream
                .iter()
                .zip(out)
                .map(|(g, &a)| if a > 0.0 { *g } else { 0.0 })
                .collect();
            upstream = accumulate_layer(&mut grads.embedder[l], layer, &acts[l], &delta);
        }
    }
    Ok(grads)
}

/// Adds `delta x input^T` and `delta` into `grad`, returns `W^T delta`.
fn accumulate_layer(grad: &mut Dense, layer: &Dense, input: &[f64], delta: &[f64]) -> Vec<f64> {
    let mut back = vec![0.0; layer.inputs];
    for (o, &d) in delta.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        grad.bias[o] += d;
        let grow = &mut grad.weight[o * layer.inputs..(o + 1) * layer.inputs];
        for ((g, &x), (b, &w)) in grow.iter_mut().zip(input).zip(back.iter_mut().zip(layer.row(o))) {
            *g += d * x;
            *b += d * w;
        }
    }
    back
}

fn shapes_match(model: &EmbedModel, embedder: &[Dense], head: &Dense) -> bool {
    model.embedder.len() == embedder.len()
        && model.embedder.iter().zip(embedder).all(|(a, b)| a.same_shape(b))
        && model.head.same_shape(head)
}

/// In-place momentum step: `v = momentum * v + g; p -= lr * v`.
pub fn sgd_step(
    model: &mut EmbedModel,
    grads: &GradientSet,
    lr: f64,
    momentum: f64,
    velocity: &mut Velocity,
) -> Result<()> {
    if !shapes_match(model, &grads.embedder, &grads.head)
        || !shapes_match(model, &velocity.embedder, &velocity.head)
    {
        return Err(PulError::invalid("gradient or velocity shape does not match the model"));
    }
    let layers = model
        .embedder
        .iter_mut()
        .chain([&mut model.head])
        .zip(grads.embedder.iter().chain([&grads.head]))
        .zip(velocity.embedder.iter_mut().chain([&mut velocity.head]));
    for ((param, grad), vel) in layers {
        for ((p, g), v) in param.params_mut().zip(grad.params()).zip(vel.params_mut()) {
            *v = momentum * *v + g;
            *p -= lr * *v;
        }
    }
    Ok(())
}

/// Functional form of [`sgd_step`].
pub fn sgd_update(
    model: &EmbedModel,
    grads: &GradientSet,
    lr: f64,
    momentum: f64,
    velocity: &Velocity,
) -> Result<(EmbedModel, Velocity)> {
    let mut model = model.clone();
    let mut velocity = velocity.clone();
    sgd_step(&mut model, grads, lr, momentum, &mut velocity)?;
    Ok((model, velocity))
}

/// Output of a classification training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: EmbedModel,
    /// Mean per-sample loss of each epoch, measured during the epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// Mini-batch SGD with momentum on `(input, label)` pairs using the model's
/// current head. The example order is reshuffled every epoch and the last
/// partial batch is kept.
pub fn train_classifier<R: Rng + ?Sized>(
    mut model: EmbedModel,
    examples: &[(Vec<f64>, usize)],
    sgd: &SgdConfig,
    epochs: usize,
    rng: &mut R,
) -> Result<TrainOutcome> {
    if examples.is_empty() {
        return Err(PulError::EmptyTrainingSet);
    }
    if sgd.batch_size == 0 {
        return Err(PulError::invalid("batch_size must be >= 1"));
    }
    let mut velocity = Velocity::zeros_like(&model);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(sgd.batch_size) {
            let batch: Vec<(&[f64], usize)> = chunk
                .iter()
                .map(|&i| (examples[i].0.as_slice(), examples[i].1))
                .collect();
            let grads = loss_and_grad(&model, &batch)?;
            total += grads.batch_loss * chunk.len() as f64;
            sgd_step(&mut model, &grads, sgd.learning_rate, sgd.momentum, &mut velocity)?;
        }
        epoch_losses.push(total / examples.len() as f64);
    }
    Ok(TrainOutcome { model, epoch_losses })
}

/// Fine-tunes `init_model` on the masked pseudo-labeled samples with a
/// freshly initialized `num_classes`-way head. Unselected samples are never
/// read.
pub fn fine_tune<R: Rng + ?Sized>(
    init_model: &EmbedModel,
    dataset: &Dataset,
    pseudo_labels: &[usize],
    mask: &SelectionMask,
    num_classes: usize,
    sgd: &SgdConfig,
    rng: &mut R,
) -> Result<TrainOutcome> {
    let examples = masked_examples(dataset, pseudo_labels, mask, num_classes)?;
    fine_tune_examples(init_model, examples, num_classes, sgd, rng)
}

pub(crate) fn masked_examples(
    dataset: &Dataset,
    pseudo_labels: &[usize],
    mask: &SelectionMask,
    num_classes: usize,
) -> Result<Vec<(Vec<f64>, usize)>> {
    if pseudo_labels.len() != dataset.len() || mask.len() != dataset.len() {
        return Err(PulError::invalid(format!(
            "{} samples, {} pseudo-labels, mask of length {}",
            dataset.len(),
            pseudo_labels.len(),
            mask.len()
        )));
    }
    if let Some(bad) = pseudo_labels.iter().find(|&&y| y >= num_classes) {
        return Err(PulError::invalid(format!(
            "pseudo-label {bad} out of range for {num_classes} classes"
        )));
    }
    Ok(mask
        .selected_indices()
        .into_iter()
        .map(|i| (dataset.row_f64(i), pseudo_labels[i]))
        .collect())
}

pub(crate) fn fine_tune_examples<R: Rng + ?Sized>(
    init_model: &EmbedModel,
    examples: Vec<(Vec<f64>, usize)>,
    num_classes: usize,
    sgd: &SgdConfig,
    rng: &mut R,
) -> Result<TrainOutcome> {
    if examples.is_empty() {
        return Err(PulError::EmptyTrainingSet);
    }
    if let Some((x, _)) = examples.iter().find(|(x, _)| x.len() != init_model.input_dim()) {
        return Err(PulError::invalid(format!(
            "sample dimension {} does not match model input {}",
            x.len(),
            init_model.input_dim()
        )));
    }
    let mut model = init_model.clone();
    model.head = random_head(model.embed_dim(), num_classes, rng);
    train_classifier(model, &examples, sgd, sgd.epochs_per_iter, rng)
}

/// Fraction of examples whose arg-max class equals the label.
pub fn accuracy(model: &EmbedModel, examples: &[(Vec<f64>, usize)]) -> Result<f64> {
    let mut correct = 0usize;
    for (x, y) in examples {
        let l = logits(model, x)?;
        let best = l
            .iter()
            .enumerate()
            .fold(0, |b, (i, v)| if *v > l[b] { i } else { b });
        correct += usize::from(best == *y);
    }
    Ok(correct as f64 / examples.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    fn tiny_model() -> EmbedModel {
        // 2 -> 2 linear embedder, 2 -> 3 head
        EmbedModel {
            embedder: vec![Dense {
                inputs: 2,
                outputs: 2,
                weight: vec![1.0, 0.5, -0.5, 1.0],
                bias: vec![0.1, 0.0],
            }],
            head: Dense {
                inputs: 2,
                outputs: 3,
                weight: vec![1.0, 0.0, 0.0, 1.0, 1.0, -1.0],
                bias: vec![0.0, 0.2, 0.0],
            },
        }
    }

    #[test]
    fn zero_model_embeds_to_zero() {
        let m = EmbedModel::zeros(Architecture::Hidden { hidden_dim: 4 }, 3, 5, 2);
        assert_eq!(forward(&m, &[1.0, -2.0, 3.0]).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn identity_linear_model_passes_nonnegative_input() {
        let mut m = EmbedModel::zeros(Architecture::Linear, 3, 3, 2);
        for i in 0..3 {
            m.embedder[0].weight[i * 3 + i] = 1.0;
        }
        let x = [0.5, 0.0, 2.25];
        assert_eq!(forward(&m, &x).unwrap(), x.to_vec());
    }

    #[test]
    fn forward_rejects_wrong_dimension() {
        let m = tiny_model();
        assert!(matches!(forward(&m, &[1.0]), Err(PulError::InvalidInput(_))));
        assert!(classify(&m, &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn zero_head_is_uniform() {
        let mut m = tiny_model();
        m.head = Dense::zeros(2, 4);
        let p = classify(&m, &[0.3, 0.7]).unwrap();
        for v in p {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_logit_dominates() {
        let p = softmax(&[0.0, 1e6, -3.0]);
        assert!(p[1] >= 1.0 - 1e-6);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_matches_hand_computation() {
        // x = (1, 1): z = (1.6, 0.5) -> embedding (1.6, 0.5)
        // logits = (1.6, 0.7, 1.1)
        let p = classify(&tiny_model(), &[1.0, 1.0]).unwrap();
        let e = [1.6f64.exp(), 0.7f64.exp(), 1.1f64.exp()];
        let s: f64 = e.iter().sum();
        for (got, want) in p.iter().zip(e.iter().map(|v| v / s)) {
            assert!((got - want).abs() < 1e-14, "{got} vs {want}");
        }
    }

    #[test]
    fn uniform_two_class_loss_is_ln2() {
        let mut m = tiny_model();
        m.head = Dense::zeros(2, 2);
        let x = [0.2, 0.9];
        let g = loss_and_grad(&m, &[(&x, 0), (&x, 1)]).unwrap();
        assert!((g.batch_loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn certain_prediction_has_zero_loss_and_gradient() {
        let mut m = tiny_model();
        m.head.bias = vec![1e4, 0.0, 0.0];
        let x = [0.3, 0.4];
        let g = loss_and_grad(&m, &[(&x, 0)]).unwrap();
        assert_eq!(g.batch_loss, 0.0);
        assert!(g.head.params().chain(g.embedder.iter().flat_map(|l| l.params())).all(|v| *v == 0.0));
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let x = [0.3, 0.4];
        assert!(loss_and_grad(&tiny_model(), &[(&x, 3)]).is_err());
        assert!(loss_and_grad(&tiny_model(), &[]).is_err());
    }

    fn grads_filled(model: &EmbedModel, value: f64) -> GradientSet {
        let mut g = GradientSet {
            embedder: model.embedder.iter().map(Dense::zeros_like).collect(),
            head: Dense::zeros_like(&model.head),
            batch_loss: 0.0,
        };
        g.embedder.iter_mut().chain([&mut g.head]).for_each(|l| l.params_mut().for_each(|p| *p = value));
        g
    }

    #[test]
    fn plain_sgd_moves_by_lr_times_grad() {
        let m = tiny_model();
        let g = grads_filled(&m, 2.0);
        let (m2, _) = sgd_update(&m, &g, 0.1, 0.0, &Velocity::zeros_like(&m)).unwrap();
        for (a, b) in m.head.params().zip(m2.head.params()) {
            assert!((a - 0.2 - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_grad_zero_velocity_is_noop() {
        let m = tiny_model();
        let (m2, v2) = sgd_update(&m, &grads_filled(&m, 0.0), 0.1, 0.9, &Velocity::zeros_like(&m)).unwrap();
        assert_eq!(m, m2);
        assert_eq!(v2, Velocity::zeros_like(&m));
    }

    #[test]
    fn two_momentum_steps_match_unrolled_recurrence() {
        // v1 = g1, p1 = p0 - lr g1; v2 = mu g1 + g2, p2 = p1 - lr (mu g1 + g2)
        let (lr, mu, g1, g2) = (0.01, 0.9, 1.5, -0.5);
        let m0 = tiny_model();
        let v0 = Velocity::zeros_like(&m0);
        let (m1, v1) = sgd_update(&m0, &grads_filled(&m0, g1), lr, mu, &v0).unwrap();
        let (m2, _) = sgd_update(&m1, &grads_filled(&m0, g2), lr, mu, &v1).unwrap();
        let expected_delta = -lr * g1 - lr * (mu * g1 + g2);
        for (a, b) in m0.embedder[0].params().zip(m2.embedder[0].params()) {
            assert!((b - a - expected_delta).abs() < 1e-14);
        }
    }

    #[test]
    fn sgd_rejects_shape_mismatch() {
        let m = tiny_model();
        let other = EmbedModel::zeros(Architecture::Linear, 3, 2, 3);
        let g = grads_filled(&other, 1.0);
        assert!(sgd_update(&m, &g, 0.1, 0.9, &Velocity::zeros_like(&m)).is_err());
    }

    #[test]
    fn fine_tune_with_empty_mask_errors() {
        let ds = Dataset::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]], None, None).unwrap();
        let mask = SelectionMask::new(vec![false, false], 0.5);
        let err = fine_tune(&tiny_model(), &ds, &[0, 1], &mask, 2, &SgdConfig::default(), &mut seeded_rng(1));
        assert!(matches!(err, Err(PulError::EmptyTrainingSet)));
    }

    #[test]
    fn fine_tune_memorizes_cluster_centers() {
        let mut rng = seeded_rng(3);
        let model = EmbedModel::random(Architecture::Hidden { hidden_dim: 8 }, 4, 6, 2, &mut rng).unwrap();
        let rows: Vec<Vec<f32>> = (0..12)
            .map(|i| (0..4).map(|d| ((i * 7 + d * 3) % 5) as f32 - 2.0).collect())
            .collect();
        let ds = Dataset::from_rows(&rows, None, None).unwrap();
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let mut keep = vec![false; 12];
        keep[0] = true;
        keep[1] = true;
        keep[2] = true;
        let mask = SelectionMask::new(keep, 0.85);
        let sgd = SgdConfig { epochs_per_iter: 200, learning_rate: 0.01, ..SgdConfig::default() };
        let out = fine_tune(&model, &ds, &labels, &mask, 3, &sgd, &mut rng).unwrap();
        assert!(out.final_loss() < 0.5 * out.epoch_losses[0]);
        assert_eq!(out.model.num_classes(), 3);
    }

    #[test]
    fn fine_tune_separable_reaches_full_accuracy() {
        let mut rng = seeded_rng(11);
        let rows: Vec<Vec<f32>> = (0..40)
            .map(|i| {
                let s = if i < 20 { 1.0 } else { -1.0 };
                vec![s * 2.0 + (i % 5) as f32 * 0.1, -s + (i % 3) as f32 * 0.1, 0.5]
            })
            .collect();
        let labels: Vec<usize> = (0..40).map(|i| usize::from(i >= 20)).collect();
        let ds = Dataset::from_rows(&rows, None, None).unwrap();
        let model = EmbedModel::random(Architecture::Hidden { hidden_dim: 8 }, 3, 4, 2, &mut rng).unwrap();
        let sgd = SgdConfig { epochs_per_iter: 300, ..SgdConfig::default() };
        let out = fine_tune(&model, &ds, &labels, &SelectionMask::all(40, 0.0), 2, &sgd, &mut rng).unwrap();
        let examples: Vec<_> = (0..40).map(|i| (ds.row_f64(i), labels[i])).collect();
        assert_eq!(accuracy(&out.model, &examples).unwrap(), 1.0);
    }
}
