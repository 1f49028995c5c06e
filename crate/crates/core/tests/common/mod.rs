//! Reference implementations used by the integration tests. They are written
//! against the definitions (plain loops, brute force) and share no code with
//! the library beyond its data types.

#![allow(dead_code)]

use pul::{Architecture, EmbedModel, PulRng};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> PulRng {
    PulRng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut PulRng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn gaussian_rows(rng: &mut PulRng, n: usize, dim: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| scale * gaussian(rng)).collect()).collect()
}

// ---------------------------------------------------------------------------
// classifier loss

/// Mean cross-entropy of `model` on `batch`, and the smallest absolute
/// pre-activation seen in any rectified layer.
pub fn reference_loss(model: &EmbedModel, batch: &[(Vec<f64>, usize)]) -> (f64, f64) {
    let mut total = 0.0;
    let mut min_pre = f64::INFINITY;
    for (x, label) in batch {
        let mut h = x.clone();
        for layer in &model.embedder {
            let mut next = vec![0.0; layer.outputs];
            for o in 0..layer.outputs {
                let mut z = layer.bias[o];
                for i in 0..layer.inputs {
                    z += layer.weight[o * layer.inputs + i] * h[i];
                }
                min_pre = min_pre.min(z.abs());
                next[o] = if z > 0.0 { z } else { 0.0 };
            }
            h = next;
        }
        let head = &model.head;
        let mut logits = vec![0.0; head.outputs];
        for (c, l) in logits.iter_mut().enumerate() {
            *l = head.bias[c];
            for i in 0..head.inputs {
                *l += head.weight[c * head.inputs + i] * h[i];
            }
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        total += lse - logits[*label];
    }
    (total / batch.len() as f64, min_pre)
}

/// Addresses every scalar parameter as (layer, is_bias, index); layer
/// `embedder.len()` is the head.
pub fn param_slots(model: &EmbedModel) -> Vec<(usize, bool, usize)> {
    let mut out = Vec::new();
    let layers: Vec<_> = model.embedder.iter().chain(std::iter::once(&model.head)).collect();
    for (l, layer) in layers.iter().enumerate() {
        out.extend((0..layer.weight.len()).map(|i| (l, false, i)));
        out.extend((0..layer.bias.len()).map(|i| (l, true, i)));
    }
    out
}

pub fn param_mut(model: &mut EmbedModel, slot: (usize, bool, usize)) -> &mut f64 {
    let n = model.embedder.len();
    let layer = if slot.0 == n { &mut model.head } else { &mut model.embedder[slot.0] };
    if slot.1 {
        &mut layer.bias[slot.2]
    } else {
        &mut layer.weight[slot.2]
    }
}

pub fn grad_at(grads: &pul::embedder::GradientSet, n_embed: usize, slot: (usize, bool, usize)) -> f64 {
    let layer = if slot.0 == n_embed { &grads.head } else { &grads.embedder[slot.0] };
    if slot.1 {
        layer.bias[slot.2]
    } else {
        layer.weight[slot.2]
    }
}

pub struct GradientInstance {
    pub model: EmbedModel,
    pub batch: Vec<(Vec<f64>, usize)>,
}

/// A small random model and batch. Biases are redrawn so that no layer
/// starts from a uniform bias.
pub fn gradient_instance(seed: u64) -> GradientInstance {
    let mut r = rng(seed);
    let input = r.random_range(2..=6);
    let embed = r.random_range(2..=5);
    let classes = r.random_range(2..=5);
    let arch = if r.random_bool(0.3) {
        Architecture::Linear
    } else {
        Architecture::Hidden { hidden_dim: r.random_range(2..=6) }
    };
    let mut model = EmbedModel::random(arch, input, embed, classes, &mut r).unwrap();
    for layer in model.embedder.iter_mut().chain(std::iter::once(&mut model.head)) {
        for b in &mut layer.bias {
            *b = r.random_range(-0.5..0.5);
        }
    }
    let size = r.random_range(1..=6);
    let batch = (0..size)
        .map(|_| ((0..input).map(|_| gaussian(&mut r)).collect(), r.random_range(0..classes)))
        .collect();
    GradientInstance { model, batch }
}

pub fn grad_close(analytic: f64, numeric: f64) -> bool {
    let scale = analytic.abs().max(numeric.abs());
    (analytic - numeric).abs() <= (1e-4 * scale).max(1e-7)
}

// ---------------------------------------------------------------------------
// k-means

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s
}

/// Sum of squared distances to the cluster means of `assignment`.
pub fn partition_objective(features: &[Vec<f64>], assignment: &[usize], k: usize) -> f64 {
    let dim = features[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (x, &a) in features.iter().zip(assignment) {
        counts[a] += 1;
        for d in 0..dim {
            sums[a][d] += x[d];
        }
    }
    let means: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| s.iter().map(|v| v / c.max(1) as f64).collect())
        .collect();
    features.iter().zip(assignment).map(|(x, &a)| sq_dist(x, &means[a])).sum()
}

/// Global optimum over all `k^n` assignments.
pub fn brute_force_optimum(features: &[Vec<f64>], k: usize) -> f64 {
    let n = features.len();
    let total = k.pow(n as u32);
    let mut assignment = vec![0usize; n];
    let mut best = f64::INFINITY;
    for code in 0..total {
        let mut c = code;
        for a in assignment.iter_mut() {
            *a = c % k;
            c /= k;
        }
        best = best.min(partition_objective(features, &assignment, k));
    }
    best
}

/// `k` blobs far apart with at least one point each, `n` points in total.
pub fn separated_blobs(r: &mut PulRng, n: usize, k: usize, spread: f64, sigma: f64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let centers: Vec<Vec<f64>> = (0..k).map(|c| vec![spread * c as f64, spread * (c % 2) as f64]).collect();
    let mut labels: Vec<usize> = (0..k).collect();
    labels.extend((k..n).map(|_| r.random_range(0..k)));
    let points = labels
        .iter()
        .map(|&c| centers[c].iter().map(|m| m + sigma * gaussian(r)).collect())
        .collect();
    (points, labels)
}

// ---------------------------------------------------------------------------
// selection

pub fn unit(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / norm).collect()
    }
}

/// Per cluster, the member nearest the centroid (lowest index on ties).
pub fn reference_centers(features: &[Vec<f64>], assignments: &[usize], centroids: &[Vec<f64>]) -> Vec<usize> {
    let mut best: Vec<Option<(f64, usize)>> = vec![None; centroids.len()];
    for (i, x) in features.iter().enumerate() {
        let c = assignments[i];
        let d = sq_dist(x, &centroids[c]);
        if best[c].is_none_or(|(bd, _)| d < bd) {
            best[c] = Some((d, i));
        }
    }
    best.into_iter().map(|b| b.unwrap().1).collect()
}

/// Cosine of every sample to its cluster's center.
pub fn reference_cosines(features: &[Vec<f64>], assignments: &[usize], centers: &[usize]) -> Vec<f64> {
    (0..features.len())
        .map(|i| {
            let a = unit(&features[i]);
            let b = unit(&features[centers[assignments[i]]]);
            let mut s = 0.0;
            for d in 0..a.len() {
                s += a[d] * b[d];
            }
            s
        })
        .collect()
}

/// Threshold rule, one sample at a time.
pub fn reference_selection(cosines: &[f64], centers: &[usize], lambda: f64) -> Vec<bool> {
    let mut v = vec![false; cosines.len()];
    for i in 0..cosines.len() {
        v[i] = cosines[i] > lambda;
        for &c in centers {
            if c == i {
                v[i] = true;
            }
        }
    }
    v
}

/// Minimum of `sum_i v_i (lambda - delta_i)` over every `v` that keeps the
/// centers, by enumeration of all `2^n` vectors.
pub fn enumerate_surrogate(cosines: &[f64], centers: &[usize], lambda: f64) -> (f64, Vec<Vec<bool>>) {
    let n = cosines.len();
    let mut best = f64::INFINITY;
    let mut argmins = Vec::new();
    for code in 0u32..(1 << n) {
        let v: Vec<bool> = (0..n).map(|i| code >> i & 1 == 1).collect();
        if centers.iter().any(|&c| !v[c]) {
            continue;
        }
        let value: f64 = (0..n).filter(|&i| v[i]).map(|i| lambda - cosines[i]).sum();
        if value < best - 1e-12 {
            best = value;
            argmins = vec![v];
        } else if (value - best).abs() <= 1e-12 {
            argmins.push(v);
        }
    }
    (best, argmins)
}

// ---------------------------------------------------------------------------
// retrieval

pub struct RetrievalCase {
    pub query: Vec<Vec<f64>>,
    pub query_ids: Vec<u32>,
    pub query_cams: Vec<u32>,
    pub gallery: Vec<Vec<f64>>,
    pub gallery_ids: Vec<u32>,
    pub gallery_cams: Vec<u32>,
}

pub fn retrieval_case(seed: u64) -> RetrievalCase {
    let mut r = rng(seed);
    let dim = r.random_range(2..=5);
    let ids = r.random_range(1..=6u32);
    let cams = r.random_range(1..=3u32);
    let nq = r.random_range(1..=10);
    let ng = r.random_range(1..=50);
    let mut draw = |n: usize| -> (Vec<Vec<f64>>, Vec<u32>, Vec<u32>) {
        let f = (0..n).map(|_| unit(&(0..dim).map(|_| gaussian(&mut r)).collect::<Vec<_>>())).collect();
        let i = (0..n).map(|_| r.random_range(0..ids)).collect();
        let c = (0..n).map(|_| r.random_range(0..cams)).collect();
        (f, i, c)
    };
    let (query, query_ids, query_cams) = draw(nq);
    let (gallery, gallery_ids, gallery_cams) = draw(ng);
    RetrievalCase {
        query,
        query_ids,
        query_cams,
        gallery,
        gallery_ids,
        gallery_cams,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceMetrics {
    pub cmc: [f64; 4],
    pub map: f64,
    pub skipped: Vec<usize>,
}

/// Quadratic recomputation: each gallery item's rank is the number of kept
/// items strictly ahead of it (higher similarity, or equal similarity and
/// lower index).
pub fn reference_metrics(case: &RetrievalCase, camera_filter: bool) -> ReferenceMetrics {
    let ranks = [1usize, 5, 10, 20];
    let mut hits = [0usize; 4];
    let mut ap_sum = 0.0;
    let mut skipped = Vec::new();
    for q in 0..case.query.len() {
        let sim = |g: usize| -> f64 {
            let mut s = 0.0;
            for d in 0..case.query[q].len() {
                s += case.query[q][d] * case.gallery[g][d];
            }
            s
        };
        let kept: Vec<usize> = (0..case.gallery.len())
            .filter(|&g| {
                !(camera_filter
                    && case.gallery_ids[g] == case.query_ids[q]
                    && case.gallery_cams[g] == case.query_cams[q])
            })
            .collect();
        let mut positions: Vec<usize> = Vec::new();
        for &g in &kept {
            if case.gallery_ids[g] != case.query_ids[q] {
                continue;
            }
            let ahead = kept
                .iter()
                .filter(|&&h| sim(h) > sim(g) || (sim(h) == sim(g) && h < g))
                .count();
            positions.push(ahead);
        }
        if positions.is_empty() {
            skipped.push(q);
            continue;
        }
        positions.sort_unstable();
        let mut ap = 0.0;
        for (r, &p) in positions.iter().enumerate() {
            ap += (r + 1) as f64 / (p + 1) as f64;
        }
        ap_sum += ap / positions.len() as f64;
        for (h, &k) in hits.iter_mut().zip(&ranks) {
            if positions[0] < k {
                *h += 1;
            }
        }
    }
    let evaluated = case.query.len() - skipped.len();
    let frac = |h: usize| if evaluated == 0 { 0.0 } else { h as f64 / evaluated as f64 };
    ReferenceMetrics {
        cmc: [frac(hits[0]), frac(hits[1]), frac(hits[2]), frac(hits[3])],
        map: if evaluated == 0 { 0.0 } else { ap_sum / evaluated as f64 },
        skipped,
    }
}
