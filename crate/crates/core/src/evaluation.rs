//! Single-query retrieval evaluation: CMC rank-k accuracy and mAP.
//!
//! Gallery entries are ranked by descending cosine similarity of unit
//! features. Equal similarities are ordered by ascending tie key, which is
//! the gallery index unless explicit keys are supplied. Under the
//! cross-camera protocol, gallery entries sharing both identity and camera
//! with the query are removed before scoring.

use serde::{Deserialize, Serialize};

use crate::embedder::embed_dataset;
use crate::error::{PulError, Result};
use crate::selection::{dot, l2_normalize};
use crate::types::{Dataset, EmbedModel};

pub const CMC_RANKS: [usize; 4] = [1, 5, 10, 20];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub rank20: f64,
    pub map: f64,
    pub num_queries: usize,
    /// Queries with no valid match in the (filtered) gallery.
    pub skipped_queries: Vec<usize>,
}

impl RetrievalMetrics {
    pub fn evaluated(&self) -> usize {
        self.num_queries - self.skipped_queries.len()
    }

    pub fn rank(&self, k: usize) -> Option<f64> {
        match k {
            1 => Some(self.rank1),
            5 => Some(self.rank5),
            10 => Some(self.rank10),
            20 => Some(self.rank20),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalProtocol {
    /// Drop same-identity same-camera gallery entries when camera ids exist.
    pub camera_filter: bool,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol { camera_filter: true }
    }
}

/// Unit features with identities, optional cameras and optional tie keys.
#[derive(Debug, Clone, Copy)]
pub struct LabeledFeatures<'a> {
    pub features: &'a [Vec<f64>],
    pub ids: &'a [u32],
    pub cameras: Option<&'a [u32]>,
    /// Canonical order used to break similarity ties.
    pub tie_keys: Option<&'a [usize]>,
}

impl<'a> LabeledFeatures<'a> {
    pub fn new(features: &'a [Vec<f64>], ids: &'a [u32], cameras: Option<&'a [u32]>) -> Self {
        LabeledFeatures {
            features,
            ids,
            cameras,
            tie_keys: None,
        }
    }

    fn check(&self, what: &str) -> Result<()> {
        let n = self.features.len();
        let bad = self.ids.len() != n
            || self.cameras.is_some_and(|c| c.len() != n)
            || self.tie_keys.is_some_and(|k| k.len() != n);
        if bad {
            return Err(PulError::invalid(format!("{what}: side arrays do not match {n} features")));
        }
        Ok(())
    }
}

/// L2-normalized embeddings of every row.
pub fn extract_features(model: &EmbedModel, dataset: &Dataset) -> Result<Vec<Vec<f64>>> {
    Ok(l2_normalize(&embed_dataset(model, dataset)?).features)
}

/// Gallery indices by descending similarity, ties by ascending index.
pub fn rank_gallery(query: &[f64], gallery: &[Vec<f64>]) -> Vec<usize> {
    rank_gallery_keyed(query, gallery, None)
}

pub fn rank_gallery_keyed(query: &[f64], gallery: &[Vec<f64>], tie_keys: Option<&[usize]>) -> Vec<usize> {
    let sims: Vec<f64> = gallery.iter().map(|g| dot(query, g)).collect();
    let key = |i: usize| tie_keys.map_or(i, |k| k[i]);
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(key(a).cmp(&key(b))));
    order
}

/// Mean precision at the positions of relevant items; `None` without any.
pub fn average_precision(ranked_relevance: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, _) in ranked_relevance.iter().enumerate().filter(|(_, &r)| r) {
        hits += 1;
        sum += hits as f64 / (pos + 1) as f64;
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Metrics from precomputed unit features.
pub fn evaluate_features(
    queries: &LabeledFeatures,
    gallery: &LabeledFeatures,
    protocol: EvalProtocol,
) -> Result<RetrievalMetrics> {
    queries.check("query")?;
    gallery.check("gallery")?;
    let filter_cams = match (protocol.camera_filter, queries.cameras, gallery.cameras) {
        (true, Some(q), Some(g)) => Some((q, g)),
        _ => None,
    };

    let mut cmc_hits = [0usize; CMC_RANKS.len()];
    let mut ap_sum = 0.0;
    let mut skipped = Vec::new();
    for (qi, query) in queries.features.iter().enumerate() {
        let qid = queries.ids[qi];
        let relevance: Vec<bool> = rank_gallery_keyed(query, gallery.features, gallery.tie_keys)
            .into_iter()
            .filter(|&g| match filter_cams {
                Some((qc, gc)) => !(gallery.ids[g] == qid && gc[g] == qc[qi]),
                None => true,
            })
            .map(|g| gallery.ids[g] == qid)
            .collect();
        let Some(ap) = average_precision(&relevance) else {
            skipped.push(qi);
            continue;
        };
        ap_sum += ap;
        let first = relevance.iter().position(|&r| r).unwrap();
        for (hits, &k) in cmc_hits.iter_mut().zip(&CMC_RANKS) {
            *hits += usize::from(first < k);
        }
    }

    let evaluated = queries.features.len() - skipped.len();
    let frac = |h: usize| if evaluated == 0 { 0.0 } else { h as f64 / evaluated as f64 };
    Ok(RetrievalMetrics {
        rank1: frac(cmc_hits[0]),
        rank5: frac(cmc_hits[1]),
        rank10: frac(cmc_hits[2]),
        rank20: frac(cmc_hits[3]),
        map: if evaluated == 0 { 0.0 } else { ap_sum / evaluated as f64 },
        num_queries: queries.features.len(),
        skipped_queries: skipped,
    })
}

/// Embeds both sets with `model` and scores the query set against the gallery.
pub fn evaluate(
    query_set: &Dataset,
    gallery_set: &Dataset,
    model: &EmbedModel,
    protocol: EvalProtocol,
) -> Result<RetrievalMetrics> {
    let (Some(qids), Some(gids)) = (query_set.labels(), gallery_set.labels()) else {
        return Err(PulError::invalid("query and gallery sets need identity labels"));
    };
    let qf = extract_features(model, query_set)?;
    let gf = extract_features(model, gallery_set)?;
    evaluate_features(
        &LabeledFeatures::new(&qf, qids, query_set.camera_ids()),
        &LabeledFeatures::new(&gf, gids, gallery_set.camera_ids()),
        protocol,
    )
}
