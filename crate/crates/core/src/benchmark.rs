//! Seeded comparison on the synthetic benchmark: direct transfer of the
//! original model versus PUL, PUL without selection, and semi-supervised PUL.

use serde::{Deserialize, Serialize};

use crate::data_io::{generate_synthetic, split_labeled_ids, SyntheticSpec};
use crate::error::Result;
use crate::evaluation::{evaluate, EvalProtocol, RetrievalMetrics};
use crate::pul::{init_original_model, run_pul, run_semi_supervised, PulRun};
use crate::types::{EmbedModel, PulConfig};
use crate::{stream_rng, RngStream};

/// Which arms to run besides the baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arms {
    pub pul: bool,
    pub no_selection: bool,
    /// Number of labeled target ids for the semi-supervised arm.
    pub semi_ids: Option<usize>,
}

impl Default for Arms {
    fn default() -> Self {
        Arms {
            pul: true,
            no_selection: true,
            semi_ids: Some(5),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmReport {
    pub metrics: RetrievalMetrics,
    pub selected_fractions: Vec<f64>,
    pub iterations: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub baseline: RetrievalMetrics,
    pub pul: Option<ArmReport>,
    pub no_selection: Option<ArmReport>,
    pub semi: Option<ArmReport>,
}

/// Benchmark spec for one seed: the data layout of `base` with the data
/// and domain-shift seeds derived from `seed`.
pub fn spec_for_seed(base: &SyntheticSpec, seed: u64) -> SyntheticSpec {
    let mut spec = base.clone();
    spec.seed = seed;
    spec.target.shift.rotation_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1);
    spec
}

fn report(run: &PulRun, query: &crate::Dataset, gallery: &crate::Dataset) -> Result<ArmReport> {
    Ok(ArmReport {
        metrics: evaluate(query, gallery, run.model(), EvalProtocol::default())?,
        selected_fractions: run.history().iter().map(|r| r.selected_fraction).collect(),
        iterations: run.history().len(),
    })
}

/// Runs every requested arm for one seed. All arms start from the same
/// original model and use the same run seed.
pub fn run_seed(base_spec: &SyntheticSpec, base_config: &PulConfig, seed: u64, arms: Arms) -> Result<SeedReport> {
    let spec = spec_for_seed(base_spec, seed);
    let data = generate_synthetic(&spec)?;
    let config = PulConfig { seed, ..base_config.clone() };
    let original: EmbedModel = init_original_model(&data.source, &config, &mut stream_rng(seed, RngStream::Init))?.model;
    let (q, g) = (&data.target_query, &data.target_gallery);
    let baseline = evaluate(q, g, &original, EvalProtocol::default())?;

    let pul = arms
        .pul
        .then(|| run_pul(&data.target_train, &original, &config, &mut stream_rng(seed, RngStream::Run)))
        .transpose()?
        .map(|r| report(&r, q, g))
        .transpose()?;
    let no_selection = arms
        .no_selection
        .then(|| {
            let cfg = PulConfig { selection_enabled: false, ..config.clone() };
            run_pul(&data.target_train, &original, &cfg, &mut stream_rng(seed, RngStream::Run))
        })
        .transpose()?
        .map(|r| report(&r, q, g))
        .transpose()?;
    let semi = match arms.semi_ids {
        Some(l) => {
            let (unlabeled, labeled) = split_labeled_ids(&data.target_train, &data.target_train_labels, l)?;
            let cfg = PulConfig {
                k: config.k.saturating_sub(labeled.as_ref().map_or(0, |_| l)).max(1),
                ..config.clone()
            };
            let run = run_semi_supervised(
                unlabeled.as_ref(),
                labeled.as_ref(),
                &original,
                &cfg,
                &mut stream_rng(seed, RngStream::Run),
                None,
            )?;
            Some(report(&run, q, g)?)
        }
        None => None,
    };
    Ok(SeedReport {
        seed,
        baseline,
        pul,
        no_selection,
        semi,
    })
}
