//! Synthetic domain-shift benchmark, dataset and model files, run history.
//!
//! Dataset file (little endian):
//!
//! ```text
//! magic    8 bytes  "PULDATA\0"
//! version  u32      1
//! flags    u32      bit 0: labels present, bit 1: camera ids present
//! n        u64
//! dim      u64
//! samples  n * dim f32, row-major
//! labels   n u32    (if flagged)
//! cameras  n u32    (if flagged)
//! ```
//!
//! Model file (little endian):
//!
//! ```text
//! magic    8 bytes  "PULMODEL"
//! version  u32      1
//! arch     u32      0: linear, 1: one hidden layer
//! layers   u32      number of embedder layers (the head follows them)
//! per layer, embedder layers first, then the head:
//!   inputs u64, outputs u64, weight outputs*inputs f64, bias outputs f64
//! ```
//!
//! History files hold one JSON record per line.

use std::fs::{File, OpenOptions, TryLockError};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{PulError, Result};
use crate::types::{Architecture, Dataset, Dense, EmbedModel, IterationRecord};

pub const DATASET_MAGIC: &[u8; 8] = b"PULDATA\0";
pub const DATASET_VERSION: u32 = 1;
pub const MODEL_MAGIC: &[u8; 8] = b"PULMODEL";
pub const MODEL_VERSION: u32 = 1;

const FLAG_LABELS: u32 = 1;
const FLAG_CAMERAS: u32 = 2;

// ---------------------------------------------------------------------------
// synthetic benchmark

/// An identity population: prototypes spread in a random `identity_rank`
/// dimensional subspace, samples scattered isotropically around them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Population {
    pub num_ids: usize,
    pub samples_per_id: usize,
    /// Per-sample noise around the identity prototype.
    pub sigma_within: f64,
    /// Spread of the identity prototypes.
    pub sigma_between: f64,
    /// Dimension of the subspace the prototypes vary in.
    pub identity_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShift {
    /// Rotate target samples by a random orthogonal matrix.
    pub rotate: bool,
    pub rotation_seed: u64,
    /// Rotate by this angle (radians) in every plane of a random plane
    /// decomposition instead of a uniformly random orthogonal matrix.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation_angle: Option<f64>,
    /// Norm of the translation applied to target samples.
    pub translation_scale: f64,
    /// Extra isotropic noise on target samples.
    pub extra_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    #[serde(flatten)]
    pub population: Population,
    pub shift: DomainShift,
    /// Reuse the source prototypes and identity subspace (only meaningful
    /// when both populations have the same number of ids).
    #[serde(default)]
    pub share_source_prototypes: bool,
    /// Draw new target prototypes inside the source identity subspace
    /// (needs matching identity_rank).
    #[serde(default)]
    pub share_identity_subspace: bool,
    pub query_per_id: usize,
    pub gallery_per_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub raw_dim: usize,
    pub cameras_per_id: usize,
    pub seed: u64,
    pub source: Population,
    pub target: TargetSpec,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            raw_dim: 24,
            cameras_per_id: 4,
            seed: 7,
            source: Population {
                num_ids: 20,
                samples_per_id: 30,
                sigma_within: 2.25,
                sigma_between: 4.5,
                identity_rank: 8,
            },
            target: TargetSpec {
                population: Population {
                    num_ids: 15,
                    samples_per_id: 90,
                    sigma_within: 2.25,
                    sigma_between: 4.5,
                    identity_rank: 8,
                },
                shift: DomainShift {
                    rotate: true,
                    rotation_seed: 11,
                    rotation_angle: Some(1.2),
                    translation_scale: 2.0,
                    extra_noise: 0.2,
                },
                share_source_prototypes: false,
                share_identity_subspace: true,
                query_per_id: 4,
                gallery_per_id: 8,
            },
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PulError::invalid(m));
        if self.raw_dim < 1 {
            return bad("raw_dim must be >= 1".into());
        }
        if self.cameras_per_id < 2 {
            return bad("cameras_per_id must be >= 2".into());
        }
        for (name, p) in [("source", &self.source), ("target", &self.target.population)] {
            if p.num_ids < 1 || p.samples_per_id < 1 {
                return bad(format!("{name}: num_ids and samples_per_id must be >= 1"));
            }
            if !(p.sigma_within >= 0.0 && p.sigma_within < p.sigma_between) {
                return bad(format!(
                    "{name}: sigma_within ({}) must be nonnegative and below sigma_between ({})",
                    p.sigma_within, p.sigma_between
                ));
            }
            if p.identity_rank < 1 || p.identity_rank > self.raw_dim {
                return bad(format!("{name}: identity_rank must lie in 1..=raw_dim"));
            }
        }
        let t = &self.target;
        if t.query_per_id < 1 || t.gallery_per_id < 1 {
            return bad("target: query_per_id and gallery_per_id must be >= 1".into());
        }
        if t.query_per_id + t.gallery_per_id >= t.population.samples_per_id {
            return bad("target: query + gallery samples must leave training samples per id".into());
        }
        if t.share_source_prototypes
            && (t.population.num_ids != self.source.num_ids
                || t.population.identity_rank != self.source.identity_rank)
        {
            return bad("target: shared prototypes need matching num_ids and identity_rank".into());
        }
        if t.share_identity_subspace && t.population.identity_rank != self.source.identity_rank {
            return bad("target: a shared identity subspace needs matching identity_rank".into());
        }
        if t.shift.rotation_angle.is_some_and(|a| !a.is_finite()) {
            return bad("target: rotation_angle must be finite".into());
        }
        if !(t.shift.translation_scale >= 0.0 && t.shift.extra_noise >= 0.0) {
            return bad("target: shift magnitudes must be nonnegative".into());
        }
        Ok(())
    }
}

/// The four benchmark splits. `target_train_labels` is the hidden truth of
/// the unlabeled training split, kept for building labeled subsets and for
/// diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSplits {
    pub source: Dataset,
    pub target_train: Dataset,
    pub target_query: Dataset,
    pub target_gallery: Dataset,
    pub target_train_labels: Vec<u32>,
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Random orthogonal matrix (rows), Gram-Schmidt on a Gaussian matrix.
pub fn random_orthogonal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while basis.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

fn matvec(m: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

/// Prototypes `sigma_between * B z` with `B` the first `rank` rows of
/// `basis`.
fn prototypes<R: Rng + ?Sized>(basis: &[Vec<f64>], pop: &Population, rng: &mut R) -> Vec<Vec<f64>> {
    let dim = basis.len();
    (0..pop.num_ids)
        .map(|_| {
            let z: Vec<f64> = (0..pop.identity_rank).map(|_| gaussian(rng) * pop.sigma_between).collect();
            (0..dim)
                .map(|d| basis[..pop.identity_rank].iter().zip(&z).map(|(b, c)| b[d] * c).sum())
                .collect()
        })
        .collect()
}

/// `B^T G B` where `B` is a random orthogonal basis and `G` rotates each
/// consecutive pair of basis vectors by `angle`.
pub fn planar_rotation<R: Rng + ?Sized>(dim: usize, angle: f64, rng: &mut R) -> Vec<Vec<f64>> {
    let basis = random_orthogonal(dim, rng);
    let (sin, cos) = angle.sin_cos();
    let mut rotated = basis.clone();
    for p in 0..dim / 2 {
        let (a, b) = (&basis[2 * p], &basis[2 * p + 1]);
        rotated[2 * p] = a.iter().zip(b).map(|(x, y)| cos * x - sin * y).collect();
        rotated[2 * p + 1] = a.iter().zip(b).map(|(x, y)| sin * x + cos * y).collect();
    }
    // R[i][j] = sum_k basis[k][i] * rotated[k][j]
    (0..dim)
        .map(|i| (0..dim).map(|j| basis.iter().zip(&rotated).map(|(b, r)| b[i] * r[j]).sum()).collect())
        .collect()
}

fn noisy<R: Rng + ?Sized>(proto: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    proto.iter().map(|p| p + sigma * gaussian(rng)).collect()
}

fn to_f32(rows: &[Vec<f64>]) -> Vec<Vec<f32>> {
    rows.iter().map(|r| r.iter().map(|&v| v as f32).collect()).collect()
}

/// Generates the benchmark; a pure function of `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticSplits> {
    spec.validate()?;
    let mut rng = crate::seeded_rng(spec.seed);
    let dim = spec.raw_dim;
    let cams = spec.cameras_per_id as u32;

    let source_basis = random_orthogonal(dim, &mut rng);
    let source_protos = prototypes(&source_basis, &spec.source, &mut rng);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut cameras = Vec::new();
    for (id, proto) in source_protos.iter().enumerate() {
        for j in 0..spec.source.samples_per_id {
            rows.push(noisy(proto, spec.source.sigma_within, &mut rng));
            labels.push(id as u32);
            cameras.push(j as u32 % cams);
        }
    }
    let source = Dataset::from_rows(&to_f32(&rows), Some(labels), Some(cameras))?;

    let t = &spec.target;
    let target_protos = if t.share_source_prototypes {
        source_protos
    } else if t.share_identity_subspace {
        prototypes(&source_basis, &t.population, &mut rng)
    } else {
        let basis = random_orthogonal(dim, &mut rng);
        prototypes(&basis, &t.population, &mut rng)
    };
    let mut shift_rng = crate::seeded_rng(t.shift.rotation_seed);
    let rotation = t.shift.rotate.then(|| match t.shift.rotation_angle {
        Some(angle) => planar_rotation(dim, angle, &mut shift_rng),
        None => random_orthogonal(dim, &mut shift_rng),
    });
    let direction: Vec<f64> = (0..dim).map(|_| gaussian(&mut shift_rng)).collect();
    let dnorm = direction.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let translation: Vec<f64> = direction.iter().map(|v| v / dnorm * t.shift.translation_scale).collect();

    let mut splits: [(Vec<Vec<f64>>, Vec<u32>, Vec<u32>); 3] = Default::default();
    for (id, proto) in target_protos.iter().enumerate() {
        for j in 0..t.population.samples_per_id {
            let clean = noisy(proto, t.population.sigma_within, &mut rng);
            let rotated = match &rotation {
                Some(r) => matvec(r, &clean),
                None => clean,
            };
            let x: Vec<f64> = rotated
                .iter()
                .zip(&translation)
                .map(|(v, tr)| v + tr + t.shift.extra_noise * gaussian(&mut rng))
                .collect();
            let part = if j < t.query_per_id {
                0
            } else if j < t.query_per_id + t.gallery_per_id {
                1
            } else {
                2
            };
            splits[part].0.push(x);
            splits[part].1.push(id as u32);
            splits[part].2.push(j as u32 % cams);
        }
    }
    let [(qr, ql, qc), (gr, gl, gc), (tr, tl, tc)] = splits;

    let mut order: Vec<usize> = (0..tr.len()).collect();
    order.shuffle(&mut rng);
    let train_rows: Vec<Vec<f64>> = order.iter().map(|&i| tr[i].clone()).collect();
    let train_labels: Vec<u32> = order.iter().map(|&i| tl[i]).collect();
    let train_cams: Vec<u32> = order.iter().map(|&i| tc[i]).collect();

    Ok(SyntheticSplits {
        source,
        target_train: Dataset::from_rows(&to_f32(&train_rows), None, Some(train_cams))?,
        target_query: Dataset::from_rows(&to_f32(&qr), Some(ql), Some(qc))?,
        target_gallery: Dataset::from_rows(&to_f32(&gr), Some(gl), Some(gc))?,
        target_train_labels: train_labels,
    })
}

/// Splits the unlabeled training set into the samples of the `num_ids`
/// lowest target identities (returned with labels) and the rest.
pub fn split_labeled_ids(
    train: &Dataset,
    truth: &[u32],
    num_ids: usize,
) -> Result<(Option<Dataset>, Option<Dataset>)> {
    if truth.len() != train.len() {
        return Err(PulError::invalid("truth labels do not match the training set"));
    }
    let mut ids: Vec<u32> = truth.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let chosen = &ids[..num_ids.min(ids.len())];
    let (lab, unl): (Vec<usize>, Vec<usize>) = (0..train.len()).partition(|&i| chosen.contains(&truth[i]));
    let unlabeled = (!unl.is_empty()).then(|| train.subset(&unl)).transpose()?;
    let labeled = if lab.is_empty() {
        None
    } else {
        let labels = lab.iter().map(|&i| truth[i]).collect();
        Some(train.subset(&lab)?.with_labels(Some(labels))?)
    };
    Ok((unlabeled, labeled))
}

// ---------------------------------------------------------------------------
// binary helpers

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(PulError::parse(
                self.pos as u64,
                format!("truncated {what}: need {len} bytes, {} left", self.bytes.len() - self.pos),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn size(&mut self, what: &str) -> Result<usize> {
        let at = self.pos as u64;
        usize::try_from(self.u64(what)?).map_err(|_| PulError::parse(at, format!("{what} too large")))
    }

    fn expect_magic(&mut self, magic: &[u8; 8]) -> Result<()> {
        let got = self.take(8, "magic")?;
        if got != magic {
            return Err(PulError::parse(0, format!("bad magic {:?}", String::from_utf8_lossy(got))));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(PulError::parse(
                self.pos as u64,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn checked_len(at: usize, a: usize, b: usize, width: usize) -> Result<usize> {
    a.checked_mul(b)
        .and_then(|v| v.checked_mul(width))
        .ok_or_else(|| PulError::parse(at as u64, "size overflow"))
}

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + ds.samples().len() * 4 + ds.len() * 8);
    let flags = if ds.labels().is_some() { FLAG_LABELS } else { 0 }
        | if ds.camera_ids().is_some() { FLAG_CAMERAS } else { 0 };
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    out.extend_from_slice(&(ds.dim() as u64).to_le_bytes());
    for v in ds.samples() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for arr in [ds.labels(), ds.camera_ids()].into_iter().flatten() {
        for v in arr {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { bytes, pos: 0 };
    r.expect_magic(DATASET_MAGIC)?;
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(PulError::UnsupportedVersion {
            found: version,
            supported: DATASET_VERSION,
        });
    }
    let flags_at = r.pos;
    let flags = r.u32("flags")?;
    if flags & !(FLAG_LABELS | FLAG_CAMERAS) != 0 {
        return Err(PulError::parse(flags_at as u64, format!("unknown flags {flags:#x}")));
    }
    let n_at = r.pos;
    let n = r.size("sample count")?;
    let dim = r.size("dimension")?;
    if n == 0 || dim == 0 {
        return Err(PulError::parse(n_at as u64, "empty dataset header"));
    }
    let sample_bytes = r.take(checked_len(n_at, n, dim, 4)?, "samples")?;
    let samples = sample_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut read_ids = |flag: u32, what: &str| -> Result<Option<Vec<u32>>> {
        if flags & flag == 0 {
            return Ok(None);
        }
        let raw = r.take(checked_len(r.pos, n, 1, 4)?, what)?;
        Ok(Some(raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect()))
    };
    let labels = read_ids(FLAG_LABELS, "labels")?;
    let cameras = read_ids(FLAG_CAMERAS, "camera ids")?;
    r.finish()?;
    Dataset::new(dim, samples, labels, cameras)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(bytes)?;
    f.flush()?;
    Ok(())
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    write_bytes(path.as_ref(), &encode_dataset(ds))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&std::fs::read(path)?)
}

/// CSV layout: optional `label` and `camera` columns, every other column is
/// a feature, in header order.
pub fn load_dataset_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_error)?;
    let headers = reader.headers().map_err(csv_error)?.clone();
    let label_col = headers.iter().position(|h| h.trim() == "label");
    let camera_col = headers.iter().position(|h| h.trim() == "camera");
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|&c| Some(c) != label_col && Some(c) != camera_col)
        .collect();
    let mut rows = Vec::new();
    let mut labels = label_col.map(|_| Vec::new());
    let mut cameras = camera_col.map(|_| Vec::new());
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        let at = record.position().map_or(0, |p| p.byte());
        let field = |c: usize| record.get(c).unwrap_or("").trim();
        let row = feature_cols
            .iter()
            .map(|&c| field(c).parse::<f32>().map_err(|e| PulError::parse(at, format!("column {c}: {e}"))))
            .collect::<Result<Vec<f32>>>()?;
        rows.push(row);
        for (col, out) in [(label_col, &mut labels), (camera_col, &mut cameras)] {
            if let (Some(c), Some(out)) = (col, out.as_mut()) {
                out.push(field(c).parse::<u32>().map_err(|e| PulError::parse(at, format!("column {c}: {e}")))?);
            }
        }
    }
    Dataset::from_rows(&rows, labels, cameras)
}

pub fn save_dataset_csv(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    let mut header: Vec<String> = Vec::new();
    if ds.labels().is_some() {
        header.push("label".into());
    }
    if ds.camera_ids().is_some() {
        header.push("camera".into());
    }
    header.extend((0..ds.dim()).map(|d| format!("f{d}")));
    w.write_record(&header).map_err(csv_error)?;
    for (i, row) in ds.rows().enumerate() {
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        for arr in [ds.labels(), ds.camera_ids()].into_iter().flatten() {
            rec.push(arr[i].to_string());
        }
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> PulError {
    let offset = e.position().map_or(0, |p| p.byte());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => PulError::Io(io),
        kind => PulError::parse(offset, format!("{kind:?}")),
    }
}

/// Reads a dataset by extension: `.csv` as CSV, anything else as binary.
pub fn load_dataset_any(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        load_dataset_csv(path)
    } else {
        load_dataset(path)
    }
}

// ---------------------------------------------------------------------------
// model checkpoints

pub fn encode_model(model: &EmbedModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + model.num_params() * 8);
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    let arch: u32 = match model.architecture() {
        Architecture::Linear => 0,
        Architecture::Hidden { .. } => 1,
    };
    out.extend_from_slice(&arch.to_le_bytes());
    out.extend_from_slice(&(model.embedder.len() as u32).to_le_bytes());
    for layer in model.embedder.iter().chain([&model.head]) {
        out.extend_from_slice(&(layer.inputs as u64).to_le_bytes());
        out.extend_from_slice(&(layer.outputs as u64).to_le_bytes());
        for v in layer.params() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<EmbedModel> {
    let mut r = Reader { bytes, pos: 0 };
    r.expect_magic(MODEL_MAGIC)?;
    let version = r.u32("version")?;
    if version != MODEL_VERSION {
        return Err(PulError::UnsupportedVersion {
            found: version,
            supported: MODEL_VERSION,
        });
    }
    let arch_at = r.pos;
    let arch = r.u32("architecture")?;
    let layers = r.u32("layer count")? as usize;
    let expected_layers = match arch {
        0 => 1,
        1 => 2,
        _ => return Err(PulError::parse(arch_at as u64, format!("unknown architecture {arch}"))),
    };
    if layers != expected_layers {
        return Err(PulError::parse(
            arch_at as u64 + 4,
            format!("architecture {arch} needs {expected_layers} embedder layers, header says {layers}"),
        ));
    }
    let read_layer = |r: &mut Reader| -> Result<Dense> {
        let at = r.pos;
        let inputs = r.size("layer inputs")?;
        let outputs = r.size("layer outputs")?;
        let count = checked_len(at, inputs, outputs, 1)?
            .checked_add(outputs)
            .ok_or_else(|| PulError::parse(at as u64, "size overflow"))?;
        let raw = r.take(checked_len(at, count, 1, 8)?, "layer parameters")?;
        let mut values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let weight = values.by_ref().take(inputs * outputs).collect();
        let bias = values.collect();
        Ok(Dense { inputs, outputs, weight, bias })
    };
    let embedder = (0..layers).map(|_| read_layer(&mut r)).collect::<Result<Vec<_>>>()?;
    let head = read_layer(&mut r)?;
    r.finish()?;
    let model = EmbedModel { embedder, head };
    model
        .validate()
        .map_err(|e| PulError::parse(16, format!("inconsistent layer shapes: {e}")))?;
    Ok(model)
}

pub fn save_model(path: impl AsRef<Path>, model: &EmbedModel) -> Result<()> {
    write_bytes(path.as_ref(), &encode_model(model))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<EmbedModel> {
    decode_model(&std::fs::read(path)?)
}

// ---------------------------------------------------------------------------
// run history

/// Appends history records to a file while holding an exclusive advisory
/// lock on it. A second writer on the same file fails with
/// [`PulError::Locked`] instead of interleaving lines.
#[derive(Debug)]
pub struct HistoryWriter {
    file: File,
    path: PathBuf,
}

impl HistoryWriter {
    /// Opens `path` for appending. `truncate` discards earlier content once
    /// the lock is held.
    pub fn open(path: impl AsRef<Path>, truncate: bool) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        match file.try_lock() {
            Ok(()) => {}
            Err(TryLockError::WouldBlock) => return Err(PulError::Locked { path }),
            Err(TryLockError::Error(e)) => return Err(e.into()),
        }
        if truncate {
            file.set_len(0)?;
        }
        Ok(HistoryWriter { file, path })
    }

    pub fn append(&mut self, record: &IterationRecord) -> Result<()> {
        let mut line = serde_json::to_string(record).map_err(|e| PulError::Invariant(e.to_string()))?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.flush()?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Appends one record, taking and releasing the lock around the write.
pub fn append_history_record(path: impl AsRef<Path>, record: &IterationRecord) -> Result<()> {
    HistoryWriter::open(path, false)?.append(record)
}

pub fn read_history(path: impl AsRef<Path>) -> Result<Vec<IterationRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| PulError::parse(offset, e.to_string()))?);
        }
        offset += line.len() as u64 + 1;
    }
    Ok(out)
}

/// Reads a whole file, mapping a missing file to an I/O error with its path.
pub fn read_text(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let mut s = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut s))
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    Ok(s)
}
