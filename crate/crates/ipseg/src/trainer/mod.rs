//! Synthetic phantoms, dataset assembly, the training loop for all three
//! pipelines, evaluation, and checkpointing.
//!
//! Everything here is deterministic: a phantom is a pure function of its
//! spec, the train/test split is a seeded shuffle, and the training loop
//! consumes randomness only through one ChaCha stream whose full state is
//! persisted in the checkpoint. Two runs with the same inputs produce
//! bit-identical parameters; wall-clock entries in the history are the only
//! nondeterministic output.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, NamedBlob, FORMAT_VERSION};

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autonn::{AutonnError, Graph, Mode, TensorId};
use crate::ipcore::{compose_ip, project_mask, CvpConfig, IpcoreError};
use crate::netbuild::{
    build_ipunet, build_unet2d_slice, build_unet3d, plan_for, NetConfig, NetError, Network,
    ParamStore,
};
use crate::segloss::{
    dice_loss, foreground_classes, metric_report, tversky_loss, ConfusionCounts, HardTarget,
    MetricReport, SeglossError, SoftPrediction,
};
use crate::util::sample_normal;
use crate::volio::{resolve_axis, AxisSpec, MaskVolume, VolioError, Volume3D};

/// Fixed factor applied to raw intensities before they enter a network.
/// Hounsfield-scale inputs (0..~400 here) are far from unit scale; dividing
/// by a constant keeps default optimizer settings usable while staying
/// independent of the data actually seen, so evaluation and resumed runs
/// agree bit for bit.
pub const INTENSITY_SCALE: f32 = 1.0 / 256.0;

/// Channel count of a composed projection image (cvp, avgip, mip).
const IP_CHANNELS: usize = 3;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("invalid phantom spec: {0}")]
    SpecInvalid(String),
    #[error("no paired mask for '{0}'")]
    PairMissing(String),
    #[error("'{stem}': volume dims {vol:?} but mask dims {mask:?}")]
    DimsMismatch {
        stem: String,
        vol: (usize, usize, usize),
        mask: (usize, usize, usize),
    },
    #[error("mask '{stem}' holds non-label value {value}")]
    BadLabels { stem: String, value: f32 },
    #[error("dataset has no {0} samples")]
    EmptyDataset(&'static str),
    #[error("bad hyperparameters: {0}")]
    BadHyperparameters(String),
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: u64 },
    #[error("checkpoint does not fit this run: {0}")]
    ConfigMismatch(String),
    #[error("checkpoint: bad magic")]
    BadMagic,
    #[error("checkpoint: unsupported format version {0}")]
    VersionUnsupported(u32),
    #[error("checkpoint: corrupt: {0}")]
    Corrupt(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("volume: {0}")]
    Volio(#[from] VolioError),
    #[error("projection: {0}")]
    Ipcore(#[from] IpcoreError),
    #[error("network: {0}")]
    Net(#[from] NetError),
    #[error("engine: {0}")]
    Engine(#[from] AutonnError),
    #[error("loss: {0}")]
    Loss(#[from] SeglossError),
}

pub type Result<T> = std::result::Result<T, TrainerError>;

// ---------------------------------------------------------------------------
// Phantom synthesis

/// Recipe for one synthetic volume: smooth ellipsoidal "tissue" background
/// with seeded noise, plus high-intensity ellipsoidal lesions whose voxels
/// are exactly the mask foreground.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub dims: (usize, usize, usize),
    pub num_lesions: usize,
    /// Per-axis lesion semi-axis bounds, voxels.
    pub lesion_radius_range: (f64, f64),
    /// Per-voxel lesion intensity bounds (Hounsfield scale).
    pub lesion_intensity_range: (f32, f32),
    /// Background tissue intensity at the volume centre.
    pub background_peak: f32,
    /// Additive noise sigma; samples are clamped to four sigma.
    pub noise_sigma: f32,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: (64, 64, 32),
            num_lesions: 3,
            lesion_radius_range: (2.0, 6.0),
            lesion_intensity_range: (200.0, 400.0),
            background_peak: 100.0,
            noise_sigma: 5.0,
            num_classes: 2,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    /// Largest background intensity the noise clamp permits.
    pub fn background_max(&self) -> f32 {
        self.background_peak + 4.0 * self.noise_sigma
    }

    pub fn validate(&self) -> Result<()> {
        let (nx, ny, nz) = self.dims;
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(TrainerError::SpecInvalid(format!("zero-sized dims {:?}", self.dims)));
        }
        let (r_lo, r_hi) = self.lesion_radius_range;
        // A radius of one voxel guarantees each lesion covers at least its
        // own centre voxel.
        if !(r_lo.is_finite() && r_hi.is_finite()) || r_lo < 1.0 || r_hi < r_lo {
            return Err(TrainerError::SpecInvalid(format!(
                "lesion radius range ({r_lo}, {r_hi}) must be ordered and at least one voxel"
            )));
        }
        if self.num_lesions > 0 {
            for (axis, extent) in [(0usize, nx), (1, ny), (2, nz)] {
                if (extent as f64) < 2.0 * r_hi + 1.0 {
                    return Err(TrainerError::SpecInvalid(format!(
                        "axis {axis} extent {extent} cannot hold a lesion of radius {r_hi}"
                    )));
                }
            }
        }
        let (i_lo, i_hi) = self.lesion_intensity_range;
        if !(i_lo.is_finite() && i_hi.is_finite()) || i_hi < i_lo {
            return Err(TrainerError::SpecInvalid(format!(
                "lesion intensity range ({i_lo}, {i_hi}) must be ordered"
            )));
        }
        if !(self.background_peak >= 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(TrainerError::SpecInvalid(
                "background peak and noise sigma must be non-negative".into(),
            ));
        }
        if self.num_lesions > 0 && i_lo <= self.background_max() {
            return Err(TrainerError::SpecInvalid(format!(
                "lesion intensities from {i_lo} are not separable from background up to {}",
                self.background_max()
            )));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(TrainerError::SpecInvalid(format!(
                "class count {} outside 2..=255",
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Deterministic phantom generation. The RNG stream is consumed in a fixed
/// order (background noise voxel by voxel, then per lesion: radii, centre,
/// interior intensities), so equal specs give bit-identical volumes.
pub fn synth_phantom(spec: &PhantomSpec) -> Result<(Volume3D, MaskVolume)> {
    spec.validate()?;
    let (nx, ny, nz) = spec.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let centre = ((nx as f64 - 1.0) / 2.0, (ny as f64 - 1.0) / 2.0, (nz as f64 - 1.0) / 2.0);
    let half = (nx as f64 / 2.0, ny as f64 / 2.0, nz as f64 / 2.0);
    let sigma = f64::from(spec.noise_sigma);
    let clamp = 4.0 * sigma;
    let mut data = Vec::with_capacity(nx * ny * nz);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let u = (i as f64 - centre.0) / half.0;
                let v = (j as f64 - centre.1) / half.1;
                let w = (k as f64 - centre.2) / half.2;
                let falloff = (1.0 - (u * u + v * v + w * w)).max(0.0);
                let noise = (sample_normal(&mut rng) * sigma).clamp(-clamp, clamp);
                let value = (f64::from(spec.background_peak) * falloff + noise).max(0.0);
                data.push(value as f32);
            }
        }
    }
    let mut labels = vec![0u8; nx * ny * nz];

    let uniform = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
        if lo == hi { lo } else { rng.random_range(lo..hi) }
    };
    for lesion in 0..spec.num_lesions {
        let (r_lo, r_hi) = spec.lesion_radius_range;
        let radii = [
            uniform(&mut rng, r_lo, r_hi),
            uniform(&mut rng, r_lo, r_hi),
            uniform(&mut rng, r_lo, r_hi),
        ];
        let extents = [nx as f64, ny as f64, nz as f64];
        let mut centre = [0.0f64; 3];
        for a in 0..3 {
            centre[a] = uniform(&mut rng, radii[a], extents[a] - 1.0 - radii[a]);
        }
        let class = (1 + lesion % (spec.num_classes - 1)) as u8;
        let (i_lo, i_hi) = spec.lesion_intensity_range;
        let lo = |a: usize| (centre[a] - radii[a]).ceil().max(0.0) as usize;
        let hi = |a: usize| ((centre[a] + radii[a]).floor() as usize).min(extents[a] as usize - 1);
        for k in lo(2)..=hi(2) {
            for j in lo(1)..=hi(1) {
                for i in lo(0)..=hi(0) {
                    let du = (i as f64 - centre[0]) / radii[0];
                    let dv = (j as f64 - centre[1]) / radii[1];
                    let dw = (k as f64 - centre[2]) / radii[2];
                    if du * du + dv * dv + dw * dw <= 1.0 {
                        let idx = i + nx * (j + ny * k);
                        data[idx] = uniform(&mut rng, f64::from(i_lo), f64::from(i_hi)) as f32;
                        labels[idx] = class;
                    }
                }
            }
        }
    }

    let vol = Volume3D::new(data, spec.dims, (1.0, 1.0, 1.0), None)?;
    let mask = MaskVolume::new(labels, spec.dims, spec.num_classes)?;
    Ok((vol, mask))
}

// ---------------------------------------------------------------------------
// Datasets

/// Where a dataset came from, for provenance in reports and checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    Synthetic { base: PhantomSpec, count: usize },
    Directory { path: String },
}

/// Ordered volume/mask pairs with a disjoint train/test split.
#[derive(Debug, Clone)]
pub struct Dataset {
    samples: Vec<(Volume3D, MaskVolume)>,
    train: Vec<usize>,
    test: Vec<usize>,
    pub provenance: Provenance,
}

impl Dataset {
    /// Splits `pairs` by a seeded shuffle: `round(ratio * n)` samples train,
    /// the rest test. All pairs must agree on dims and class count.
    pub fn from_pairs(
        pairs: Vec<(Volume3D, MaskVolume)>,
        split_ratio: f64,
        seed: u64,
        provenance: Provenance,
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(TrainerError::EmptyDataset("any"));
        }
        if !(0.0..=1.0).contains(&split_ratio) {
            return Err(TrainerError::BadHyperparameters(format!(
                "split ratio {split_ratio} outside [0, 1]"
            )));
        }
        let dims = pairs[0].0.dims();
        let num_classes = pairs[0].1.num_classes;
        for (i, (vol, mask)) in pairs.iter().enumerate() {
            if vol.dims() != mask.dims() {
                return Err(TrainerError::DimsMismatch {
                    stem: format!("sample {i}"),
                    vol: vol.dims(),
                    mask: mask.dims(),
                });
            }
            if vol.dims() != dims {
                return Err(TrainerError::ConfigMismatch(format!(
                    "sample {i} has dims {:?}, dataset uses {dims:?}",
                    vol.dims()
                )));
            }
            if mask.num_classes != num_classes {
                return Err(TrainerError::ConfigMismatch(format!(
                    "sample {i} has {} classes, dataset uses {num_classes}",
                    mask.num_classes
                )));
            }
        }
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = ((split_ratio * pairs.len() as f64).round() as usize).min(pairs.len());
        let mut train: Vec<usize> = order[..n_train].to_vec();
        let mut test: Vec<usize> = order[n_train..].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        Ok(Self { samples: pairs, train, test, provenance })
    }

    pub fn samples(&self) -> &[(Volume3D, MaskVolume)] {
        &self.samples
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train
    }

    pub fn test_indices(&self) -> &[usize] {
        &self.test
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.samples[0].0.dims()
    }

    pub fn num_classes(&self) -> usize {
        self.samples[0].1.num_classes
    }
}

/// `count` phantoms from `base` (phantom `i` reseeded with `base.seed + i`),
/// split by a shuffle seeded with `split_seed`.
pub fn synth_dataset(
    base: &PhantomSpec,
    count: usize,
    split_ratio: f64,
    split_seed: u64,
) -> Result<Dataset> {
    base.validate()?;
    let mut pairs = Vec::with_capacity(count);
    for i in 0..count {
        let spec = PhantomSpec { seed: base.seed.wrapping_add(i as u64), ..*base };
        pairs.push(synth_phantom(&spec)?);
    }
    Dataset::from_pairs(
        pairs,
        split_ratio,
        split_seed,
        Provenance::Synthetic { base: *base, count },
    )
}

/// Loads `X.nii` + `X_mask.nii` pairs from a directory. Mask voxels must be
/// small non-negative integers; the class count is inferred from the largest
/// label across all masks.
pub fn dir_dataset(dir: impl AsRef<Path>, split_ratio: f64, split_seed: u64) -> Result<Dataset> {
    let dir = dir.as_ref();
    let mut images = BTreeMap::new();
    let mut masks = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let Some(stem) = name.strip_suffix(".nii") else { continue };
        match stem.strip_suffix("_mask") {
            Some(image_stem) => masks.insert(image_stem.to_string(), path),
            None => images.insert(stem.to_string(), path),
        };
    }
    for stem in masks.keys() {
        if !images.contains_key(stem) {
            return Err(TrainerError::PairMissing(stem.clone()));
        }
    }

    // First pass reads everything and finds the label ceiling, so every
    // mask is validated against the same dataset-wide class count.
    let mut raw = Vec::new();
    let mut max_label = 1u8;
    for (stem, image_path) in &images {
        let mask_path =
            masks.get(stem).ok_or_else(|| TrainerError::PairMissing(stem.clone()))?;
        let vol = crate::volio::read_nifti(image_path)?;
        let mask_vol = crate::volio::read_nifti(mask_path)?;
        if vol.dims() != mask_vol.dims() {
            return Err(TrainerError::DimsMismatch {
                stem: stem.clone(),
                vol: vol.dims(),
                mask: mask_vol.dims(),
            });
        }
        let mut labels = Vec::with_capacity(mask_vol.data().len());
        for &v in mask_vol.data() {
            if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                return Err(TrainerError::BadLabels { stem: stem.clone(), value: v });
            }
            let l = v as u8;
            max_label = max_label.max(l);
            labels.push(l);
        }
        raw.push((stem.clone(), vol, labels));
    }

    let num_classes = usize::from(max_label) + 1;
    let mut pairs = Vec::with_capacity(raw.len());
    for (_, vol, labels) in raw {
        let dims = vol.dims();
        pairs.push((vol, MaskVolume::new(labels, dims, num_classes)?));
    }
    Dataset::from_pairs(
        pairs,
        split_ratio,
        split_seed,
        Provenance::Directory { path: dir.display().to_string() },
    )
}

// ---------------------------------------------------------------------------
// Hyperparameters

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LossSelect {
    Dice,
    Tversky { alpha: f64, beta: f64 },
}

impl Default for LossSelect {
    fn default() -> Self {
        LossSelect::Tversky { alpha: 0.3, beta: 0.7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    pub epochs: u64,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub batch_size: usize,
    pub loss: LossSelect,
    pub cvp: CvpConfig,
    /// Projection/slicing axis shared by all pipelines.
    pub axis: AxisSpec,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            epochs: 1000,
            learning_rate: 1e-3,
            optimizer: Optimizer::default(),
            batch_size: 2,
            loss: LossSelect::default(),
            cvp: CvpConfig::default(),
            axis: AxisSpec::Axial,
            seed: 0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainerError::BadHyperparameters(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainerError::BadHyperparameters("batch size 0".into()));
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(TrainerError::BadHyperparameters(format!(
                    "adam betas ({beta1}, {beta2}) must lie in [0, 1) and eps {eps} be positive"
                )));
            }
        }
        if let LossSelect::Tversky { alpha, beta } = self.loss {
            if !alpha.is_finite() || !beta.is_finite() || alpha < 0.0 || beta < 0.0
                || (alpha + beta - 1.0).abs() > 1e-9
            {
                return Err(TrainerError::BadHyperparameters(format!(
                    "tversky weights ({alpha}, {beta}) must be non-negative and sum to 1"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pipeline {
    /// 2D net on composed intensity projections.
    Ip,
    /// 2D net on every extracted slice.
    Slice2d,
    /// 3D net on whole volumes.
    Vol3d,
}

impl Pipeline {
    pub const ALL: [Pipeline; 3] = [Pipeline::Ip, Pipeline::Slice2d, Pipeline::Vol3d];
}

impl std::fmt::Display for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pipeline::Ip => "ip",
            Pipeline::Slice2d => "slice2d",
            Pipeline::Vol3d => "vol3d",
        })
    }
}

impl std::str::FromStr for Pipeline {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ip" => Ok(Pipeline::Ip),
            "slice2d" => Ok(Pipeline::Slice2d),
            "vol3d" => Ok(Pipeline::Vol3d),
            other => Err(format!("unknown pipeline '{other}' (use ip, slice2d, or vol3d)")),
        }
    }
}

/// Network constructor for a pipeline. The slice and volume builders force
/// their input channel count; the projection pipeline requires the config
/// to already say three channels.
pub fn build_for(pipeline: Pipeline, cfg: &NetConfig, seed: u64) -> Result<Network<f32>> {
    let net = match pipeline {
        Pipeline::Ip => {
            if cfg.in_channels != IP_CHANNELS {
                return Err(TrainerError::ConfigMismatch(format!(
                    "ip pipeline consumes {IP_CHANNELS}-channel projection images, config says {}",
                    cfg.in_channels
                )));
            }
            build_ipunet(cfg, seed)?
        }
        Pipeline::Slice2d => build_unet2d_slice(cfg, seed)?,
        Pipeline::Vol3d => build_unet3d(cfg, seed)?,
    };
    Ok(net)
}

// ---------------------------------------------------------------------------
// Sample preparation

/// Network-ready training items: flattened scaled input tensors and their
/// flattened label maps, all sharing one per-item shape.
struct Items {
    inputs: Vec<Vec<f32>>,
    labels: Vec<Vec<u8>>,
    /// Per-item tensor shape without the batch dimension.
    tail: Vec<usize>,
}

impl Items {
    fn spatial(&self) -> usize {
        self.tail[1..].iter().product()
    }
}

fn scaled(data: &[f32]) -> Vec<f32> {
    data.iter().map(|v| v * INTENSITY_SCALE).collect()
}

/// The items one volume/mask pair contributes: one composed projection
/// image (`ip`), every slice (`slice2d`), or the whole volume (`vol3d`).
fn sample_items(
    pipeline: Pipeline,
    vol: &Volume3D,
    mask: &MaskVolume,
    axis: usize,
    cvp: &CvpConfig,
) -> Result<Items> {
    match pipeline {
        Pipeline::Ip => {
            let ip = compose_ip(vol, axis, cvp)?;
            let (d0, d1) = ip.dims();
            let target = project_mask(mask, axis)?;
            Ok(Items {
                inputs: vec![scaled(&ip.stacked_chw())],
                labels: vec![target.labels().to_vec()],
                tail: vec![IP_CHANNELS, d1, d0],
            })
        }
        Pipeline::Slice2d => {
            let images = vol.extract_slices(axis)?;
            let masks = mask.extract_slices(axis)?;
            let (d0, d1) = images[0].dims();
            Ok(Items {
                inputs: images.iter().map(|s| scaled(s.data())).collect(),
                labels: masks.iter().map(|m| m.labels().to_vec()).collect(),
                tail: vec![1, d1, d0],
            })
        }
        Pipeline::Vol3d => {
            let (nx, ny, nz) = vol.dims();
            Ok(Items {
                inputs: vec![scaled(vol.data())],
                labels: vec![mask.labels().to_vec()],
                tail: vec![1, nz, ny, nx],
            })
        }
    }
}

fn gather_items(
    pipeline: Pipeline,
    data: &Dataset,
    indices: &[usize],
    axis: usize,
    cvp: &CvpConfig,
) -> Result<Items> {
    let mut all: Option<Items> = None;
    for &i in indices {
        let (vol, mask) = &data.samples()[i];
        let mut items = sample_items(pipeline, vol, mask, axis, cvp)?;
        match &mut all {
            None => all = Some(items),
            Some(acc) => {
                acc.inputs.append(&mut items.inputs);
                acc.labels.append(&mut items.labels);
            }
        }
    }
    all.ok_or(TrainerError::EmptyDataset("selected"))
}

// ---------------------------------------------------------------------------
// Training

/// One epoch's mean loss and wall-clock cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub loss: f64,
    pub seconds: f64,
}

pub type History = Vec<EpochRecord>;

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,loss,seconds\n");
    for rec in history {
        out.push_str(&format!("{},{},{}\n", rec.epoch, rec.loss, rec.seconds));
    }
    out
}

/// First-moment/second-moment state for Adam (empty for SGD).
pub(crate) struct OptState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl OptState {
    pub(crate) fn fresh(net: &Network<f32>, optimizer: &Optimizer) -> Self {
        match optimizer {
            Optimizer::Adam { .. } => {
                let zeros: Vec<Vec<f32>> =
                    net.params.iter().map(|p| vec![0.0; p.data.len()]).collect();
                Self { m: zeros.clone(), v: zeros, t: 0 }
            }
            Optimizer::Sgd => Self { m: Vec::new(), v: Vec::new(), t: 0 },
        }
    }

    fn from_checkpoint(net: &Network<f32>, ckpt: &Checkpoint) -> Result<Self> {
        match ckpt.hyper.optimizer {
            Optimizer::Sgd => Ok(Self { m: Vec::new(), v: Vec::new(), t: ckpt.adam_t }),
            Optimizer::Adam { .. } => {
                let read = |kind: &str| -> Result<Vec<Vec<f32>>> {
                    net.params
                        .iter()
                        .map(|p| {
                            let name = format!("adam.{kind}.{}", p.name);
                            let blob = ckpt.blob(&name).ok_or_else(|| {
                                TrainerError::Corrupt(format!("missing optimizer blob '{name}'"))
                            })?;
                            if blob.data.len() != p.data.len() {
                                return Err(TrainerError::Corrupt(format!(
                                    "optimizer blob '{name}' has {} elements, parameter has {}",
                                    blob.data.len(),
                                    p.data.len()
                                )));
                            }
                            Ok(blob.data.clone())
                        })
                        .collect()
                };
                Ok(Self { m: read("m")?, v: read("v")?, t: ckpt.adam_t })
            }
        }
    }

    /// One update from the gradients recorded in `g` for the leaves `ids`
    /// (parallel to the parameter store). Per-element math runs in f64 and
    /// rounds once back to f32, which keeps the update deterministic and
    /// stable regardless of parameter magnitudes.
    fn step(
        &mut self,
        params: &mut ParamStore<f32>,
        g: &Graph<f32>,
        ids: &[TensorId],
        hp: &HyperParams,
    ) {
        let lr = hp.learning_rate;
        match hp.optimizer {
            Optimizer::Sgd => {
                for (idx, id) in ids.iter().enumerate() {
                    let grad = g.grad(*id).expect("training leaves carry gradients");
                    let data = &mut params.get_mut(idx).data;
                    for (w, gr) in data.iter_mut().zip(grad) {
                        *w = (f64::from(*w) - lr * f64::from(*gr)) as f32;
                    }
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let bc1 = 1.0 - beta1.powi(self.t.min(i32::MAX as u64) as i32);
                let bc2 = 1.0 - beta2.powi(self.t.min(i32::MAX as u64) as i32);
                for (idx, id) in ids.iter().enumerate() {
                    let grad = g.grad(*id).expect("training leaves carry gradients");
                    let data = &mut params.get_mut(idx).data;
                    let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
                    for j in 0..data.len() {
                        let gr = f64::from(grad[j]);
                        let mj = beta1 * f64::from(m[j]) + (1.0 - beta1) * gr;
                        let vj = beta2 * f64::from(v[j]) + (1.0 - beta2) * gr * gr;
                        m[j] = mj as f32;
                        v[j] = vj as f32;
                        let update = lr * (mj / bc1) / ((vj / bc2).sqrt() + eps);
                        data[j] = (f64::from(data[j]) - update) as f32;
                    }
                }
            }
        }
    }
}

/// Everything [`snapshot_checkpoint`] needs beyond the network itself.
pub(crate) fn snapshot_checkpoint(
    net: &Network<f32>,
    hp: &HyperParams,
    pipeline: Pipeline,
    epoch: u64,
    rng: &ChaCha8Rng,
    opt: &OptState,
) -> Checkpoint {
    let mut blobs = Vec::new();
    for p in net.params.iter() {
        blobs.push(NamedBlob { name: p.name.clone(), shape: p.shape.clone(), data: p.data.to_vec() });
    }
    for (stats, prefix) in net.bn_stats.iter().zip(&net.bn_names) {
        blobs.push(NamedBlob {
            name: format!("{prefix}.running_mean"),
            shape: vec![stats.mean.len()],
            data: stats.mean.clone(),
        });
        blobs.push(NamedBlob {
            name: format!("{prefix}.running_var"),
            shape: vec![stats.var.len()],
            data: stats.var.clone(),
        });
    }
    if matches!(hp.optimizer, Optimizer::Adam { .. }) {
        for (idx, p) in net.params.iter().enumerate() {
            blobs.push(NamedBlob {
                name: format!("adam.m.{}", p.name),
                shape: p.shape.clone(),
                data: opt.m[idx].clone(),
            });
            blobs.push(NamedBlob {
                name: format!("adam.v.{}", p.name),
                shape: p.shape.clone(),
                data: opt.v[idx].clone(),
            });
        }
    }
    Checkpoint {
        version: FORMAT_VERSION,
        net: net.config.clone(),
        hyper: hp.clone(),
        pipeline,
        epoch,
        rng_seed: rng.get_seed(),
        rng_word_pos: rng.get_word_pos(),
        adam_t: opt.t,
        blobs,
    }
}

/// Rebuilds the network a checkpoint describes: construct by config, then
/// overwrite every parameter and batch-norm statistic from the blobs.
pub fn network_from_checkpoint(ckpt: &Checkpoint) -> Result<Network<f32>> {
    let mut net = build_for(ckpt.pipeline, &ckpt.net, ckpt.hyper.seed)?;
    let mut params_seen = 0usize;
    for blob in &ckpt.blobs {
        if blob.name.starts_with("adam.") {
            continue;
        }
        if let Some(prefix) = blob.name.strip_suffix(".running_mean") {
            let i = bn_index(&net, prefix, &blob.name)?;
            copy_stat(&mut net.bn_stats[i].mean, blob)?;
            continue;
        }
        if let Some(prefix) = blob.name.strip_suffix(".running_var") {
            let i = bn_index(&net, prefix, &blob.name)?;
            copy_stat(&mut net.bn_stats[i].var, blob)?;
            continue;
        }
        let idx = net.params.index_of(&blob.name).ok_or_else(|| {
            TrainerError::Corrupt(format!("blob '{}' matches no parameter", blob.name))
        })?;
        let param = net.params.get_mut(idx);
        if param.shape != blob.shape {
            return Err(TrainerError::Corrupt(format!(
                "parameter '{}' expects shape {:?}, blob has {:?}",
                blob.name, param.shape, blob.shape
            )));
        }
        param.data.copy_from_slice(&blob.data);
        params_seen += 1;
    }
    if params_seen != net.params.len() {
        return Err(TrainerError::Corrupt(format!(
            "checkpoint covers {params_seen} of {} parameters",
            net.params.len()
        )));
    }
    Ok(net)
}

fn bn_index(net: &Network<f32>, prefix: &str, blob_name: &str) -> Result<usize> {
    net.bn_names
        .iter()
        .position(|n| n == prefix)
        .ok_or_else(|| TrainerError::Corrupt(format!("blob '{blob_name}' matches no norm layer")))
}

fn copy_stat(dst: &mut [f32], blob: &NamedBlob) -> Result<()> {
    if dst.len() != blob.data.len() {
        return Err(TrainerError::Corrupt(format!(
            "statistic '{}' has {} elements, network expects {}",
            blob.name,
            blob.data.len(),
            dst.len()
        )));
    }
    dst.copy_from_slice(&blob.data);
    Ok(())
}

/// Trains a fresh network. Equivalent to snapshotting the untrained state
/// and [`resume`]-ing it to `hp.epochs`.
pub fn train(
    pipeline: Pipeline,
    cfg: &NetConfig,
    data: &Dataset,
    hp: &HyperParams,
) -> Result<(Checkpoint, History)> {
    hp.validate()?;
    let net = build_for(pipeline, cfg, hp.seed)?;
    let start = Checkpoint::from_network(&net, hp, pipeline);
    resume(&start, data, hp.epochs)
}

/// Continues a checkpointed run until `total_epochs` epochs are complete.
/// Restores parameters, optimizer moments, and the exact RNG position, so
/// a split run is bit-identical to an uninterrupted one.
pub fn resume(ckpt: &Checkpoint, data: &Dataset, total_epochs: u64) -> Result<(Checkpoint, History)> {
    let hp = ckpt.hyper.clone();
    hp.validate()?;
    if ckpt.epoch > total_epochs {
        return Err(TrainerError::BadHyperparameters(format!(
            "checkpoint is already at epoch {}, beyond the requested {total_epochs}",
            ckpt.epoch
        )));
    }
    if data.train_indices().is_empty() {
        return Err(TrainerError::EmptyDataset("train"));
    }
    if data.num_classes() != ckpt.net.num_classes {
        return Err(TrainerError::ConfigMismatch(format!(
            "network predicts {} classes, dataset has {}",
            ckpt.net.num_classes,
            data.num_classes()
        )));
    }

    let mut net = network_from_checkpoint(ckpt)?;
    let mut opt = OptState::from_checkpoint(&net, ckpt)?;
    let mut rng = ChaCha8Rng::from_seed(ckpt.rng_seed);
    rng.set_word_pos(ckpt.rng_word_pos);

    let axis = resolve_axis(&data.samples()[0].0, hp.axis)?;
    let items = gather_items(ckpt.pipeline, data, data.train_indices(), axis, &hp.cvp)?;
    // Symbolic pre-flight turns an indivisible input into a config error
    // before any graph memory is committed.
    plan_for(&net.config, &items.tail[1..])?;

    let classes = foreground_classes(ckpt.net.num_classes);
    let mut history = Vec::with_capacity((total_epochs - ckpt.epoch) as usize);
    for epoch in ckpt.epoch + 1..=total_epochs {
        let begun = Instant::now();
        let loss = run_epoch(&mut net, &items, &hp, &classes, &mut rng, &mut opt, epoch)?;
        history.push(EpochRecord { epoch, loss, seconds: begun.elapsed().as_secs_f64() });
    }
    let finished = snapshot_checkpoint(&net, &hp, ckpt.pipeline, total_epochs, &rng, &opt);
    Ok((finished, history))
}

fn run_epoch(
    net: &mut Network<f32>,
    items: &Items,
    hp: &HyperParams,
    classes: &[usize],
    rng: &mut ChaCha8Rng,
    opt: &mut OptState,
    epoch: u64,
) -> Result<f64> {
    let spatial = items.spatial();
    let per_item: usize = items.tail.iter().product();
    let num_classes = net.config.num_classes;
    let mut order: Vec<usize> = (0..items.inputs.len()).collect();
    order.shuffle(rng);

    let mut weighted_loss = 0.0f64;
    for chunk in order.chunks(hp.batch_size) {
        let mut batch = Vec::with_capacity(chunk.len() * per_item);
        let mut labels = Vec::with_capacity(chunk.len() * spatial);
        for &i in chunk {
            batch.extend_from_slice(&items.inputs[i]);
            labels.extend_from_slice(&items.labels[i]);
        }
        let mut shape = Vec::with_capacity(items.tail.len() + 1);
        shape.push(chunk.len());
        shape.extend_from_slice(&items.tail);

        let mut g: Graph<f32> = Graph::new();
        let input = g.constant(batch, &shape)?;
        let pass = net.forward(&mut g, input, Mode::Train)?;
        let target = HardTarget::new(labels, num_classes)?;
        let loss_id = match hp.loss {
            LossSelect::Dice => dice_loss(&mut g, pass.output, &target, classes)?,
            LossSelect::Tversky { alpha, beta } => {
                tversky_loss(&mut g, pass.output, &target, alpha, beta, classes)?
            }
        };
        let loss = f64::from(g.scalar(loss_id)?);
        if !loss.is_finite() {
            return Err(TrainerError::NonFiniteLoss { epoch });
        }
        g.backward(loss_id)?;
        opt.step(&mut net.params, &g, &pass.param_ids, hp);
        weighted_loss += loss * chunk.len() as f64;
    }
    Ok(weighted_loss / items.inputs.len() as f64)
}

// ---------------------------------------------------------------------------
// Evaluation

/// Runs the checkpointed network over the test split and pools one-vs-rest
/// confusion counts. The projection pipeline scores against projected
/// masks; the slice pipeline restacks per-slice predictions into volume
/// space first; the 3D pipeline is already volumetric.
pub fn evaluate(ckpt: &Checkpoint, data: &Dataset) -> Result<MetricReport> {
    if data.test_indices().is_empty() {
        return Err(TrainerError::EmptyDataset("test"));
    }
    let k = ckpt.net.num_classes;
    if data.num_classes() != k {
        return Err(TrainerError::ConfigMismatch(format!(
            "network predicts {k} classes, dataset has {}",
            data.num_classes()
        )));
    }
    let mut net = network_from_checkpoint(ckpt)?;
    let axis = resolve_axis(&data.samples()[0].0, ckpt.hyper.axis)?;

    let mut counts = ConfusionCounts { per_class: vec![Default::default(); k] };
    for &i in data.test_indices() {
        let (vol, mask) = &data.samples()[i];
        let items = sample_items(ckpt.pipeline, vol, mask, axis, &ckpt.hyper.cvp)?;
        let (predicted, truth) = match ckpt.pipeline {
            Pipeline::Ip => {
                let pred = forward_labels(&mut net, items.inputs, &items.tail)?;
                (pred, items.labels.into_iter().next().expect("one projection item"))
            }
            Pipeline::Slice2d => {
                let spatial = items.spatial();
                let flat = forward_labels(&mut net, items.inputs, &items.tail)?;
                let per_slice: Vec<&[u8]> = flat.chunks(spatial).collect();
                (restack_labels(&per_slice, axis, vol.dims()), mask.labels().to_vec())
            }
            Pipeline::Vol3d => {
                let pred = forward_labels(&mut net, items.inputs, &items.tail)?;
                (pred, mask.labels().to_vec())
            }
        };
        counts.accumulate(&ConfusionCounts::compute(&predicted, &truth, k)?)?;
    }
    Ok(metric_report(&counts))
}

/// Batches `inputs` into one eval-mode forward pass and returns the argmax
/// labels, item-major.
fn forward_labels(
    net: &mut Network<f32>,
    inputs: Vec<Vec<f32>>,
    tail: &[usize],
) -> Result<Vec<u8>> {
    let count = inputs.len();
    let mut data = Vec::with_capacity(count * tail.iter().product::<usize>());
    for input in inputs {
        data.extend_from_slice(&input);
    }
    let mut shape = Vec::with_capacity(tail.len() + 1);
    shape.push(count);
    shape.extend_from_slice(tail);
    let mut g: Graph<f32> = Graph::new();
    let input = g.constant(data, &shape)?;
    let pass = net.forward(&mut g, input, Mode::Eval)?;
    Ok(SoftPrediction::from_graph(&g, pass.output)?.argmax_labels())
}

/// Inverse of slice extraction: writes per-slice label maps back into a
/// volume-ordered buffer.
fn restack_labels(per_slice: &[&[u8]], axis: usize, dims: (usize, usize, usize)) -> Vec<u8> {
    let (nx, ny, nz) = dims;
    let (d0, d1) = match axis {
        0 => (ny, nz),
        1 => (nx, nz),
        _ => (nx, ny),
    };
    let mut out = vec![0u8; nx * ny * nz];
    for (s, labels) in per_slice.iter().enumerate() {
        let mut src = labels.iter();
        for b in 0..d1 {
            for a in 0..d0 {
                let (i, j, k) = match axis {
                    0 => (s, a, b),
                    1 => (a, s, b),
                    _ => (a, b, s),
                };
                out[i + nx * (j + ny * k)] = *src.next().expect("slice covers its plane");
            }
        }
    }
    out
}
