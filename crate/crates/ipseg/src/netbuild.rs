//! UNet constructors and symbolic shape planning.
//!
//! Three builders share one topology: [`build_ipunet`] (2D, multi-channel
//! projection input), [`build_unet2d_slice`] (2D, single-channel slices) and
//! [`build_unet3d`] (3D, whole volumes). A [`ShapePlan`] walks the same layer
//! list symbolically, so 512-input plans cost nothing but arithmetic.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autonn::alloc::TrackedVec;
use crate::autonn::{AutonnError, Element, Graph, Mode, RunningStats, TensorId};
use crate::util::sample_normal;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    ConfigInvalid(String),
    #[error("input extent {extent} is not divisible by 2^depth = {divisor}")]
    IndivisibleInput { extent: usize, divisor: usize },
    #[error(transparent)]
    Engine(#[from] AutonnError),
}

/// Whether the net convolves over 2 or 3 spatial axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dimensionality {
    #[serde(rename = "2d")]
    TwoD,
    #[serde(rename = "3d")]
    ThreeD,
}

impl Dimensionality {
    pub fn rank(self) -> usize {
        match self {
            Dimensionality::TwoD => 2,
            Dimensionality::ThreeD => 3,
        }
    }
}

/// Scalable description of the UNet family.
///
/// `width_factor` multiplies every channel count (rounded up, floor 1), so
/// the full-scale topology shrinks to desk scale without changing shape
/// relationships.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    pub width_factor: f64,
    pub depth: usize,
    pub dimensionality: Dimensionality,
    pub leaky_slope: f64,
    pub batchnorm: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            num_classes: 3,
            base_width: 64,
            width_factor: 1.0,
            depth: 4,
            dimensionality: Dimensionality::TwoD,
            leaky_slope: 0.01,
            batchnorm: true,
        }
    }
}

/// Channel count after width scaling: `ceil(nominal * w)`, floored at 1.
pub fn scaled_width(nominal: usize, width_factor: f64) -> usize {
    ((nominal as f64 * width_factor).ceil() as usize).max(1)
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let fail = |msg: String| Err(NetError::ConfigInvalid(msg));
        if self.in_channels == 0 {
            return fail("in_channels must be at least 1".into());
        }
        if self.num_classes < 2 {
            return fail(format!("num_classes {} < 2", self.num_classes));
        }
        if self.base_width == 0 {
            return fail("base_width must be at least 1".into());
        }
        if !(self.width_factor > 0.0 && self.width_factor <= 1.0) {
            return fail(format!("width_factor {} outside (0, 1]", self.width_factor));
        }
        if self.depth == 0 || self.depth > 8 {
            return fail(format!("depth {} outside 1..=8", self.depth));
        }
        if !self.leaky_slope.is_finite() || self.leaky_slope < 0.0 {
            return fail(format!("leaky_slope {} must be finite and >= 0", self.leaky_slope));
        }
        Ok(())
    }

    /// Channels at encoder level `level`; `level == depth` is the bottleneck.
    pub fn level_channels(&self, level: usize) -> usize {
        scaled_width(self.base_width << level, self.width_factor)
    }

    /// Every input spatial extent must divide this.
    pub fn pool_divisor(&self) -> usize {
        1 << self.depth
    }
}

/// One step of the executed layer list. Parameter fields index the owning
/// network's [`ParamStore`]; `stats` indexes its running-stats list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        weight: usize,
        bias: usize,
    },
    Deconv { in_ch: usize, out_ch: usize, kernel: usize, weight: usize },
    MaxPool { window: usize, stride: usize },
    BatchNorm { channels: usize, gamma: usize, beta: usize, stats: usize },
    LeakyRelu { slope: f64 },
    SaveSkip { slot: usize },
    ConcatSkip { slot: usize },
    SoftmaxChannels,
}

/// A named, shaped parameter tensor.
#[derive(Debug)]
pub struct ParamTensor<E: Element> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TrackedVec<E>,
}

/// All learnable tensors of one network, in construction order.
#[derive(Debug, Default)]
pub struct ParamStore<E: Element> {
    tensors: Vec<ParamTensor<E>>,
}

impl<E: Element> ParamStore<E> {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, idx: usize) -> &ParamTensor<E> {
        &self.tensors[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut ParamTensor<E> {
        &mut self.tensors[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor<E>> {
        self.tensors.iter()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    /// Total scalar parameter count.
    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    fn push(&mut self, name: String, shape: Vec<usize>, data: Vec<E>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(ParamTensor { name, shape, data: TrackedVec::from_vec(data) });
        self.tensors.len() - 1
    }
}

/// A built network: topology, parameters, and per-batchnorm running stats.
#[derive(Debug)]
pub struct Network<E: Element> {
    pub config: NetConfig,
    pub layers: Vec<LayerSpec>,
    pub params: ParamStore<E>,
    pub bn_stats: Vec<RunningStats<E>>,
    /// Name prefixes parallel to `bn_stats` (for persistence).
    pub bn_names: Vec<String>,
    pub init_seed: u64,
}

/// Graph handles produced by one [`Network::forward`] call.
pub struct ForwardPass {
    pub output: TensorId,
    /// Leaf ids parallel to the parameter store.
    pub param_ids: Vec<TensorId>,
}

impl<E: Element> Network<E> {
    /// Binds every parameter as a graph leaf (trainable iff `mode` is
    /// `Train`) and runs the layer list. Batch-norm running stats update in
    /// train mode and drive normalization in eval mode.
    pub fn forward(
        &mut self,
        g: &mut Graph<E>,
        input: TensorId,
        mode: Mode,
    ) -> Result<ForwardPass, NetError> {
        let train = mode == Mode::Train;
        let Network { config, layers, params, bn_stats, .. } = self;
        let mut param_ids = Vec::with_capacity(params.len());
        for p in params.iter() {
            param_ids.push(g.leaf(p.data.to_vec(), &p.shape, train)?);
        }
        let mut skips: Vec<Option<TensorId>> = vec![None; slot_count(layers)];
        let mut cur = input;
        for layer in layers.iter() {
            cur = match *layer {
                LayerSpec::Conv { kernel: _, stride, padding, weight, bias, .. } => {
                    match config.dimensionality {
                        Dimensionality::TwoD => {
                            g.conv2d(cur, param_ids[weight], param_ids[bias], stride, padding)?
                        }
                        Dimensionality::ThreeD => {
                            g.conv3d(cur, param_ids[weight], param_ids[bias], stride, padding)?
                        }
                    }
                }
                LayerSpec::Deconv { weight, .. } => match config.dimensionality {
                    Dimensionality::TwoD => g.deconv2d(cur, param_ids[weight], 2)?,
                    Dimensionality::ThreeD => g.deconv3d(cur, param_ids[weight], 2)?,
                },
                LayerSpec::MaxPool { window, stride } => match config.dimensionality {
                    Dimensionality::TwoD => g.maxpool2d(cur, window, stride)?,
                    Dimensionality::ThreeD => g.maxpool3d(cur, window, stride)?,
                },
                LayerSpec::BatchNorm { gamma, beta, stats, .. } => {
                    g.batchnorm(cur, param_ids[gamma], param_ids[beta], &mut bn_stats[stats], mode)?
                }
                LayerSpec::LeakyRelu { slope } => g.leaky_relu(cur, E::from_f64_lossy(slope))?,
                LayerSpec::SaveSkip { slot } => {
                    skips[slot] = Some(cur);
                    cur
                }
                LayerSpec::ConcatSkip { slot } => {
                    let peer = skips[slot].take().ok_or_else(|| {
                        NetError::ConfigInvalid(format!(
                            "concat slot {slot} has no saved encoder features"
                        ))
                    })?;
                    // Decoder features first, then the encoder copy.
                    g.concat_channels(cur, peer)?
                }
                LayerSpec::SoftmaxChannels => g.softmax_channels(cur)?,
            };
        }
        Ok(ForwardPass { output: cur, param_ids })
    }

    pub fn param_count(&self) -> usize {
        self.params.total_len()
    }
}

/// Total learnable scalar count (weights, biases, batch-norm affine pairs).
pub fn param_count<E: Element>(net: &Network<E>) -> usize {
    net.param_count()
}

fn slot_count(layers: &[LayerSpec]) -> usize {
    layers
        .iter()
        .filter_map(|l| match l {
            LayerSpec::SaveSkip { slot } => Some(slot + 1),
            _ => None,
        })
        .max()
        .unwrap_or(0)
}

enum Init {
    He { fan_in: usize },
    Zeros,
    Ones,
}

struct ParamSlot {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

struct Skeleton {
    layers: Vec<LayerSpec>,
    slots: Vec<ParamSlot>,
    bn_channels: Vec<usize>,
    bn_names: Vec<String>,
}

impl Skeleton {
    fn slot(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.slots.push(ParamSlot { name, shape, init });
        self.slots.len() - 1
    }

    /// conv(k=3, s=1, p=1) followed by batch norm (when enabled) and the
    /// leaky activation; `stage.idx` names the parameters.
    fn conv_block(&mut self, cfg: &NetConfig, stage: &str, idx: usize, in_ch: usize, out_ch: usize) {
        let rank = cfg.dimensionality.rank();
        let mut w_shape = vec![out_ch, in_ch];
        w_shape.extend(std::iter::repeat(3).take(rank));
        let fan_in = in_ch * 3usize.pow(rank as u32);
        let weight = self.slot(format!("{stage}.conv{idx}.weight"), w_shape, Init::He { fan_in });
        let bias = self.slot(format!("{stage}.conv{idx}.bias"), vec![out_ch], Init::Zeros);
        self.layers.push(LayerSpec::Conv {
            in_ch,
            out_ch,
            kernel: 3,
            stride: 1,
            padding: 1,
            weight,
            bias,
        });
        if cfg.batchnorm {
            let gamma = self.slot(format!("{stage}.bn{idx}.gamma"), vec![out_ch], Init::Ones);
            let beta = self.slot(format!("{stage}.bn{idx}.beta"), vec![out_ch], Init::Zeros);
            let stats = self.bn_channels.len();
            self.bn_channels.push(out_ch);
            self.bn_names.push(format!("{stage}.bn{idx}"));
            self.layers.push(LayerSpec::BatchNorm { channels: out_ch, gamma, beta, stats });
        }
        self.layers.push(LayerSpec::LeakyRelu { slope: cfg.leaky_slope });
    }
}

/// Lays out the shared encoder/decoder topology for `cfg`, without
/// allocating parameter data.
fn skeleton(cfg: &NetConfig) -> Skeleton {
    let mut sk = Skeleton {
        layers: Vec::new(),
        slots: Vec::new(),
        bn_channels: Vec::new(),
        bn_names: Vec::new(),
    };
    let rank = cfg.dimensionality.rank();
    let widths: Vec<usize> = (0..=cfg.depth).map(|l| cfg.level_channels(l)).collect();

    let mut prev = cfg.in_channels;
    for level in 0..cfg.depth {
        let ch = widths[level];
        let stage = format!("enc{level}");
        sk.conv_block(cfg, &stage, 1, prev, ch);
        sk.conv_block(cfg, &stage, 2, ch, ch);
        sk.layers.push(LayerSpec::SaveSkip { slot: level });
        sk.layers.push(LayerSpec::MaxPool { window: 2, stride: 2 });
        prev = ch;
    }

    let mid = widths[cfg.depth];
    sk.conv_block(cfg, "mid", 1, prev, mid);
    sk.conv_block(cfg, "mid", 2, mid, mid);
    prev = mid;

    for level in (0..cfg.depth).rev() {
        let ch = widths[level];
        let stage = format!("dec{level}");
        let mut w_shape = vec![prev, ch];
        w_shape.extend(std::iter::repeat(3).take(rank));
        let fan_in = prev * 3usize.pow(rank as u32);
        let weight = sk.slot(format!("{stage}.up.weight"), w_shape, Init::He { fan_in });
        sk.layers.push(LayerSpec::Deconv { in_ch: prev, out_ch: ch, kernel: 3, weight });
        sk.layers.push(LayerSpec::ConcatSkip { slot: level });
        sk.conv_block(cfg, &stage, 1, 2 * ch, ch);
        sk.conv_block(cfg, &stage, 2, ch, ch);
        prev = ch;
    }

    let k = cfg.num_classes;
    let mut w_shape = vec![k, prev];
    w_shape.extend(std::iter::repeat(1).take(rank));
    let weight = sk.slot("head.weight".into(), w_shape, Init::He { fan_in: prev });
    let bias = sk.slot("head.bias".into(), vec![k], Init::Zeros);
    sk.layers.push(LayerSpec::Conv {
        in_ch: prev,
        out_ch: k,
        kernel: 1,
        stride: 1,
        padding: 0,
        weight,
        bias,
    });
    sk.layers.push(LayerSpec::SoftmaxChannels);
    sk
}

fn construct<E: Element>(cfg: NetConfig, seed: u64) -> Result<Network<E>, NetError> {
    cfg.validate()?;
    let sk = skeleton(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::default();
    for slot in sk.slots {
        let n: usize = slot.shape.iter().product();
        let data: Vec<E> = match slot.init {
            Init::He { fan_in } => {
                let std = (2.0 / fan_in as f64).sqrt();
                (0..n).map(|_| E::from_f64_lossy(sample_normal(&mut rng) * std)).collect()
            }
            Init::Zeros => vec![E::from_f64_lossy(0.0); n],
            Init::Ones => vec![E::from_f64_lossy(1.0); n],
        };
        params.push(slot.name, slot.shape, data);
    }
    let bn_stats = sk.bn_channels.iter().map(|&c| RunningStats::new(c)).collect();
    let net = Network {
        config: cfg,
        layers: sk.layers,
        params,
        bn_stats,
        bn_names: sk.bn_names,
        init_seed: seed,
    };
    // Structural check: planning a minimal legal input verifies skip wiring
    // and concat shape equality before the network is ever run.
    let min_input = vec![net.config.pool_divisor(); net.config.dimensionality.rank()];
    plan_from_layers(&net.config, &net.layers, &min_input)?;
    Ok(net)
}

/// 2D net over stacked projection channels (default 3).
pub fn build_ipunet<E: Element>(cfg: &NetConfig, seed: u64) -> Result<Network<E>, NetError> {
    let mut cfg = cfg.clone();
    cfg.dimensionality = Dimensionality::TwoD;
    construct(cfg, seed)
}

/// 2D baseline over single-channel slices; identical topology otherwise.
pub fn build_unet2d_slice<E: Element>(cfg: &NetConfig, seed: u64) -> Result<Network<E>, NetError> {
    let mut cfg = cfg.clone();
    cfg.dimensionality = Dimensionality::TwoD;
    cfg.in_channels = 1;
    construct(cfg, seed)
}

/// 3D baseline over whole single-channel volumes.
pub fn build_unet3d<E: Element>(cfg: &NetConfig, seed: u64) -> Result<Network<E>, NetError> {
    let mut cfg = cfg.clone();
    cfg.dimensionality = Dimensionality::ThreeD;
    cfg.in_channels = 1;
    construct(cfg, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Encode,
    Decode,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::Encode => "Encode",
            Phase::Decode => "Decode",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowKind {
    Conv,
    Max,
    Deconv,
    Concat,
}

impl RowKind {
    pub fn label(self) -> &'static str {
        match self {
            RowKind::Conv => "conv",
            RowKind::Max => "max",
            RowKind::Deconv => "deconv",
            RowKind::Concat => "concat",
        }
    }
}

/// One row of a [`ShapePlan`]: a conv row folds in its batch norm and
/// activation (their parameters counted here), mirroring how the layer
/// table of a UNet is conventionally written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRow {
    pub no: usize,
    pub phase: Phase,
    pub kind: RowKind,
    pub input_spatial: Vec<usize>,
    pub input_channels: usize,
    /// Output channel count for parameterized rows.
    pub filter: Option<usize>,
    pub stride: Option<usize>,
    /// Kernel/window extents; empty for concat rows.
    pub window: Vec<usize>,
    pub output_spatial: Vec<usize>,
    pub output_channels: usize,
    pub params: usize,
}

fn shape_cell(spatial: &[usize], channels: usize) -> String {
    let mut parts: Vec<String> = spatial.iter().map(|e| e.to_string()).collect();
    parts.push(channels.to_string());
    parts.join("X")
}

impl PlanRow {
    pub fn input_cell(&self) -> String {
        shape_cell(&self.input_spatial, self.input_channels)
    }

    pub fn output_cell(&self) -> String {
        shape_cell(&self.output_spatial, self.output_channels)
    }

    pub fn filter_cell(&self) -> String {
        self.filter.map(|f| f.to_string()).unwrap_or_default()
    }

    pub fn stride_size_cell(&self) -> String {
        match self.stride {
            Some(s) => {
                let win: Vec<String> = self.window.iter().map(|e| e.to_string()).collect();
                format!("{s}/{}", win.join("X"))
            }
            None => String::new(),
        }
    }
}

/// Symbolic per-row shape and parameter table of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapePlan {
    pub rows: Vec<PlanRow>,
}

impl ShapePlan {
    pub fn total_params(&self) -> usize {
        self.rows.iter().map(|r| r.params).sum()
    }

    /// Column-aligned text table (No, Phase, Type, Input, Filter,
    /// Stride/Size, Output, Params).
    pub fn to_text(&self) -> String {
        let header =
            ["No", "Phase", "Type", "Input", "Filter", "Stride/Size", "Output", "Params"];
        let mut cells: Vec<[String; 8]> = vec![header.map(String::from)];
        for r in &self.rows {
            cells.push([
                r.no.to_string(),
                r.phase.label().to_string(),
                r.kind.label().to_string(),
                r.input_cell(),
                r.filter_cell(),
                r.stride_size_cell(),
                r.output_cell(),
                r.params.to_string(),
            ]);
        }
        let mut widths = [0usize; 8];
        for row in &cells {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = String::new();
        for row in &cells {
            let line: Vec<String> =
                row.iter().zip(widths).map(|(cell, w)| format!("{cell:<w$}")).collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }
}

/// Plans directly from a config, without allocating any parameters.
pub fn plan_for(cfg: &NetConfig, input_spatial: &[usize]) -> Result<ShapePlan, NetError> {
    cfg.validate()?;
    let sk = skeleton(cfg);
    plan_from_layers(cfg, &sk.layers, input_spatial)
}

/// Plans a built network; same result as [`plan_for`] on its config.
pub fn shape_plan<E: Element>(
    net: &Network<E>,
    input_spatial: &[usize],
) -> Result<ShapePlan, NetError> {
    plan_from_layers(&net.config, &net.layers, input_spatial)
}

fn plan_from_layers(
    cfg: &NetConfig,
    layers: &[LayerSpec],
    input_spatial: &[usize],
) -> Result<ShapePlan, NetError> {
    let rank = cfg.dimensionality.rank();
    if input_spatial.len() != rank {
        return Err(NetError::ConfigInvalid(format!(
            "expected {rank} input extents, got {}",
            input_spatial.len()
        )));
    }
    let divisor = cfg.pool_divisor();
    for &e in input_spatial {
        if e == 0 || e % divisor != 0 {
            return Err(NetError::IndivisibleInput { extent: e, divisor });
        }
    }

    let mut rows: Vec<PlanRow> = Vec::new();
    let mut spatial = input_spatial.to_vec();
    let mut ch = cfg.in_channels;
    let mut saved: Vec<Option<(Vec<usize>, usize)>> = vec![None; slot_count(layers)];
    let mut decode = false;
    let push = |rows: &mut Vec<PlanRow>,
                    phase: Phase,
                    kind: RowKind,
                    input: (Vec<usize>, usize),
                    filter: Option<usize>,
                    stride: Option<usize>,
                    window: Vec<usize>,
                    output: (Vec<usize>, usize),
                    params: usize| {
        rows.push(PlanRow {
            no: rows.len() + 1,
            phase,
            kind,
            input_spatial: input.0,
            input_channels: input.1,
            filter,
            stride,
            window,
            output_spatial: output.0,
            output_channels: output.1,
            params,
        });
    };

    for layer in layers {
        match *layer {
            LayerSpec::Conv { in_ch, out_ch, kernel, stride, padding, .. } => {
                debug_assert_eq!(in_ch, ch);
                let out_spatial: Vec<usize> =
                    spatial.iter().map(|&e| (e + 2 * padding - kernel) / stride + 1).collect();
                let params = kernel.pow(rank as u32) * in_ch * out_ch + out_ch;
                push(
                    &mut rows,
                    if decode { Phase::Decode } else { Phase::Encode },
                    RowKind::Conv,
                    (spatial.clone(), ch),
                    Some(out_ch),
                    Some(stride),
                    vec![kernel; rank],
                    (out_spatial.clone(), out_ch),
                    params,
                );
                spatial = out_spatial;
                ch = out_ch;
            }
            LayerSpec::BatchNorm { channels, .. } => {
                let row = rows.last_mut().expect("batch norm follows a conv row");
                row.params += 2 * channels;
            }
            LayerSpec::LeakyRelu { .. } | LayerSpec::SoftmaxChannels => {}
            LayerSpec::MaxPool { window, stride } => {
                let out_spatial: Vec<usize> =
                    spatial.iter().map(|&e| (e - window) / stride + 1).collect();
                push(
                    &mut rows,
                    if decode { Phase::Decode } else { Phase::Encode },
                    RowKind::Max,
                    (spatial.clone(), ch),
                    None,
                    Some(stride),
                    vec![window; rank],
                    (out_spatial.clone(), ch),
                    0,
                );
                spatial = out_spatial;
            }
            LayerSpec::Deconv { in_ch, out_ch, kernel, .. } => {
                decode = true;
                debug_assert_eq!(in_ch, ch);
                let out_spatial: Vec<usize> = spatial.iter().map(|&e| 2 * e).collect();
                let params = kernel.pow(rank as u32) * in_ch * out_ch;
                push(
                    &mut rows,
                    Phase::Decode,
                    RowKind::Deconv,
                    (spatial.clone(), ch),
                    Some(out_ch),
                    Some(2),
                    vec![kernel; rank],
                    (out_spatial.clone(), out_ch),
                    params,
                );
                spatial = out_spatial;
                ch = out_ch;
            }
            LayerSpec::SaveSkip { slot } => saved[slot] = Some((spatial.clone(), ch)),
            LayerSpec::ConcatSkip { slot } => {
                let (peer_spatial, peer_ch) = saved[slot].take().ok_or_else(|| {
                    NetError::ConfigInvalid(format!(
                        "concat slot {slot} has no saved encoder features"
                    ))
                })?;
                if peer_spatial != spatial {
                    return Err(NetError::ConfigInvalid(format!(
                        "concat slot {slot} spatial mismatch: {spatial:?} vs {peer_spatial:?}"
                    )));
                }
                push(
                    &mut rows,
                    Phase::Decode,
                    RowKind::Concat,
                    (spatial.clone(), ch),
                    None,
                    None,
                    Vec::new(),
                    (spatial.clone(), ch + peer_ch),
                    0,
                );
                ch += peer_ch;
            }
        }
    }
    Ok(ShapePlan { rows })
}
