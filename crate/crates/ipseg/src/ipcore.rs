//! Intensity-projection kernels: MIP, AvgIP, MinIP, CVP, multi-channel
//! composition, and mask projection.
//!
//! Work splits across threads by output pixel; each pixel's reduction
//! walks its ray sequentially in index order, so results are identical
//! for any worker count.

use crate::runtime;
use crate::volio::Volume3D;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum IpcoreError {
    #[error("axis {0} out of range (volume axes are 0, 1, 2)")]
    AxisOutOfRange(usize),
    #[error("invalid image: {0}")]
    BadImage(String),
    #[error("invalid mask: {0}")]
    BadMask(String),
    #[error("io failure on {path}: {source}")]
    IoFailure {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, IpcoreError>;

/// Dense 2D float image. `dims = (d0, d1)` follow the source volume's
/// remaining axes in order after removing the projected one, with `d0`
/// fastest in memory: element `(a, b)` sits at `a + d0 * b`. Read as a
/// matrix that is row-major with `d1` rows of width `d0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    data: Vec<f32>,
    dims: (usize, usize),
}

impl Image2D {
    pub fn new(data: Vec<f32>, dims: (usize, usize)) -> Result<Self> {
        if dims.0 == 0 || dims.1 == 0 {
            return Err(IpcoreError::BadImage(format!("zero-sized dims {dims:?}")));
        }
        if data.len() != dims.0 * dims.1 {
            return Err(IpcoreError::BadImage(format!(
                "data length {} does not match dims {dims:?}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(IpcoreError::BadImage(format!("non-finite value at index {i}")));
        }
        Ok(Self { data, dims })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize) -> f32 {
        self.data[a + self.dims.0 * b]
    }

    /// This image as a single-slice volume of shape `(d0, d1, 1)`, for
    /// export through the NIfTI writer.
    pub fn to_volume(&self) -> Volume3D {
        Volume3D::new(self.data.clone(), (self.dims.0, self.dims.1, 1), (1.0, 1.0, 1.0), None)
            .expect("image invariants imply volume invariants")
    }
}

/// Dense 2D class-index image, same geometry as [`Image2D`].
#[derive(Debug, Clone, PartialEq)]
pub struct Mask2D {
    labels: Vec<u8>,
    dims: (usize, usize),
    pub num_classes: usize,
}

impl Mask2D {
    pub fn new(labels: Vec<u8>, dims: (usize, usize), num_classes: usize) -> Result<Self> {
        if dims.0 == 0 || dims.1 == 0 {
            return Err(IpcoreError::BadMask(format!("zero-sized dims {dims:?}")));
        }
        if labels.len() != dims.0 * dims.1 {
            return Err(IpcoreError::BadMask(format!(
                "label count {} does not match dims {dims:?}",
                labels.len()
            )));
        }
        if num_classes < 2 {
            return Err(IpcoreError::BadMask(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if let Some(bad) = labels.iter().find(|l| usize::from(**l) >= num_classes) {
            return Err(IpcoreError::BadMask(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self { labels, dims, num_classes })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize) -> u8 {
        self.labels[a + self.dims.0 * b]
    }
}

/// How the CVP kernel interprets its threshold.
///
/// The two modes reflect two published readings of the same projection:
/// the formula that keeps the global ray maximum only when it does not
/// exceed the threshold, and the prose description that picks the first
/// local maximum above the threshold. `Eq1Literal` is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CvpMode {
    #[default]
    Eq1Literal,
    ProseLmip,
}

/// CVP configuration. The default threshold of 130.0 is the conventional
/// calcification cutoff on the Hounsfield scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvpConfig {
    pub threshold: f32,
    pub mode: CvpMode,
}

impl Default for CvpConfig {
    fn default() -> Self {
        Self { threshold: 130.0, mode: CvpMode::Eq1Literal }
    }
}

/// Multi-channel projection output, canonical channel order
/// `[cvp, avgip, mip]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IPImage {
    channels: Vec<Image2D>,
    channel_names: Vec<String>,
}

impl IPImage {
    pub fn new(channels: Vec<Image2D>, channel_names: Vec<String>) -> Result<Self> {
        if channels.is_empty() {
            return Err(IpcoreError::BadImage("need at least one channel".into()));
        }
        if channels.len() != channel_names.len() {
            return Err(IpcoreError::BadImage(format!(
                "{} channels but {} names",
                channels.len(),
                channel_names.len()
            )));
        }
        let dims = channels[0].dims();
        if channels.iter().any(|c| c.dims() != dims) {
            return Err(IpcoreError::BadImage("channels disagree on dims".into()));
        }
        Ok(Self { channels, channel_names })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.channels[0].dims()
    }

    pub fn channels(&self) -> &[Image2D] {
        &self.channels
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    /// Channel data concatenated in order, i.e. a row-major `(C, H, W)`
    /// tensor with `H = d1`, `W = d0`.
    pub fn stacked_chw(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.channels.len() * self.dims().0 * self.dims().1);
        for c in &self.channels {
            out.extend_from_slice(c.data());
        }
        out
    }
}

/// Ray geometry for one axis: pixel `p` of the output reads input elements
/// `base(p) + s * stride` for `s` in `0..len`.
struct RayLayout {
    d0: usize,
    d1: usize,
    len: usize,
    stride: usize,
}

impl RayLayout {
    fn new(dims: (usize, usize, usize), axis: usize) -> Result<Self> {
        let (nx, ny, nz) = dims;
        match axis {
            0 => Ok(Self { d0: ny, d1: nz, len: nx, stride: 1 }),
            1 => Ok(Self { d0: nx, d1: nz, len: ny, stride: nx }),
            2 => Ok(Self { d0: nx, d1: ny, len: nz, stride: nx * ny }),
            a => Err(IpcoreError::AxisOutOfRange(a)),
        }
    }

    #[inline]
    fn base(&self, p: usize, dims: (usize, usize, usize)) -> usize {
        let (nx, ny, _) = dims;
        let (a, b) = (p % self.d0, p / self.d0);
        match self.stride {
            1 => nx * (a + ny * b),
            s if s == nx => a + nx * ny * b,
            _ => a + nx * b,
        }
    }
}

/// Runs `per_ray` over every output pixel, splitting pixels across the
/// configured worker count. Each ray is reduced sequentially in index
/// order regardless of how pixels are distributed.
fn project_pixels<T, U, F>(
    data: &[T],
    dims: (usize, usize, usize),
    axis: usize,
    per_ray: F,
) -> Result<(Vec<U>, (usize, usize))>
where
    T: Copy + Sync,
    U: Copy + Default + Send,
    F: Fn(&mut dyn Iterator<Item = T>) -> U + Sync,
{
    let layout = RayLayout::new(dims, axis)?;
    let total = layout.d0 * layout.d1;
    let mut out = vec![U::default(); total];
    let chunks = runtime::chunk_ranges(total);
    let fill = |range: std::ops::Range<usize>, slot: &mut [U]| {
        for (offset, p) in range.enumerate() {
            let base = layout.base(p, dims);
            let mut ray =
                (0..layout.len).map(|s| data[base + s * layout.stride]);
            slot[offset] = per_ray(&mut ray);
        }
    };
    if chunks.len() <= 1 {
        fill(0..total, &mut out);
    } else {
        std::thread::scope(|scope| {
            let mut rest = out.as_mut_slice();
            for range in chunks {
                let (head, tail) = rest.split_at_mut(range.len());
                rest = tail;
                let fill = &fill;
                scope.spawn(move || fill(range, head));
            }
        });
    }
    Ok((out, (layout.d0, layout.d1)))
}

/// Maximum intensity along each ray.
pub fn mip(vol: &Volume3D, axis: usize) -> Result<Image2D> {
    let (data, dims) = project_pixels(vol.data(), vol.dims(), axis, |ray| {
        ray.fold(f32::NEG_INFINITY, f32::max)
    })?;
    Image2D::new(data, dims)
}

/// Minimum intensity along each ray.
pub fn min_ip(vol: &Volume3D, axis: usize) -> Result<Image2D> {
    let (data, dims) = project_pixels(vol.data(), vol.dims(), axis, |ray| {
        ray.fold(f32::INFINITY, f32::min)
    })?;
    Image2D::new(data, dims)
}

/// Mean intensity along each ray, accumulated in 64-bit and rounded once.
pub fn avg_ip(vol: &Volume3D, axis: usize) -> Result<Image2D> {
    let len = match axis {
        0 => vol.dims().0,
        1 => vol.dims().1,
        2 => vol.dims().2,
        a => return Err(IpcoreError::AxisOutOfRange(a)),
    };
    let inv = 1.0 / len as f64;
    let (data, dims) = project_pixels(vol.data(), vol.dims(), axis, |ray| {
        let sum: f64 = ray.map(f64::from).sum();
        (sum * inv) as f32
    })?;
    Image2D::new(data, dims)
}

/// Threshold-gated projection.
///
/// `Eq1Literal`: the ray maximum `m` if `m <= threshold`, else 0.
/// `ProseLmip`: the first local maximum strictly above the threshold in
/// index order (boundary elements compare one-sided), else 0.
pub fn cvp(vol: &Volume3D, axis: usize, cfg: &CvpConfig) -> Result<Image2D> {
    let x = cfg.threshold;
    let (data, dims) = match cfg.mode {
        CvpMode::Eq1Literal => project_pixels(vol.data(), vol.dims(), axis, |ray| {
            let m = ray.fold(f32::NEG_INFINITY, f32::max);
            if m <= x {
                m
            } else {
                0.0
            }
        })?,
        CvpMode::ProseLmip => project_pixels(vol.data(), vol.dims(), axis, |ray| {
            let mut prev_prev = f32::NAN;
            let mut prev = f32::NAN;
            let mut have = 0usize;
            while let Some(v) = ray.next() {
                if have >= 2 && prev > x && prev >= prev_prev && prev >= v {
                    return prev;
                }
                if have == 1 && prev > x && prev >= v {
                    // ray start: one-sided comparison
                    return prev;
                }
                prev_prev = prev;
                prev = v;
                have += 1;
            }
            // ray end: last element compares one-sided (or is alone)
            if have == 1 && prev > x {
                return prev;
            }
            if have >= 2 && prev > x && prev >= prev_prev {
                return prev;
            }
            0.0
        })?,
    };
    Image2D::new(data, dims)
}

/// The three projection channels in canonical order `[cvp, avgip, mip]`.
pub fn compose_ip(vol: &Volume3D, axis: usize, cfg: &CvpConfig) -> Result<IPImage> {
    let channels = vec![cvp(vol, axis, cfg)?, avg_ip(vol, axis)?, mip(vol, axis)?];
    let names = vec!["cvp".to_string(), "avgip".to_string(), "mip".to_string()];
    IPImage::new(channels, names)
}

/// Maximum class index along each ray: background 0 loses to any
/// foreground class, larger indices win among foreground.
pub fn project_mask(mask: &crate::volio::MaskVolume, axis: usize) -> Result<Mask2D> {
    let (labels, dims) =
        project_pixels(mask.labels(), mask.dims(), axis, |ray| ray.max().unwrap_or(0))?;
    Mask2D::new(labels, dims, mask.num_classes)
}

#[derive(Debug, Serialize, Deserialize)]
struct RawSidecar {
    h: usize,
    w: usize,
    channels: usize,
    channel_names: Vec<String>,
}

/// Writes the composed image as raw little-endian float32 (channel-major,
/// rows of width `d0`) plus a JSON sidecar `{h, w, channels,
/// channel_names}` at the same path with extension `.json`.
pub fn write_ip_raw(ip: &IPImage, bin_path: impl AsRef<Path>) -> Result<()> {
    let bin_path = bin_path.as_ref();
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| IpcoreError::IoFailure { path, source }
    };
    let mut bytes = Vec::with_capacity(ip.stacked_chw().len() * 4);
    for v in ip.stacked_chw() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(bin_path, bytes).map_err(io_err(bin_path))?;
    let (d0, d1) = ip.dims();
    let sidecar = RawSidecar {
        h: d1,
        w: d0,
        channels: ip.channels().len(),
        channel_names: ip.channel_names().to_vec(),
    };
    let json_path = bin_path.with_extension("json");
    let body = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    std::fs::write(&json_path, body).map_err(io_err(&json_path))?;
    Ok(())
}
