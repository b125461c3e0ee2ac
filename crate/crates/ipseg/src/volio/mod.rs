//! Volume containers, axis resolution, and NIfTI-1 file I/O.
//!
//! Voxels are stored x-fastest: index `(i, j, k)` lives at
//! `i + nx * (j + ny * k)`, matching the on-disk order of NIfTI, so loads
//! copy bytes without reshuffling.

mod nifti;

pub use nifti::{read_nifti, write_nifti};

use crate::ipcore::{Image2D, Mask2D};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

#[derive(Debug, thiserror::Error)]
pub enum VolioError {
    #[error("not a NIfTI-1 single file (bad magic or header size)")]
    BadMagic,
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("unsupported dimensionality {0} (need 3 after squeezing trailing singleton dims)")]
    DimUnsupported(i16),
    #[error("file ends early: expected {expected} data bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("non-finite intensity at voxel index {index}")]
    NonFinite { index: usize },
    #[error("axis {0} out of range (volume axes are 0, 1, 2)")]
    AxisOutOfRange(usize),
    #[error("cannot resolve orientation: {0}")]
    AmbiguousOrientation(String),
    #[error("invalid volume: {0}")]
    BadVolume(String),
    #[error("invalid mask: {0}")]
    BadMask(String),
    #[error("io failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, VolioError>;

/// Row-major 4x4 voxel-to-world transform.
pub type Affine = [[f32; 4]; 4];

pub const IDENTITY_AFFINE: Affine = [
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
];

/// Dense 3D scalar field of intensities on the Hounsfield-unit scale.
///
/// Any scl slope/intercept from a source file is already folded into
/// `data`; the original pair is kept for provenance only.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    data: Vec<f32>,
    dims: (usize, usize, usize),
    pub spacing: (f32, f32, f32),
    pub affine: Option<Affine>,
    pub intensity_slope: f32,
    pub intensity_intercept: f32,
}

impl Volume3D {
    /// Validates dimensions, spacing, and finiteness.
    pub fn new(
        data: Vec<f32>,
        dims: (usize, usize, usize),
        spacing: (f32, f32, f32),
        affine: Option<Affine>,
    ) -> Result<Self> {
        let (nx, ny, nz) = dims;
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(VolioError::BadVolume(format!("zero-sized dims {dims:?}")));
        }
        if data.len() != nx * ny * nz {
            return Err(VolioError::BadVolume(format!(
                "data length {} does not match dims {dims:?}",
                data.len()
            )));
        }
        if !(spacing.0 > 0.0 && spacing.1 > 0.0 && spacing.2 > 0.0) {
            return Err(VolioError::BadVolume(format!("non-positive spacing {spacing:?}")));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(VolioError::NonFinite { index });
        }
        Ok(Self {
            data,
            dims,
            spacing,
            affine,
            intensity_slope: 1.0,
            intensity_intercept: 0.0,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims.0 * (j + self.dims.1 * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(i, j, k)]
    }

    /// The 2D cross-sections perpendicular to `axis`, in index order.
    /// Slice dims follow the remaining volume axes in order, first one
    /// fastest: axis 0 gives (ny, nz) images, axis 1 (nx, nz), axis 2
    /// (nx, ny). Every voxel lands in exactly one slice.
    pub fn extract_slices(&self, axis: usize) -> Result<Vec<Image2D>> {
        let (nx, ny, nz) = self.dims;
        let (count, d0, d1) = match axis {
            0 => (nx, ny, nz),
            1 => (ny, nx, nz),
            2 => (nz, nx, ny),
            a => return Err(VolioError::AxisOutOfRange(a)),
        };
        let mut slices = Vec::with_capacity(count);
        for s in 0..count {
            let mut data = Vec::with_capacity(d0 * d1);
            for b in 0..d1 {
                for a in 0..d0 {
                    let (i, j, k) = match axis {
                        0 => (s, a, b),
                        1 => (a, s, b),
                        _ => (a, b, s),
                    };
                    data.push(self.get(i, j, k));
                }
            }
            slices.push(Image2D::new(data, (d0, d1)).expect("finite voxels slice cleanly"));
        }
        Ok(slices)
    }
}

/// Rebuilds a volume from its [`Volume3D::extract_slices`] output.
pub fn stack_slices(
    slices: &[Image2D],
    axis: usize,
    spacing: (f32, f32, f32),
    affine: Option<Affine>,
) -> Result<Volume3D> {
    if axis > 2 {
        return Err(VolioError::AxisOutOfRange(axis));
    }
    let count = slices.len();
    if count == 0 {
        return Err(VolioError::BadVolume("no slices to stack".into()));
    }
    let (d0, d1) = slices[0].dims();
    if slices.iter().any(|s| s.dims() != (d0, d1)) {
        return Err(VolioError::BadVolume("slices disagree on dims".into()));
    }
    let dims = match axis {
        0 => (count, d0, d1),
        1 => (d0, count, d1),
        _ => (d0, d1, count),
    };
    let (nx, ny) = (dims.0, dims.1);
    let mut data = vec![0.0f32; dims.0 * dims.1 * dims.2];
    for (s, slice) in slices.iter().enumerate() {
        for b in 0..d1 {
            for a in 0..d0 {
                let (i, j, k) = match axis {
                    0 => (s, a, b),
                    1 => (a, s, b),
                    _ => (a, b, s),
                };
                data[i + nx * (j + ny * k)] = slice.get(a, b);
            }
        }
    }
    Volume3D::new(data, dims, spacing, affine)
}

/// Dense 3D class-index field paired with a [`Volume3D`].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVolume {
    labels: Vec<u8>,
    dims: (usize, usize, usize),
    pub num_classes: usize,
}

impl MaskVolume {
    pub fn new(labels: Vec<u8>, dims: (usize, usize, usize), num_classes: usize) -> Result<Self> {
        let (nx, ny, nz) = dims;
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(VolioError::BadMask(format!("zero-sized dims {dims:?}")));
        }
        if labels.len() != nx * ny * nz {
            return Err(VolioError::BadMask(format!(
                "label count {} does not match dims {dims:?}",
                labels.len()
            )));
        }
        if num_classes < 2 {
            return Err(VolioError::BadMask(format!("need at least 2 classes, got {num_classes}")));
        }
        if let Some(bad) = labels.iter().find(|l| usize::from(**l) >= num_classes) {
            return Err(VolioError::BadMask(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self { labels, dims, num_classes })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> u8 {
        self.labels[i + self.dims.0 * (j + self.dims.1 * k)]
    }

    /// Per-index 2D label cross-sections, same geometry as
    /// [`Volume3D::extract_slices`].
    pub fn extract_slices(&self, axis: usize) -> Result<Vec<Mask2D>> {
        let (nx, ny, nz) = self.dims;
        let (count, d0, d1) = match axis {
            0 => (nx, ny, nz),
            1 => (ny, nx, nz),
            2 => (nz, nx, ny),
            a => return Err(VolioError::AxisOutOfRange(a)),
        };
        let mut slices = Vec::with_capacity(count);
        for s in 0..count {
            let mut labels = Vec::with_capacity(d0 * d1);
            for b in 0..d1 {
                for a in 0..d0 {
                    let (i, j, k) = match axis {
                        0 => (s, a, b),
                        1 => (a, s, b),
                        _ => (a, b, s),
                    };
                    labels.push(self.get(i, j, k));
                }
            }
            slices.push(Mask2D::new(labels, (d0, d1), self.num_classes).expect("labels already validated"));
        }
        Ok(slices)
    }
}

/// A projection/slicing axis, either by index or by anatomical name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxisSpec {
    Index(usize),
    Sagittal,
    Coronal,
    Axial,
}

impl fmt::Display for AxisSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AxisSpec::Index(i) => write!(f, "{i}"),
            AxisSpec::Sagittal => write!(f, "sagittal"),
            AxisSpec::Coronal => write!(f, "coronal"),
            AxisSpec::Axial => write!(f, "axial"),
        }
    }
}

impl FromStr for AxisSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sagittal" => Ok(AxisSpec::Sagittal),
            "coronal" => Ok(AxisSpec::Coronal),
            "axial" => Ok(AxisSpec::Axial),
            other => other
                .parse::<usize>()
                .map(AxisSpec::Index)
                .map_err(|_| format!("unknown axis '{s}' (use 0/1/2 or sagittal/coronal/axial)")),
        }
    }
}

impl serde::Serialize for AxisSpec {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        ser.collect_str(self)
    }
}

impl<'de> serde::Deserialize<'de> for AxisSpec {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let s = <String as serde::Deserialize>::deserialize(de)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Maps an [`AxisSpec`] to a voxel axis index.
///
/// Integer specs pass through (range-checked). Named specs use the affine:
/// each voxel axis column claims the world axis of its largest-magnitude
/// component, and the name (sagittal = world x, coronal = y, axial = z)
/// selects the claiming column. An absent affine counts as identity.
pub fn resolve_axis(vol: &Volume3D, spec: AxisSpec) -> Result<usize> {
    let world = match spec {
        AxisSpec::Index(i) => {
            return if i < 3 { Ok(i) } else { Err(VolioError::AxisOutOfRange(i)) };
        }
        AxisSpec::Sagittal => 0,
        AxisSpec::Coronal => 1,
        AxisSpec::Axial => 2,
    };
    let affine = vol.affine.unwrap_or(IDENTITY_AFFINE);
    let mut claims: [Option<usize>; 3] = [None; 3];
    for col in 0..3 {
        let comps = [affine[0][col].abs(), affine[1][col].abs(), affine[2][col].abs()];
        let max = comps.iter().cloned().fold(0.0f32, f32::max);
        if max == 0.0 || comps.iter().filter(|c| **c == max).count() > 1 {
            return Err(VolioError::AmbiguousOrientation(format!(
                "voxel axis {col} has no single dominant world direction"
            )));
        }
        let dominant = comps.iter().position(|c| *c == max).expect("max came from comps");
        claims[col] = Some(dominant);
    }
    let matching: Vec<usize> =
        (0..3).filter(|col| claims[*col] == Some(world)).collect();
    match matching.as_slice() {
        [col] => Ok(*col),
        [] => Err(VolioError::AmbiguousOrientation(format!(
            "no voxel axis maps to world axis {world} ({spec})"
        ))),
        _ => Err(VolioError::AmbiguousOrientation(format!(
            "voxel axes {matching:?} all map to world axis {world} ({spec})"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq_volume(dims: (usize, usize, usize)) -> Volume3D {
        let n = dims.0 * dims.1 * dims.2;
        let data = (0..n).map(|i| i as f32).collect();
        Volume3D::new(data, dims, (1.0, 1.0, 1.0), None).unwrap()
    }

    #[test]
    fn extract_slices_shapes_follow_remaining_axes() {
        let vol = seq_volume((2, 3, 4));
        let along_z = vol.extract_slices(2).unwrap();
        assert_eq!(along_z.len(), 4);
        assert!(along_z.iter().all(|s| s.dims() == (2, 3)));
        let along_x = vol.extract_slices(0).unwrap();
        assert_eq!(along_x.len(), 2);
        assert!(along_x.iter().all(|s| s.dims() == (3, 4)));
    }

    #[test]
    fn slices_partition_the_volume() {
        let vol = seq_volume((3, 4, 5));
        for axis in 0..3 {
            let slices = vol.extract_slices(axis).unwrap();
            let mut seen = vec![0u32; 60];
            for slice in &slices {
                for v in slice.data() {
                    seen[*v as usize] += 1;
                }
            }
            assert!(seen.iter().all(|c| *c == 1), "axis {axis} not a partition");
        }
    }

    #[test]
    fn stack_inverts_extract_on_random_volumes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for axis in 0..3 {
            let dims = (
                rng.random_range(1..6usize),
                rng.random_range(1..6usize),
                rng.random_range(1..6usize),
            );
            let data: Vec<f32> =
                (0..dims.0 * dims.1 * dims.2).map(|_| rng.random_range(-100.0..400.0)).collect();
            let vol = Volume3D::new(data, dims, (0.5, 0.7, 2.0), None).unwrap();
            let back = stack_slices(&vol.extract_slices(axis).unwrap(), axis, vol.spacing, None)
                .unwrap();
            assert_eq!(back.dims(), vol.dims());
            assert_eq!(back.data(), vol.data());
        }
    }

    #[test]
    fn identity_affine_names_axes_in_order() {
        let vol = seq_volume((2, 2, 2));
        assert_eq!(resolve_axis(&vol, AxisSpec::Sagittal).unwrap(), 0);
        assert_eq!(resolve_axis(&vol, AxisSpec::Coronal).unwrap(), 1);
        assert_eq!(resolve_axis(&vol, AxisSpec::Axial).unwrap(), 2);
        assert_eq!(resolve_axis(&vol, AxisSpec::Index(2)).unwrap(), 2);
        assert!(matches!(
            resolve_axis(&vol, AxisSpec::Index(3)),
            Err(VolioError::AxisOutOfRange(3))
        ));
    }

    #[test]
    fn permuted_affine_redirects_named_axes() {
        let mut vol = seq_volume((2, 2, 2));
        // world x lives in voxel column 2, world y in 0, world z in 1
        vol.affine = Some([
            [0.0, 0.0, 3.0, 0.0],
            [1.5, 0.0, 0.0, 0.0],
            [0.0, 2.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ]);
        assert_eq!(resolve_axis(&vol, AxisSpec::Sagittal).unwrap(), 2);
        assert_eq!(resolve_axis(&vol, AxisSpec::Coronal).unwrap(), 0);
        assert_eq!(resolve_axis(&vol, AxisSpec::Axial).unwrap(), 1);
    }

    #[test]
    fn tied_affine_columns_are_ambiguous() {
        let mut vol = seq_volume((2, 2, 2));
        vol.affine = Some([
            [1.0, 1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ]);
        assert!(matches!(
            resolve_axis(&vol, AxisSpec::Sagittal),
            Err(VolioError::AmbiguousOrientation(_))
        ));
    }

    #[test]
    fn axis_spec_parses_names_and_indices() {
        assert_eq!("sagittal".parse::<AxisSpec>().unwrap(), AxisSpec::Sagittal);
        assert_eq!("AXIAL".parse::<AxisSpec>().unwrap(), AxisSpec::Axial);
        assert_eq!("1".parse::<AxisSpec>().unwrap(), AxisSpec::Index(1));
        assert!("diagonal".parse::<AxisSpec>().is_err());
    }

    #[test]
    fn volume_invariants_are_enforced() {
        assert!(matches!(
            Volume3D::new(vec![0.0; 7], (2, 2, 2), (1.0, 1.0, 1.0), None),
            Err(VolioError::BadVolume(_))
        ));
        assert!(matches!(
            Volume3D::new(vec![0.0; 8], (2, 2, 2), (0.0, 1.0, 1.0), None),
            Err(VolioError::BadVolume(_))
        ));
        let mut data = vec![0.0; 8];
        data[5] = f32::NAN;
        assert!(matches!(
            Volume3D::new(data, (2, 2, 2), (1.0, 1.0, 1.0), None),
            Err(VolioError::NonFinite { index: 5 })
        ));
    }

    #[test]
    fn mask_labels_must_fit_class_count() {
        assert!(MaskVolume::new(vec![0, 1, 2, 0, 0, 0, 0, 0], (2, 2, 2), 3).is_ok());
        assert!(matches!(
            MaskVolume::new(vec![0, 3, 0, 0, 0, 0, 0, 0], (2, 2, 2), 3),
            Err(VolioError::BadMask(_))
        ));
        assert!(matches!(
            MaskVolume::new(vec![0; 8], (2, 2, 2), 1),
            Err(VolioError::BadMask(_))
        ));
    }

    #[test]
    fn mask_slices_match_volume_geometry() {
        let labels = vec![
            0, 1, 0, 0, 2, 0, //
            0, 0, 0, 1, 0, 0,
        ];
        let mask = MaskVolume::new(labels, (3, 2, 2), 3).unwrap();
        let slices = mask.extract_slices(2).unwrap();
        assert_eq!(slices.len(), 2);
        assert_eq!(slices[0].labels(), &[0, 1, 0, 0, 2, 0]);
        assert_eq!(slices[1].labels(), &[0, 0, 0, 1, 0, 0]);
    }
}
