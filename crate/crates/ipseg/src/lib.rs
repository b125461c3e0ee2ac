//! Intensity-projection segmentation toolkit.
//!
//! The crate is organised as a pipeline:
//!
//! * [`volio`] — volume/mask containers and NIfTI-1 file I/O
//! * [`ipcore`] — intensity-projection kernels (MIP, AvgIP, MinIP, CVP)
//! * [`autonn`] — a minimal reverse-mode differentiable tensor engine
//! * [`netbuild`] — UNet constructors and symbolic shape planning
//! * [`segloss`] — Dice/Tversky losses and evaluation metrics
//! * [`trainer`] — synthetic phantoms, datasets, training, checkpoints
//! * [`bench`] — time and peak-memory comparison of the three pipelines
//!
//! Training a segmentation net on 2D projections of a 3D volume keeps the
//! full in-plane resolution while shrinking activations by the depth of the
//! collapsed axis; `bench` measures that trade-off directly.

pub mod autonn;
pub mod bench;
pub mod ipcore;
pub mod netbuild;
pub mod runtime;
pub mod segloss;
pub mod trainer;
pub mod util;
pub mod volio;
