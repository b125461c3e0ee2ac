//! `ipseg`: command-line front end for the intensity-projection
//! segmentation toolkit.
//!
//! Every run is driven by one JSON configuration document (see
//! [`config::RunConfig`]); flags override individual fields and the merged
//! result is echoed next to the outputs with its SHA-256 so results stay
//! reproducible. Exit codes: 0 success, 1 usage error, 2 data error,
//! 3 numeric abort (training loss left the finite range).

mod config;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use thiserror::Error;

use config::RunConfig;
use ipseg::bench::{compare, run_pipeline_bench, BenchError};
use ipseg::ipcore::{compose_ip, CvpMode, IpcoreError};
use ipseg::netbuild::{plan_for, Dimensionality, NetError};
use ipseg::trainer::{
    dir_dataset, evaluate, history_csv, load_checkpoint, save_checkpoint, synth_dataset,
    synth_phantom, train, Dataset, PhantomSpec, Pipeline, TrainerError,
};
use ipseg::volio::{read_nifti, resolve_axis, write_nifti, MaskVolume, VolioError, Volume3D};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainerError> for CliError {
    fn from(e: TrainerError) -> Self {
        match e {
            TrainerError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            TrainerError::BadHyperparameters(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Train(inner) => inner.into(),
            BenchError::ZeroRepeats => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<VolioError> for CliError {
    fn from(e: VolioError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<IpcoreError> for CliError {
    fn from(e: IpcoreError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        CliError::Data(e.to_string())
    }
}

/// Intensity-projection segmentation toolkit.
#[derive(Parser)]
#[command(name = "ipseg", version, about)]
struct Cli {
    /// JSON run-configuration file; flags override its fields.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Worker-thread cap for data-parallel kernels (0 = auto).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print a NIfTI header summary.
    Info {
        /// NIfTI file to inspect.
        #[arg(value_name = "FILE", required_unless_present = "input")]
        file: Option<PathBuf>,
        /// Alternative spelling of the input path.
        #[arg(long = "in", value_name = "FILE")]
        input: Option<PathBuf>,
    },
    /// Generate phantom volume/mask NIfTI pairs.
    Synth {
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Number of pairs.
        #[arg(long, value_name = "N")]
        count: Option<usize>,
        /// Base phantom seed; pair i uses seed + i.
        #[arg(long, value_name = "SEED")]
        seed: Option<u64>,
        /// Volume dims, e.g. 64,64,32.
        #[arg(long, value_name = "X,Y,Z")]
        dims: Option<String>,
        /// Segmentation classes including background.
        #[arg(long, value_name = "K")]
        classes: Option<usize>,
        /// Lesions per phantom.
        #[arg(long, value_name = "N")]
        lesions: Option<usize>,
    },
    /// Project a volume into cvp/avgip/mip channel images.
    Project {
        /// Volume to project.
        #[arg(value_name = "FILE", required_unless_present = "input")]
        file: Option<PathBuf>,
        /// Alternative spelling of the input path.
        #[arg(long = "in", value_name = "FILE")]
        input: Option<PathBuf>,
        /// Projection axis: 0/1/2 or sagittal/coronal/axial.
        #[arg(long, value_name = "AXIS")]
        axis: Option<String>,
        /// Calcification threshold for the cvp channel.
        #[arg(long, value_name = "HU")]
        threshold: Option<f32>,
        /// cvp variant: eq1 (threshold-gated max) or lmip (first local max).
        #[arg(long, value_name = "MODE")]
        mode: Option<String>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Train a pipeline; writes checkpoint and loss history.
    Train {
        /// ip, slice2d, or vol3d.
        #[arg(long, value_name = "P")]
        pipeline: Option<String>,
        #[arg(long, value_name = "N")]
        epochs: Option<u64>,
        /// Learning rate.
        #[arg(long, value_name = "LR")]
        lr: Option<f64>,
        #[arg(long, value_name = "N")]
        batch_size: Option<usize>,
        /// Seed for weight init and batch order.
        #[arg(long, value_name = "SEED")]
        seed: Option<u64>,
        /// Channel-width multiplier.
        #[arg(long, value_name = "F")]
        width_factor: Option<f64>,
        /// Projection/slicing axis.
        #[arg(long, value_name = "AXIS")]
        axis: Option<String>,
        /// Directory of X.nii/X_mask.nii pairs (synthetic phantoms when absent).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        /// Checkpoint to load.
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        /// Directory of X.nii/X_mask.nii pairs (synthetic phantoms when absent).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Compare pipelines on training time and peak tracked memory.
    Bench {
        /// Comma-separated subset of ip,slice2d,vol3d (default: all three).
        #[arg(long, value_name = "LIST")]
        pipelines: Option<String>,
        /// Training runs averaged per pipeline.
        #[arg(long, value_name = "N")]
        repeats: Option<usize>,
        #[arg(long, value_name = "N")]
        epochs: Option<u64>,
        #[arg(long, value_name = "F")]
        width_factor: Option<f64>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Print the symbolic layer-shape table for a configuration.
    Plan {
        #[arg(long, value_name = "F")]
        width_factor: Option<f64>,
        #[arg(long, value_name = "C")]
        in_channels: Option<usize>,
        #[arg(long, value_name = "K")]
        num_classes: Option<usize>,
        /// Pooling stages per side.
        #[arg(long, value_name = "D")]
        depth: Option<usize>,
        /// Input spatial extent, e.g. 512,512 (2D) or 128,512,512 (3D).
        #[arg(long, value_name = "DIMS")]
        dims: Option<String>,
        /// Plan the volumetric variant.
        #[arg(long)]
        three_d: bool,
    },
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let line = e
                .to_string()
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("usage error")
                .to_string();
            eprintln!("{line}");
            return 1;
        }
    };
    if let Some(n) = cli.threads {
        ipseg::runtime::set_threads(n);
    }
    match dispatch(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let mut rc = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    match cli.cmd {
        Cmd::Info { file, input } => cmd_info(&pick_input(file, input)),
        Cmd::Synth { out, count, seed, dims, classes, lesions } => {
            if let Some(o) = out {
                rc.out_dir = o;
            }
            if let Some(c) = count {
                rc.phantom_count = c;
            }
            if let Some(s) = seed {
                rc.phantom.seed = s;
            }
            if let Some(d) = dims {
                rc.phantom.dims = parse_triple(&d)?;
            }
            if let Some(k) = classes {
                rc.phantom.num_classes = k;
            }
            if let Some(l) = lesions {
                rc.phantom.num_lesions = l;
            }
            cmd_synth(&rc)
        }
        Cmd::Project { file, input, axis, threshold, mode, out } => {
            if let Some(a) = axis {
                rc.hyper.axis = a.parse().map_err(CliError::Usage)?;
            }
            if let Some(t) = threshold {
                rc.hyper.cvp.threshold = t;
            }
            if let Some(m) = mode {
                rc.hyper.cvp.mode = parse_mode(&m)?;
            }
            if let Some(o) = out {
                rc.out_dir = o;
            }
            cmd_project(&rc, &pick_input(file, input))
        }
        Cmd::Train { pipeline, epochs, lr, batch_size, seed, width_factor, axis, data, out } => {
            if let Some(p) = pipeline {
                rc.pipeline = p.parse().map_err(CliError::Usage)?;
            }
            if let Some(n) = epochs {
                rc.hyper.epochs = n;
            }
            if let Some(v) = lr {
                rc.hyper.learning_rate = v;
            }
            if let Some(b) = batch_size {
                rc.hyper.batch_size = b;
            }
            if let Some(s) = seed {
                rc.hyper.seed = s;
            }
            if let Some(w) = width_factor {
                rc.net.width_factor = w;
            }
            if let Some(a) = axis {
                rc.hyper.axis = a.parse().map_err(CliError::Usage)?;
            }
            if let Some(d) = data {
                rc.data_dir = Some(d);
            }
            if let Some(o) = out {
                rc.out_dir = o;
            }
            cmd_train(&rc)
        }
        Cmd::Eval { ckpt, data, out } => {
            if let Some(d) = data {
                rc.data_dir = Some(d);
            }
            if let Some(o) = out {
                rc.out_dir = o;
            }
            cmd_eval(&rc, &ckpt)
        }
        Cmd::Bench { pipelines, repeats, epochs, width_factor, out } => {
            let selection = match pipelines {
                Some(list) => parse_pipelines(&list)?,
                None => Pipeline::ALL.to_vec(),
            };
            if let Some(r) = repeats {
                rc.repeats = r;
            }
            if let Some(n) = epochs {
                rc.hyper.epochs = n;
            }
            if let Some(w) = width_factor {
                rc.net.width_factor = w;
            }
            if let Some(o) = out {
                rc.out_dir = o;
            }
            cmd_bench(&rc, &selection)
        }
        Cmd::Plan { width_factor, in_channels, num_classes, depth, dims, three_d } => {
            if three_d {
                rc.net.dimensionality = Dimensionality::ThreeD;
            }
            if let Some(w) = width_factor {
                rc.net.width_factor = w;
            }
            if let Some(c) = in_channels {
                rc.net.in_channels = c;
            }
            if let Some(k) = num_classes {
                rc.net.num_classes = k;
            }
            if let Some(d) = depth {
                rc.net.depth = d;
            }
            cmd_plan(&rc, dims.as_deref())
        }
    }
}

fn pick_input(positional: Option<PathBuf>, flagged: Option<PathBuf>) -> PathBuf {
    positional.or(flagged).expect("clap enforces one input form")
}

fn parse_mode(s: &str) -> Result<CvpMode, CliError> {
    match s.to_ascii_lowercase().as_str() {
        "eq1" | "eq1literal" | "eq1-literal" => Ok(CvpMode::Eq1Literal),
        "lmip" | "proselmip" | "prose-lmip" => Ok(CvpMode::ProseLmip),
        other => Err(CliError::Usage(format!("unknown cvp mode '{other}' (use eq1 or lmip)"))),
    }
}

fn split_dims(s: &str) -> Result<Vec<usize>, CliError> {
    s.split(|c| c == ',' || c == 'x' || c == 'X')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Usage(format!("bad dimension '{p}' in '{s}'")))
        })
        .collect()
}

fn parse_triple(s: &str) -> Result<(usize, usize, usize), CliError> {
    match split_dims(s)?.as_slice() {
        [x, y, z] => Ok((*x, *y, *z)),
        other => Err(CliError::Usage(format!(
            "expected three dims, got {} in '{s}'",
            other.len()
        ))),
    }
}

fn parse_pipelines(list: &str) -> Result<Vec<Pipeline>, CliError> {
    let mut out = Vec::new();
    for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let p: Pipeline = part.parse().map_err(CliError::Usage)?;
        if out.contains(&p) {
            return Err(CliError::Usage(format!("pipeline '{p}' listed twice")));
        }
        out.push(p);
    }
    if out.len() < 2 {
        return Err(CliError::Usage("bench needs at least two pipelines".into()));
    }
    Ok(out)
}

fn load_dataset(rc: &RunConfig) -> Result<Dataset, CliError> {
    Ok(match &rc.data_dir {
        Some(dir) => dir_dataset(dir, rc.split_ratio, rc.split_seed)?,
        None => synth_dataset(&rc.phantom, rc.phantom_count, rc.split_ratio, rc.split_seed)?,
    })
}

fn mask_volume(mask: &MaskVolume) -> Result<Volume3D, CliError> {
    let data = mask.labels().iter().map(|l| f32::from(*l)).collect();
    Ok(Volume3D::new(data, mask.dims(), (1.0, 1.0, 1.0), None)?)
}

fn cmd_info(path: &Path) -> Result<(), CliError> {
    let vol = read_nifti(path)?;
    let (nx, ny, nz) = vol.dims();
    let (lo, hi) = vol
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    println!("file:      {}", path.display());
    println!("dims:      {nx} x {ny} x {nz}");
    println!("spacing:   {} x {} x {}", vol.spacing.0, vol.spacing.1, vol.spacing.2);
    println!("affine:    {}", if vol.affine.is_some() { "stored" } else { "absent (identity)" });
    println!("intensity: [{lo}, {hi}]");
    println!("voxels:    {}", vol.data().len());
    Ok(())
}

fn cmd_synth(rc: &RunConfig) -> Result<(), CliError> {
    rc.phantom.validate()?;
    let hash = rc.echo(&rc.out_dir)?;
    println!("config sha256 {hash}");
    for i in 0..rc.phantom_count {
        let spec = PhantomSpec { seed: rc.phantom.seed.wrapping_add(i as u64), ..rc.phantom };
        let (vol, mask) = synth_phantom(&spec)?;
        write_nifti(&vol, rc.out_dir.join(format!("phantom{i:03}.nii")))?;
        write_nifti(&mask_volume(&mask)?, rc.out_dir.join(format!("phantom{i:03}_mask.nii")))?;
    }
    println!("wrote {} phantom pairs to {}", rc.phantom_count, rc.out_dir.display());
    Ok(())
}

fn cmd_project(rc: &RunConfig, input: &Path) -> Result<(), CliError> {
    let vol = read_nifti(input)?;
    let axis = resolve_axis(&vol, rc.hyper.axis)?;
    let ip = compose_ip(&vol, axis, &rc.hyper.cvp)?;
    let hash = rc.echo(&rc.out_dir)?;
    println!("config sha256 {hash}");
    for (img, name) in ip.channels().iter().zip(ip.channel_names()) {
        write_nifti(&img.to_volume(), rc.out_dir.join(format!("{name}.nii")))?;
    }
    let (d0, d1) = ip.dims();
    println!(
        "projected {} along axis {axis} into {d0}x{d1} images: {} in {}",
        input.display(),
        ip.channel_names().join(".nii, ") + ".nii",
        rc.out_dir.display()
    );
    Ok(())
}

fn cmd_train(rc: &RunConfig) -> Result<(), CliError> {
    let hash = rc.echo(&rc.out_dir)?;
    println!("config sha256 {hash}");
    let data = load_dataset(rc)?;
    println!(
        "training {} on {} samples ({} train / {} test) for {} epochs",
        rc.pipeline,
        data.len(),
        data.train_indices().len(),
        data.test_indices().len(),
        rc.hyper.epochs
    );
    let (ckpt, history) = train(rc.pipeline, &rc.net, &data, &rc.hyper)?;
    let ckpt_path = rc.out_dir.join("model.ckpt");
    save_checkpoint(&ckpt, &ckpt_path)?;
    std::fs::write(rc.out_dir.join("history.csv"), history_csv(&history))?;
    if let Some(last) = history.last() {
        println!("final loss {:.6} after epoch {}", last.loss, last.epoch);
    }
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

fn cmd_eval(rc: &RunConfig, ckpt_path: &Path) -> Result<(), CliError> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let data = load_dataset(rc)?;
    let report = evaluate(&ckpt, &data)?;
    let hash = rc.echo(&rc.out_dir)?;
    println!("config sha256 {hash}");
    let doc = serde_json::json!({ "config_sha256": hash, "report": report });
    let path = rc.out_dir.join("metrics.json");
    std::fs::write(&path, serde_json::to_string_pretty(&doc).expect("report serializes"))?;
    println!(
        "macro foreground: dsc {:.4}, recall {:.4}, precision {:.4}",
        report.macro_avg.dsc, report.macro_avg.recall_std, report.macro_avg.precision_std
    );
    println!("metrics: {}", path.display());
    Ok(())
}

fn cmd_bench(rc: &RunConfig, pipelines: &[Pipeline]) -> Result<(), CliError> {
    let hash = rc.echo(&rc.out_dir)?;
    println!("config sha256 {hash}");
    let data = load_dataset(rc)?;
    let mut records = Vec::new();
    let mut metrics = Vec::new();
    for &pipeline in pipelines {
        println!("benching {pipeline} ({} repeats)...", rc.repeats);
        let run = run_pipeline_bench(pipeline, &rc.net, &data, &rc.hyper, rc.repeats)?;
        let report = evaluate(&run.checkpoint, &data)?;
        println!(
            "  total {:.2}s, peak tracked {} bytes, dsc {:.4}",
            run.record.total_seconds, run.record.peak_tracked_bytes, report.macro_avg.dsc
        );
        records.push(run.record);
        metrics.push(report);
    }
    let comparison = compare(&records, &metrics)?;
    let doc = serde_json::json!({ "config_sha256": hash, "report": comparison });
    std::fs::write(
        rc.out_dir.join("bench.json"),
        serde_json::to_string_pretty(&doc).expect("report serializes"),
    )?;
    std::fs::write(rc.out_dir.join("bench.csv"), comparison.csv())?;
    if let Some(h) = comparison.headline {
        println!(
            "ip vs vol3d: time reduced {:.1}%, tracked memory reduced {:.1}%",
            h.time_reduction * 100.0,
            h.memory_reduction * 100.0
        );
    }
    println!("reports: bench.json, bench.csv in {}", rc.out_dir.display());
    Ok(())
}

fn cmd_plan(rc: &RunConfig, dims: Option<&str>) -> Result<(), CliError> {
    let spatial = match dims {
        Some(s) => split_dims(s)?,
        None => match rc.net.dimensionality {
            Dimensionality::TwoD => vec![512, 512],
            Dimensionality::ThreeD => vec![128, 512, 512],
        },
    };
    // Flag-driven, so shape complaints are usage errors here.
    let plan = plan_for(&rc.net, &spatial).map_err(|e| CliError::Usage(e.to_string()))?;
    print!("{}", plan.to_text());
    println!("total params: {}", plan.total_params());
    Ok(())
}
