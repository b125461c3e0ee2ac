//! Acceptance gate: eight end-to-end criteria covering the projection
//! kernels, the autodiff engine, the losses, the layer plan, the metric
//! arithmetic, desk-scale learning, the memory/time claim, and determinism.
//!
//! One `#[test]`, run serially on purpose: the allocation gauge is
//! process-global and the wall-clock comparison needs a quiet machine.
//! Each criterion prints a single PASS/FAIL line (visible with
//! `cargo test --test acceptance -- --nocapture`).

use std::time::Instant;

use ipseg::autonn::{
    alloc, finite_diff_check_many, AutonnError, Graph, Mode, RunningStats, TensorId,
};
use ipseg::bench::run_pipeline_bench;
use ipseg::ipcore::{avg_ip, cvp, min_ip, mip, project_mask, CvpConfig, CvpMode};
use ipseg::netbuild::{build_ipunet, plan_for, NetConfig, Network};
use ipseg::segloss::{
    dice_loss, foreground_classes, metric_report, tversky_loss, ClassCounts, ConfusionCounts,
    HardTarget, SeglossError,
};
use ipseg::trainer::{
    build_for, evaluate, load_checkpoint, resume, save_checkpoint, synth_dataset, synth_phantom,
    train, Checkpoint, Dataset, HyperParams, PhantomSpec, Pipeline,
};
use ipseg::volio::{read_nifti, write_nifti, MaskVolume, Volume3D};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn acceptance() {
    let mut failed: Vec<usize> = Vec::new();
    let mut check = |no: usize, name: &str, res: Result<String, String>| match res {
        Ok(detail) => println!("PASS criterion {no} ({name}): {detail}"),
        Err(detail) => {
            println!("FAIL criterion {no} ({name}): {detail}");
            failed.push(no);
        }
    };

    check(1, "projection oracles", projection_oracles());
    check(2, "gradient suite", gradient_suite());
    check(3, "tversky/dice identity", tversky_dice_identity());
    check(4, "shape-plan golden table", shape_plan_golden());
    check(5, "metric arithmetic", metric_arithmetic());
    match synth_dataset(&PhantomSpec::default(), 50, 0.8, 0).map_err(stringify) {
        Ok(data) => {
            check(6, "desk-scale learning", desk_learning(&data));
            check(7, "memory and time claim", memory_time_claim(&data));
            check(8, "determinism and persistence", determinism_persistence(&data));
        }
        Err(e) => {
            let e = format!("desk dataset failed to synthesize: {e}");
            check(6, "desk-scale learning", Err(e.clone()));
            check(7, "memory and time claim", Err(e.clone()));
            check(8, "determinism and persistence", Err(e));
        }
    }

    assert!(failed.is_empty(), "acceptance criteria failed: {failed:?}");
}

fn stringify<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Desk-scale network: an eighth of the full channel widths, two classes.
fn desk_cfg() -> NetConfig {
    NetConfig { width_factor: 0.125, num_classes: 2, ..NetConfig::default() }
}

// ---------------------------------------------------------------- criterion 1

/// Rays of `data` along `axis`, in output-pixel order (first output dim
/// fastest), each ray in ascending index order.
fn rays_of(data: &[f32], dims: (usize, usize, usize), axis: usize) -> Vec<Vec<f32>> {
    let (nx, ny, nz) = dims;
    let at = |i: usize, j: usize, k: usize| data[i + nx * (j + ny * k)];
    let mut rays = Vec::new();
    match axis {
        0 => {
            for k in 0..nz {
                for j in 0..ny {
                    rays.push((0..nx).map(|i| at(i, j, k)).collect());
                }
            }
        }
        1 => {
            for k in 0..nz {
                for i in 0..nx {
                    rays.push((0..ny).map(|j| at(i, j, k)).collect());
                }
            }
        }
        2 => {
            for j in 0..ny {
                for i in 0..nx {
                    rays.push((0..nz).map(|k| at(i, j, k)).collect());
                }
            }
        }
        _ => unreachable!(),
    }
    rays
}

fn within_one_ulp(a: f32, b: f32) -> bool {
    // all values here are non-negative, so the bit patterns are monotonic
    a == b || (i64::from(a.to_bits()) - i64::from(b.to_bits())).abs() <= 1
}

fn projection_oracles() -> Result<String, String> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let cvp_cfg = CvpConfig { threshold: 0.6, mode: CvpMode::Eq1Literal };
    let volumes = 100;
    for case in 0..volumes {
        let dims = (
            rng.random_range(1..=16usize),
            rng.random_range(1..=16usize),
            rng.random_range(1..=16usize),
        );
        let n = dims.0 * dims.1 * dims.2;
        let data: Vec<f32> = (0..n).map(|_| rng.random::<f32>()).collect();
        let vol =
            Volume3D::new(data.clone(), dims, (1.0, 1.0, 1.0), None).map_err(stringify)?;
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..4u8)).collect();
        let mask = MaskVolume::new(labels.clone(), dims, 4).map_err(stringify)?;

        for axis in 0..3 {
            let rays = rays_of(&data, dims, axis);
            let got_max = mip(&vol, axis).map_err(stringify)?;
            let got_min = min_ip(&vol, axis).map_err(stringify)?;
            let got_avg = avg_ip(&vol, axis).map_err(stringify)?;
            let got_cvp = cvp(&vol, axis, &cvp_cfg).map_err(stringify)?;
            let got_mask = project_mask(&mask, axis).map_err(stringify)?;
            let label_rays = rays_of(
                &labels.iter().map(|l| f32::from(*l)).collect::<Vec<_>>(),
                dims,
                axis,
            );
            for (p, ray) in rays.iter().enumerate() {
                let mx = ray.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mn = ray.iter().copied().fold(f32::INFINITY, f32::min);
                let mean =
                    (ray.iter().map(|v| f64::from(*v)).sum::<f64>() / ray.len() as f64) as f32;
                let gated = if mx <= cvp_cfg.threshold { mx } else { 0.0 };
                let lab = label_rays[p].iter().copied().fold(0.0, f32::max) as u8;
                if got_max.data()[p] != mx
                    || got_min.data()[p] != mn
                    || got_cvp.data()[p] != gated
                    || got_mask.labels()[p] != lab
                {
                    return Err(format!(
                        "exact kernel mismatch: case {case} dims {dims:?} axis {axis} pixel {p}"
                    ));
                }
                if !within_one_ulp(got_avg.data()[p], mean) {
                    return Err(format!(
                        "mean off by more than 1 ulp: case {case} dims {dims:?} axis {axis} \
                         pixel {p}: {} vs {mean}",
                        got_avg.data()[p]
                    ));
                }
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let detail =
        format!("{volumes} volumes x 3 axes x 5 kernels against naive oracles; {secs:.1}s");
    if secs < 10.0 {
        Ok(detail)
    } else {
        Err(format!("{detail} (budget 10s)"))
    }
}

// ---------------------------------------------------------------- criterion 2

fn uni(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values bounded away from the leaky-relu kink at zero.
fn off_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.random_range(0.2..1.0);
            if rng.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect()
}

/// Pairwise-separated values so pooling argmaxes cannot flip inside the
/// finite-difference step.
fn separated(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
    v.shuffle(rng);
    for x in &mut v {
        *x += rng.random_range(0.0..1.0) / (8.0 * n as f64);
    }
    v
}

/// Reduces a tensor to a scalar with fixed nonuniform weights, so the
/// upstream gradient seen by the op under test is not a constant field.
fn weighted_sum(
    g: &mut Graph<f64>,
    x: TensorId,
    weights: &[f64],
) -> Result<TensorId, AutonnError> {
    let shape = g.shape(x).to_vec();
    let n = g.numel(x);
    let w = g.constant(weights[..n].to_vec(), &shape)?;
    let p = g.mul(x, w)?;
    g.sum_all(p)
}

struct OpResult {
    name: &'static str,
    worst: f64,
    tol: f64,
}

/// Finite-difference check of a segloss graph loss (these run through the
/// engine's custom-op hook) against its recorded gradient, differentiating
/// through softmax into the logits.
fn custom_loss_fd<F>(base_seed: u64, loss: F) -> Result<f64, String>
where
    F: Fn(&mut Graph<f64>, TensorId, &HardTarget, &[usize]) -> Result<TensorId, SeglossError>,
{
    let (k, n, eps) = (3usize, 12usize, 1e-5f64);
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed + seed);
        let logits = uni(&mut rng, k * n, -2.0, 2.0);
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..k as u8)).collect();
        let target = HardTarget::new(labels, k).map_err(stringify)?;
        let fg = foreground_classes(k);

        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(logits.clone(), &[1, k, n], true).map_err(stringify)?;
        let p = g.softmax_channels(x).map_err(stringify)?;
        let l = loss(&mut g, p, &target, &fg).map_err(stringify)?;
        g.backward(l).map_err(stringify)?;
        let analytic = g.grad(x).expect("logit gradient").to_vec();

        let eval = |data: Vec<f64>| -> Result<f64, String> {
            let mut g: Graph<f64> = Graph::new();
            let x = g.constant(data, &[1, k, n]).map_err(stringify)?;
            let p = g.softmax_channels(x).map_err(stringify)?;
            let l = loss(&mut g, p, &target, &fg).map_err(stringify)?;
            g.scalar(l).map_err(stringify)
        };
        let mut work = logits;
        for j in 0..work.len() {
            let orig = work[j];
            work[j] = orig + eps;
            let plus = eval(work.clone())?;
            work[j] = orig - eps;
            let minus = eval(work.clone())?;
            work[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let rel =
                (analytic[j] - numeric).abs() / analytic[j].abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Whole-network spot check: ten random parameters of a sixteenth-width
/// network on a 32x32 three-channel input, against central differences.
/// Normalised-away conv biases carry a structurally zero gradient that
/// finite differences cannot resolve, so candidates skip them; the head
/// bias feeds the output directly and stays in. The step was calibrated:
/// 1e-3 can cross a pooling argmax flip, 1e-4 cannot.
fn composite_fd() -> Result<f64, String> {
    let cfg = NetConfig { width_factor: 1.0 / 16.0, ..NetConfig::default() };
    let mut net: Network<f64> = build_ipunet(&cfg, 42).map_err(stringify)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let input = uni(&mut rng, 3 * 32 * 32, 0.0, 1.0);

    let mut g: Graph<f64> = Graph::new();
    let x = g.constant(input.clone(), &[1, 3, 32, 32]).map_err(stringify)?;
    let pass = net.forward(&mut g, x, Mode::Train).map_err(stringify)?;
    let out_shape = g.shape(pass.output).to_vec();
    let weights = uni(&mut rng, out_shape.iter().product(), 0.0, 1.0);
    let w = g.constant(weights.clone(), &out_shape).map_err(stringify)?;
    let prod = g.mul(pass.output, w).map_err(stringify)?;
    let loss = g.sum_all(prod).map_err(stringify)?;
    g.backward(loss).map_err(stringify)?;
    let grads: Vec<Vec<f64>> =
        pass.param_ids.iter().map(|id| g.grad(*id).expect("param gradient").to_vec()).collect();

    let mut candidates = Vec::new();
    for i in 0..net.params.len() {
        let p = net.params.get(i);
        if !p.name.ends_with(".bias") || p.name == "head.bias" {
            for j in 0..p.data.len() {
                candidates.push((i, j));
            }
        }
    }
    candidates.shuffle(&mut rng);

    let eval = |net: &mut Network<f64>| -> Result<f64, String> {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(input.clone(), &[1, 3, 32, 32]).map_err(stringify)?;
        let pass = net.forward(&mut g, x, Mode::Train).map_err(stringify)?;
        let w = g.constant(weights.clone(), &out_shape).map_err(stringify)?;
        let prod = g.mul(pass.output, w).map_err(stringify)?;
        let loss = g.sum_all(prod).map_err(stringify)?;
        g.scalar(loss).map_err(stringify)
    };

    let eps = 1e-4;
    let mut worst = 0.0f64;
    for &(pi, ej) in candidates.iter().take(10) {
        let orig = net.params.get(pi).data[ej];
        net.params.get_mut(pi).data[ej] = orig + eps;
        let plus = eval(&mut net)?;
        net.params.get_mut(pi).data[ej] = orig - eps;
        let minus = eval(&mut net)?;
        net.params.get_mut(pi).data[ej] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = grads[pi][ej];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn gradient_suite() -> Result<String, String> {
    let started = Instant::now();
    let seeds = 20u64;
    let mut results: Vec<OpResult> = Vec::new();

    // each op: 20 seeded random cases, every input element perturbed
    let mut run_op = |name: &'static str,
                      tol: f64,
                      case: &dyn Fn(&mut ChaCha8Rng, u64) -> Result<f64, String>|
     -> Result<(), String> {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let err = case(&mut rng, seed)?;
            worst = worst.max(err);
        }
        results.push(OpResult { name, worst, tol });
        Ok(())
    };

    // the affine and piecewise-affine ops have zero finite-difference
    // truncation error, so a wide 1e-3 step minimises roundoff; inputs for
    // the kinked ops are kept well clear of their kinks
    run_op("add", 1e-6, &|rng, _| {
        let (a, b, w) = (uni(rng, 24, -1.0, 1.0), uni(rng, 24, -1.0, 1.0), uni(rng, 24, -1.0, 1.0));
        finite_diff_check_many(&[(&a, &[2, 3, 4]), (&b, &[2, 3, 4])], 1e-3, |g, ids| {
            let y = g.add(ids[0], ids[1])?;
            weighted_sum(g, y, &w)
        })
        .map_err(stringify)
    })?;

    run_op("mul", 1e-6, &|rng, _| {
        let (a, b, w) = (uni(rng, 24, -1.0, 1.0), uni(rng, 24, -1.0, 1.0), uni(rng, 24, -1.0, 1.0));
        finite_diff_check_many(&[(&a, &[2, 3, 4]), (&b, &[2, 3, 4])], 1e-3, |g, ids| {
            let y = g.mul(ids[0], ids[1])?;
            weighted_sum(g, y, &w)
        })
        .map_err(stringify)
    })?;

    run_op("scale", 1e-6, &|rng, _| {
        let (a, w) = (uni(rng, 24, -1.0, 1.0), uni(rng, 24, -1.0, 1.0));
        finite_diff_check_many(&[(&a, &[2, 3, 4])], 1e-3, |g, ids| {
            let y = g.scale(ids[0], 0.37)?;
            weighted_sum(g, y, &w)
        })
        .map_err(stringify)
    })?;

    run_op("sum_all", 1e-6, &|rng, _| {
        let a = uni(rng, 24, -1.0, 1.0);
        finite_diff_check_many(&[(&a, &[2, 3, 4])], 1e-3, |g, ids| g.sum_all(ids[0]))
            .map_err(stringify)
    })?;

    run_op("mean_all", 1e-6, &|rng, _| {
        let a = uni(rng, 24, -1.0, 1.0);
        finite_diff_check_many(&[(&a, &[2, 3, 4])], 1e-3, |g, ids| g.mean_all(ids[0]))
            .map_err(stringify)
    })?;

    run_op("concat_channels", 1e-6, &|rng, _| {
        let a = uni(rng, 16, -1.0, 1.0);
        let b = uni(rng, 24, -1.0, 1.0);
        let w = uni(rng, 40, -1.0, 1.0);
        finite_diff_check_many(&[(&a, &[2, 2, 2, 2]), (&b, &[2, 3, 2, 2])], 1e-3, |g, ids| {
            let y = g.concat_channels(ids[0], ids[1])?;
            weighted_sum(g, y, &w)
        })
        .map_err(stringify)
    })?;

    run_op("leaky_relu", 1e-6, &|rng, _| {
        let a = off_zero(rng, 24);
        let w = uni(rng, 24, -1.0, 1.0);
        finite_diff_check_many(&[(&a, &[2, 3, 4])], 1e-3, |g, ids| {
            let y = g.leaky_relu(ids[0], 0.01)?;
            weighted_sum(g, y, &w)
        })
        .map_err(stringify)
    })?;

    run_op("softmax_channels", 1e-5, &|rng, _| {
        let a = uni(rng, 24, -2.0, 2.0);
        let w = uni(rng, 24, -1.0, 1.0);
        finite_diff_check_many(&[(&a, &[2, 3, 4])], 1e-5, |g, ids| {
            let y = g.softmax_channels(ids[0])?;
            weighted_sum(g, y, &w)
        })
        .map_err(stringify)
    })?;

    // conv and deconv losses are affine in each perturbed coordinate, so
    // central differences carry no truncation term; the wider 1e-3 step
    // only shrinks the remaining roundoff
    run_op("conv2d", 1e-6, &|rng, seed| {
        let x = uni(rng, 2 * 3 * 5 * 5, -1.0, 1.0);
        let w_out = uni(rng, 4 * 5 * 5 * 2, -1.0, 1.0);
        if seed % 2 == 0 {
            let (kw, kb) = (uni(rng, 4 * 3 * 9, -1.0, 1.0), uni(rng, 4, -0.5, 0.5));
            finite_diff_check_many(
                &[(&x, &[2, 3, 5, 5]), (&kw, &[4, 3, 3, 3]), (&kb, &[4])],
                1e-3,
                |g, ids| {
                    let y = g.conv2d(ids[0], ids[1], ids[2], 1, 1)?;
                    weighted_sum(g, y, &w_out)
                },
            )
            .map_err(stringify)
        } else {
            let (kw, kb) = (uni(rng, 4 * 3, -1.0, 1.0), uni(rng, 4, -0.5, 0.5));
            finite_diff_check_many(
                &[(&x, &[2, 3, 5, 5]), (&kw, &[4, 3, 1, 1]), (&kb, &[4])],
                1e-3,
                |g, ids| {
                    let y = g.conv2d(ids[0], ids[1], ids[2], 1, 0)?;
                    weighted_sum(g, y, &w_out)
                },
            )
            .map_err(stringify)
        }
    })?;

    run_op("conv3d", 1e-6, &|rng, seed| {
        let x = uni(rng, 2 * 4 * 4 * 4, -1.0, 1.0);
        let w_out = uni(rng, 3 * 4 * 4 * 4, -1.0, 1.0);
        if seed % 2 == 0 {
            let (kw, kb) = (uni(rng, 3 * 2 * 27, -1.0, 1.0), uni(rng, 3, -0.5, 0.5));
            finite_diff_check_many(
                &[(&x, &[1, 2, 4, 4, 4]), (&kw, &[3, 2, 3, 3, 3]), (&kb, &[3])],
                1e-3,
                |g, ids| {
                    let y = g.conv3d(ids[0], ids[1], ids[2], 1, 1)?;
                    weighted_sum(g, y, &w_out)
                },
            )
            .map_err(stringify)
        } else {
            let (kw, kb) = (uni(rng, 3 * 2, -1.0, 1.0), uni(rng, 3, -0.5, 0.5));
            finite_diff_check_many(
                &[(&x, &[1, 2, 4, 4, 4]), (&kw, &[3, 2, 1, 1, 1]), (&kb, &[3])],
                1e-3,
                |g, ids| {
                    let y = g.conv3d(ids[0], ids[1], ids[2], 1, 0)?;
                    weighted_sum(g, y, &w_out)
                },
            )
            .map_err(stringify)
        }
    })?;

    run_op("deconv2d", 1e-6, &|rng, _| {
        let x = uni(rng, 3 * 4 * 4, -1.0, 1.0);
        let kw = uni(rng, 3 * 2 * 9, -1.0, 1.0);
        let w_out = uni(rng, 2 * 8 * 8, -1.0, 1.0);
        finite_diff_check_many(&[(&x, &[1, 3, 4, 4]), (&kw, &[3, 2, 3, 3])], 1e-3, |g, ids| {
            let y = g.deconv2d(ids[0], ids[1], 2)?;
            weighted_sum(g, y, &w_out)
        })
        .map_err(stringify)
    })?;

    run_op("deconv3d", 1e-6, &|rng, _| {
        let x = uni(rng, 2 * 27, -1.0, 1.0);
        let kw = uni(rng, 2 * 2 * 27, -1.0, 1.0);
        let w_out = uni(rng, 2 * 216, -1.0, 1.0);
        finite_diff_check_many(
            &[(&x, &[1, 2, 3, 3, 3]), (&kw, &[2, 2, 3, 3, 3])],
            1e-3,
            |g, ids| {
                let y = g.deconv3d(ids[0], ids[1], 2)?;
                weighted_sum(g, y, &w_out)
            },
        )
        .map_err(stringify)
    })?;

    run_op("batchnorm train", 1e-5, &|rng, _| {
        let x = uni(rng, 4 * 3 * 4, -1.0, 1.0);
        let gamma = uni(rng, 3, 0.5, 1.5);
        let beta = uni(rng, 3, -0.5, 0.5);
        let w = uni(rng, 48, -1.0, 1.0);
        finite_diff_check_many(
            &[(&x, &[4, 3, 4]), (&gamma, &[3]), (&beta, &[3])],
            1e-5,
            |g, ids| {
                let mut stats = RunningStats::new(3);
                let y = g.batchnorm(ids[0], ids[1], ids[2], &mut stats, Mode::Train)?;
                weighted_sum(g, y, &w)
            },
        )
        .map_err(stringify)
    })?;

    run_op("batchnorm eval", 1e-5, &|rng, _| {
        let x = uni(rng, 4 * 3 * 4, -1.0, 1.0);
        let gamma = uni(rng, 3, 0.5, 1.5);
        let beta = uni(rng, 3, -0.5, 0.5);
        let mean = uni(rng, 3, -0.5, 0.5);
        let var = uni(rng, 3, 0.5, 1.5);
        let w = uni(rng, 48, -1.0, 1.0);
        finite_diff_check_many(
            &[(&x, &[4, 3, 4]), (&gamma, &[3]), (&beta, &[3])],
            1e-5,
            |g, ids| {
                let mut stats = RunningStats::new(3);
                stats.mean.copy_from_slice(&mean);
                stats.var.copy_from_slice(&var);
                let y = g.batchnorm(ids[0], ids[1], ids[2], &mut stats, Mode::Eval)?;
                weighted_sum(g, y, &w)
            },
        )
        .map_err(stringify)
    })?;

    // pool inputs are separated by at least 7/(8n), so a 1e-4 step cannot
    // flip an argmax
    run_op("maxpool2d", 1e-6, &|rng, _| {
        let x = separated(rng, 2 * 16);
        let w = uni(rng, 2 * 4, -1.0, 1.0);
        finite_diff_check_many(&[(&x, &[1, 2, 4, 4])], 1e-4, |g, ids| {
            let y = g.maxpool2d(ids[0], 2, 2)?;
            weighted_sum(g, y, &w)
        })
        .map_err(stringify)
    })?;

    run_op("maxpool3d", 1e-6, &|rng, _| {
        let x = separated(rng, 64);
        let w = uni(rng, 8, -1.0, 1.0);
        finite_diff_check_many(&[(&x, &[1, 1, 4, 4, 4])], 1e-4, |g, ids| {
            let y = g.maxpool3d(ids[0], 2, 2)?;
            weighted_sum(g, y, &w)
        })
        .map_err(stringify)
    })?;

    let dice_worst = custom_loss_fd(3000, |g, p, t, fg| dice_loss(g, p, t, fg))?;
    results.push(OpResult { name: "dice_loss (custom op)", worst: dice_worst, tol: 1e-5 });
    let tversky_worst =
        custom_loss_fd(4000, |g, p, t, fg| tversky_loss(g, p, t, 0.3, 0.7, fg))?;
    results.push(OpResult { name: "tversky_loss (custom op)", worst: tversky_worst, tol: 1e-5 });

    let bad: Vec<String> = results
        .iter()
        .filter(|r| !(r.worst <= r.tol))
        .map(|r| format!("{} rel {:.2e} > {:.0e}", r.name, r.worst, r.tol))
        .collect();
    if !bad.is_empty() {
        return Err(format!("per-op finite differences out of tolerance: {}", bad.join("; ")));
    }
    let op_worst = results
        .iter()
        .max_by(|a, b| a.worst.total_cmp(&b.worst))
        .expect("results nonempty");

    let net_worst = composite_fd()?;
    let secs = started.elapsed().as_secs_f64();
    let detail = format!(
        "{} ops x {seeds} seeds, worst rel {:.2e} ({}); composite net over 10 params rel {:.2e}; \
         {secs:.0}s",
        results.len(),
        op_worst.worst,
        op_worst.name,
        net_worst
    );
    if net_worst < 1e-4 && secs < 120.0 {
        Ok(detail)
    } else {
        Err(format!("{detail} (composite bound 1e-4, budget 120s)"))
    }
}

// ---------------------------------------------------------------- criterion 3

fn tversky_dice_identity() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    let cases = 1000;
    for _ in 0..cases {
        let k = rng.random_range(2..=4usize);
        let n = rng.random_range(4..32usize);
        let logits = uni(&mut rng, k * n, -3.0, 3.0);
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..k as u8)).collect();
        let target = HardTarget::new(labels, k).map_err(stringify)?;
        let fg = foreground_classes(k);

        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(logits, &[1, k, n]).map_err(stringify)?;
        let p = g.softmax_channels(x).map_err(stringify)?;
        let d = dice_loss(&mut g, p, &target, &fg).map_err(stringify)?;
        let t = tversky_loss(&mut g, p, &target, 0.5, 0.5, &fg).map_err(stringify)?;
        let diff = (g.scalar(d).map_err(stringify)? - g.scalar(t).map_err(stringify)?).abs();
        worst = worst.max(diff);
    }
    let detail = format!("{cases} random soft predictions, worst |tversky(.5,.5) - dice| = {worst:.2e}");
    if worst < 1e-9 {
        Ok(detail)
    } else {
        Err(format!("{detail} (bound 1e-9)"))
    }
}

// ---------------------------------------------------------------- criterion 4

fn shape_plan_golden() -> Result<String, String> {
    // published layer table for the full-width net on 512x512 two-channel
    // input; rows whose neighbours contradict them in the source are skipped
    let expected: &[(usize, &[&str])] = &[
        (1, &["1", "Encode", "conv", "512X512X2", "64", "1/3X3", "512X512X64"]),
        (2, &["2", "Encode", "conv", "512X512X64", "64", "1/3X3", "512X512X64"]),
        (3, &["3", "Encode", "max", "512X512X64", "2/2X2", "256X256X64"]),
        (4, &["4", "Encode", "conv", "256X256X64", "128", "1/3X3", "256X256X128"]),
        (5, &["5", "Encode", "conv", "256X256X128", "128", "1/3X3", "256X256X128"]),
        (6, &["6", "Encode", "max", "256X256X128", "2/2X2", "128X128X128"]),
        (7, &["7", "Encode", "conv", "128X128X128", "256", "1/3X3", "128X128X256"]),
        (8, &["8", "Encode", "conv", "128X128X256", "256", "1/3X3", "128X128X256"]),
        (14, &["14", "Encode", "conv", "32X32X1024", "1024", "1/3X3", "32X32X1024"]),
        (15, &["15", "Decode", "deconv", "32X32X1024", "512", "2/3X3", "64X64X512"]),
        (17, &["17", "Decode", "conv", "64X64X1024", "512", "1/3X3", "64X64X512"]),
        (18, &["18", "Decode", "conv", "64X64X512", "512", "1/3X3", "64X64X512"]),
        (19, &["19", "Decode", "deconv", "64X64X512", "256", "2/3X3", "128X128X256"]),
        (21, &["21", "Decode", "conv", "128X128X512", "256", "1/3X3", "128X128X256"]),
        (22, &["22", "Decode", "conv", "128X128X256", "256", "1/3X3", "128X128X256"]),
        (23, &["23", "Decode", "deconv", "128X128X256", "128", "2/3X3", "256X256X128"]),
        (25, &["25", "Decode", "conv", "256X256X256", "128", "1/3X3", "256X256X128"]),
        (26, &["26", "Decode", "conv", "256X256X128", "128", "1/3X3", "256X256X128"]),
        (27, &["27", "Decode", "deconv", "256X256X128", "64", "2/3X3", "512X512X64"]),
        (28, &["28", "Decode", "concat", "512X512X64", "512X512X128"]),
        (29, &["29", "Decode", "conv", "512X512X128", "64", "1/3X3", "512X512X64"]),
        (30, &["30", "Decode", "conv", "512X512X64", "64", "1/3X3", "512X512X64"]),
        (31, &["31", "Decode", "conv", "512X512X64", "3", "1/1X1", "512X512X3"]),
    ];

    let cfg = NetConfig { in_channels: 2, ..NetConfig::default() };
    alloc::reset_peak();
    let tracked_before = alloc::current_bytes();
    let started = Instant::now();
    let plan = plan_for(&cfg, &[512, 512]).map_err(stringify)?;
    let text = plan.to_text();
    let secs = started.elapsed().as_secs_f64();
    let tracked_now = alloc::current_bytes();
    let tracked_peak = alloc::peak_bytes();

    if plan.rows.len() != 31 {
        return Err(format!("expected 31 rows, got {}", plan.rows.len()));
    }
    if text.len() >= 10 << 20 {
        return Err(format!("table text is {} bytes", text.len()));
    }
    let lines: Vec<&str> = text.lines().collect();
    for (no, cells) in expected {
        let line = lines[*no];
        let toks: Vec<&str> = line.split_whitespace().collect();
        // last column is this implementation's parameter count, not part
        // of the published table
        if &toks[..toks.len() - 1] != *cells {
            return Err(format!("row {no} mismatch: {line:?}"));
        }
    }
    if tracked_now != tracked_before || tracked_peak != tracked_before {
        return Err(format!(
            "symbolic planning touched tracked tensor memory: {tracked_before} -> \
             {tracked_now} (peak {tracked_peak})"
        ));
    }
    let detail = format!(
        "31 rows, {} published rows verbatim, zero tracked-tensor allocation, {:.0}ms",
        expected.len(),
        secs * 1e3
    );
    if secs < 1.0 {
        Ok(detail)
    } else {
        Err(format!("{detail} (budget 1s)"))
    }
}

// ---------------------------------------------------------------- criterion 5

fn metric_arithmetic() -> Result<String, String> {
    let counts = ClassCounts { true_pos: 2, false_pos: 3, false_neg: 1, true_neg: 94 };
    let m = counts.metrics();
    if m.dsc != 0.5 {
        return Err(format!("dsc for TP2 FP3 FN1 TN94 is {}, want exactly 0.5", m.dsc));
    }
    if m.precision_std != 0.4 {
        return Err(format!("precision is {}, want exactly 0.4", m.precision_std));
    }
    if m.precision_as_sensitivity != 2.0 / 3.0 {
        return Err(format!(
            "sensitivity-convention precision is {}, want 2/3",
            m.precision_as_sensitivity
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    let pairs = 100;
    for _ in 0..pairs {
        let k = rng.random_range(2..=4usize);
        let n = rng.random_range(8..=64usize);
        let pred: Vec<u8> = (0..n).map(|_| rng.random_range(0..k as u8)).collect();
        let target: Vec<u8> = (0..n).map(|_| rng.random_range(0..k as u8)).collect();

        let counts = ConfusionCounts::compute(&pred, &target, k).map_err(stringify)?;
        let macro_dsc = metric_report(&counts).macro_avg.dsc;

        let mut one_hot = vec![0.0f64; k * n];
        for (i, &p) in pred.iter().enumerate() {
            one_hot[usize::from(p) * n + i] = 1.0;
        }
        let ht = HardTarget::new(target, k).map_err(stringify)?;
        let mut g: Graph<f64> = Graph::new();
        let ph = g.constant(one_hot, &[1, k, n]).map_err(stringify)?;
        let loss = dice_loss(&mut g, ph, &ht, &foreground_classes(k)).map_err(stringify)?;
        let from_loss = 1.0 - g.scalar(loss).map_err(stringify)?;
        worst = worst.max((macro_dsc - from_loss).abs());
    }
    let detail = format!(
        "count metrics exact (dsc 0.5, precision 0.4, sensitivity-precision 2/3); \
         |dsc - (1 - dice_loss)| <= {worst:.2e} over {pairs} hard pairs"
    );
    if worst <= 1e-6 {
        Ok(detail)
    } else {
        Err(format!("{detail} (bound 1e-6)"))
    }
}

// ---------------------------------------------------------------- criterion 6

fn desk_learning(data: &Dataset) -> Result<String, String> {
    let started = Instant::now();
    let cfg = desk_cfg();
    let mut wins = 0usize;
    let mut parts = Vec::new();
    for seed in [1u64, 2, 3] {
        let hp = HyperParams { epochs: 50, seed, ..HyperParams::default() };
        let (ckpt, _) = train(Pipeline::Ip, &cfg, data, &hp).map_err(stringify)?;
        let trained = evaluate(&ckpt, data).map_err(stringify)?.macro_avg.dsc;

        let fresh = build_for(Pipeline::Ip, &cfg, seed).map_err(stringify)?;
        let blank = Checkpoint::from_network(&fresh, &hp, Pipeline::Ip);
        let untrained = evaluate(&blank, data).map_err(stringify)?.macro_avg.dsc;

        let win = trained >= 0.5 && trained - untrained >= 0.3;
        wins += usize::from(win);
        parts.push(format!(
            "seed {seed} dsc {trained:.3} vs untrained {untrained:.3}{}",
            if win { "" } else { " MISS" }
        ));
    }
    let secs = started.elapsed().as_secs_f64();
    let detail = format!("{wins}/3 seeds clear the bar ({}); {secs:.0}s", parts.join(", "));
    if wins >= 2 && secs < 900.0 {
        Ok(detail)
    } else {
        Err(format!("{detail} (need 2/3 within 900s)"))
    }
}

// ---------------------------------------------------------------- criterion 7

fn memory_time_claim(data: &Dataset) -> Result<String, String> {
    let started = Instant::now();
    let cfg = desk_cfg();
    // ratios are epoch-count invariant, so two epochs keep this honest
    // while fitting the budget; full-length runs would take hours on CPU
    let hp = HyperParams { epochs: 2, seed: 1, ..HyperParams::default() };
    let ip = run_pipeline_bench(Pipeline::Ip, &cfg, data, &hp, 1).map_err(stringify)?;
    let v3 = run_pipeline_bench(Pipeline::Vol3d, &cfg, data, &hp, 1).map_err(stringify)?;
    let (mem_ip, mem_v3) = (ip.record.peak_tracked_bytes, v3.record.peak_tracked_bytes);
    let (t_ip, t_v3) = (ip.record.total_seconds, v3.record.total_seconds);
    let secs = started.elapsed().as_secs_f64();
    let detail = format!(
        "peak tracked {mem_ip} vs {mem_v3} bytes (ratio {:.3} <= 0.5), wall {t_ip:.1}s vs \
         {t_v3:.1}s (ratio {:.3} <= 0.7); {secs:.0}s",
        mem_ip as f64 / mem_v3 as f64,
        t_ip / t_v3
    );
    if mem_ip as f64 <= 0.5 * mem_v3 as f64 && t_ip <= 0.7 * t_v3 && secs < 1200.0 {
        Ok(detail)
    } else {
        Err(format!("{detail} (budget 1200s)"))
    }
}

// ---------------------------------------------------------------- criterion 8

fn determinism_persistence(data: &Dataset) -> Result<String, String> {
    let started = Instant::now();
    let dir = tempfile::tempdir().map_err(stringify)?;
    let cfg = desk_cfg();
    let hp = HyperParams { epochs: 3, seed: 9, ..HyperParams::default() };

    // same seed, same run: loss bits and serialized checkpoints identical
    // (epoch wall-clock times are measurements, not state, and are not
    // part of the contract)
    let (ck_a, hist_a) = train(Pipeline::Ip, &cfg, data, &hp).map_err(stringify)?;
    let (ck_b, hist_b) = train(Pipeline::Ip, &cfg, data, &hp).map_err(stringify)?;
    if hist_a.len() != hist_b.len()
        || hist_a
            .iter()
            .zip(&hist_b)
            .any(|(x, y)| x.epoch != y.epoch || x.loss.to_bits() != y.loss.to_bits())
    {
        return Err("two identically seeded runs disagree in loss history".into());
    }
    let path_a = dir.path().join("a.ckpt");
    let path_b = dir.path().join("b.ckpt");
    save_checkpoint(&ck_a, &path_a).map_err(stringify)?;
    save_checkpoint(&ck_b, &path_b).map_err(stringify)?;
    let bytes_a = std::fs::read(&path_a).map_err(stringify)?;
    if bytes_a != std::fs::read(&path_b).map_err(stringify)? {
        return Err("two identically seeded runs serialize different checkpoints".into());
    }

    // disk round trip is the identity
    let loaded = load_checkpoint(&path_a).map_err(stringify)?;
    if loaded != ck_a {
        return Err("checkpoint changed across save/load".into());
    }

    // resuming the loaded 3-epoch state to 6 equals a straight 6-epoch run
    let hp6 = HyperParams { epochs: 6, ..hp.clone() };
    let (straight, hist_s) = train(Pipeline::Ip, &cfg, data, &hp6).map_err(stringify)?;
    let (resumed, hist_r) = resume(&loaded, data, 6).map_err(stringify)?;
    let stitched: Vec<u64> =
        hist_a.iter().chain(&hist_r).map(|r| r.loss.to_bits()).collect();
    let full: Vec<u64> = hist_s.iter().map(|r| r.loss.to_bits()).collect();
    if stitched != full {
        return Err("resumed loss history diverges from the uninterrupted run".into());
    }
    if resumed.blobs != straight.blobs
        || resumed.rng_word_pos != straight.rng_word_pos
        || resumed.adam_t != straight.adam_t
        || resumed.epoch != straight.epoch
    {
        return Err("resumed training state diverges from the uninterrupted run".into());
    }

    // NIfTI round trip: voxel bits, geometry, and the file itself are stable
    let (vol, _) = synth_phantom(&PhantomSpec::default()).map_err(stringify)?;
    let path_1 = dir.path().join("v1.nii");
    write_nifti(&vol, &path_1).map_err(stringify)?;
    let read_1 = read_nifti(&path_1).map_err(stringify)?;
    if read_1.dims() != vol.dims() || read_1.spacing != vol.spacing {
        return Err("volume geometry changed across write/read".into());
    }
    if read_1.data().iter().zip(vol.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
        return Err("voxel bits changed across write/read".into());
    }
    let path_2 = dir.path().join("v2.nii");
    write_nifti(&read_1, &path_2).map_err(stringify)?;
    if std::fs::read(&path_1).map_err(stringify)? != std::fs::read(&path_2).map_err(stringify)? {
        return Err("rewriting a read volume is not byte-stable".into());
    }

    let secs = started.elapsed().as_secs_f64();
    let detail = format!(
        "identical seeds give identical loss bits and checkpoint bytes over 3 epochs; \
         resume 3+3 equals straight 6; NIfTI round trip bit-exact; {secs:.0}s"
    );
    if secs < 300.0 {
        Ok(detail)
    } else {
        Err(format!("{detail} (budget 300s)"))
    }
}
