//! Finite-difference verification of recorded gradients.

use super::graph::{Graph, TensorId};
use super::Result;

/// Largest relative error between the recorded gradient and a central
/// finite difference, over every element of every input.
///
/// `build` reconstructs the computation from leaves to a scalar loss; it is
/// called once per perturbed evaluation, so keep the tensors small. The
/// error metric is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check_many<F>(
    inputs: &[(&[f64], &[usize])],
    eps: f64,
    build: F,
) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[TensorId]) -> Result<TensorId>,
{
    let mut graph: Graph<f64> = Graph::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|(data, shape)| graph.leaf(data.to_vec(), shape, true))
        .collect::<Result<_>>()?;
    let loss = build(&mut graph, &ids)?;
    graph.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|id| graph.grad(*id).expect("leaf gradient present after backward").to_vec())
        .collect();

    let eval = |data: &[Vec<f64>]| -> Result<f64> {
        let mut g: Graph<f64> = Graph::new();
        let ids: Vec<TensorId> = data
            .iter()
            .zip(inputs)
            .map(|(d, (_, shape))| g.leaf(d.clone(), shape, false))
            .collect::<Result<_>>()?;
        let loss = build(&mut g, &ids)?;
        g.scalar(loss)
    };

    let mut work: Vec<Vec<f64>> = inputs.iter().map(|(d, _)| d.to_vec()).collect();
    let mut worst = 0.0f64;
    for i in 0..work.len() {
        for j in 0..work[i].len() {
            let orig = work[i][j];
            work[i][j] = orig + eps;
            let plus = eval(&work)?;
            work[i][j] = orig - eps;
            let minus = eval(&work)?;
            work[i][j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

/// Single-input convenience wrapper around [`finite_diff_check_many`].
pub fn finite_diff_check<F>(data: &[f64], shape: &[usize], eps: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, TensorId) -> Result<TensorId>,
{
    finite_diff_check_many(&[(data, shape)], eps, |g, ids| build(g, ids[0]))
}

#[cfg(test)]
mod tests {
    use super::{finite_diff_check, finite_diff_check_many};
    use crate::autonn::ops::norm::RunningStats;
    use crate::autonn::{Graph, Mode, TensorId};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const EPS: f64 = 1e-5;

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Weighted sum with fixed pseudo-random weights, so every output
    /// element influences the scalar loss differently.
    fn weighted_sum(g: &mut Graph<f64>, out: TensorId, seed: u64) -> crate::autonn::Result<TensorId> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = g.shape(out).to_vec();
        let w = g.constant(randn(&mut rng, g.numel(out)), &shape)?;
        let prod = g.mul(out, w)?;
        g.sum_all(prod)
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = randn(&mut rng, 2 * 2 * 5 * 5);
        let w = randn(&mut rng, 3 * 2 * 3 * 3);
        let b = randn(&mut rng, 3);
        let worst = finite_diff_check_many(
            &[(&x, &[2, 2, 5, 5]), (&w, &[3, 2, 3, 3]), (&b, &[3])],
            EPS,
            |g, ids| {
                let y = g.conv2d(ids[0], ids[1], ids[2], 1, 1)?;
                weighted_sum(g, y, 1)
            },
        )
        .unwrap();
        assert!(worst < 1e-6, "worst rel error {worst}");
    }

    #[test]
    fn strided_conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = randn(&mut rng, 1 * 2 * 5 * 5);
        let w = randn(&mut rng, 2 * 2 * 3 * 3);
        let b = randn(&mut rng, 2);
        let worst = finite_diff_check_many(
            &[(&x, &[1, 2, 5, 5]), (&w, &[2, 2, 3, 3]), (&b, &[2])],
            EPS,
            |g, ids| {
                let y = g.conv2d(ids[0], ids[1], ids[2], 2, 1)?;
                weighted_sum(g, y, 2)
            },
        )
        .unwrap();
        assert!(worst < 1e-6, "worst rel error {worst}");
    }

    #[test]
    fn conv3d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = randn(&mut rng, 1 * 2 * 3 * 4 * 4);
        let w = randn(&mut rng, 2 * 2 * 3 * 3 * 3);
        let b = randn(&mut rng, 2);
        let worst = finite_diff_check_many(
            &[(&x, &[1, 2, 3, 4, 4]), (&w, &[2, 2, 3, 3, 3]), (&b, &[2])],
            EPS,
            |g, ids| {
                let y = g.conv3d(ids[0], ids[1], ids[2], 1, 1)?;
                weighted_sum(g, y, 3)
            },
        )
        .unwrap();
        assert!(worst < 1e-6, "worst rel error {worst}");
    }

    #[test]
    fn deconv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = randn(&mut rng, 1 * 3 * 4 * 4);
        let w = randn(&mut rng, 3 * 2 * 3 * 3);
        let worst = finite_diff_check_many(
            &[(&x, &[1, 3, 4, 4]), (&w, &[3, 2, 3, 3])],
            EPS,
            |g, ids| {
                let y = g.deconv2d(ids[0], ids[1], 2)?;
                weighted_sum(g, y, 4)
            },
        )
        .unwrap();
        assert!(worst < 1e-6, "worst rel error {worst}");
    }

    #[test]
    fn deconv3d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = randn(&mut rng, 1 * 2 * 2 * 3 * 3);
        let w = randn(&mut rng, 2 * 2 * 3 * 3 * 3);
        let worst = finite_diff_check_many(
            &[(&x, &[1, 2, 2, 3, 3]), (&w, &[2, 2, 3, 3, 3])],
            EPS,
            |g, ids| {
                let y = g.deconv3d(ids[0], ids[1], 2)?;
                weighted_sum(g, y, 5)
            },
        )
        .unwrap();
        assert!(worst < 1e-6, "worst rel error {worst}");
    }

    #[test]
    fn maxpool_gradient_matches_on_distinct_values() {
        // distinct by construction so no perturbation flips an argmax
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut x: Vec<f64> = (0..36).map(|i| f64::from(i) * 0.37).collect();
        for v in x.iter_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
        let worst = finite_diff_check(&x, &[1, 1, 6, 6], EPS, |g, id| {
            let y = g.maxpool2d(id, 2, 2)?;
            weighted_sum(g, y, 6)
        })
        .unwrap();
        assert!(worst < 1e-6, "worst rel error {worst}");
    }

    #[test]
    fn maxpool3d_gradient_matches_on_distinct_values() {
        let x: Vec<f64> = (0..64).map(|i| f64::from((i * 37) % 64) * 0.21).collect();
        let worst = finite_diff_check(&x, &[1, 1, 4, 4, 4], EPS, |g, id| {
            let y = g.maxpool3d(id, 2, 2)?;
            weighted_sum(g, y, 7)
        })
        .unwrap();
        assert!(worst < 1e-6, "worst rel error {worst}");
    }

    #[test]
    fn batchnorm_train_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = randn(&mut rng, 4 * 3 * 4);
        let gamma = randn(&mut rng, 3);
        let beta = randn(&mut rng, 3);
        let worst = finite_diff_check_many(
            &[(&x, &[4, 3, 4]), (&gamma, &[3]), (&beta, &[3])],
            EPS,
            |g, ids| {
                let mut stats = RunningStats::new(3);
                let y = g.batchnorm(ids[0], ids[1], ids[2], &mut stats, Mode::Train)?;
                weighted_sum(g, y, 8)
            },
        )
        .unwrap();
        assert!(worst < 1e-5, "worst rel error {worst}");
    }

    #[test]
    fn batchnorm_eval_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let x = randn(&mut rng, 2 * 3 * 4);
        let gamma = randn(&mut rng, 3);
        let beta = randn(&mut rng, 3);
        let worst = finite_diff_check_many(
            &[(&x, &[2, 3, 4]), (&gamma, &[3]), (&beta, &[3])],
            EPS,
            |g, ids| {
                let mut stats = RunningStats::new(3);
                stats.mean = vec![0.1, -0.2, 0.05];
                stats.var = vec![1.5, 0.7, 2.0];
                let y = g.batchnorm(ids[0], ids[1], ids[2], &mut stats, Mode::Eval)?;
                weighted_sum(g, y, 9)
            },
        )
        .unwrap();
        assert!(worst < 1e-5, "worst rel error {worst}");
    }

    #[test]
    fn softmax_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x = randn(&mut rng, 2 * 4 * 3);
        let worst = finite_diff_check(&x, &[2, 4, 3], EPS, |g, id| {
            let y = g.softmax_channels(id)?;
            weighted_sum(g, y, 10)
        })
        .unwrap();
        assert!(worst < 1e-5, "worst rel error {worst}");
    }

    #[test]
    fn leaky_relu_gradient_matches_away_from_kink() {
        let x: Vec<f64> = vec![-2.0, -0.5, 0.3, 1.7, -1.1, 0.9];
        let worst = finite_diff_check(&x, &[6], EPS, |g, id| {
            let y = g.leaky_relu(id, 0.01)?;
            weighted_sum(g, y, 11)
        })
        .unwrap();
        assert!(worst < 1e-6, "worst rel error {worst}");
    }

    #[test]
    fn composite_expression_gradients_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let a = randn(&mut rng, 8);
        let b = randn(&mut rng, 8);
        let worst = finite_diff_check_many(&[(&a, &[2, 4]), (&b, &[2, 4])], EPS, |g, ids| {
            let s = g.add(ids[0], ids[1])?;
            let p = g.mul(s, ids[0])?;
            let sc = g.scale(p, 0.5)?;
            g.mean_all(sc)
        })
        .unwrap();
        assert!(worst < 1e-6, "worst rel error {worst}");
    }

    #[test]
    fn concat_gradients_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = randn(&mut rng, 2 * 2 * 3);
        let b = randn(&mut rng, 2 * 1 * 3);
        let worst = finite_diff_check_many(
            &[(&a, &[2, 2, 3]), (&b, &[2, 1, 3])],
            EPS,
            |g, ids| {
                let c = g.concat_channels(ids[0], ids[1])?;
                weighted_sum(g, c, 12)
            },
        )
        .unwrap();
        assert!(worst < 1e-6, "worst rel error {worst}");
    }

    #[test]
    fn stacked_ops_end_to_end_gradient() {
        // conv -> bn -> leaky -> softmax -> weighted sum. Two exclusions
        // keep the finite difference itself valid: no pooling (a perturbed
        // parameter can flip an argmax, pool has its own check on tie-free
        // inputs) and the conv bias stays a constant (normalisation makes
        // its true gradient exactly zero, so the comparison would measure
        // nothing but cancellation noise).
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = randn(&mut rng, 2 * 1 * 4 * 4);
        let w = randn(&mut rng, 2 * 1 * 3 * 3);
        let gamma = vec![1.1, 0.9];
        let beta = vec![0.05, -0.02];
        let worst = finite_diff_check_many(
            &[
                (&x, &[2, 1, 4, 4]),
                (&w, &[2, 1, 3, 3]),
                (&gamma, &[2]),
                (&beta, &[2]),
            ],
            EPS,
            |g, ids| {
                let mut stats = RunningStats::new(2);
                let bias = g.constant(vec![0.0, 0.0], &[2])?;
                let c = g.conv2d(ids[0], ids[1], bias, 1, 1)?;
                let n = g.batchnorm(c, ids[2], ids[3], &mut stats, Mode::Train)?;
                let a = g.leaky_relu(n, 0.01)?;
                let s = g.softmax_channels(a)?;
                weighted_sum(g, s, 13)
            },
        )
        .unwrap();
        assert!(worst < 1e-5, "worst rel error {worst}");
    }

    #[test]
    fn bias_before_batchnorm_has_zero_gradient() {
        // A per-channel shift is erased by batch normalisation, so the conv
        // bias gradient must come out (numerically) zero.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = randn(&mut rng, 2 * 1 * 4 * 4);
        let w = randn(&mut rng, 2 * 1 * 3 * 3);
        let b = randn(&mut rng, 2);
        let mut g: Graph<f64> = Graph::new();
        let xt = g.leaf(x, &[2, 1, 4, 4], false).unwrap();
        let wt = g.leaf(w, &[2, 1, 3, 3], false).unwrap();
        let bt = g.leaf(b, &[2], true).unwrap();
        let gamma = g.leaf(vec![1.0, 1.0], &[2], false).unwrap();
        let beta = g.leaf(vec![0.0, 0.0], &[2], false).unwrap();
        let mut stats = RunningStats::new(2);
        let c = g.conv2d(xt, wt, bt, 1, 1).unwrap();
        let n = g.batchnorm(c, gamma, beta, &mut stats, Mode::Train).unwrap();
        let loss = weighted_sum(&mut g, n, 14).unwrap();
        g.backward(loss).unwrap();
        for gv in g.grad(bt).unwrap() {
            assert!(gv.abs() < 1e-12, "bias grad should vanish, got {gv}");
        }
    }
}
