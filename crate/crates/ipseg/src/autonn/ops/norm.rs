//! Batch normalisation over the channel axis.

use crate::autonn::graph::{Graph, Step, TensorId};
use crate::autonn::{AutonnError, Element, Mode, Result};

/// Per-channel running mean/variance carried between forward passes.
///
/// Updated only in train mode: `running = (1 - momentum) * running +
/// momentum * batch_stat`, where the variance estimate stored here is the
/// unbiased one while normalisation itself uses the biased estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<E> {
    pub mean: Vec<E>,
    pub var: Vec<E>,
    pub momentum: E,
    pub eps: E,
}

impl<E: Element> RunningStats<E> {
    /// Fresh stats: zero mean, unit variance.
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![E::zero(); channels],
            var: vec![E::one(); channels],
            momentum: E::from_f64_lossy(0.1),
            eps: E::from_f64_lossy(1e-5),
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

impl<E: Element> Graph<E> {
    /// Normalises an `(N, C, spatial...)` tensor per channel, then applies
    /// the affine pair `gamma`, `beta` (each shape `[C]`).
    ///
    /// Train mode normalises by batch statistics and updates `stats`;
    /// eval mode normalises by `stats` and leaves them untouched. Train
    /// mode needs at least two values per channel.
    pub fn batchnorm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        stats: &mut RunningStats<E>,
        mode: Mode,
    ) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(AutonnError::ShapeMismatch {
                op: "batchnorm",
                detail: format!("need (N, C, ...) tensor, got {shape:?}"),
            });
        }
        let (batch, channels) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(AutonnError::ShapeMismatch {
                op: "batchnorm",
                detail: format!(
                    "gamma {:?} / beta {:?} must both be [{channels}]",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            });
        }
        if stats.channels() != channels {
            return Err(AutonnError::ShapeMismatch {
                op: "batchnorm",
                detail: format!("running stats have {} channels, input {channels}", stats.channels()),
            });
        }
        let m = batch * spatial;
        let train = mode == Mode::Train;
        if train && m < 2 {
            return Err(AutonnError::DegenerateBatch { count: m });
        }

        let input = self.data(x);
        let mut mean = vec![E::zero(); channels];
        let mut inv_std = vec![E::zero(); channels];
        if train {
            let m_f = m as f64;
            for c in 0..channels {
                let mut sum = 0.0f64;
                let mut sum_sq = 0.0f64;
                for n in 0..batch {
                    let base = (n * channels + c) * spatial;
                    for v in &input[base..base + spatial] {
                        let v = v.to_f64_lossy();
                        sum += v;
                        sum_sq += v * v;
                    }
                }
                let mu = sum / m_f;
                let biased = (sum_sq / m_f - mu * mu).max(0.0);
                mean[c] = E::from_f64_lossy(mu);
                inv_std[c] = E::from_f64_lossy(1.0 / (biased + stats.eps.to_f64_lossy()).sqrt());
                let unbiased = biased * m_f / (m_f - 1.0);
                let keep = E::one() - stats.momentum;
                stats.mean[c] = keep * stats.mean[c] + stats.momentum * E::from_f64_lossy(mu);
                stats.var[c] = keep * stats.var[c] + stats.momentum * E::from_f64_lossy(unbiased);
            }
        } else {
            for c in 0..channels {
                mean[c] = stats.mean[c];
                inv_std[c] =
                    E::from_f64_lossy(1.0 / (stats.var[c].to_f64_lossy() + stats.eps.to_f64_lossy()).sqrt());
            }
        }

        let g = self.data(gamma);
        let b = self.data(beta);
        let mut out = vec![E::zero(); input.len()];
        for n in 0..batch {
            for c in 0..channels {
                let base = (n * channels + c) * spatial;
                let (mu, istd, gc, bc) = (mean[c], inv_std[c], g[c], b[c]);
                for i in base..base + spatial {
                    out[i] = (input[i] - mu) * istd * gc + bc;
                }
            }
        }
        Ok(self.push_op(out, shape, vec![x, gamma, beta], Step::BatchNorm { mean, inv_std, train }))
    }
}

/// Backward through batchnorm. In train mode the batch statistics depend on
/// the input, giving
/// `dx = gamma * inv_std * (dy - mean(dy) - xhat * mean(dy * xhat))`;
/// in eval mode the statistics are constants and `dx = gamma * inv_std * dy`.
/// `dgamma = sum(dy * xhat)`, `dbeta = sum(dy)` in both modes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_backward<E: Element>(
    input: &[E],
    shape: &[usize],
    gamma: &[E],
    mean: &[E],
    inv_std: &[E],
    train: bool,
    out_grad: &[E],
    wants: (bool, bool, bool),
) -> [Option<Vec<E>>; 3] {
    let (batch, channels) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    let m = E::from_usize(batch * spatial).expect("count fits element type");

    let mut dgamma = vec![E::zero(); channels];
    let mut dbeta = vec![E::zero(); channels];
    for c in 0..channels {
        let (mu, istd) = (mean[c], inv_std[c]);
        let mut sum_dy = E::zero();
        let mut sum_dy_xhat = E::zero();
        for n in 0..batch {
            let base = (n * channels + c) * spatial;
            for i in base..base + spatial {
                sum_dy += out_grad[i];
                sum_dy_xhat += out_grad[i] * (input[i] - mu) * istd;
            }
        }
        dgamma[c] = sum_dy_xhat;
        dbeta[c] = sum_dy;
    }

    let din = wants.0.then(|| {
        let mut din = vec![E::zero(); input.len()];
        for c in 0..channels {
            let (mu, istd, gc) = (mean[c], inv_std[c], gamma[c]);
            let (mean_dy, mean_dy_xhat) = (dbeta[c] / m, dgamma[c] / m);
            for n in 0..batch {
                let base = (n * channels + c) * spatial;
                for i in base..base + spatial {
                    din[i] = if train {
                        let xhat = (input[i] - mu) * istd;
                        gc * istd * (out_grad[i] - mean_dy - xhat * mean_dy_xhat)
                    } else {
                        gc * istd * out_grad[i]
                    };
                }
            }
        }
        din
    });
    [din, wants.1.then_some(dgamma), wants.2.then_some(dbeta)]
}
