//! Activations: leaky ReLU and channel softmax.

use crate::autonn::graph::{Graph, Step, TensorId};
use crate::autonn::{AutonnError, Element, Result};

impl<E: Element> Graph<E> {
    /// `x >= 0 ? x : slope * x`. Exactly zero maps to zero with factor one,
    /// which also fixes the subgradient used in backward.
    pub fn leaky_relu(&mut self, x: TensorId, slope: E) -> Result<TensorId> {
        let data: Vec<E> = self
            .data(x)
            .iter()
            .map(|v| if *v >= E::zero() { *v } else { *v * slope })
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push_op(data, shape, vec![x], Step::LeakyRelu { slope }))
    }

    /// Softmax over axis 1 of an `(N, C, spatial...)` tensor, computed per
    /// spatial position with max subtraction.
    pub fn softmax_channels(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(AutonnError::ShapeMismatch {
                op: "softmax_channels",
                detail: format!("need (N, C, ...) tensor, got {shape:?}"),
            });
        }
        let data = softmax_forward(self.data(x), &shape);
        Ok(self.push_op(data, shape, vec![x], Step::SoftmaxChannels))
    }
}

pub(crate) fn softmax_forward<E: Element>(input: &[E], shape: &[usize]) -> Vec<E> {
    let (batch, channels) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    let mut out = vec![E::zero(); input.len()];
    for n in 0..batch {
        let base = n * channels * spatial;
        for s in 0..spatial {
            let mut max = input[base + s];
            for c in 1..channels {
                let v = input[base + c * spatial + s];
                if v > max {
                    max = v;
                }
            }
            let mut denom = E::zero();
            for c in 0..channels {
                let e = (input[base + c * spatial + s] - max).exp();
                out[base + c * spatial + s] = e;
                denom += e;
            }
            for c in 0..channels {
                out[base + c * spatial + s] = out[base + c * spatial + s] / denom;
            }
        }
    }
    out
}

/// dx_c = y_c * (dy_c - sum_k y_k dy_k), per spatial position.
pub(crate) fn softmax_backward<E: Element>(output: &[E], shape: &[usize], out_grad: &[E]) -> Vec<E> {
    let (batch, channels) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    let mut din = vec![E::zero(); output.len()];
    for n in 0..batch {
        let base = n * channels * spatial;
        for s in 0..spatial {
            let mut dot = E::zero();
            for c in 0..channels {
                let i = base + c * spatial + s;
                dot += output[i] * out_grad[i];
            }
            for c in 0..channels {
                let i = base + c * spatial + s;
                din[i] = output[i] * (out_grad[i] - dot);
            }
        }
    }
    din
}

#[cfg(test)]
mod tests {
    use crate::autonn::Graph;

    #[test]
    fn leaky_relu_examples() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![-2.0, 0.0, 3.0], &[3], true).unwrap();
        let y = g.leaky_relu(x, 0.01).unwrap();
        assert_eq!(g.data(y), &[-0.02, 0.0, 3.0]);
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        // zero input takes the positive branch
        assert_eq!(g.grad(x).unwrap(), &[0.01, 1.0, 1.0]);
    }

    #[test]
    fn softmax_channels_sum_to_one_and_order_preserved() {
        let mut g: Graph<f64> = Graph::new();
        // (1, 3, 2): two positions, three channels
        let x = g
            .leaf(vec![1.0, -4.0, 2.0, 0.0, 3.0, 100.0], &[1, 3, 2], false)
            .unwrap();
        let y = g.softmax_channels(x).unwrap();
        let d = g.data(y);
        for s in 0..2 {
            let sum: f64 = (0..3).map(|c| d[c * 2 + s]).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        // position 1 channel values were [-4, 0, 100]; the large logit wins
        assert!(d[2 * 2 + 1] > 0.999_999);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(vec![1.0, 2.0, 3.0], &[1, 3, 1], false).unwrap();
        let b = g.leaf(vec![501.0, 502.0, 503.0], &[1, 3, 1], false).unwrap();
        let ya = g.softmax_channels(a).unwrap();
        let yb = g.softmax_channels(b).unwrap();
        for (u, v) in g.data(ya).iter().zip(g.data(yb)) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}
