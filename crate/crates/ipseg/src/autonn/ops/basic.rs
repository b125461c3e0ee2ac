//! Elementwise arithmetic, reductions, and channel concatenation.

use crate::autonn::graph::{Graph, Step, TensorId};
use crate::autonn::{numel, AutonnError, Element, Result};

impl<E: Element> Graph<E> {
    /// Elementwise `a + b`. Shapes must match exactly.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        same_shape(self, "add", a, b)?;
        let data: Vec<E> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| *x + *y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(data, shape, vec![a, b], Step::Add))
    }

    /// Elementwise `a * b`. Shapes must match exactly.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        same_shape(self, "mul", a, b)?;
        let data: Vec<E> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| *x * *y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(data, shape, vec![a, b], Step::Mul))
    }

    /// `a * factor` with a compile-time constant factor.
    pub fn scale(&mut self, a: TensorId, factor: E) -> Result<TensorId> {
        let data: Vec<E> = self.data(a).iter().map(|x| *x * factor).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(data, shape, vec![a], Step::Scale { factor }))
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        let mut acc = E::zero();
        for x in self.data(a) {
            acc += *x;
        }
        Ok(self.push_op(vec![acc], vec![1], vec![a], Step::SumAll))
    }

    /// Mean of every element, as a `[1]` tensor.
    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.numel(a);
        if n == 0 {
            return Err(AutonnError::InvalidArg {
                op: "mean_all",
                detail: "empty tensor".into(),
            });
        }
        let mut acc = E::zero();
        for x in self.data(a) {
            acc += *x;
        }
        let mean = acc / E::from_usize(n).expect("count fits element type");
        Ok(self.push_op(vec![mean], vec![1], vec![a], Step::MeanAll))
    }

    /// Concatenates along the channel axis (axis 1). All other axes must
    /// agree. Output channels are `a`'s channels followed by `b`'s.
    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != sb.len() || sa.len() < 2 {
            return Err(AutonnError::ShapeMismatch {
                op: "concat_channels",
                detail: format!("ranks differ or too small: {sa:?} vs {sb:?}"),
            });
        }
        for (axis, (x, y)) in sa.iter().zip(&sb).enumerate() {
            if axis != 1 && x != y {
                return Err(AutonnError::ShapeMismatch {
                    op: "concat_channels",
                    detail: format!("axis {axis} differs: {sa:?} vs {sb:?}"),
                });
            }
        }
        let batch = sa[0];
        let spatial: usize = sa[2..].iter().product();
        let (ca, cb) = (sa[1], sb[1]);
        let mut shape = sa.clone();
        shape[1] = ca + cb;
        let mut data = Vec::with_capacity(numel(&shape));
        let da = self.data(a);
        let db = self.data(b);
        for n in 0..batch {
            data.extend_from_slice(&da[n * ca * spatial..(n + 1) * ca * spatial]);
            data.extend_from_slice(&db[n * cb * spatial..(n + 1) * cb * spatial]);
        }
        Ok(self.push_op(data, shape, vec![a, b], Step::ConcatChannels))
    }
}

pub(crate) fn concat_backward<E: Element>(
    shape_a: &[usize],
    shape_b: &[usize],
    out_grad: &[E],
) -> (Vec<E>, Vec<E>) {
    let batch = shape_a[0];
    let spatial: usize = shape_a[2..].iter().product();
    let (block_a, block_b) = (shape_a[1] * spatial, shape_b[1] * spatial);
    let mut ga = Vec::with_capacity(batch * block_a);
    let mut gb = Vec::with_capacity(batch * block_b);
    for n in 0..batch {
        let base = n * (block_a + block_b);
        ga.extend_from_slice(&out_grad[base..base + block_a]);
        gb.extend_from_slice(&out_grad[base + block_a..base + block_a + block_b]);
    }
    (ga, gb)
}

fn same_shape<E: Element>(g: &Graph<E>, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(AutonnError::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", g.shape(a), g.shape(b)),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use crate::autonn::Graph;

    #[test]
    fn sum_of_elementwise_square_grad_is_two_x() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![1.0, -2.0, 3.0], &[3], true).unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn sum_grad_is_ones() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![5.0, 6.0, 7.0, 8.0], &[2, 2], true).unwrap();
        let loss = g.sum_all(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn mean_grad_is_inverse_count() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![1.0; 8], &[8], true).unwrap();
        let loss = g.mean_all(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.125; 8]);
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x + x) so dloss/dx = 2 everywhere.
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![3.0, 4.0], &[2], true).unwrap();
        let y = g.add(x, x).unwrap();
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn concat_splits_gradient_per_sample() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 1, 2], true).unwrap();
        let b = g.leaf(vec![10.0, 20.0, 30.0, 40.0], &[2, 1, 2], true).unwrap();
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 2, 2]);
        // sample 0: a then b, sample 1: a then b
        assert_eq!(g.data(c), &[1.0, 2.0, 10.0, 20.0, 3.0, 4.0, 30.0, 40.0]);
        let w = g.constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], &[2, 2, 2]).unwrap();
        let p = g.mul(c, w).unwrap();
        let loss = g.sum_all(p).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 2.0, 5.0, 6.0]);
        assert_eq!(g.grad(b).unwrap(), &[3.0, 4.0, 7.0, 8.0]);
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![1.0, 2.0], &[2], true).unwrap();
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, crate::autonn::AutonnError::NotScalarLoss { numel: 2 }));
    }

    #[test]
    fn disconnected_parameter_gets_zero_grad() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![1.0, 2.0], &[2], true).unwrap();
        let unused = g.leaf(vec![9.0], &[1], true).unwrap();
        let loss = g.sum_all(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(unused).unwrap(), &[0.0]);
    }
}
