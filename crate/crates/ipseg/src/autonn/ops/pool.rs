//! Max pooling with saved argmax for backward routing.

use crate::autonn::graph::{Graph, Step, TensorId};
use crate::autonn::{AutonnError, Element, Result};

fn pooled_extent(extent: usize, window: usize, stride: usize) -> Result<usize> {
    if window > extent {
        return Err(AutonnError::WindowTooLarge { op: "maxpool", window, extent });
    }
    Ok((extent - window) / stride + 1)
}

impl<E: Element> Graph<E> {
    /// Max over `window x window` patches of an `(N, C, H, W)` tensor.
    /// Trailing rows/columns that do not fill a window are dropped. Ties
    /// resolve to the first element in row-major scan order, and backward
    /// routes the full gradient to that element.
    pub fn maxpool2d(&mut self, x: TensorId, window: usize, stride: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(AutonnError::ShapeMismatch {
                op: "maxpool2d",
                detail: format!("need (N, C, H, W), got {shape:?}"),
            });
        }
        if window == 0 || stride == 0 {
            return Err(AutonnError::InvalidArg {
                op: "maxpool2d",
                detail: "window and stride must be positive".into(),
            });
        }
        let (n_b, ch, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let oh = pooled_extent(h, window, stride)?;
        let ow = pooled_extent(w, window, stride)?;
        let input = self.data(x);
        let mut out = Vec::with_capacity(n_b * ch * oh * ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        for plane in 0..n_b * ch {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = base + (oy * stride) * w + ox * stride;
                    let mut best = input[best_idx];
                    for ky in 0..window {
                        let row = base + (oy * stride + ky) * w + ox * stride;
                        for kx in 0..window {
                            let v = input[row + kx];
                            if v > best {
                                best = v;
                                best_idx = row + kx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx as u64);
                }
            }
        }
        Ok(self.push_op(out, vec![n_b, ch, oh, ow], vec![x], Step::MaxPool { argmax }))
    }

    /// Max over cubic patches of an `(N, C, D, H, W)` tensor. Same edge,
    /// tie, and backward semantics as [`Graph::maxpool2d`].
    pub fn maxpool3d(&mut self, x: TensorId, window: usize, stride: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 5 {
            return Err(AutonnError::ShapeMismatch {
                op: "maxpool3d",
                detail: format!("need (N, C, D, H, W), got {shape:?}"),
            });
        }
        if window == 0 || stride == 0 {
            return Err(AutonnError::InvalidArg {
                op: "maxpool3d",
                detail: "window and stride must be positive".into(),
            });
        }
        let (n_b, ch, d, h, w) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
        let od = pooled_extent(d, window, stride)?;
        let oh = pooled_extent(h, window, stride)?;
        let ow = pooled_extent(w, window, stride)?;
        let input = self.data(x);
        let mut out = Vec::with_capacity(n_b * ch * od * oh * ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        for vol in 0..n_b * ch {
            let base = vol * d * h * w;
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best_idx =
                            base + ((oz * stride) * h + oy * stride) * w + ox * stride;
                        let mut best = input[best_idx];
                        for kz in 0..window {
                            for ky in 0..window {
                                let row = base
                                    + ((oz * stride + kz) * h + oy * stride + ky) * w
                                    + ox * stride;
                                for kx in 0..window {
                                    let v = input[row + kx];
                                    if v > best {
                                        best = v;
                                        best_idx = row + kx;
                                    }
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_idx as u64);
                    }
                }
            }
        }
        Ok(self.push_op(out, vec![n_b, ch, od, oh, ow], vec![x], Step::MaxPool { argmax }))
    }
}
