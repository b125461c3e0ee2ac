//! Convolution, its 3D analogue, and transposed convolution.
//!
//! Kernels slide in cross-correlation orientation (no flip). Transposed
//! convolution is pinned to stride 2 with an odd kernel and implicit output
//! padding so spatial extents double exactly.

use crate::autonn::graph::{Graph, Step, TensorId};
use crate::autonn::{AutonnError, Element, Result};

fn conv_extent(
    op: &'static str,
    extent: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    let padded = extent + 2 * padding;
    if kernel > padded {
        return Err(AutonnError::WindowTooLarge { op, window: kernel, extent: padded });
    }
    if (padded - kernel) % stride != 0 {
        return Err(AutonnError::NonIntegralOutput { op, extent, kernel, stride, padding });
    }
    Ok((padded - kernel) / stride + 1)
}

/// Output positions `o` in `[lo, hi)` whose input index
/// `i = o * stride + offset - padding` lands inside `[0, in_extent)`.
#[inline]
fn span(
    offset: usize,
    padding: usize,
    stride: usize,
    in_extent: usize,
    out_extent: usize,
) -> (usize, usize) {
    let lo = if padding > offset { (padding - offset).div_ceil(stride) } else { 0 };
    if in_extent + padding <= offset {
        return (0, 0);
    }
    let hi_incl = ((in_extent - 1 + padding - offset) / stride).min(out_extent - 1);
    if lo > hi_incl {
        (0, 0)
    } else {
        (lo, hi_incl + 1)
    }
}

impl<E: Element> Graph<E> {
    /// 2D convolution of `(N, Cin, H, W)` with weights `(Cout, Cin, k, k)`
    /// and per-output-channel bias.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let in_shape = self.shape(x).to_vec();
        let w_shape = self.shape(weight).to_vec();
        check_conv_shapes("conv2d", &in_shape, &w_shape, Some(self.shape(bias)), 4, 1)?;
        if stride == 0 {
            return Err(AutonnError::InvalidArg { op: "conv2d", detail: "stride must be positive".into() });
        }
        let k = w_shape[2];
        let oh = conv_extent("conv2d", in_shape[2], k, stride, padding)?;
        let ow = conv_extent("conv2d", in_shape[3], k, stride, padding)?;
        let out = conv2d_forward(
            self.data(x),
            &in_shape,
            self.data(weight),
            &w_shape,
            self.data(bias),
            stride,
            padding,
            (oh, ow),
        );
        let shape = vec![in_shape[0], w_shape[0], oh, ow];
        Ok(self.push_op(out, shape, vec![x, weight, bias], Step::Conv2d { stride, padding }))
    }

    /// 3D convolution of `(N, Cin, D, H, W)` with weights `(Cout, Cin, k, k, k)`.
    pub fn conv3d(
        &mut self,
        x: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let in_shape = self.shape(x).to_vec();
        let w_shape = self.shape(weight).to_vec();
        check_conv_shapes("conv3d", &in_shape, &w_shape, Some(self.shape(bias)), 5, 1)?;
        if stride == 0 {
            return Err(AutonnError::InvalidArg { op: "conv3d", detail: "stride must be positive".into() });
        }
        let k = w_shape[2];
        let od = conv_extent("conv3d", in_shape[2], k, stride, padding)?;
        let oh = conv_extent("conv3d", in_shape[3], k, stride, padding)?;
        let ow = conv_extent("conv3d", in_shape[4], k, stride, padding)?;
        let out = conv3d_forward(
            self.data(x),
            &in_shape,
            self.data(weight),
            &w_shape,
            self.data(bias),
            stride,
            padding,
            (od, oh, ow),
        );
        let shape = vec![in_shape[0], w_shape[0], od, oh, ow];
        Ok(self.push_op(out, shape, vec![x, weight, bias], Step::Conv3d { stride, padding }))
    }

    /// Transposed 2D convolution with weights `(Cin, Cout, k, k)`, no bias.
    /// Only stride 2 with an odd kernel is supported; the implicit padding
    /// `(k - 1) / 2` plus one row/column of output padding makes each
    /// spatial extent exactly double.
    pub fn deconv2d(&mut self, x: TensorId, weight: TensorId, stride: usize) -> Result<TensorId> {
        let in_shape = self.shape(x).to_vec();
        let w_shape = self.shape(weight).to_vec();
        let padding = check_deconv("deconv2d", &in_shape, &w_shape, 4, stride)?;
        let out_shape =
            vec![in_shape[0], w_shape[1], in_shape[2] * 2, in_shape[3] * 2];
        let out = deconv2d_forward(
            self.data(x),
            &in_shape,
            self.data(weight),
            &w_shape,
            padding,
            (out_shape[2], out_shape[3]),
        );
        Ok(self.push_op(out, out_shape, vec![x, weight], Step::Deconv2d { padding }))
    }

    /// Transposed 3D convolution with weights `(Cin, Cout, k, k, k)`.
    /// Same stride/padding contract as [`Graph::deconv2d`].
    pub fn deconv3d(&mut self, x: TensorId, weight: TensorId, stride: usize) -> Result<TensorId> {
        let in_shape = self.shape(x).to_vec();
        let w_shape = self.shape(weight).to_vec();
        let padding = check_deconv("deconv3d", &in_shape, &w_shape, 5, stride)?;
        let out_shape = vec![
            in_shape[0],
            w_shape[1],
            in_shape[2] * 2,
            in_shape[3] * 2,
            in_shape[4] * 2,
        ];
        let out = deconv3d_forward(
            self.data(x),
            &in_shape,
            self.data(weight),
            &w_shape,
            padding,
            (out_shape[2], out_shape[3], out_shape[4]),
        );
        Ok(self.push_op(out, out_shape, vec![x, weight], Step::Deconv3d { padding }))
    }
}

fn check_conv_shapes(
    op: &'static str,
    in_shape: &[usize],
    w_shape: &[usize],
    bias_shape: Option<&[usize]>,
    rank: usize,
    cin_axis: usize,
) -> Result<()> {
    if in_shape.len() != rank || w_shape.len() != rank {
        return Err(AutonnError::ShapeMismatch {
            op,
            detail: format!("expected rank {rank} input and weights, got {in_shape:?} and {w_shape:?}"),
        });
    }
    let k = w_shape[2];
    if w_shape[2..].iter().any(|d| *d != k) || k == 0 {
        return Err(AutonnError::ShapeMismatch {
            op,
            detail: format!("kernel must be cubic and non-empty, got {w_shape:?}"),
        });
    }
    if w_shape[cin_axis] != in_shape[1] {
        return Err(AutonnError::ShapeMismatch {
            op,
            detail: format!(
                "input channels {} do not match weight channels {}",
                in_shape[1], w_shape[cin_axis]
            ),
        });
    }
    if let Some(bs) = bias_shape {
        let cout = w_shape[1 - cin_axis];
        if bs != [cout] {
            return Err(AutonnError::ShapeMismatch {
                op,
                detail: format!("bias {bs:?} must be [{cout}]"),
            });
        }
    }
    Ok(())
}

fn check_deconv(
    op: &'static str,
    in_shape: &[usize],
    w_shape: &[usize],
    rank: usize,
    stride: usize,
) -> Result<usize> {
    check_conv_shapes(op, in_shape, w_shape, None, rank, 0)?;
    if stride != 2 {
        return Err(AutonnError::InvalidArg {
            op,
            detail: format!("only stride 2 is supported, got {stride}"),
        });
    }
    let k = w_shape[2];
    if k % 2 == 0 {
        return Err(AutonnError::InvalidArg {
            op,
            detail: format!("kernel must be odd for exact doubling, got {k}"),
        });
    }
    Ok((k - 1) / 2)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_forward<E: Element>(
    input: &[E],
    in_shape: &[usize],
    weight: &[E],
    w_shape: &[usize],
    bias: &[E],
    stride: usize,
    padding: usize,
    out_hw: (usize, usize),
) -> Vec<E> {
    let (nb, cin, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (cout, k) = (w_shape[0], w_shape[2]);
    let (oh, ow) = out_hw;
    let mut out = vec![E::zero(); nb * cout * oh * ow];
    for n in 0..nb {
        for co in 0..cout {
            let ob = (n * cout + co) * oh * ow;
            out[ob..ob + oh * ow].fill(bias[co]);
            for ci in 0..cin {
                let ib = (n * cin + ci) * h * w;
                let wb = (co * cin + ci) * k * k;
                for ky in 0..k {
                    let (ylo, yhi) = span(ky, padding, stride, h, oh);
                    for kx in 0..k {
                        let wv = weight[wb + ky * k + kx];
                        let (xlo, xhi) = span(kx, padding, stride, w, ow);
                        if xlo >= xhi {
                            continue;
                        }
                        for oy in ylo..yhi {
                            let iy = oy * stride + ky - padding;
                            let irow = ib + iy * w + (xlo * stride + kx - padding);
                            let orow = ob + oy * ow + xlo;
                            if stride == 1 {
                                for (d, s) in out[orow..orow + xhi - xlo]
                                    .iter_mut()
                                    .zip(&input[irow..irow + xhi - xlo])
                                {
                                    *d += wv * *s;
                                }
                            } else {
                                for (step, d) in out[orow..orow + xhi - xlo].iter_mut().enumerate() {
                                    *d += wv * input[irow + step * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// din, dweight, dbias for conv2d, computed only where requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<E: Element>(
    input: &[E],
    in_shape: &[usize],
    weight: &[E],
    w_shape: &[usize],
    stride: usize,
    padding: usize,
    out_grad: &[E],
    out_shape: &[usize],
    wants: (bool, bool, bool),
) -> [Option<Vec<E>>; 3] {
    let (nb, cin, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (cout, k) = (w_shape[0], w_shape[2]);
    let (oh, ow) = (out_shape[2], out_shape[3]);

    let mut din = wants.0.then(|| vec![E::zero(); input.len()]);
    let mut dw = wants.1.then(|| vec![E::zero(); weight.len()]);
    let db = wants.2.then(|| {
        let mut db = vec![E::zero(); cout];
        for n in 0..nb {
            for (co, dbv) in db.iter_mut().enumerate() {
                let ob = (n * cout + co) * oh * ow;
                for g in &out_grad[ob..ob + oh * ow] {
                    *dbv += *g;
                }
            }
        }
        db
    });

    if din.is_some() || dw.is_some() {
        for n in 0..nb {
            for co in 0..cout {
                let ob = (n * cout + co) * oh * ow;
                for ci in 0..cin {
                    let ib = (n * cin + ci) * h * w;
                    let wb = (co * cin + ci) * k * k;
                    for ky in 0..k {
                        let (ylo, yhi) = span(ky, padding, stride, h, oh);
                        for kx in 0..k {
                            let (xlo, xhi) = span(kx, padding, stride, w, ow);
                            if xlo >= xhi {
                                continue;
                            }
                            let wv = weight[wb + ky * k + kx];
                            let mut wacc = E::zero();
                            for oy in ylo..yhi {
                                let iy = oy * stride + ky - padding;
                                let irow = ib + iy * w + (xlo * stride + kx - padding);
                                let orow = ob + oy * ow + xlo;
                                let grow = &out_grad[orow..orow + xhi - xlo];
                                if let Some(din) = din.as_mut() {
                                    for (step, g) in grow.iter().enumerate() {
                                        din[irow + step * stride] += wv * *g;
                                    }
                                }
                                if dw.is_some() {
                                    for (step, g) in grow.iter().enumerate() {
                                        wacc += input[irow + step * stride] * *g;
                                    }
                                }
                            }
                            if let Some(dw) = dw.as_mut() {
                                dw[wb + ky * k + kx] += wacc;
                            }
                        }
                    }
                }
            }
        }
    }
    [din, dw, db]
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3d_forward<E: Element>(
    input: &[E],
    in_shape: &[usize],
    weight: &[E],
    w_shape: &[usize],
    bias: &[E],
    stride: usize,
    padding: usize,
    out_dhw: (usize, usize, usize),
) -> Vec<E> {
    let (nb, cin, d, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3], in_shape[4]);
    let (cout, k) = (w_shape[0], w_shape[2]);
    let (od, oh, ow) = out_dhw;
    let mut out = vec![E::zero(); nb * cout * od * oh * ow];
    for n in 0..nb {
        for co in 0..cout {
            let ob = (n * cout + co) * od * oh * ow;
            out[ob..ob + od * oh * ow].fill(bias[co]);
            for ci in 0..cin {
                let ib = (n * cin + ci) * d * h * w;
                let wb = (co * cin + ci) * k * k * k;
                for kz in 0..k {
                    let (zlo, zhi) = span(kz, padding, stride, d, od);
                    for ky in 0..k {
                        let (ylo, yhi) = span(ky, padding, stride, h, oh);
                        for kx in 0..k {
                            let wv = weight[wb + (kz * k + ky) * k + kx];
                            let (xlo, xhi) = span(kx, padding, stride, w, ow);
                            if xlo >= xhi {
                                continue;
                            }
                            for oz in zlo..zhi {
                                let iz = oz * stride + kz - padding;
                                for oy in ylo..yhi {
                                    let iy = oy * stride + ky - padding;
                                    let irow =
                                        ib + (iz * h + iy) * w + (xlo * stride + kx - padding);
                                    let orow = ob + (oz * oh + oy) * ow + xlo;
                                    if stride == 1 {
                                        for (dst, src) in out[orow..orow + xhi - xlo]
                                            .iter_mut()
                                            .zip(&input[irow..irow + xhi - xlo])
                                        {
                                            *dst += wv * *src;
                                        }
                                    } else {
                                        for (step, dst) in
                                            out[orow..orow + xhi - xlo].iter_mut().enumerate()
                                        {
                                            *dst += wv * input[irow + step * stride];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// din, dweight, dbias for conv3d, computed only where requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3d_backward<E: Element>(
    input: &[E],
    in_shape: &[usize],
    weight: &[E],
    w_shape: &[usize],
    stride: usize,
    padding: usize,
    out_grad: &[E],
    out_shape: &[usize],
    wants: (bool, bool, bool),
) -> [Option<Vec<E>>; 3] {
    let (nb, cin, d, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3], in_shape[4]);
    let (cout, k) = (w_shape[0], w_shape[2]);
    let (od, oh, ow) = (out_shape[2], out_shape[3], out_shape[4]);

    let mut din = wants.0.then(|| vec![E::zero(); input.len()]);
    let mut dw = wants.1.then(|| vec![E::zero(); weight.len()]);
    let db = wants.2.then(|| {
        let mut db = vec![E::zero(); cout];
        for n in 0..nb {
            for (co, dbv) in db.iter_mut().enumerate() {
                let ob = (n * cout + co) * od * oh * ow;
                for g in &out_grad[ob..ob + od * oh * ow] {
                    *dbv += *g;
                }
            }
        }
        db
    });

    if din.is_some() || dw.is_some() {
        for n in 0..nb {
            for co in 0..cout {
                let ob = (n * cout + co) * od * oh * ow;
                for ci in 0..cin {
                    let ib = (n * cin + ci) * d * h * w;
                    let wb = (co * cin + ci) * k * k * k;
                    for kz in 0..k {
                        let (zlo, zhi) = span(kz, padding, stride, d, od);
                        for ky in 0..k {
                            let (ylo, yhi) = span(ky, padding, stride, h, oh);
                            for kx in 0..k {
                                let (xlo, xhi) = span(kx, padding, stride, w, ow);
                                if xlo >= xhi {
                                    continue;
                                }
                                let wv = weight[wb + (kz * k + ky) * k + kx];
                                let mut wacc = E::zero();
                                for oz in zlo..zhi {
                                    let iz = oz * stride + kz - padding;
                                    for oy in ylo..yhi {
                                        let iy = oy * stride + ky - padding;
                                        let irow =
                                            ib + (iz * h + iy) * w + (xlo * stride + kx - padding);
                                        let orow = ob + (oz * oh + oy) * ow + xlo;
                                        let grow = &out_grad[orow..orow + xhi - xlo];
                                        if let Some(din) = din.as_mut() {
                                            for (step, g) in grow.iter().enumerate() {
                                                din[irow + step * stride] += wv * *g;
                                            }
                                        }
                                        if dw.is_some() {
                                            for (step, g) in grow.iter().enumerate() {
                                                wacc += input[irow + step * stride] * *g;
                                            }
                                        }
                                    }
                                }
                                if let Some(dw) = dw.as_mut() {
                                    dw[wb + (kz * k + ky) * k + kx] += wacc;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    [din, dw, db]
}

/// Input positions `i` in `[lo, hi)` whose scattered output index
/// `o = 2i + offset - padding` lands inside `[0, out_extent)`.
#[inline]
fn dspan(offset: usize, padding: usize, in_extent: usize, out_extent: usize) -> (usize, usize) {
    let lo = if padding > offset { (padding - offset).div_ceil(2) } else { 0 };
    if out_extent + padding <= offset {
        return (0, 0);
    }
    let hi_incl = ((out_extent - 1 + padding - offset) / 2).min(in_extent - 1);
    if lo > hi_incl {
        (0, 0)
    } else {
        (lo, hi_incl + 1)
    }
}

pub(crate) fn deconv2d_forward<E: Element>(
    input: &[E],
    in_shape: &[usize],
    weight: &[E],
    w_shape: &[usize],
    padding: usize,
    out_hw: (usize, usize),
) -> Vec<E> {
    let (nb, cin, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (cout, k) = (w_shape[1], w_shape[2]);
    let (oh, ow) = out_hw;
    let mut out = vec![E::zero(); nb * cout * oh * ow];
    for n in 0..nb {
        for ci in 0..cin {
            let ib = (n * cin + ci) * h * w;
            for co in 0..cout {
                let ob = (n * cout + co) * oh * ow;
                let wb = (ci * cout + co) * k * k;
                for ky in 0..k {
                    let (ylo, yhi) = dspan(ky, padding, h, oh);
                    for kx in 0..k {
                        let wv = weight[wb + ky * k + kx];
                        let (xlo, xhi) = dspan(kx, padding, w, ow);
                        if xlo >= xhi {
                            continue;
                        }
                        for iy in ylo..yhi {
                            let oy = 2 * iy + ky - padding;
                            let irow = ib + iy * w + xlo;
                            let orow = ob + oy * ow + (2 * xlo + kx - padding);
                            for (step, src) in input[irow..irow + xhi - xlo].iter().enumerate() {
                                out[orow + 2 * step] += wv * *src;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// din, dweight for deconv2d. The input gradient is the forward convolution
/// of the output gradient with the same kernel (the adjoint relation).
#[allow(clippy::too_many_arguments)]
pub(crate) fn deconv2d_backward<E: Element>(
    input: &[E],
    in_shape: &[usize],
    weight: &[E],
    w_shape: &[usize],
    padding: usize,
    out_grad: &[E],
    out_shape: &[usize],
    wants: (bool, bool),
) -> [Option<Vec<E>>; 2] {
    let (nb, cin, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (cout, k) = (w_shape[1], w_shape[2]);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let mut din = wants.0.then(|| vec![E::zero(); input.len()]);
    let mut dw = wants.1.then(|| vec![E::zero(); weight.len()]);
    for n in 0..nb {
        for ci in 0..cin {
            let ib = (n * cin + ci) * h * w;
            for co in 0..cout {
                let ob = (n * cout + co) * oh * ow;
                let wb = (ci * cout + co) * k * k;
                for ky in 0..k {
                    let (ylo, yhi) = dspan(ky, padding, h, oh);
                    for kx in 0..k {
                        let (xlo, xhi) = dspan(kx, padding, w, ow);
                        if xlo >= xhi {
                            continue;
                        }
                        let wv = weight[wb + ky * k + kx];
                        let mut wacc = E::zero();
                        for iy in ylo..yhi {
                            let oy = 2 * iy + ky - padding;
                            let irow = ib + iy * w + xlo;
                            let orow = ob + oy * ow + (2 * xlo + kx - padding);
                            for step in 0..xhi - xlo {
                                let g = out_grad[orow + 2 * step];
                                if let Some(din) = din.as_mut() {
                                    din[irow + step] += wv * g;
                                }
                                if dw.is_some() {
                                    wacc += input[irow + step] * g;
                                }
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw[wb + ky * k + kx] += wacc;
                        }
                    }
                }
            }
        }
    }
    [din, dw]
}

pub(crate) fn deconv3d_forward<E: Element>(
    input: &[E],
    in_shape: &[usize],
    weight: &[E],
    w_shape: &[usize],
    padding: usize,
    out_dhw: (usize, usize, usize),
) -> Vec<E> {
    let (nb, cin, d, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3], in_shape[4]);
    let (cout, k) = (w_shape[1], w_shape[2]);
    let (od, oh, ow) = out_dhw;
    let mut out = vec![E::zero(); nb * cout * od * oh * ow];
    for n in 0..nb {
        for ci in 0..cin {
            let ib = (n * cin + ci) * d * h * w;
            for co in 0..cout {
                let ob = (n * cout + co) * od * oh * ow;
                let wb = (ci * cout + co) * k * k * k;
                for kz in 0..k {
                    let (zlo, zhi) = dspan(kz, padding, d, od);
                    for ky in 0..k {
                        let (ylo, yhi) = dspan(ky, padding, h, oh);
                        for kx in 0..k {
                            let wv = weight[wb + (kz * k + ky) * k + kx];
                            let (xlo, xhi) = dspan(kx, padding, w, ow);
                            if xlo >= xhi {
                                continue;
                            }
                            for iz in zlo..zhi {
                                let oz = 2 * iz + kz - padding;
                                for iy in ylo..yhi {
                                    let oy = 2 * iy + ky - padding;
                                    let irow = ib + (iz * h + iy) * w + xlo;
                                    let orow =
                                        ob + (oz * oh + oy) * ow + (2 * xlo + kx - padding);
                                    for (step, src) in
                                        input[irow..irow + xhi - xlo].iter().enumerate()
                                    {
                                        out[orow + 2 * step] += wv * *src;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// din, dweight for deconv3d.
#[allow(clippy::too_many_arguments)]
pub(crate) fn deconv3d_backward<E: Element>(
    input: &[E],
    in_shape: &[usize],
    weight: &[E],
    w_shape: &[usize],
    padding: usize,
    out_grad: &[E],
    out_shape: &[usize],
    wants: (bool, bool),
) -> [Option<Vec<E>>; 2] {
    let (nb, cin, d, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3], in_shape[4]);
    let (cout, k) = (w_shape[1], w_shape[2]);
    let (od, oh, ow) = (out_shape[2], out_shape[3], out_shape[4]);
    let mut din = wants.0.then(|| vec![E::zero(); input.len()]);
    let mut dw = wants.1.then(|| vec![E::zero(); weight.len()]);
    for n in 0..nb {
        for ci in 0..cin {
            let ib = (n * cin + ci) * d * h * w;
            for co in 0..cout {
                let ob = (n * cout + co) * od * oh * ow;
                let wb = (ci * cout + co) * k * k * k;
                for kz in 0..k {
                    let (zlo, zhi) = dspan(kz, padding, d, od);
                    for ky in 0..k {
                        let (ylo, yhi) = dspan(ky, padding, h, oh);
                        for kx in 0..k {
                            let (xlo, xhi) = dspan(kx, padding, w, ow);
                            if xlo >= xhi {
                                continue;
                            }
                            let wv = weight[wb + (kz * k + ky) * k + kx];
                            let mut wacc = E::zero();
                            for iz in zlo..zhi {
                                let oz = 2 * iz + kz - padding;
                                for iy in ylo..yhi {
                                    let oy = 2 * iy + ky - padding;
                                    let irow = ib + (iz * h + iy) * w + xlo;
                                    let orow =
                                        ob + (oz * oh + oy) * ow + (2 * xlo + kx - padding);
                                    for step in 0..xhi - xlo {
                                        let g = out_grad[orow + 2 * step];
                                        if let Some(din) = din.as_mut() {
                                            din[irow + step] += wv * g;
                                        }
                                        if dw.is_some() {
                                            wacc += input[irow + step] * g;
                                        }
                                    }
                                }
                            }
                            if let Some(dw) = dw.as_mut() {
                                dw[wb + (kz * k + ky) * k + kx] += wacc;
                            }
                        }
                    }
                }
            }
        }
    }
    [din, dw]
}
