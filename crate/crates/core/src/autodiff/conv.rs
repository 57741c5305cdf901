//! Spatial primitives over `(N, C, H, W)` tensors: convolution by patch
//! unrolling, zero padding and average pooling.

use crate::autodiff::{BackwardArgs, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Element, Tensor};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output extent `(size + 2*pad - kernel) / stride + 1`.
pub fn conv_out_size(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl ConvGeom {
    /// Output columns `ow` whose input column `ow * stride + kj - pad` lies
    /// inside the image.
    fn valid_cols(&self, kj: usize) -> std::ops::Range<usize> {
        let (s, p) = (self.stride, self.pad);
        let lo = if kj >= p { 0 } else { (p - kj).div_ceil(s) };
        let hi = if self.width + p > kj {
            ((self.width + p - kj - 1) / s + 1).min(self.out_w)
        } else {
            0
        };
        lo..hi.max(lo)
    }
}

impl ConvGeom {
    /// Stride 1 with output the size of the input: every patch row is the
    /// input plane shifted by a constant offset.
    fn is_same_shift(&self) -> bool {
        self.stride == 1 && self.out_h == self.height && self.out_w == self.width
    }

    /// For a same-shift geometry, the flattened output range whose source
    /// rows are inside the image, and the source offset `di*W + dj`.
    fn shift_span(&self, ki: usize, kj: usize) -> (std::ops::Range<usize>, isize) {
        let w = self.width;
        let di = ki as isize - self.pad as isize;
        let dj = kj as isize - self.pad as isize;
        let lo_row = (-di).max(0) as usize;
        let hi_row = (self.height as isize - di.max(0)) as usize;
        (lo_row * w..hi_row * w, di * w as isize + dj)
    }
}

/// Zeroes the output columns of one same-shift patch row whose source
/// column falls outside the image.
fn zero_wrapped<F: Element>(row: &mut [F], g: &ConvGeom, kj: usize) {
    let valid = g.valid_cols(kj);
    for line in row.chunks_exact_mut(g.out_w) {
        line[..valid.start].fill(F::zero());
        line[valid.end..].fill(F::zero());
    }
}

/// Unrolls one `(C,H,W)` image into a `(C*kh*kw, out_h*out_w)` patch matrix.
fn im2col<F: Element>(img: &[F], g: &ConvGeom, cols: &mut [F]) {
    let ow_len = g.out_len();
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ow_len..(row + 1) * ow_len];
                if g.is_same_shift() {
                    let (span, off) = g.shift_span(ki, kj);
                    dst[..span.start].fill(F::zero());
                    dst[span.end..].fill(F::zero());
                    if !span.is_empty() {
                        // Shifted source range may start one element before the plane or end
                        // one past it; those positions are wrapped columns, zeroed below.
                        let (lo, hi) = (span.start as isize + off, span.end as isize + off);
                        let (clo, chi) = (lo.max(0) as usize, (hi as usize).min(plane.len()));
                        let d0 = (clo as isize - off) as usize;
                        dst[d0..d0 + (chi - clo)].copy_from_slice(&plane[clo..chi]);
                    }
                    zero_wrapped(dst, g, kj);
                    continue;
                }
                let valid = g.valid_cols(kj);
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih >= g.height as isize || valid.is_empty() {
                        drow.fill(F::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    drow[..valid.start].fill(F::zero());
                    drow[valid.end..].fill(F::zero());
                    let first = valid.start * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        drow[valid.clone()].copy_from_slice(&src[first..first + valid.len()]);
                    } else {
                        for (d, &v) in drow[valid.clone()].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
fn col2im<F: Element>(cols: &mut [F], g: &ConvGeom, img: &mut [F]) {
    let ow_len = g.out_len();
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                if g.is_same_shift() {
                    let src = &mut cols[row * ow_len..(row + 1) * ow_len];
                    zero_wrapped(src, g, kj);
                    let (span, off) = g.shift_span(ki, kj);
                    if !span.is_empty() {
                        let (lo, hi) = (span.start as isize + off, span.end as isize + off);
                        let (clo, chi) = (lo.max(0) as usize, (hi as usize).min(plane.len()));
                        let d0 = (clo as isize - off) as usize;
                        for (p, &v) in plane[clo..chi].iter_mut().zip(&src[d0..d0 + (chi - clo)]) {
                            *p = *p + v;
                        }
                    }
                    continue;
                }
                let src = &cols[row * ow_len..(row + 1) * ow_len];
                let valid = g.valid_cols(kj);
                if valid.is_empty() {
                    continue;
                }
                let first = valid.start * g.stride + kj - g.pad;
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let drow = &mut plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    let srow = &src[oh * g.out_w + valid.start..oh * g.out_w + valid.end];
                    if g.stride == 1 {
                        for (d, &v) in drow[first..first + srow.len()].iter_mut().zip(srow) {
                            *d = *d + v;
                        }
                    } else {
                        for (d, &v) in drow[first..].iter_mut().step_by(g.stride).zip(srow) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

fn expect_rank4(shape: &[usize], op: &str) -> Result<()> {
    if shape.len() != 4 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("{op} expects (N, C, H, W)"),
        });
    }
    Ok(())
}

impl<'g, F: Element> Var<'g, F> {
    /// 2-D cross-correlation of `(N,C,H,W)` input with `(O,C,kh,kw)` filters.
    /// Patches are unrolled one image at a time and multiplied by the
    /// filter matrix; the backward pass re-unrolls instead of caching.
    pub fn conv2d(self, weight: Var<'g, F>, stride: usize, pad: usize) -> Result<Var<'g, F>> {
        let x = self.value();
        let w = weight.value();
        let (xs, ws) = (x.shape(), w.shape());
        expect_rank4(xs, "conv2d input")?;
        expect_rank4(ws, "conv2d weight")?;
        if xs[1] != ws[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (out_h, out_w) = match (
            conv_out_size(xs[2], ws[2], stride, pad),
            conv_out_size(xs[3], ws[3], stride, pad),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    lhs: xs.to_vec(),
                    rhs: ws.to_vec(),
                })
            }
        };
        let geom = ConvGeom {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            out_h,
            out_w,
        };
        let (batch, out_c) = (xs[0], ws[0]);
        let in_len = geom.channels * geom.height * geom.width;
        let out_len = out_c * geom.out_len();
        let mut out = vec![F::zero(); batch * out_len];
        let mut cols = vec![F::zero(); geom.patch_len() * geom.out_len()];
        for n in 0..batch {
            im2col(&x.data()[n * in_len..(n + 1) * in_len], &geom, &mut cols);
            gemm(
                false,
                false,
                out_c,
                geom.patch_len(),
                geom.out_len(),
                w.data(),
                &cols,
                F::zero(),
                &mut out[n * out_len..(n + 1) * out_len],
            );
        }
        let value = Tensor::from_parts(vec![batch, out_c, out_h, out_w], out);

        let backward = Box::new(move |args: &BackwardArgs<'_, F>| {
            let (x, w, g) = (&args.inputs[0], &args.inputs[1], args.grad.data());
            let (k, p) = (geom.patch_len(), geom.out_len());
            let mut cols = vec![F::zero(); k * p];
            let mut dw = args.needs[1].then(|| vec![F::zero(); w.numel()]);
            let mut dx = args.needs[0].then(|| vec![F::zero(); x.numel()]);
            let mut dcols = vec![F::zero(); if dx.is_some() { k * p } else { 0 }];
            for n in 0..batch {
                let gn = &g[n * out_len..(n + 1) * out_len];
                if let Some(dw) = dw.as_mut() {
                    im2col(&x.data()[n * in_len..(n + 1) * in_len], &geom, &mut cols);
                    gemm(false, true, out_c, p, k, gn, &cols, F::one(), dw);
                }
                if let Some(dx) = dx.as_mut() {
                    gemm(true, false, k, out_c, p, w.data(), gn, F::zero(), &mut dcols);
                    col2im(&mut dcols, &geom, &mut dx[n * in_len..(n + 1) * in_len]);
                }
            }
            vec![
                dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
                dw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
            ]
        });
        self.graph.record("conv2d", value, &[self.id, weight.id], backward)
    }

    /// Zero-pads the two spatial axes by `pad` on every side.
    pub fn pad2d(self, pad: usize) -> Result<Var<'g, F>> {
        let x = self.value();
        let s = x.shape().to_vec();
        expect_rank4(&s, "pad2d")?;
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let mut out = vec![F::zero(); planes * ph * pw];
        for pl in 0..planes {
            for i in 0..h {
                let src = &x.data()[(pl * h + i) * w..(pl * h + i + 1) * w];
                let off = (pl * ph + i + pad) * pw + pad;
                out[off..off + w].copy_from_slice(src);
            }
        }
        let value = Tensor::from_parts(vec![s[0], s[1], ph, pw], out);
        let backward = Box::new(move |args: &BackwardArgs<'_, F>| {
            let g = args.grad.data();
            let mut dx = Vec::with_capacity(planes * h * w);
            for pl in 0..planes {
                for i in 0..h {
                    let off = (pl * ph + i + pad) * pw + pad;
                    dx.extend_from_slice(&g[off..off + w]);
                }
            }
            vec![Some(Tensor::from_parts(s.clone(), dx))]
        });
        self.graph.record("pad2d", value, &[self.id], backward)
    }

    /// Average pooling with a square window.
    pub fn avg_pool2d(self, kernel: usize, stride: usize) -> Result<Var<'g, F>> {
        let x = self.value();
        let s = x.shape().to_vec();
        expect_rank4(&s, "avg_pool2d")?;
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = match (conv_out_size(h, kernel, stride, 0), conv_out_size(w, kernel, stride, 0)) {
            (Some(a), Some(b)) if kernel > 0 => (a, b),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "avg_pool2d kernel {kernel} stride {stride} does not fit {s:?}"
                )))
            }
        };
        let norm = F::from_f64_lossy(1.0 / (kernel * kernel) as f64);
        let mut out = vec![F::zero(); planes * oh * ow];
        for pl in 0..planes {
            let plane = &x.data()[pl * h * w..(pl + 1) * h * w];
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = F::zero();
                    for a in 0..kernel {
                        for b in 0..kernel {
                            acc = acc + plane[(i * stride + a) * w + j * stride + b];
                        }
                    }
                    out[(pl * oh + i) * ow + j] = acc * norm;
                }
            }
        }
        let value = Tensor::from_parts(vec![s[0], s[1], oh, ow], out);
        let backward = Box::new(move |args: &BackwardArgs<'_, F>| {
            let g = args.grad.data();
            let mut dx = vec![F::zero(); planes * h * w];
            for pl in 0..planes {
                let plane = &mut dx[pl * h * w..(pl + 1) * h * w];
                for i in 0..oh {
                    for j in 0..ow {
                        let gv = g[(pl * oh + i) * ow + j] * norm;
                        for a in 0..kernel {
                            for b in 0..kernel {
                                let idx = (i * stride + a) * w + j * stride + b;
                                plane[idx] = plane[idx] + gv;
                            }
                        }
                    }
                }
            }
            vec![Some(Tensor::from_parts(s.clone(), dx))]
        });
        self.graph.record("avg_pool2d", value, &[self.id], backward)
    }
}
