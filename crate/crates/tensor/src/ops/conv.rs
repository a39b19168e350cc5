//! NHWC convolutions. Full convolutions lower to im2col + gemm one sample at
//! a time; the column buffer is rebuilt in the backward pass rather than kept.

use crate::error::{Result, TensorError};
use crate::ops::arith::reduce_to;
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn cols(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn rows(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Input pixel read by output (oy, ox) at tap (ky, kx), if inside the image.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad)?;
        (iy < self.h && ix < self.w).then_some(iy * self.w + ix)
    }
}

fn out_extent(op: &'static str, len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || len + 2 * pad < k {
        return Err(TensorError::invalid(
            op,
            format!("kernel {k} with stride {stride} and pad {pad} does not fit extent {len}"),
        ));
    }
    Ok((len + 2 * pad - k) / stride + 1)
}

fn im2col<T: Scalar>(x: &[T], g: &Geometry, col: &mut [T]) {
    let k = g.cols();
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &mut col[(oy * g.wo + ox) * k..][..k];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let dst = &mut row[(ky * g.kw + kx) * g.cin..][..g.cin];
                    match g.source(oy, ox, ky, kx) {
                        Some(pix) => dst.copy_from_slice(&x[pix * g.cin..][..g.cin]),
                        None => dst.fill(T::zero()),
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(col: &[T], g: &Geometry, x: &mut [T]) {
    let k = g.cols();
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &col[(oy * g.wo + ox) * k..][..k];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    if let Some(pix) = g.source(oy, ox, ky, kx) {
                        let src = &row[(ky * g.kw + kx) * g.cin..][..g.cin];
                        for (d, &s) in x[pix * g.cin..][..g.cin].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

fn nhwc(op: &'static str, s: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *s {
        [n, h, w, c] => Ok((n, h, w, c)),
        _ => Err(TensorError::invalid(op, format!("expected NHWC input, got {s:?}"))),
    }
}

impl<T: Scalar> Var<T> {
    /// 2-D convolution of an NHWC input with a `[kh, kw, cin, cout]` kernel,
    /// explicit zero padding on all sides.
    pub fn conv2d(&self, weight: &Var<T>, bias: Option<&Var<T>>, stride: usize, pad: usize) -> Result<Var<T>> {
        let x = self.value();
        let wt = weight.value();
        let (n, h, w, cin) = nhwc("conv2d", x.shape())?;
        let ws = wt.shape().to_vec();
        if ws.len() != 4 || ws[2] != cin {
            return Err(TensorError::mismatch("conv2d", x.shape(), &ws));
        }
        let (kh, kw, cout) = (ws[0], ws[1], ws[3]);
        let geo = Geometry {
            h,
            w,
            cin,
            kh,
            kw,
            stride,
            pad,
            ho: out_extent("conv2d", h, kh, stride, pad)?,
            wo: out_extent("conv2d", w, kw, stride, pad)?,
        };
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(TensorError::mismatch("conv2d bias", &[cout], &b.shape()));
            }
        }
        let (m, k) = (geo.rows(), geo.cols());
        let in_len = h * w * cin;
        let mut out = vec![T::zero(); n * m * cout];
        let mut col = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); m * k] };
        for s in 0..n {
            let xs = &x.data()[s * in_len..][..in_len];
            let a: &[T] = if geo.is_pointwise() {
                xs
            } else {
                im2col(xs, &geo, &mut col);
                &col
            };
            T::gemm(m, k, cout, T::one(), a, k, 1, wt.data(), cout, 1, T::zero(), &mut out[s * m * cout..][..m * cout], cout, 1);
        }
        if let Some(b) = bias {
            let bv = b.value();
            for row in out.chunks_exact_mut(cout) {
                row.iter_mut().zip(bv.data()).for_each(|(o, &b)| *o += b);
            }
        }
        let mut parents = vec![self, weight];
        parents.extend(bias);
        let out_shape = vec![n, geo.ho, geo.wo, cout];
        self.tape().record("conv2d", Tensor::raw(out_shape, out), &parents, move |g, p, _| {
            let (x, wt) = (p[0], p[1]);
            let mut gx = vec![T::zero(); n * in_len];
            let mut gw = vec![T::zero(); k * cout];
            let mut col = vec![T::zero(); m * k];
            let mut dcol = vec![T::zero(); m * k];
            for s in 0..n {
                let xs = &x.data()[s * in_len..][..in_len];
                let gs = &g.data()[s * m * cout..][..m * cout];
                let a: &[T] = if geo.is_pointwise() {
                    xs
                } else {
                    im2col(xs, &geo, &mut col);
                    &col
                };
                // dW += col^T . dY
                T::gemm(k, m, cout, T::one(), a, 1, k, gs, cout, 1, T::one(), &mut gw, cout, 1);
                let gxs = &mut gx[s * in_len..][..in_len];
                if geo.is_pointwise() {
                    T::gemm(m, cout, k, T::one(), gs, cout, 1, wt.data(), 1, cout, T::zero(), gxs, k, 1);
                } else {
                    T::gemm(m, cout, k, T::one(), gs, cout, 1, wt.data(), 1, cout, T::zero(), &mut dcol, k, 1);
                    col2im_add(&dcol, &geo, gxs);
                }
            }
            let mut grads = vec![
                Some(Tensor::raw(x.shape().to_vec(), gx)),
                Some(Tensor::raw(wt.shape().to_vec(), gw)),
            ];
            if p.len() == 3 {
                grads.push(Some(reduce_to(&g.reshape(&[n * m, cout]).expect("rows"), &[cout])));
            }
            grads
        })
    }

    /// Per-channel 2-D convolution (stride 1) of an NHWC input with a
    /// `[kh, kw, c]` kernel.
    pub fn depthwise_conv2d(&self, weight: &Var<T>, bias: Option<&Var<T>>, pad: usize) -> Result<Var<T>> {
        let x = self.value();
        let wt = weight.value();
        let (n, h, w, c) = nhwc("depthwise_conv2d", x.shape())?;
        let ws = wt.shape().to_vec();
        if ws.len() != 3 || ws[2] != c {
            return Err(TensorError::mismatch("depthwise_conv2d", x.shape(), &ws));
        }
        if let Some(b) = bias {
            if b.shape() != [c] {
                return Err(TensorError::mismatch("depthwise_conv2d bias", &[c], &b.shape()));
            }
        }
        let geo = Geometry {
            h,
            w,
            cin: c,
            kh: ws[0],
            kw: ws[1],
            stride: 1,
            pad,
            ho: out_extent("depthwise_conv2d", h, ws[0], 1, pad)?,
            wo: out_extent("depthwise_conv2d", w, ws[1], 1, pad)?,
        };
        let plane_in = h * w * c;
        let plane_out = geo.ho * geo.wo * c;
        let mut out = vec![T::zero(); n * plane_out];
        if let Some(b) = bias {
            let bv = b.value();
            for row in out.chunks_exact_mut(c) {
                row.copy_from_slice(bv.data());
            }
        }
        for s in 0..n {
            let xs = &x.data()[s * plane_in..][..plane_in];
            let os = &mut out[s * plane_out..][..plane_out];
            for oy in 0..geo.ho {
                for ox in 0..geo.wo {
                    let o = &mut os[(oy * geo.wo + ox) * c..][..c];
                    for ky in 0..geo.kh {
                        for kx in 0..geo.kw {
                            if let Some(pix) = geo.source(oy, ox, ky, kx) {
                                let xi = &xs[pix * c..][..c];
                                let wk = &wt.data()[(ky * geo.kw + kx) * c..][..c];
                                for ((o, &xv), &wv) in o.iter_mut().zip(xi).zip(wk) {
                                    *o += xv * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut parents = vec![self, weight];
        parents.extend(bias);
        let out_shape = vec![n, geo.ho, geo.wo, c];
        self.tape().record("depthwise_conv2d", Tensor::raw(out_shape, out), &parents, move |g, p, _| {
            let (x, wt) = (p[0], p[1]);
            let mut gx = vec![T::zero(); n * plane_in];
            let mut gw = vec![T::zero(); wt.numel()];
            for s in 0..n {
                let xs = &x.data()[s * plane_in..][..plane_in];
                let gs = &g.data()[s * plane_out..][..plane_out];
                let gxs = &mut gx[s * plane_in..][..plane_in];
                for oy in 0..geo.ho {
                    for ox in 0..geo.wo {
                        let go = &gs[(oy * geo.wo + ox) * c..][..c];
                        for ky in 0..geo.kh {
                            for kx in 0..geo.kw {
                                if let Some(pix) = geo.source(oy, ox, ky, kx) {
                                    let tap = (ky * geo.kw + kx) * c;
                                    for ch in 0..c {
                                        gxs[pix * c + ch] += go[ch] * wt.data()[tap + ch];
                                        gw[tap + ch] += go[ch] * xs[pix * c + ch];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            let mut grads = vec![
                Some(Tensor::raw(x.shape().to_vec(), gx)),
                Some(Tensor::raw(wt.shape().to_vec(), gw)),
            ];
            if p.len() == 3 {
                grads.push(Some(reduce_to(&g.reshape(&[g.numel() / c, c]).expect("rows"), &[c])));
            }
            grads
        })
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    /// Direct nested-loop convolution used as an independent reference.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (n, h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (kh, kw, cout) = (w.shape()[0], w.shape()[1], w.shape()[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * ho * wo * cout];
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    for co in 0..cout {
                        let mut acc = 0.0;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                for ci in 0..cin {
                                    acc += x.get(&[b, iy as usize, ix as usize, ci]) * w.get(&[ky, kx, ci, co]);
                                }
                            }
                        }
                        out[((b * ho + oy) * wo + ox) * cout + co] = acc;
                    }
                }
            }
        }
        Tensor::from_vec(&[n, ho, wo, cout], out).unwrap()
    }

    #[test]
    fn conv_matches_direct_loops() {
        let x = Tensor::<f64>::from_fn(&[2, 5, 6, 3], |i| ((i * 7) % 11) as f64 - 5.0);
        let w = Tensor::<f64>::from_fn(&[3, 3, 3, 4], |i| ((i * 5) % 7) as f64 * 0.1 - 0.3);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let tape = Tape::new();
            let y = tape
                .constant(x.clone())
                .conv2d(&tape.constant(w.clone()), None, stride, pad)
                .unwrap()
                .value();
            let r = naive_conv(&x, &w, stride, pad);
            assert_eq!(y.shape(), r.shape());
            assert!(y.max_abs_diff(&r) < 1e-12, "stride {stride} pad {pad}");
        }
    }

    #[test]
    fn same_padding_keeps_extent() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f32>::ones(&[1, 8, 8, 2]));
        let w = tape.constant(Tensor::<f32>::ones(&[3, 3, 2, 1]));
        assert_eq!(x.conv2d(&w, None, 1, 1).unwrap().shape(), vec![1, 8, 8, 1]);
        let dw = tape.constant(Tensor::<f32>::ones(&[3, 3, 2]));
        assert_eq!(x.depthwise_conv2d(&dw, None, 1).unwrap().shape(), vec![1, 8, 8, 2]);
    }

    #[test]
    fn depthwise_equals_grouped_full_conv() {
        let x = Tensor::<f64>::from_fn(&[1, 4, 4, 2], |i| (i % 5) as f64);
        let dw = Tensor::<f64>::from_fn(&[3, 3, 2], |i| i as f64 * 0.1);
        // Expand to a block-diagonal full kernel.
        let full = Tensor::<f64>::from_fn(&[3, 3, 2, 2], |i| {
            let (tap, ci, co) = (i / 4, (i / 2) % 2, i % 2);
            if ci == co { dw.data()[tap * 2 + ci] } else { 0.0 }
        });
        let tape = Tape::new();
        let xv = tape.constant(x);
        let a = xv.depthwise_conv2d(&tape.constant(dw), None, 1).unwrap().value();
        let b = xv.conv2d(&tape.constant(full), None, 1, 1).unwrap().value();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::ones(&[1, 4, 4, 3]));
        let w = tape.constant(Tensor::<f64>::ones(&[3, 3, 2, 1]));
        assert!(x.conv2d(&w, None, 1, 1).is_err());
    }
}
