//! Spatial operations on NCHW tensors.

use super::ops::{gemm, view2, view2_mut};
use super::{from_vec, Real, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn conv(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        assert!(height + 2 * pad >= kernel && width + 2 * pad >= kernel, "kernel larger than input");
        Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel) / stride + 1,
            out_w: (width + 2 * pad - kernel) / stride + 1,
        }
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate for output position `o` and kernel tap `k`, if inside.
    fn src(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let p = (o * self.stride + k) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < limit).then_some(p as usize)
    }

    /// Output positions `lo..hi` whose tap `k` lands inside `0..limit`.
    fn valid(&self, k: usize, limit: usize, outputs: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = self.pad.saturating_sub(k).div_ceil(s);
        let hi = if limit + self.pad > k {
            ((limit + self.pad - k - 1) / s + 1).min(outputs)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Unfolds `image` (C x H x W) into a (C*k*k) x (Ho*Wo) matrix.
fn im2col<F: Real>(image: &[F], g: &Geometry, out: &mut [F]) {
    let cols = g.cols();
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = ((c * g.kernel + ky) * g.kernel + kx) * cols;
                for oy in 0..g.out_h {
                    let dst = &mut out[row + oy * g.out_w..row + (oy + 1) * g.out_w];
                    match g.src(oy, ky, g.height) {
                        None => dst.iter_mut().for_each(|v| *v = F::zero()),
                        Some(iy) => {
                            let line = &plane[iy * g.width..(iy + 1) * g.width];
                            let (lo, hi) = g.valid(kx, g.width, g.out_w);
                            dst[..lo].iter_mut().for_each(|v| *v = F::zero());
                            dst[hi..].iter_mut().for_each(|v| *v = F::zero());
                            if g.stride == 1 {
                                let start = lo + kx - g.pad;
                                dst[lo..hi].copy_from_slice(&line[start..start + hi - lo]);
                            } else {
                                for (ox, v) in (lo..hi).zip(dst[lo..hi].iter_mut()) {
                                    *v = line[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image.
fn col2im<F: Real>(cols_data: &[F], g: &Geometry, image: &mut [F]) {
    let cols = g.cols();
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = ((c * g.kernel + ky) * g.kernel + kx) * cols;
                for oy in 0..g.out_h {
                    let Some(iy) = g.src(oy, ky, g.height) else {
                        continue;
                    };
                    let src = &cols_data[row + oy * g.out_w..row + (oy + 1) * g.out_w];
                    let (lo, hi) = g.valid(kx, g.width, g.out_w);
                    let line = &mut plane[iy * g.width..(iy + 1) * g.width];
                    for ox in lo..hi {
                        line[ox * g.stride + kx - g.pad] += src[ox];
                    }
                }
            }
        }
    }
}

fn sum_channels<F: Real>(g: &[F], channels: usize, inner: usize) -> Vec<F> {
    let mut db = vec![F::zero(); channels];
    for (i, chunk) in g.chunks(inner).enumerate() {
        db[i % channels] += chunk.iter().copied().sum();
    }
    db
}

fn add_bias<F: Real>(out: &mut [F], bias: &[F], inner: usize) {
    let channels = bias.len();
    for (i, chunk) in out.chunks_mut(inner).enumerate() {
        let b = bias[i % channels];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

/// Source indices and weights for one axis of bilinear resampling
/// (half-pixel centres, edges clamped).
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl<'t, F: Real> Var<'t, F> {
    /// 2-D convolution. `weight` is `[Cout, Cin, k, k]`.
    pub fn conv2d(self, weight: Var<'t, F>, bias: Option<Var<'t, F>>, stride: usize, pad: usize) -> Var<'t, F> {
        let x = self.value();
        let w = weight.value();
        let xs = x.shape().to_vec();
        let ws = w.shape().to_vec();
        let (batch, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], cin, "conv2d: input channels");
        let geo = Geometry::conv(cin, h, wd, k, stride, pad);
        let (rows, cols) = (geo.rows(), geo.cols());
        let in_len = cin * h * wd;
        let out_len = cout * cols;
        let wsl = w.as_slice().unwrap();
        let xsl = x.as_slice().unwrap();

        let mut unfolded = vec![F::zero(); batch * rows * cols];
        let mut out = vec![F::zero(); batch * out_len];
        for b in 0..batch {
            let col = &mut unfolded[b * rows * cols..(b + 1) * rows * cols];
            im2col(&xsl[b * in_len..(b + 1) * in_len], &geo, col);
            gemm(
                F::one(),
                &view2(wsl, cout, rows),
                &view2(col, rows, cols),
                F::zero(),
                &mut view2_mut(&mut out[b * out_len..(b + 1) * out_len], cout, cols),
            );
        }
        let has_bias = bias.is_some();
        if let Some(bias) = bias {
            add_bias(&mut out, bias.value().as_slice().unwrap(), cols);
        }
        let mut parents = vec![self.id, weight.id];
        parents.extend(bias.map(|b| b.id));
        self.tape.push(
            from_vec(&[batch, cout, geo.out_h, geo.out_w], out),
            parents,
            Box::new(move |g| {
                let gsl = g.as_slice().unwrap();
                let wsl = w.as_slice().unwrap();
                let mut dx = vec![F::zero(); batch * in_len];
                let mut dw = vec![F::zero(); cout * rows];
                let mut dcol = vec![F::zero(); rows * cols];
                for b in 0..batch {
                    let gb = view2(&gsl[b * out_len..(b + 1) * out_len], cout, cols);
                    let col = view2(&unfolded[b * rows * cols..(b + 1) * rows * cols], rows, cols);
                    gemm(F::one(), &gb, &col.t(), F::one(), &mut view2_mut(&mut dw, cout, rows));
                    gemm(
                        F::one(),
                        &view2(wsl, cout, rows).t(),
                        &gb,
                        F::zero(),
                        &mut view2_mut(&mut dcol, rows, cols),
                    );
                    col2im(&dcol, &geo, &mut dx[b * in_len..(b + 1) * in_len]);
                }
                let mut grads = vec![from_vec(&xs, dx), from_vec(&ws, dw)];
                if has_bias {
                    grads.push(from_vec(&[cout], sum_channels(gsl, cout, cols)));
                }
                grads
            }),
        )
    }

    /// Transposed 2-D convolution. `weight` is `[Cin, Cout, k, k]`; the output
    /// size is `(H - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose2d(
        self,
        weight: Var<'t, F>,
        bias: Option<Var<'t, F>>,
        stride: usize,
        pad: usize,
    ) -> Var<'t, F> {
        let x = self.value();
        let w = weight.value();
        let xs = x.shape().to_vec();
        let ws = w.shape().to_vec();
        let (batch, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[1], ws[2]);
        assert_eq!(ws[0], cin, "conv_transpose2d: input channels");
        let out_h = (h - 1) * stride + k - 2 * pad;
        let out_w = (wd - 1) * stride + k - 2 * pad;
        // The output plays the role of the convolution input.
        let geo = Geometry::conv(cout, out_h, out_w, k, stride, pad);
        debug_assert_eq!((geo.out_h, geo.out_w), (h, wd));
        let (rows, cols) = (geo.rows(), geo.cols());
        let in_len = cin * cols;
        let out_len = cout * out_h * out_w;
        let xsl = x.as_slice().unwrap();
        let wsl = w.as_slice().unwrap();

        let mut out = vec![F::zero(); batch * out_len];
        let mut col = vec![F::zero(); rows * cols];
        for b in 0..batch {
            gemm(
                F::one(),
                &view2(wsl, cin, rows).t(),
                &view2(&xsl[b * in_len..(b + 1) * in_len], cin, cols),
                F::zero(),
                &mut view2_mut(&mut col, rows, cols),
            );
            col2im(&col, &geo, &mut out[b * out_len..(b + 1) * out_len]);
        }
        let has_bias = bias.is_some();
        if let Some(bias) = bias {
            add_bias(&mut out, bias.value().as_slice().unwrap(), out_h * out_w);
        }
        let mut parents = vec![self.id, weight.id];
        parents.extend(bias.map(|b| b.id));
        self.tape.push(
            from_vec(&[batch, cout, out_h, out_w], out),
            parents,
            Box::new(move |g| {
                let gsl = g.as_slice().unwrap();
                let xsl = x.as_slice().unwrap();
                let wsl = w.as_slice().unwrap();
                let mut dx = vec![F::zero(); batch * in_len];
                let mut dw = vec![F::zero(); cin * rows];
                let mut gcol = vec![F::zero(); rows * cols];
                for b in 0..batch {
                    im2col(&gsl[b * out_len..(b + 1) * out_len], &geo, &mut gcol);
                    let gc = view2(&gcol, rows, cols);
                    gemm(
                        F::one(),
                        &view2(wsl, cin, rows),
                        &gc,
                        F::zero(),
                        &mut view2_mut(&mut dx[b * in_len..(b + 1) * in_len], cin, cols),
                    );
                    gemm(
                        F::one(),
                        &view2(&xsl[b * in_len..(b + 1) * in_len], cin, cols),
                        &gc.t(),
                        F::one(),
                        &mut view2_mut(&mut dw, cin, rows),
                    );
                }
                let mut grads = vec![from_vec(&xs, dx), from_vec(&ws, dw)];
                if has_bias {
                    grads.push(from_vec(&[cout], sum_channels(gsl, cout, out_h * out_w)));
                }
                grads
            }),
        )
    }

    /// Depthwise convolution, stride 1. `weight` is `[C, 1, k, k]`.
    pub fn depthwise_conv2d(self, weight: Var<'t, F>, bias: Option<Var<'t, F>>, pad: usize) -> Var<'t, F> {
        let x = self.value();
        let w = weight.value();
        let xs = x.shape().to_vec();
        let ws = w.shape().to_vec();
        let (batch, ch, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let k = ws[2];
        assert_eq!(ws[0], ch, "depthwise: channels");
        let geo = Geometry::conv(1, h, wd, k, 1, pad);
        let (oh, ow) = (geo.out_h, geo.out_w);
        let xsl = x.as_slice().unwrap();
        let wsl = w.as_slice().unwrap();
        let mut out = vec![F::zero(); batch * ch * oh * ow];
        for plane in 0..batch * ch {
            let c = plane % ch;
            let src = &xsl[plane * h * wd..(plane + 1) * h * wd];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for ky in 0..k {
                for kx in 0..k {
                    let wt = wsl[(c * k + ky) * k + kx];
                    for oy in 0..oh {
                        let Some(iy) = geo.src(oy, ky, h) else { continue };
                        for ox in 0..ow {
                            if let Some(ix) = geo.src(ox, kx, wd) {
                                dst[oy * ow + ox] += wt * src[iy * wd + ix];
                            }
                        }
                    }
                }
            }
        }
        let has_bias = bias.is_some();
        if let Some(bias) = bias {
            add_bias(&mut out, bias.value().as_slice().unwrap(), oh * ow);
        }
        let mut parents = vec![self.id, weight.id];
        parents.extend(bias.map(|b| b.id));
        self.tape.push(
            from_vec(&[batch, ch, oh, ow], out),
            parents,
            Box::new(move |g| {
                let gsl = g.as_slice().unwrap();
                let xsl = x.as_slice().unwrap();
                let wsl = w.as_slice().unwrap();
                let mut dx = vec![F::zero(); xsl.len()];
                let mut dw = vec![F::zero(); wsl.len()];
                for plane in 0..batch * ch {
                    let c = plane % ch;
                    let src = &xsl[plane * h * wd..(plane + 1) * h * wd];
                    let gp = &gsl[plane * oh * ow..(plane + 1) * oh * ow];
                    let dxp = &mut dx[plane * h * wd..(plane + 1) * h * wd];
                    for ky in 0..k {
                        for kx in 0..k {
                            let widx = (c * k + ky) * k + kx;
                            let wt = wsl[widx];
                            let mut acc = F::zero();
                            for oy in 0..oh {
                                let Some(iy) = geo.src(oy, ky, h) else { continue };
                                for ox in 0..ow {
                                    if let Some(ix) = geo.src(ox, kx, wd) {
                                        let gv = gp[oy * ow + ox];
                                        acc += gv * src[iy * wd + ix];
                                        dxp[iy * wd + ix] += gv * wt;
                                    }
                                }
                            }
                            dw[widx] += acc;
                        }
                    }
                }
                let mut grads = vec![from_vec(&xs, dx), from_vec(&ws, dw)];
                if has_bias {
                    grads.push(from_vec(&[ch], sum_channels(gsl, ch, oh * ow)));
                }
                grads
            }),
        )
    }

    /// Max pooling with a square window; padding never wins the max.
    pub fn max_pool2d(self, kernel: usize, stride: usize, pad: usize) -> Var<'t, F> {
        let x = self.value();
        let xs = x.shape().to_vec();
        let (batch, ch, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let geo = Geometry::conv(1, h, wd, kernel, stride, pad);
        let (oh, ow) = (geo.out_h, geo.out_w);
        let xsl = x.as_slice().unwrap();
        let mut out = vec![F::zero(); batch * ch * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for plane in 0..batch * ch {
            let base = plane * h * wd;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = F::neg_infinity();
                    let mut best_idx = base;
                    for ky in 0..kernel {
                        let Some(iy) = geo.src(oy, ky, h) else { continue };
                        for kx in 0..kernel {
                            if let Some(ix) = geo.src(ox, kx, wd) {
                                let idx = base + iy * wd + ix;
                                if xsl[idx] > best {
                                    best = xsl[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    let o = (plane * oh + oy) * ow + ox;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let len = xsl.len();
        self.unary(
            from_vec(&[batch, ch, oh, ow], out),
            Box::new(move |g| {
                let mut dx = vec![F::zero(); len];
                for (&gv, &idx) in g.iter().zip(&argmax) {
                    dx[idx] += gv;
                }
                vec![from_vec(&xs, dx)]
            }),
        )
    }

    /// Bilinear resize of the two trailing axes.
    pub fn upsample_bilinear(self, out_h: usize, out_w: usize) -> Var<'t, F> {
        let x = self.value();
        let xs = x.shape().to_vec();
        let (batch, ch, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let ty = bilinear_taps(h, out_h);
        let tx: Vec<(usize, usize, F)> = bilinear_taps(wd, out_w)
            .into_iter()
            .map(|(a, b, l)| (a, b, F::of(l)))
            .collect();
        let ty: Vec<(usize, usize, F)> = ty.into_iter().map(|(a, b, l)| (a, b, F::of(l))).collect();
        let xsl = x.as_slice().unwrap();
        let mut out = vec![F::zero(); batch * ch * out_h * out_w];
        for plane in 0..batch * ch {
            let src = &xsl[plane * h * wd..(plane + 1) * h * wd];
            let dst = &mut out[plane * out_h * out_w..(plane + 1) * out_h * out_w];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let top = src[y0 * wd + x0] * (F::one() - lx) + src[y0 * wd + x1] * lx;
                    let bottom = src[y1 * wd + x0] * (F::one() - lx) + src[y1 * wd + x1] * lx;
                    dst[oy * out_w + ox] = top * (F::one() - ly) + bottom * ly;
                }
            }
        }
        self.unary(
            from_vec(&[batch, ch, out_h, out_w], out),
            Box::new(move |g| {
                let gsl = g.as_slice().unwrap();
                let mut dx = vec![F::zero(); batch * ch * h * wd];
                for plane in 0..batch * ch {
                    let gp = &gsl[plane * out_h * out_w..(plane + 1) * out_h * out_w];
                    let dp = &mut dx[plane * h * wd..(plane + 1) * h * wd];
                    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                            let gv = gp[oy * out_w + ox];
                            let (a, b) = (gv * (F::one() - ly), gv * ly);
                            dp[y0 * wd + x0] += a * (F::one() - lx);
                            dp[y0 * wd + x1] += a * lx;
                            dp[y1 * wd + x0] += b * (F::one() - lx);
                            dp[y1 * wd + x1] += b * lx;
                        }
                    }
                }
                vec![from_vec(&xs, dx)]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::{check_unary, random};
    use super::super::Tape;
    use ndarray::ArrayD;

    /// Direct nested-loop convolution used as an oracle.
    fn naive_conv(x: &ArrayD<f64>, w: &ArrayD<f64>, stride: usize, pad: usize) -> ArrayD<f64> {
        let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = ArrayD::zeros(ndarray::IxDyn(&[b, cout, oh, ow]));
        for n in 0..b {
            for o in 0..cout {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (y * stride + ky) as isize - pad as isize;
                                    let ix = (xx * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x[[n, c, iy as usize, ix as usize]] * w[[o, c, ky, kx]];
                                    }
                                }
                            }
                        }
                        out[[n, o, y, xx]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let x = random(&[2, 3, 7, 6], 1);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (7, 2, 3), (2, 2, 0)] {
            let w = random(&[4, 3, k, k], k as u64 + s as u64);
            let tape = Tape::new();
            let y = tape.constant(x.clone()).conv2d(tape.constant(w.clone()), None, s, p);
            let expected = naive_conv(&x, &w, s, p);
            super::super::testing::assert_close(&y.value(), &expected, 1e-12);
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_transpose(y)> for the same weights.
        let x = random(&[1, 3, 8, 8], 3);
        let w = random(&[4, 3, 2, 2], 4);
        let tape = Tape::new();
        let cx = tape.constant(x.clone()).conv2d(tape.constant(w.clone()), None, 2, 0);
        let y = random(&cx.shape(), 5);
        let ty = tape.constant(y.clone()).conv_transpose2d(tape.constant(w.clone()), None, 2, 0);
        assert_eq!(ty.shape(), vec![1, 3, 8, 8]);
        let lhs: f64 = (&*cx.value() * &y).sum();
        let rhs: f64 = (&*ty.value() * &x).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn spatial_gradients() {
        let x = random(&[2, 3, 6, 6], 7);
        let w = random(&[4, 3, 3, 3], 8);
        let b = random(&[4], 9);
        check_unary(&x, |v| {
            let t = v.tape();
            v.conv2d(t.constant(w.clone()), Some(t.constant(b.clone())), 2, 1)
        }, 1e-6);
        check_unary(&w, |v| v.tape().constant(x.clone()).conv2d(v, None, 1, 1), 1e-6);
        check_unary(&b, |v| {
            let t = v.tape();
            t.constant(x.clone()).conv2d(t.constant(w.clone()), Some(v), 1, 0)
        }, 1e-6);

        let tw = random(&[3, 2, 3, 3], 10);
        check_unary(&x, |v| v.conv_transpose2d(v.tape().constant(tw.clone()), None, 1, 1), 1e-6);
        check_unary(&tw, |v| v.tape().constant(x.clone()).conv_transpose2d(v, None, 2, 0), 1e-6);

        let dw = random(&[3, 1, 3, 3], 11);
        check_unary(&x, |v| v.depthwise_conv2d(v.tape().constant(dw.clone()), None, 1), 1e-6);
        check_unary(&dw, |v| v.tape().constant(x.clone()).depthwise_conv2d(v, None, 1), 1e-6);

        check_unary(&x, |v| v.max_pool2d(3, 2, 1), 1e-6);
        check_unary(&x, |v| v.upsample_bilinear(12, 12), 1e-6);
        check_unary(&x, |v| v.upsample_bilinear(24, 24), 1e-6);
    }

    #[test]
    fn bilinear_preserves_constants_and_matches_known_values() {
        let tape = Tape::<f64>::new();
        let c = tape.constant(ArrayD::from_elem(ndarray::IxDyn(&[1, 1, 2, 2]), 3.5));
        assert!(c.upsample_bilinear(8, 8).value().iter().all(|&v| (v - 3.5).abs() < 1e-12));
        // 1-D ramp [0, 1] upsampled 2x with half-pixel centres: 0, .25, .75, 1
        let ramp = tape.constant(super::super::from_vec(&[1, 1, 1, 2], vec![0.0, 1.0]));
        let up = ramp.upsample_bilinear(1, 4).value();
        let got: Vec<f64> = up.iter().copied().collect();
        assert_eq!(got, vec![0.0, 0.25, 0.75, 1.0]);
    }
}
