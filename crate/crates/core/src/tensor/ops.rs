use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, ArrayD, ArrayView2, ArrayViewMut2, Axis, IxDyn, Slice};

use super::{from_vec, Real, Var};

pub(crate) fn view2<F: Real>(data: &[F], rows: usize, cols: usize) -> ArrayView2<'_, F> {
    ArrayView2::from_shape((rows, cols), data).expect("matrix view")
}

pub(crate) fn view2_mut<F: Real>(data: &mut [F], rows: usize, cols: usize) -> ArrayViewMut2<'_, F> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("matrix view")
}

/// `c = alpha * a * b + beta * c`
pub(crate) fn gemm<F: Real>(
    alpha: F,
    a: &ArrayView2<'_, F>,
    b: &ArrayView2<'_, F>,
    beta: F,
    c: &mut ArrayViewMut2<'_, F>,
) {
    general_mat_mul(alpha, a, b, beta, c);
}

fn slice<F: Real>(a: &ArrayD<F>) -> &[F] {
    a.as_slice().expect("standard layout")
}

fn standard<F: Real>(a: ArrayD<F>) -> ArrayD<F> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

impl<'t, F: Real> Var<'t, F> {
    pub fn add(self, other: Var<'t, F>) -> Var<'t, F> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
        let v = &*a + &*b;
        self.tape.push(
            v,
            vec![self.id, other.id],
            Box::new(|g| vec![g.clone(), g.clone()]),
        )
    }

    pub fn mul(self, other: Var<'t, F>) -> Var<'t, F> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
        let v = &*a * &*b;
        self.tape.push(
            v,
            vec![self.id, other.id],
            Box::new(move |g| vec![g * &*b, g * &*a]),
        )
    }

    pub fn scale(self, s: F) -> Var<'t, F> {
        let v = &*self.value() * s;
        self.unary(v, Box::new(move |g| vec![g * s]))
    }

    /// Sum of all elements as a 0-d value.
    pub fn sum(self) -> Var<'t, F> {
        let a = self.value();
        let total: F = a.iter().copied().sum();
        let dim = a.raw_dim();
        self.unary(
            ArrayD::from_elem(IxDyn(&[]), total),
            Box::new(move |g| vec![ArrayD::from_elem(dim.clone(), g.iter().copied().sum())]),
        )
    }

    pub fn mean(self) -> Var<'t, F> {
        let n = self.value().len();
        self.sum().scale(F::one() / F::of(n as f64))
    }

    pub fn relu(self) -> Var<'t, F> {
        let a = self.value();
        let v = a.mapv(|x| if x > F::zero() { x } else { F::zero() });
        self.unary(
            v,
            Box::new(move |g| {
                let mut d = g.clone();
                d.zip_mut_with(&*a, |d, &x| {
                    if x <= F::zero() {
                        *d = F::zero()
                    }
                });
                vec![d]
            }),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t, F> {
        let a = self.value();
        let (k, c, half) = (F::of(GELU_K), F::of(GELU_C), F::of(0.5));
        let v = a.mapv(|x| half * x * (F::one() + (k * (x + c * x * x * x)).tanh()));
        self.unary(
            v,
            Box::new(move |g| {
                let mut d = g.clone();
                d.zip_mut_with(&*a, |d, &x| {
                    let t = (k * (x + c * x * x * x)).tanh();
                    let dt = (F::one() - t * t) * k * (F::one() + F::of(3.0) * c * x * x);
                    *d *= half * (F::one() + t) + half * x * dt;
                });
                vec![d]
            }),
        )
    }

    /// Adds a per-channel bias along axis 1.
    pub fn add_channel_bias(self, bias: Var<'t, F>) -> Var<'t, F> {
        let a = self.value();
        let b = bias.value();
        let shape = a.shape().to_vec();
        let channels = shape[1];
        assert_eq!(b.len(), channels, "channel bias length");
        let inner: usize = shape[2..].iter().product();
        let mut v = (*a).clone();
        let bs = slice(&b).to_vec();
        for (i, chunk) in v.as_slice_mut().unwrap().chunks_mut(inner).enumerate() {
            let bias = bs[i % channels];
            chunk.iter_mut().for_each(|x| *x += bias);
        }
        self.tape.push(
            v,
            vec![self.id, bias.id],
            Box::new(move |g| {
                let mut db = vec![F::zero(); channels];
                for (i, chunk) in slice(g).chunks(inner).enumerate() {
                    db[i % channels] += chunk.iter().copied().sum();
                }
                vec![g.clone(), from_vec(&[channels], db)]
            }),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t, F> {
        let a = self.value();
        let old = a.shape().to_vec();
        let v = from_vec(shape, slice(&a).to_vec());
        self.unary(
            v,
            Box::new(move |g| vec![from_vec(&old, slice(g).to_vec())]),
        )
    }

    pub fn permute(self, axes: &[usize]) -> Var<'t, F> {
        let a = self.value();
        let v = standard(a.view().permuted_axes(IxDyn(axes)).to_owned());
        let mut inverse = vec![0; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        self.unary(
            v,
            Box::new(move |g| {
                vec![standard(
                    g.view().permuted_axes(IxDyn(&inverse)).to_owned(),
                )]
            }),
        )
    }

    /// Concatenates `parts` along `axis`.
    pub fn concat(parts: &[Var<'t, F>], axis: usize) -> Var<'t, F> {
        assert!(!parts.is_empty(), "concat of nothing");
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let v = standard(concatenate(Axis(axis), &views).expect("concat shapes"));
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        parts[0].tape.push(
            v,
            parts.iter().map(|p| p.id).collect(),
            Box::new(move |g| {
                let mut start = 0;
                sizes
                    .iter()
                    .map(|&len| {
                        let part = g
                            .slice_axis(Axis(axis), Slice::from(start..start + len))
                            .to_owned();
                        start += len;
                        standard(part)
                    })
                    .collect()
            }),
        )
    }

    /// `x[..., K] * W[K, N] (+ b[N])`.
    pub fn linear(self, weight: Var<'t, F>, bias: Option<Var<'t, F>>) -> Var<'t, F> {
        let x = self.value();
        let w = weight.value();
        let (k, n) = (w.shape()[0], w.shape()[1]);
        let xs = x.shape().to_vec();
        assert_eq!(*xs.last().unwrap(), k, "linear: inner dimension");
        let m = x.len() / k;
        let mut out = vec![F::zero(); m * n];
        {
            let mut c = view2_mut(&mut out, m, n);
            gemm(F::one(), &view2(slice(&x), m, k), &view2(slice(&w), k, n), F::zero(), &mut c);
        }
        let b = bias.map(|b| b.value());
        if let Some(b) = &b {
            let bs = slice(b);
            for row in out.chunks_mut(n) {
                row.iter_mut().zip(bs).for_each(|(o, &b)| *o += b);
            }
        }
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = n;
        let mut parents = vec![self.id, weight.id];
        parents.extend(bias.map(|b| b.id));
        let has_bias = bias.is_some();
        self.tape.push(
            from_vec(&out_shape, out),
            parents,
            Box::new(move |g| {
                let gs = view2(slice(g), m, n);
                let mut dx = vec![F::zero(); m * k];
                gemm(F::one(), &gs, &view2(slice(&w), k, n).t(), F::zero(), &mut view2_mut(&mut dx, m, k));
                let mut dw = vec![F::zero(); k * n];
                gemm(F::one(), &view2(slice(&x), m, k).t(), &gs, F::zero(), &mut view2_mut(&mut dw, k, n));
                let mut grads = vec![from_vec(&xs, dx), from_vec(&[k, n], dw)];
                if has_bias {
                    let mut db = vec![F::zero(); n];
                    for row in slice(g).chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                    grads.push(from_vec(&[n], db));
                }
                grads
            }),
        )
    }

    /// Batched matrix product `[B, M, K] x [B, K, N] -> [B, M, N]`.
    pub fn bmm(self, other: Var<'t, F>) -> Var<'t, F> {
        let a = self.value();
        let b = other.value();
        let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let n = b.shape()[2];
        assert_eq!(b.shape(), &[bs, k, n], "bmm: shape mismatch");
        let mut out = vec![F::zero(); bs * m * n];
        for i in 0..bs {
            gemm(
                F::one(),
                &view2(&slice(&a)[i * m * k..(i + 1) * m * k], m, k),
                &view2(&slice(&b)[i * k * n..(i + 1) * k * n], k, n),
                F::zero(),
                &mut view2_mut(&mut out[i * m * n..(i + 1) * m * n], m, n),
            );
        }
        self.tape.push(
            from_vec(&[bs, m, n], out),
            vec![self.id, other.id],
            Box::new(move |g| {
                let mut da = vec![F::zero(); bs * m * k];
                let mut db = vec![F::zero(); bs * k * n];
                for i in 0..bs {
                    let gi = view2(&slice(g)[i * m * n..(i + 1) * m * n], m, n);
                    let ai = view2(&slice(&a)[i * m * k..(i + 1) * m * k], m, k);
                    let bi = view2(&slice(&b)[i * k * n..(i + 1) * k * n], k, n);
                    gemm(F::one(), &gi, &bi.t(), F::zero(), &mut view2_mut(&mut da[i * m * k..(i + 1) * m * k], m, k));
                    gemm(F::one(), &ai.t(), &gi, F::zero(), &mut view2_mut(&mut db[i * k * n..(i + 1) * k * n], k, n));
                }
                vec![from_vec(&[bs, m, k], da), from_vec(&[bs, k, n], db)]
            }),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_last(self) -> Var<'t, F> {
        let a = self.value();
        let len = *a.shape().last().unwrap();
        let mut y = slice(&a).to_vec();
        for row in y.chunks_mut(len) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut total = F::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v = *v / total);
        }
        let shape = a.shape().to_vec();
        let y = from_vec(&shape, y);
        let saved = y.clone();
        self.unary(
            y,
            Box::new(move |g| {
                let mut d = slice(g).to_vec();
                for (drow, yrow) in d.chunks_mut(len).zip(slice(&saved).chunks(len)) {
                    let dot: F = drow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
                    drow.iter_mut().zip(yrow).for_each(|(d, &y)| *d = y * (*d - dot));
                }
                vec![from_vec(&shape, d)]
            }),
        )
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'t, F>, beta: Var<'t, F>, eps: f64) -> Var<'t, F> {
        let a = self.value();
        let len = *a.shape().last().unwrap();
        let shape = a.shape().to_vec();
        let (gv, bv) = (gamma.value(), beta.value());
        let (gs, bs) = (slice(&gv).to_vec(), slice(&bv).to_vec());
        let rows = a.len() / len;
        let mut xhat = vec![F::zero(); a.len()];
        let mut inv = vec![F::zero(); rows];
        let mut out = vec![F::zero(); a.len()];
        let n = F::of(len as f64);
        for r in 0..rows {
            let x = &slice(&a)[r * len..(r + 1) * len];
            let mean = x.iter().copied().sum::<F>() / n;
            let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let istd = F::one() / (var + F::of(eps)).sqrt();
            inv[r] = istd;
            for j in 0..len {
                let h = (x[j] - mean) * istd;
                xhat[r * len + j] = h;
                out[r * len + j] = h * gs[j] + bs[j];
            }
        }
        self.tape.push(
            from_vec(&shape, out),
            vec![self.id, gamma.id, beta.id],
            Box::new(move |g| {
                let gsl = slice(g);
                let mut dx = vec![F::zero(); gsl.len()];
                let mut dgamma = vec![F::zero(); len];
                let mut dbeta = vec![F::zero(); len];
                for r in 0..rows {
                    let grow = &gsl[r * len..(r + 1) * len];
                    let hrow = &xhat[r * len..(r + 1) * len];
                    let mut sum_d = F::zero();
                    let mut sum_dh = F::zero();
                    for j in 0..len {
                        let d = grow[j] * gs[j];
                        sum_d += d;
                        sum_dh += d * hrow[j];
                        dgamma[j] += grow[j] * hrow[j];
                        dbeta[j] += grow[j];
                    }
                    for j in 0..len {
                        let d = grow[j] * gs[j];
                        dx[r * len + j] = inv[r] / n * (n * d - sum_d - hrow[j] * sum_dh);
                    }
                }
                vec![from_vec(&shape, dx), from_vec(&[len], dgamma), from_vec(&[len], dbeta)]
            }),
        )
    }

    /// Batch normalization of an NCHW tensor using batch statistics.
    ///
    /// Returns the output together with the per-channel batch mean and the
    /// unbiased batch variance for updating running estimates.
    pub fn batch_norm_train(
        self,
        gamma: Var<'t, F>,
        beta: Var<'t, F>,
        eps: f64,
    ) -> (Var<'t, F>, Vec<F>, Vec<F>) {
        let a = self.value();
        let shape = a.shape().to_vec();
        let (batch, channels) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let count = batch * inner;
        let n = F::of(count as f64);
        let (gv, bv) = (gamma.value(), beta.value());
        let (gs, bs) = (slice(&gv).to_vec(), slice(&bv).to_vec());
        let x = slice(&a);
        let block = move |b: usize, c: usize| (b * channels + c) * inner;

        let mut mean = vec![F::zero(); channels];
        let mut var = vec![F::zero(); channels];
        for c in 0..channels {
            let mut s = F::zero();
            for b in 0..batch {
                s += x[block(b, c)..block(b, c) + inner].iter().copied().sum::<F>();
            }
            mean[c] = s / n;
            let mut v = F::zero();
            for b in 0..batch {
                v += x[block(b, c)..block(b, c) + inner]
                    .iter()
                    .map(|&t| (t - mean[c]) * (t - mean[c]))
                    .sum::<F>();
            }
            var[c] = v / n;
        }
        let inv: Vec<F> = var.iter().map(|&v| F::one() / (v + F::of(eps)).sqrt()).collect();
        let mut xhat = vec![F::zero(); x.len()];
        let mut out = vec![F::zero(); x.len()];
        for b in 0..batch {
            for c in 0..channels {
                let o = block(b, c);
                for i in o..o + inner {
                    let h = (x[i] - mean[c]) * inv[c];
                    xhat[i] = h;
                    out[i] = h * gs[c] + bs[c];
                }
            }
        }
        let unbiased: Vec<F> = if count > 1 {
            var.iter().map(|&v| v * n / F::of((count - 1) as f64)).collect()
        } else {
            var.clone()
        };
        let out_var = self.tape.push(
            from_vec(&shape, out),
            vec![self.id, gamma.id, beta.id],
            Box::new(move |g| {
                let gsl = slice(g);
                let mut dx = vec![F::zero(); gsl.len()];
                let mut dgamma = vec![F::zero(); channels];
                let mut dbeta = vec![F::zero(); channels];
                for c in 0..channels {
                    let mut sum_g = F::zero();
                    let mut sum_gh = F::zero();
                    for b in 0..batch {
                        let o = block(b, c);
                        for i in o..o + inner {
                            sum_g += gsl[i];
                            sum_gh += gsl[i] * xhat[i];
                        }
                    }
                    dgamma[c] = sum_gh;
                    dbeta[c] = sum_g;
                    let k = gs[c] * inv[c] / n;
                    for b in 0..batch {
                        let o = block(b, c);
                        for i in o..o + inner {
                            dx[i] = k * (n * gsl[i] - sum_g - xhat[i] * sum_gh);
                        }
                    }
                }
                vec![
                    from_vec(&shape, dx),
                    from_vec(&[channels], dgamma),
                    from_vec(&[channels], dbeta),
                ]
            }),
        );
        (out_var, mean, unbiased)
    }

    /// Batch normalization of an NCHW tensor with fixed statistics.
    pub fn batch_norm_eval(
        self,
        gamma: Var<'t, F>,
        beta: Var<'t, F>,
        mean: &[F],
        var: &[F],
        eps: f64,
    ) -> Var<'t, F> {
        let a = self.value();
        let shape = a.shape().to_vec();
        let channels = shape[1];
        let inner: usize = shape[2..].iter().product();
        let (gv, bv) = (gamma.value(), beta.value());
        let (gs, bs) = (slice(&gv).to_vec(), slice(&bv).to_vec());
        let inv: Vec<F> = var.iter().map(|&v| F::one() / (v + F::of(eps)).sqrt()).collect();
        let mean = mean.to_vec();
        let mut out = slice(&a).to_vec();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let c = i % channels;
            chunk
                .iter_mut()
                .for_each(|x| *x = (*x - mean[c]) * inv[c] * gs[c] + bs[c]);
        }
        self.tape.push(
            from_vec(&shape, out),
            vec![self.id, gamma.id, beta.id],
            Box::new(move |g| {
                let mut dx = slice(g).to_vec();
                let mut dgamma = vec![F::zero(); channels];
                let mut dbeta = vec![F::zero(); channels];
                for (i, (chunk, xs)) in dx
                    .chunks_mut(inner)
                    .zip(slice(&a).chunks(inner))
                    .enumerate()
                {
                    let c = i % channels;
                    for (d, &x) in chunk.iter_mut().zip(xs) {
                        dgamma[c] += *d * (x - mean[c]) * inv[c];
                        dbeta[c] += *d;
                        *d *= gs[c] * inv[c];
                    }
                }
                vec![
                    from_vec(&shape, dx),
                    from_vec(&[channels], dgamma),
                    from_vec(&[channels], dbeta),
                ]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::{assert_close, check_unary, numeric_grad, random};
    use super::super::Tape;
    use super::*;

    #[test]
    fn elementwise_gradients() {
        let x = random(&[2, 3, 4], 1);
        check_unary(&x, |v| v.relu(), 1e-6);
        check_unary(&x, |v| v.gelu(), 1e-6);
        check_unary(&x, |v| v.scale(3.0), 1e-6);
        check_unary(&x, |v| v.mul(v), 1e-6);
        check_unary(&x, |v| v.softmax_last(), 1e-6);
        check_unary(&x, |v| v.permute(&[2, 0, 1]), 1e-6);
        check_unary(&x, |v| v.reshape(&[6, 4]), 1e-6);
        check_unary(&x, |v| Var::concat(&[v, v.scale(2.0)], 1), 1e-6);
    }

    #[test]
    fn linear_and_bmm_gradients() {
        let x = random(&[2, 3, 4], 2);
        let w = random(&[4, 5], 3);
        let b = random(&[5], 4);
        check_unary(&x, |v| {
            let t = v.tape();
            v.linear(t.constant(w.clone()), Some(t.constant(b.clone())))
        }, 1e-6);
        check_unary(&w, |v| {
            let t = v.tape();
            t.constant(x.clone()).linear(v, None)
        }, 1e-6);
        let y = random(&[2, 4, 3], 5);
        check_unary(&x, |v| v.bmm(v.tape().constant(y.clone())), 1e-6);
        check_unary(&y, |v| v.tape().constant(x.clone()).bmm(v), 1e-6);
    }

    #[test]
    fn normalization_gradients() {
        let x = random(&[2, 3, 2, 2], 6);
        let g = random(&[3], 7);
        let b = random(&[3], 8);
        check_unary(&x, |v| {
            let t = v.tape();
            v.batch_norm_train(t.constant(g.clone()), t.constant(b.clone()), 1e-5).0
        }, 1e-5);
        check_unary(&g, |v| {
            let t = v.tape();
            t.constant(x.clone()).batch_norm_train(v, t.constant(b.clone()), 1e-5).0
        }, 1e-5);
        check_unary(&x, |v| {
            let t = v.tape();
            v.batch_norm_eval(t.constant(g.clone()), t.constant(b.clone()), &[0.1, 0.2, -0.3], &[1.0, 0.5, 2.0], 1e-5)
        }, 1e-6);
        check_unary(&x, |v| v.add_channel_bias(v.tape().constant(b.clone())), 1e-6);
        let tokens = random(&[2, 5, 3], 9);
        check_unary(&tokens, |v| {
            let t = v.tape();
            v.layer_norm(t.constant(g.clone()), t.constant(b.clone()), 1e-6)
        }, 1e-5);
    }

    #[test]
    fn shared_input_accumulates() {
        let x = random(&[3], 10);
        let tape = Tape::new();
        let v = tape.leaf(x.clone(), true);
        let loss = v.add(v).mul(v).sum();
        let grads = tape.backward(loss);
        let numeric = numeric_grad(&x, |p| p.iter().map(|t| 2.0 * t * t).sum());
        assert_close(grads.get(v).unwrap(), &numeric, 1e-6);
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::<f64>::new();
        let c = tape.constant(random(&[2], 1));
        let v = tape.leaf(random(&[2], 2), true);
        let grads = tape.backward(c.mul(v).sum());
        assert!(grads.get(c).is_none());
        assert!(grads.get(v).is_some());
    }
}
