use ndarray::ArrayD;

use super::{Init, Session};
use crate::tensor::{Real, Var};

/// Default weight range `1/sqrt(fan_in)`, as in common deep learning libraries.
fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

fn join(prefix: &str, leaf: &str) -> String {
    format!("{prefix}.{leaf}")
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: String,
    bias: Option<String>,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real>(
        init: &mut Init<'_, F>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let weight = join(name, "weight");
        init.uniform(&weight, &[cout, cin, kernel, kernel], fan_in_bound(cin * kernel * kernel));
        let bias = bias.then(|| {
            let b = join(name, "bias");
            init.constant(&b, &[cout], 0.0);
            b
        });
        Self { weight, bias, stride, pad }
    }

    pub fn forward<'t, F: Real>(&self, cx: &Session<'t, '_, F>, x: Var<'t, F>) -> Var<'t, F> {
        let bias = self.bias.as_deref().map(|b| cx.param(b));
        x.conv2d(cx.param(&self.weight), bias, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: String,
    bias: Option<String>,
    stride: usize,
    pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real>(
        init: &mut Init<'_, F>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let weight = join(name, "weight");
        // Each output pixel sees about cin * (k / stride)^2 inputs.
        init.uniform(&weight, &[cin, cout, kernel, kernel], fan_in_bound(cout * kernel * kernel));
        let bias = bias.then(|| {
            let b = join(name, "bias");
            init.constant(&b, &[cout], 0.0);
            b
        });
        Self { weight, bias, stride, pad }
    }

    pub fn forward<'t, F: Real>(&self, cx: &Session<'t, '_, F>, x: Var<'t, F>) -> Var<'t, F> {
        let bias = self.bias.as_deref().map(|b| cx.param(b));
        x.conv_transpose2d(cx.param(&self.weight), bias, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct DepthwiseConv2d {
    weight: String,
    bias: String,
    pad: usize,
}

impl DepthwiseConv2d {
    pub fn new<F: Real>(init: &mut Init<'_, F>, name: &str, channels: usize, kernel: usize) -> Self {
        let weight = join(name, "weight");
        init.uniform(&weight, &[channels, 1, kernel, kernel], fan_in_bound(kernel * kernel));
        let bias = join(name, "bias");
        init.constant(&bias, &[channels], 0.0);
        Self { weight, bias, pad: kernel / 2 }
    }

    pub fn forward<'t, F: Real>(&self, cx: &Session<'t, '_, F>, x: Var<'t, F>) -> Var<'t, F> {
        x.depthwise_conv2d(cx.param(&self.weight), Some(cx.param(&self.bias)), self.pad)
    }
}

/// Batch normalization with running statistics (momentum 0.1).
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    gamma: String,
    beta: String,
    mean: String,
    var: String,
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm2d {
    pub fn new<F: Real>(init: &mut Init<'_, F>, name: &str, channels: usize) -> Self {
        let s = Self {
            gamma: join(name, "gamma"),
            beta: join(name, "beta"),
            mean: join(name, "running_mean"),
            var: join(name, "running_var"),
        };
        init.constant(&s.gamma, &[channels], 1.0);
        init.constant(&s.beta, &[channels], 0.0);
        init.buffer(&s.mean, &[channels], 0.0);
        init.buffer(&s.var, &[channels], 1.0);
        s
    }

    pub fn forward<'t, F: Real>(&self, cx: &Session<'t, '_, F>, x: Var<'t, F>) -> Var<'t, F> {
        let (gamma, beta) = (cx.param(&self.gamma), cx.param(&self.beta));
        if cx.training() {
            let (y, mean, var) = x.batch_norm_train(gamma, beta, BN_EPS);
            let m = F::of(BN_MOMENTUM);
            let blend = |old: &ArrayD<F>, new: Vec<F>| {
                let mut out = old.clone();
                out.iter_mut()
                    .zip(new)
                    .for_each(|(o, n)| *o = (F::one() - m) * *o + m * n);
                out
            };
            cx.record_update(&self.mean, blend(cx.buffer(&self.mean), mean));
            cx.record_update(&self.var, blend(cx.buffer(&self.var), var));
            y
        } else {
            let mean = cx.buffer(&self.mean).as_slice().unwrap();
            let var = cx.buffer(&self.var).as_slice().unwrap();
            x.batch_norm_eval(gamma, beta, mean, var, BN_EPS)
        }
    }
}

/// Dense layer over the last axis; weight is `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: String,
    bias: String,
}

impl Linear {
    pub fn new<F: Real>(init: &mut Init<'_, F>, name: &str, input: usize, output: usize) -> Self {
        let weight = join(name, "weight");
        init.uniform(&weight, &[input, output], fan_in_bound(input));
        let bias = join(name, "bias");
        init.constant(&bias, &[output], 0.0);
        Self { weight, bias }
    }

    pub fn forward<'t, F: Real>(&self, cx: &Session<'t, '_, F>, x: Var<'t, F>) -> Var<'t, F> {
        x.linear(cx.param(&self.weight), Some(cx.param(&self.bias)))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: String,
    beta: String,
}

impl LayerNorm {
    pub fn new<F: Real>(init: &mut Init<'_, F>, name: &str, dim: usize) -> Self {
        let s = Self {
            gamma: join(name, "gamma"),
            beta: join(name, "beta"),
        };
        init.constant(&s.gamma, &[dim], 1.0);
        init.constant(&s.beta, &[dim], 0.0);
        s
    }

    pub fn forward<'t, F: Real>(&self, cx: &Session<'t, '_, F>, x: Var<'t, F>) -> Var<'t, F> {
        x.layer_norm(cx.param(&self.gamma), cx.param(&self.beta), 1e-6)
    }
}
