//! UNet with a ResNet-18 encoder.
//!
//! Encoder: 7x7/2 stem, 3x3/2 max pool, then four stages of two basic residual
//! blocks at 1/4, 1/8, 1/16 and 1/32 resolution. Each decoder level doubles the
//! resolution bilinearly, concatenates the matching encoder stage and refines
//! with a transposed convolution. Two stride-2 transposed convolutions take the
//! 1/4-resolution decoder output back to full size.

use super::{scaled, Trace};
use crate::nn::{BatchNorm2d, Conv2d, ConvTranspose2d, Init, Session};
use crate::tensor::{Real, Var};

const STAGE_CHANNELS: [usize; 4] = [64, 128, 256, 512];
const BLOCKS_PER_STAGE: usize = 2;

#[derive(Debug, Clone)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new<F: Real>(
        init: &mut Init<'_, F>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Self {
            conv: Conv2d::new(init, &format!("{name}.conv"), cin, cout, k, stride, pad, false),
            bn: BatchNorm2d::new(init, &format!("{name}.bn"), cout),
        }
    }

    fn forward<'t, F: Real>(&self, cx: &Session<'t, '_, F>, x: Var<'t, F>) -> Var<'t, F> {
        self.bn.forward(cx, self.conv.forward(cx, x))
    }
}

#[derive(Debug, Clone)]
struct BasicBlock {
    first: ConvBn,
    second: ConvBn,
    shortcut: Option<ConvBn>,
}

impl BasicBlock {
    fn new<F: Real>(init: &mut Init<'_, F>, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let shortcut = (stride != 1 || cin != cout)
            .then(|| ConvBn::new(init, &format!("{name}.down"), cin, cout, 1, stride, 0));
        Self {
            first: ConvBn::new(init, &format!("{name}.a"), cin, cout, 3, stride, 1),
            second: ConvBn::new(init, &format!("{name}.b"), cout, cout, 3, 1, 1),
            shortcut,
        }
    }

    fn forward<'t, F: Real>(&self, cx: &Session<'t, '_, F>, x: Var<'t, F>) -> Var<'t, F> {
        let y = self.first.forward(cx, x).relu();
        let y = self.second.forward(cx, y);
        let skip = match &self.shortcut {
            Some(s) => s.forward(cx, x),
            None => x,
        };
        y.add(skip).relu()
    }
}

#[derive(Debug, Clone)]
struct UpBlock {
    refine: ConvTranspose2d,
    bn: BatchNorm2d,
}

impl UpBlock {
    /// `stride` 1 refines after a bilinear doubling; `stride` 2 learns the doubling.
    fn new<F: Real>(init: &mut Init<'_, F>, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let (k, pad) = if stride == 1 { (3, 1) } else { (2, 0) };
        Self {
            refine: ConvTranspose2d::new(init, &format!("{name}.tconv"), cin, cout, k, stride, pad, false),
            bn: BatchNorm2d::new(init, &format!("{name}.bn"), cout),
        }
    }

    fn forward<'t, F: Real>(&self, cx: &Session<'t, '_, F>, x: Var<'t, F>) -> Var<'t, F> {
        self.bn.forward(cx, self.refine.forward(cx, x)).relu()
    }
}

#[derive(Debug, Clone)]
pub struct UnetRes {
    stem: ConvBn,
    stages: Vec<Vec<BasicBlock>>,
    /// Deep-to-shallow: merges stage 3, 2, 1 skips.
    decoder: Vec<UpBlock>,
    to_half: UpBlock,
    to_full: UpBlock,
    smooth: ConvBn,
    classifier: Conv2d,
}

impl UnetRes {
    pub fn new<F: Real>(init: &mut Init<'_, F>, num_classes: usize, width: f64) -> Self {
        let ch: Vec<usize> = STAGE_CHANNELS.iter().map(|&c| scaled(c, width)).collect();
        let stem = ConvBn::new(init, "encoder.stem", 3, ch[0], 7, 2, 3);
        let mut stages = Vec::new();
        let mut cin = ch[0];
        for (s, &cout) in ch.iter().enumerate() {
            let blocks = (0..BLOCKS_PER_STAGE)
                .map(|b| {
                    let stride = if s > 0 && b == 0 { 2 } else { 1 };
                    let block = BasicBlock::new(init, &format!("encoder.layer{}.{b}", s + 1), cin, cout, stride);
                    cin = cout;
                    block
                })
                .collect();
            stages.push(blocks);
        }
        let decoder = (0..3)
            .map(|i| {
                let level = 2 - i;
                let deep = if i == 0 { ch[3] } else { ch[level + 1] };
                UpBlock::new(init, &format!("decoder.level{}", level + 1), deep + ch[level], ch[level], 1)
            })
            .collect();
        let half = (ch[0] / 2).max(4);
        Self {
            stem,
            stages,
            decoder,
            to_half: UpBlock::new(init, "decoder.to_half", ch[0], half, 2),
            to_full: UpBlock::new(init, "decoder.to_full", half, half, 2),
            smooth: ConvBn::new(init, "decoder.smooth", half, half, 3, 1, 1),
            classifier: Conv2d::new(init, "head.classifier", half, num_classes, 1, 1, 0, true),
        }
    }

    pub fn forward<'t, F: Real>(&self, cx: &Session<'t, '_, F>, x: Var<'t, F>, trace: &mut Trace) -> Var<'t, F> {
        let mut y = self.stem.forward(cx, x).relu().max_pool2d(3, 2, 1);
        let mut features = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                y = block.forward(cx, y);
            }
            trace.stages.push(y.shape());
            features.push(y);
        }
        let mut d = features[3];
        for (up, skip) in self.decoder.iter().zip(features[..3].iter().rev()) {
            let s = skip.shape();
            let upsampled = d.upsample_bilinear(s[2], s[3]);
            d = up.forward(cx, crate::tensor::Var::concat(&[upsampled, *skip], 1));
        }
        let d = self.to_full.forward(cx, self.to_half.forward(cx, d));
        let d = self.smooth.forward(cx, d).relu();
        self.classifier.forward(cx, d)
    }
}
