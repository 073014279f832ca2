//! Hierarchical attention segmenter.
//!
//! Four encoder stages with overlapping patch embeddings (strides 4, 2, 2, 2),
//! each running attention blocks whose keys and values are spatially reduced.
//! The decoder has two layers: a per-stage linear projection to the decoder
//! width (followed by bilinear resize to 1/4 resolution) and a fusion layer
//! over the concatenated projections. A 1x1 classifier produces the class
//! map at 1/4 resolution, which is resized bilinearly by 4x to the input size.

use super::{scaled, Trace};
use crate::nn::{BatchNorm2d, Conv2d, DepthwiseConv2d, Init, LayerNorm, Linear, Session};
use crate::tensor::{Real, Var};

const HIDDEN: [usize; 4] = [32, 64, 160, 256];
const HEADS: [usize; 4] = [1, 2, 5, 8];
const DEPTHS: [usize; 4] = [2, 2, 2, 2];
const REDUCTION: [usize; 4] = [8, 4, 2, 1];
const MLP_RATIO: usize = 4;
const DECODER_DIM: usize = 256;

/// `[B, C, H, W] -> [B, H*W, C]`
fn to_tokens<'t, F: Real>(x: Var<'t, F>) -> Var<'t, F> {
    let s = x.shape();
    x.reshape(&[s[0], s[1], s[2] * s[3]]).permute(&[0, 2, 1])
}

/// `[B, H*W, C] -> [B, C, H, W]`
fn to_map<'t, F: Real>(x: Var<'t, F>, h: usize, w: usize) -> Var<'t, F> {
    let s = x.shape();
    x.permute(&[0, 2, 1]).reshape(&[s[0], s[2], h, w])
}

#[derive(Debug, Clone)]
struct Attention {
    heads: usize,
    dim: usize,
    query: Linear,
    key: Linear,
    value: Linear,
    proj: Linear,
    reduce: Option<(Conv2d, LayerNorm)>,
}

impl Attention {
    fn new<F: Real>(init: &mut Init<'_, F>, name: &str, dim: usize, heads: usize, reduction: usize) -> Self {
        let reduce = (reduction > 1).then(|| {
            (
                Conv2d::new(init, &format!("{name}.sr"), dim, dim, reduction, reduction, 0, true),
                LayerNorm::new(init, &format!("{name}.sr_norm"), dim),
            )
        });
        Self {
            heads,
            dim,
            query: Linear::new(init, &format!("{name}.query"), dim, dim),
            key: Linear::new(init, &format!("{name}.key"), dim, dim),
            value: Linear::new(init, &format!("{name}.value"), dim, dim),
            proj: Linear::new(init, &format!("{name}.proj"), dim, dim),
            reduce,
        }
    }

    /// `[B, N, C] -> [B*heads, N, C/heads]`
    fn split<'t, F: Real>(&self, x: Var<'t, F>) -> Var<'t, F> {
        let s = x.shape();
        let d = self.dim / self.heads;
        x.reshape(&[s[0], s[1], self.heads, d])
            .permute(&[0, 2, 1, 3])
            .reshape(&[s[0] * self.heads, s[1], d])
    }

    fn forward<'t, F: Real>(&self, cx: &Session<'t, '_, F>, x: Var<'t, F>, h: usize, w: usize) -> Var<'t, F> {
        let s = x.shape();
        let (batch, n) = (s[0], s[1]);
        let q = self.split(self.query.forward(cx, x));
        let kv_in = match &self.reduce {
            Some((conv, norm)) => norm.forward(cx, to_tokens(conv.forward(cx, to_map(x, h, w)))),
            None => x,
        };
        let k = self.split(self.key.forward(cx, kv_in));
        let v = self.split(self.value.forward(cx, kv_in));
        let d = self.dim / self.heads;
        let scores = q
            .bmm(k.permute(&[0, 2, 1]))
            .scale(F::of(1.0 / (d as f64).sqrt()))
            .softmax_last();
        let out = scores
            .bmm(v)
            .reshape(&[batch, self.heads, n, d])
            .permute(&[0, 2, 1, 3])
            .reshape(&[batch, n, self.dim]);
        self.proj.forward(cx, out)
    }
}

#[derive(Debug, Clone)]
struct MixFfn {
    expand: Linear,
    local: DepthwiseConv2d,
    contract: Linear,
}

impl MixFfn {
    fn new<F: Real>(init: &mut Init<'_, F>, name: &str, dim: usize) -> Self {
        let hidden = dim * MLP_RATIO;
        Self {
            expand: Linear::new(init, &format!("{name}.fc1"), dim, hidden),
            local: DepthwiseConv2d::new(init, &format!("{name}.dwconv"), hidden, 3),
            contract: Linear::new(init, &format!("{name}.fc2"), hidden, dim),
        }
    }

    fn forward<'t, F: Real>(&self, cx: &Session<'t, '_, F>, x: Var<'t, F>, h: usize, w: usize) -> Var<'t, F> {
        let y = self.expand.forward(cx, x);
        let y = to_tokens(self.local.forward(cx, to_map(y, h, w))).gelu();
        self.contract.forward(cx, y)
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    ffn: MixFfn,
}

impl Block {
    fn forward<'t, F: Real>(&self, cx: &Session<'t, '_, F>, x: Var<'t, F>, h: usize, w: usize) -> Var<'t, F> {
        let x = x.add(self.attn.forward(cx, self.norm1.forward(cx, x), h, w));
        x.add(self.ffn.forward(cx, self.norm2.forward(cx, x), h, w))
    }
}

#[derive(Debug, Clone)]
struct Stage {
    embed: Conv2d,
    embed_norm: LayerNorm,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct TransformerSeg {
    stages: Vec<Stage>,
    /// Decoder layer 1: per-stage projection to the decoder width.
    project: Vec<Linear>,
    /// Decoder layer 2: fusion of the concatenated projections.
    fuse: Conv2d,
    fuse_bn: BatchNorm2d,
    classifier: Conv2d,
    decoder_dim: usize,
}

impl TransformerSeg {
    pub fn new<F: Real>(init: &mut Init<'_, F>, num_classes: usize, width: f64) -> Self {
        let dims: Vec<usize> = HIDDEN
            .iter()
            .zip(HEADS)
            .map(|(&c, heads)| scaled(c, width).div_ceil(heads) * heads)
            .collect();
        let decoder_dim = ((DECODER_DIM as f64 * width).round() as usize).max(1);
        let mut stages = Vec::new();
        let mut cin = 3;
        for i in 0..4 {
            let (k, stride) = if i == 0 { (7, 4) } else { (3, 2) };
            let name = format!("encoder.stage{}", i + 1);
            let embed = Conv2d::new(init, &format!("{name}.patch_embed"), cin, dims[i], k, stride, k / 2, true);
            let embed_norm = LayerNorm::new(init, &format!("{name}.patch_norm"), dims[i]);
            let blocks = (0..DEPTHS[i])
                .map(|b| {
                    let bn = format!("{name}.block{b}");
                    Block {
                        norm1: LayerNorm::new(init, &format!("{bn}.norm1"), dims[i]),
                        attn: Attention::new(init, &format!("{bn}.attn"), dims[i], HEADS[i], REDUCTION[i]),
                        norm2: LayerNorm::new(init, &format!("{bn}.norm2"), dims[i]),
                        ffn: MixFfn::new(init, &format!("{bn}.ffn"), dims[i]),
                    }
                })
                .collect();
            let norm = LayerNorm::new(init, &format!("{name}.norm"), dims[i]);
            stages.push(Stage { embed, embed_norm, blocks, norm });
            cin = dims[i];
        }
        let project = dims
            .iter()
            .enumerate()
            .map(|(i, &c)| Linear::new(init, &format!("decoder.proj{}", i + 1), c, decoder_dim))
            .collect();
        Self {
            stages,
            project,
            fuse: Conv2d::new(init, "decoder.fuse", 4 * decoder_dim, decoder_dim, 1, 1, 0, false),
            fuse_bn: BatchNorm2d::new(init, "decoder.fuse_bn", decoder_dim),
            classifier: Conv2d::new(init, "head.classifier", decoder_dim, num_classes, 1, 1, 0, true),
            decoder_dim,
        }
    }

    pub fn decoder_dim(&self) -> usize {
        self.decoder_dim
    }

    pub fn forward<'t, F: Real>(&self, cx: &Session<'t, '_, F>, x: Var<'t, F>, trace: &mut Trace) -> Var<'t, F> {
        let input = x.shape();
        let mut y = x;
        // Normalized stage outputs as tokens, with their spatial size.
        let mut features = Vec::with_capacity(4);
        for stage in &self.stages {
            let emb = stage.embed.forward(cx, y);
            let s = emb.shape();
            let (h, w) = (s[2], s[3]);
            let mut t = stage.embed_norm.forward(cx, to_tokens(emb));
            for block in &stage.blocks {
                t = block.forward(cx, t, h, w);
            }
            let t = stage.norm.forward(cx, t);
            y = to_map(t, h, w);
            trace.stages.push(y.shape());
            features.push((t, h, w));
        }
        let (qh, qw) = (features[0].1, features[0].2);
        let projected: Vec<Var<'t, F>> = features
            .iter()
            .zip(&self.project)
            .rev()
            .map(|(&(tokens, h, w), proj)| {
                let m = to_map(proj.forward(cx, tokens), h, w);
                if (h, w) == (qh, qw) {
                    m
                } else {
                    m.upsample_bilinear(qh, qw)
                }
            })
            .collect();
        let fused = self
            .fuse_bn
            .forward(cx, self.fuse.forward(cx, Var::concat(&projected, 1)))
            .relu();
        let head = self.classifier.forward(cx, fused);
        trace.head = Some(head.shape());
        head.upsample_bilinear(input[2], input[3])
    }
}

#[cfg(test)]
mod tests {
    use crate::models::{build_model, Arch, ModelParams};
    use crate::nn::Session;
    use crate::tensor::Tape;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn head_is_quarter_resolution() {
        let m: ModelParams<f32> = build_model(Arch::TransformerSeg, 3, 0.25, 0).unwrap();
        let tape = Tape::new();
        let cx = Session::new(&tape, &m.params, false, false);
        let x = tape.constant(ArrayD::zeros(IxDyn(&[2, 64, 64, 3])));
        let (logits, trace) = m.forward(&cx, x).unwrap();
        assert_eq!(trace.head, Some(vec![2, 3, 16, 16]));
        let spatial: Vec<_> = trace.stages.iter().map(|s| (s[2], s[3])).collect();
        assert_eq!(spatial, vec![(16, 16), (8, 8), (4, 4), (2, 2)]);
        assert_eq!(logits.shape(), vec![2, 64, 64, 3]);
    }
}
