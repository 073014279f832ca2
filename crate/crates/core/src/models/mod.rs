//! Segmentation networks with a shared forward interface.
//!
//! Both architectures take `B x H x W x 3` image tensors and return
//! `B x H x W x num_classes` logits. Internally they work in NCHW.

mod transformer;
mod unet;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::nn::{load_params, save_params, CheckpointError, Init, ParamStore, Session};
use crate::raster::{Mask, RgbImage};
use crate::tensor::{Real, Tape, Var};

pub use transformer::TransformerSeg;
pub use unet::UnetRes;

/// Spatial dimensions must be a multiple of the deepest stride.
pub const INPUT_MULTIPLE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Arch {
    UnetRes,
    TransformerSeg,
}

impl Arch {
    pub fn as_str(self) -> &'static str {
        match self {
            Arch::UnetRes => "UNET_RES",
            Arch::TransformerSeg => "TRANSFORMER_SEG",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "UNET_RES" | "UNET" => Ok(Arch::UnetRes),
            "TRANSFORMER_SEG" | "TRANSFORMER" | "SEGFORMER" => Ok(Arch::TransformerSeg),
            _ => Err(ModelError::UnsupportedArch(s.to_string())),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("unsupported architecture {0:?}")]
    UnsupportedArch(String),
    #[error("input {height}x{width} is not divisible by {INPUT_MULTIPLE}")]
    BadShape { height: usize, width: usize },
    #[error("expected a B x H x W x 3 batch, got {0:?}")]
    BadLayout(Vec<usize>),
    #[error("num_classes must be at least 2, got {0}")]
    TooFewClasses(usize),
    #[error("width multiplier must be positive, got {0}")]
    BadWidth(f64),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint metadata: {0}")]
    Meta(String),
    #[error("checkpoint does not match architecture: {0}")]
    Mismatch(String),
}

/// Identifies a model configuration; stored as the checkpoint JSON sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub arch: Arch,
    pub num_classes: usize,
    pub width_multiplier: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
}

#[derive(Debug, Clone)]
enum Network {
    Unet(UnetRes),
    Transformer(TransformerSeg),
}

/// Shapes observed during a forward pass, NCHW.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    /// Encoder stage outputs, shallowest first.
    pub stages: Vec<Vec<usize>>,
    /// Class map before the final resize, when the architecture has one.
    pub head: Option<Vec<usize>>,
}

/// Trainable parameters together with the architecture that interprets them.
#[derive(Debug, Clone)]
pub struct ModelParams<F: Real> {
    pub meta: ModelMeta,
    pub params: ParamStore<F>,
    net: Network,
}

pub(crate) fn scaled(base: usize, width: f64) -> usize {
    ((base as f64 * width).round() as usize).max(4)
}

pub fn build_model<F: Real>(
    arch: Arch,
    num_classes: usize,
    width_multiplier: f64,
    seed: u64,
) -> Result<ModelParams<F>, ModelError> {
    if num_classes < 2 {
        return Err(ModelError::TooFewClasses(num_classes));
    }
    if !(width_multiplier > 0.0 && width_multiplier.is_finite()) {
        return Err(ModelError::BadWidth(width_multiplier));
    }
    let mut params = ParamStore::new();
    let mut init = Init::new(&mut params, seed);
    let net = match arch {
        Arch::UnetRes => Network::Unet(UnetRes::new(&mut init, num_classes, width_multiplier)),
        Arch::TransformerSeg => {
            Network::Transformer(TransformerSeg::new(&mut init, num_classes, width_multiplier))
        }
    };
    Ok(ModelParams {
        meta: ModelMeta {
            arch,
            num_classes,
            width_multiplier,
            seed,
            epoch: None,
        },
        params,
        net,
    })
}

/// Converts 8-bit images to a normalized `B x H x W x 3` tensor.
pub fn images_to_tensor<F: Real>(images: &[&RgbImage]) -> ArrayD<F> {
    let (w, h) = images.first().map(|i| i.dims()).unwrap_or((0, 0));
    let mut data = Vec::with_capacity(images.len() * w * h * 3);
    for img in images {
        assert_eq!(img.dims(), (w, h), "batch images must share dimensions");
        data.extend(img.data.iter().map(|&v| F::of((v as f64 / 255.0 - 0.5) / 0.25)));
    }
    ArrayD::from_shape_vec(IxDyn(&[images.len(), h, w, 3]), data).unwrap()
}

/// Decodes `B x H x W x C` logits to class masks; ties go to the lowest class.
pub fn argmax_masks<F: Real>(logits: &ArrayD<F>) -> Vec<Mask> {
    let s = logits.shape();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let flat = logits.as_standard_layout();
    let data = flat.as_slice().expect("standard layout");
    data.chunks_exact(h * w * c)
        .take(b)
        .map(|img| {
            let classes = img
                .chunks_exact(c)
                .map(|px| {
                    let mut best = 0;
                    for k in 1..c {
                        if px[k] > px[best] {
                            best = k;
                        }
                    }
                    best as u8
                })
                .collect();
            Mask::from_vec(w, h, classes)
        })
        .collect()
}

impl<F: Real> ModelParams<F> {
    pub fn arch(&self) -> Arch {
        self.meta.arch
    }

    pub fn num_classes(&self) -> usize {
        self.meta.num_classes
    }

    /// Channel width of the transformer decoder, if this is one.
    pub fn decoder_dim(&self) -> Option<usize> {
        match &self.net {
            Network::Transformer(t) => Some(t.decoder_dim()),
            Network::Unet(_) => None,
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_trainable()
    }

    fn check_input(shape: &[usize]) -> Result<(), ModelError> {
        if shape.len() != 4 || shape[3] != 3 {
            return Err(ModelError::BadLayout(shape.to_vec()));
        }
        let (h, w) = (shape[1], shape[2]);
        if h == 0 || w == 0 || h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
            return Err(ModelError::BadShape { height: h, width: w });
        }
        Ok(())
    }

    /// Records the forward pass on the session's tape.
    pub fn forward<'t>(
        &self,
        cx: &Session<'t, '_, F>,
        images: Var<'t, F>,
    ) -> Result<(Var<'t, F>, Trace), ModelError> {
        Self::check_input(&images.shape())?;
        let x = images.permute(&[0, 3, 1, 2]);
        let mut trace = Trace::default();
        let logits = match &self.net {
            Network::Unet(n) => n.forward(cx, x, &mut trace),
            Network::Transformer(n) => n.forward(cx, x, &mut trace),
        };
        Ok((logits.permute(&[0, 2, 3, 1]), trace))
    }

    /// Inference-mode logits for a `B x H x W x 3` batch.
    pub fn predict(&self, images: &ArrayD<F>) -> Result<ArrayD<F>, ModelError> {
        let tape = Tape::new();
        let cx = Session::new(&tape, &self.params, false, false);
        let (logits, _) = self.forward(&cx, tape.constant(images.clone()))?;
        let out = (*logits.value()).clone();
        Ok(out)
    }

    /// Per-pixel argmax class maps for a batch of images.
    pub fn segment(&self, images: &[&RgbImage]) -> Result<Vec<Mask>, ModelError> {
        Ok(argmax_masks(&self.predict(&images_to_tensor(images))?))
    }

    /// Writes `<stem>.params` and `<stem>.json`.
    pub fn save(&self, stem: &Path, epoch: Option<usize>) -> Result<(), ModelError> {
        save_params(&stem.with_extension("params"), &self.params)?;
        let meta = ModelMeta { epoch, ..self.meta.clone() };
        let json = serde_json::to_string_pretty(&meta).map_err(|e| ModelError::Meta(e.to_string()))?;
        std::fs::write(stem.with_extension("json"), json)
            .map_err(|e| ModelError::Checkpoint(CheckpointError::Io(e)))?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self, ModelError> {
        let json = std::fs::read_to_string(stem.with_extension("json"))
            .map_err(|e| ModelError::Checkpoint(CheckpointError::Io(e)))?;
        let meta: ModelMeta = serde_json::from_str(&json).map_err(|e| ModelError::Meta(e.to_string()))?;
        let params = load_params(&stem.with_extension("params"))?;
        Self::from_params(meta, params)
    }

    /// Pairs loaded parameters with a freshly built network of the same shape.
    pub fn from_params(meta: ModelMeta, params: ParamStore<F>) -> Result<Self, ModelError> {
        let mut fresh: ModelParams<F> =
            build_model(meta.arch, meta.num_classes, meta.width_multiplier, meta.seed)?;
        for (name, p) in fresh.params.iter() {
            let loaded = params
                .get(name)
                .ok_or_else(|| ModelError::Mismatch(format!("missing {name}")))?;
            if loaded.value.shape() != p.value.shape() {
                return Err(ModelError::Mismatch(format!("shape of {name}")));
            }
        }
        if params.len() != fresh.params.len() {
            return Err(ModelError::Mismatch("unexpected extra tensors".into()));
        }
        fresh.params = params;
        fresh.meta = meta;
        Ok(fresh)
    }

    /// Same network in another precision.
    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        ModelParams {
            meta: self.meta.clone(),
            params: self.params.cast(),
            net: self.net.clone(),
        }
    }
}
