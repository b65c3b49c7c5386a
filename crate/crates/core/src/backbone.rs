//! Five-level encoder pyramid.
//!
//! Level 1 sits at stride 4, level 2 shares its resolution, and levels 3–5
//! halve it in turn, so a 352×352 input yields 88, 88, 44, 22 and 11.
//! Two variants honour that contract: a Res2Net-50-shaped encoder
//! (64/256/512/1024/2048 channels) for paper-scale runs and a small
//! fixed-seed surrogate for desk-scale work.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{fingerprint, Archive};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::ConvGeom;
use crate::nn::{ConvBlock, ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const LEVELS: usize = 5;
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

pub const SURROGATE_CHANNELS: [usize; LEVELS] = [16, 32, 64, 128, 256];
pub const RES2NET50_CHANNELS: [usize; LEVELS] = [64, 256, 512, 1024, 2048];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneVariant {
    #[serde(rename = "res2net50-shaped")]
    Res2Net50Shaped,
    #[serde(rename = "tiny-surrogate")]
    TinySurrogate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub variant: BackboneVariant,
    pub channels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained: Option<PathBuf>,
}

impl BackboneSpec {
    pub fn tiny_surrogate() -> Self {
        BackboneSpec {
            variant: BackboneVariant::TinySurrogate,
            channels: SURROGATE_CHANNELS.to_vec(),
            pretrained: None,
        }
    }

    pub fn res2net50_shaped() -> Self {
        BackboneSpec {
            variant: BackboneVariant::Res2Net50Shaped,
            channels: RES2NET50_CHANNELS.to_vec(),
            pretrained: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != LEVELS || self.channels.contains(&0) {
            return Err(Error::config(
                "model.backbone.channels",
                format!("need {LEVELS} positive channel counts, got {:?}", self.channels),
            ));
        }
        if self.channels.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::config("model.backbone.channels", "channel counts must be non-decreasing"));
        }
        if self.variant == BackboneVariant::Res2Net50Shaped && self.channels != RES2NET50_CHANNELS {
            return Err(Error::config(
                "model.backbone.channels",
                format!("res2net50-shaped produces {RES2NET50_CHANNELS:?}"),
            ));
        }
        Ok(())
    }
}

/// Spatial size of every level for an `h`×`w` input.
pub fn level_sizes(h: usize, w: usize) -> [(usize, usize); LEVELS] {
    let mut out = [(0, 0); LEVELS];
    for (i, o) in out.iter_mut().enumerate() {
        let stride = if i == 0 { 4 } else { 1 << (i + 1) };
        *o = (h / stride, w / stride);
    }
    out
}

pub fn check_input_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::contract(format!("input size {h}x{w} must be a positive multiple of 32")));
    }
    Ok(())
}

/// The five encoder maps of one forward pass.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: [Var; LEVELS],
    pub input_size: (usize, usize),
}

#[derive(Clone, Debug)]
struct Bottle2neck {
    reduce: ConvBlock,
    splits: Vec<ConvBlock>,
    expand: ConvBlock,
    width: usize,
    stride: usize,
    first: bool,
    downsample: Option<ConvBlock>,
}

impl Bottle2neck {
    const SCALE: usize = 4;
    const BASE_WIDTH: usize = 26;

    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inplanes: usize,
        planes: usize,
        stride: usize,
        first: bool,
        rng: &mut R,
    ) -> Self {
        let width = planes * Self::BASE_WIDTH / 64;
        let reduce = ConvBlock::new(store, &format!("{name}.conv1"), inplanes, width * Self::SCALE, 1, 1, true, true, rng);
        let splits = (0..Self::SCALE - 1)
            .map(|i| ConvBlock::new(store, &format!("{name}.convs.{i}"), width, width, 3, stride, true, true, rng))
            .collect();
        let expand = ConvBlock::new(store, &format!("{name}.conv3"), width * Self::SCALE, planes * 4, 1, 1, true, false, rng);
        let downsample = (stride != 1 || inplanes != planes * 4)
            .then(|| ConvBlock::new(store, &format!("{name}.downsample"), inplanes, planes * 4, 1, 1, true, false, rng));
        Bottle2neck {
            reduce,
            splits,
            expand,
            width,
            stride,
            first,
            downsample,
        }
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let out = self.reduce.forward(g, x);
        let mut pieces = Vec::with_capacity(Self::SCALE);
        let mut carry: Option<Var> = None;
        for (i, conv) in self.splits.iter().enumerate() {
            let part = g.narrow(out, i * self.width, self.width);
            let input = match carry {
                Some(prev) if !self.first => g.add(prev, part),
                _ => part,
            };
            let y = conv.forward(g, input);
            pieces.push(y);
            carry = Some(y);
        }
        let last = g.narrow(out, (Self::SCALE - 1) * self.width, self.width);
        pieces.push(if self.first {
            g.avg_pool(last, ConvGeom { kernel: 3, stride: self.stride, pad: 1 })
        } else {
            last
        });
        let cat = g.concat(&pieces);
        let y = self.expand.forward(g, cat);
        let residual = match &self.downsample {
            Some(ds) => {
                let pooled = if self.stride > 1 {
                    g.avg_pool(x, ConvGeom { kernel: self.stride, stride: self.stride, pad: 0 })
                } else {
                    x
                };
                ds.forward(g, pooled)
            }
            None => x,
        };
        let sum = g.add(y, residual);
        g.relu(sum)
    }
}

#[derive(Clone, Debug)]
enum Encoder {
    Surrogate { stages: Vec<Vec<ConvBlock>> },
    Res2Net { stem: Vec<ConvBlock>, layers: Vec<Vec<Bottle2neck>> },
}

#[derive(Clone, Debug)]
pub struct Backbone {
    spec: BackboneSpec,
    encoder: Encoder,
    prefix: String,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, spec: &BackboneSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let ch = &spec.channels;
        let encoder = match spec.variant {
            BackboneVariant::TinySurrogate => {
                let block = |store: &mut ParamStore, rng: &mut R, name: String, cin, cout, stride| {
                    let b = ConvBlock::new(store, &name, cin, cout, 3, stride, false, true, rng);
                    he_init(store, &b, rng);
                    b
                };
                let mut stages = vec![vec![
                    block(store, rng, format!("{prefix}.stage0.0"), 3, ch[0], 2),
                    block(store, rng, format!("{prefix}.stage0.1"), ch[0], ch[0], 2),
                ]];
                for i in 1..LEVELS {
                    let stride = if i == 1 { 1 } else { 2 };
                    stages.push(vec![block(store, rng, format!("{prefix}.stage{i}.0"), ch[i - 1], ch[i], stride)]);
                }
                Encoder::Surrogate { stages }
            }
            BackboneVariant::Res2Net50Shaped => {
                let stem = vec![
                    ConvBlock::new(store, &format!("{prefix}.stem.0"), 3, 32, 3, 2, true, true, rng),
                    ConvBlock::new(store, &format!("{prefix}.stem.1"), 32, 32, 3, 1, true, true, rng),
                    ConvBlock::new(store, &format!("{prefix}.stem.2"), 32, 64, 3, 1, true, true, rng),
                ];
                let mut layers = Vec::new();
                let mut inplanes = 64;
                for (li, (&blocks, &planes)) in [3usize, 4, 6, 3].iter().zip(&[64usize, 128, 256, 512]).enumerate() {
                    let stride = if li == 0 { 1 } else { 2 };
                    let mut layer = Vec::new();
                    for b in 0..blocks {
                        let name = format!("{prefix}.layer{}.{b}", li + 1);
                        let s = if b == 0 { stride } else { 1 };
                        layer.push(Bottle2neck::new(store, &name, inplanes, planes, s, b == 0, rng));
                        inplanes = planes * 4;
                    }
                    layers.push(layer);
                }
                Encoder::Res2Net { stem, layers }
            }
        };
        Ok(Backbone {
            spec: spec.clone(),
            encoder,
            prefix: prefix.to_string(),
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn channels(&self) -> &[usize] {
        &self.spec.channels
    }

    /// `image` is `[N, 3, H, W]` in `[0, 1]`; ImageNet normalization happens here.
    pub fn forward(&self, g: &mut Graph<'_>, image: Var) -> Result<FeaturePyramid> {
        let (_, c, h, w) = g.value(image).dims4();
        if c != 3 {
            return Err(Error::contract(format!("backbone expects 3 input channels, got {c}")));
        }
        check_input_size(h, w)?;
        let scale: Vec<f64> = IMAGENET_STD.iter().map(|s| 1.0 / s).collect();
        let shift: Vec<f64> = IMAGENET_MEAN.iter().zip(IMAGENET_STD).map(|(m, s)| -m / s).collect();
        let mut x = g.channel_affine(image, &scale, &shift);
        let mut levels = Vec::with_capacity(LEVELS);
        match &self.encoder {
            Encoder::Surrogate { stages } => {
                for stage in stages {
                    for b in stage {
                        x = b.forward(g, x);
                    }
                    levels.push(x);
                }
            }
            Encoder::Res2Net { stem, layers } => {
                for b in stem {
                    x = b.forward(g, x);
                }
                x = g.max_pool(x, ConvGeom { kernel: 3, stride: 2, pad: 1 });
                levels.push(x);
                for layer in layers {
                    for b in layer {
                        x = b.forward(g, x);
                    }
                    levels.push(x);
                }
            }
        }
        Ok(FeaturePyramid {
            levels: levels.try_into().expect("five levels"),
            input_size: (h, w),
        })
    }

    /// Loads backbone weights from an archive whose names match this
    /// backbone's parameter names (with or without the `<prefix>.` part).
    /// Returns the hex fingerprint of the loaded tensors.
    pub fn load_pretrained(&self, store: &mut ParamStore, path: &Path) -> Result<String> {
        let archive = Archive::load(path)?;
        let prefix = format!("{}.", self.prefix);
        let ids: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with(&prefix)).collect();
        let mut loaded = Vec::with_capacity(ids.len());
        for id in ids {
            let full = store.name(id).to_string();
            let short = &full[prefix.len()..];
            let t = archive
                .tensors
                .get(&full)
                .or_else(|| archive.tensors.get(short))
                .ok_or_else(|| Error::MissingParameter(full.clone()))?;
            if t.shape() != store.get(id).shape() {
                return Err(Error::ShapeMismatch {
                    name: full,
                    expected: store.get(id).shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            loaded.push((id, t.clone()));
        }
        for (id, t) in loaded {
            store.set(id, t)?;
        }
        let fp = fingerprint(
            store
                .ids()
                .filter(|&id| store.name(id).starts_with(&prefix))
                .map(|id| (store.name(id), store.get(id))),
        );
        log::info!("loaded pretrained backbone from {} fingerprint={fp}", path.display());
        Ok(fp)
    }
}

/// He-uniform weights for ReLU stacks without normalization.
fn he_init<R: Rng + ?Sized>(store: &mut ParamStore, b: &ConvBlock, rng: &mut R) {
    let shape = store.get(b.conv.weight).shape().to_vec();
    let fan_in: usize = shape[1..].iter().product();
    let bound = (6.0 / fan_in as f64).sqrt();
    let w = Tensor::uniform(&shape, -bound, bound, rng);
    store.set(b.conv.weight, w).expect("same shape");
    if let Some(bias) = b.conv.bias {
        let n = store.get(bias).len();
        store.set(bias, Tensor::zeros(&[n])).expect("same shape");
    }
    debug_assert_eq!(store.kind(b.conv.weight), ParamKind::Trainable);
}
