//! Full network assembly: encoder, boundary guidance, per-level aggregation,
//! the cross-level decoder chain and four supervised side outputs.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{check_input_size, Backbone, BackboneSpec, FeaturePyramid, LEVELS};
use crate::bgm::Bgm;
use crate::cfpm::{Cfpm, ConcatMerge, PropagatedFeature};
use crate::data::read_rgb;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mfam::{AggregatedFeature, Mfam, PlainReduce};
use crate::nn::{Conv2d, ParamKind, ParamStore};
use crate::tensor::{resize_bilinear, Tensor};

/// Number of supervised decoder outputs.
pub const SIDES: usize = 4;

/// Component switches for the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub use_mfam: bool,
    pub use_fusion: bool,
    pub use_propagation: bool,
    pub use_bgm: bool,
}

/// Named ablation configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    A3,
    B1,
    C1,
    C2,
    E,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::A3, Variant::B1, Variant::C1, Variant::C2, Variant::E];

    pub fn config(self) -> AblationConfig {
        let (use_mfam, use_fusion, use_propagation, use_bgm) = match self {
            Variant::A3 => (false, false, false, false),
            Variant::B1 => (true, false, false, false),
            Variant::C1 => (true, true, false, false),
            Variant::C2 => (true, true, true, false),
            Variant::E => (true, true, true, true),
        };
        AblationConfig {
            use_mfam,
            use_fusion,
            use_propagation,
            use_bgm,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config("variants", format!("unknown variant `{s}` (expected one of A3, B1, C1, C2, E)")))
    }
}

impl AblationConfig {
    pub fn full() -> Self {
        Variant::E.config()
    }

    pub fn validate(&self) -> Result<()> {
        if self.use_propagation && !self.use_fusion {
            return Err(Error::config("model.ablation.use_propagation", "propagation requires use_fusion"));
        }
        Ok(())
    }
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self::full()
    }
}

fn default_decoder_channels() -> usize {
    32
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneSpec,
    /// Reduced channel width `C_l` shared by the whole decoder.
    #[serde(default = "default_decoder_channels")]
    pub decoder_channels: usize,
    /// Batch norm before the ReLUs inside MFAM.
    #[serde(default = "default_true")]
    pub mfam_norm: bool,
    #[serde(default)]
    pub ablation: AblationConfig,
}

impl ModelConfig {
    /// Surrogate backbone with `C_l = 32`.
    pub fn desk() -> Self {
        ModelConfig {
            backbone: BackboneSpec::tiny_surrogate(),
            decoder_channels: 32,
            mfam_norm: true,
            ablation: AblationConfig::full(),
        }
    }

    /// Res2Net-50-shaped backbone with `C_l = 64`.
    pub fn paper() -> Self {
        ModelConfig {
            backbone: BackboneSpec::res2net50_shaped(),
            decoder_channels: 64,
            mfam_norm: true,
            ablation: AblationConfig::full(),
        }
    }

    pub fn with_ablation(mut self, ablation: AblationConfig) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.ablation.validate()?;
        if self.decoder_channels == 0 {
            return Err(Error::config("model.decoder_channels", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Reducer {
    Mfam(Mfam),
    Plain(PlainReduce),
}

impl Reducer {
    fn forward(&self, g: &mut Graph<'_>, f: Var) -> Result<AggregatedFeature> {
        match self {
            Reducer::Mfam(m) => m.forward(g, f),
            Reducer::Plain(p) => p.forward(g, f),
        }
    }
}

/// How a decoder stage combines its inputs.
#[derive(Clone, Debug)]
enum Stage {
    /// Fusion of `agg[m+1], agg[m]` and, below the top, gated propagation.
    Cfpm(Cfpm),
    /// Fusion of `agg[m+1], agg[m]` merged with the previous stage by concatenation.
    FuseThenMerge(Cfpm, ConcatMerge),
    /// Previous stage (or `agg[5]` at the top) concatenated with `agg[m]`.
    Merge(ConcatMerge),
}

/// Graph handles of one forward pass. Side index 0 is `S_1`, the finest stage.
#[derive(Clone, Debug)]
pub struct NetworkOutput {
    pub pyramid: FeaturePyramid,
    pub aggregated: Vec<AggregatedFeature>,
    pub stages: Vec<PropagatedFeature>,
    pub logits: [Var; SIDES],
    pub maps: [Var; SIDES],
    pub boundary: Option<Var>,
    pub gates: Vec<Var>,
}

/// Materialized side outputs, all at input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct SideOutputs {
    pub maps: Vec<Tensor>,
    pub logits: Vec<Tensor>,
    pub boundary: Option<Tensor>,
}

impl SideOutputs {
    pub fn from_graph(g: &Graph<'_>, out: &NetworkOutput) -> Self {
        SideOutputs {
            maps: out.maps.iter().map(|&v| g.value(v).clone()).collect(),
            logits: out.logits.iter().map(|&v| g.value(v).clone()).collect(),
            boundary: out.boundary.map(|v| g.value(v).clone()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FapNet {
    config: ModelConfig,
    pub backbone: Backbone,
    pub bgm: Option<Bgm>,
    reducers: Vec<Reducer>,
    /// Decoder stages for levels 4, 3, 2, 1.
    stages: Vec<Stage>,
    /// Per-stage 3×3 convs applied to the resized guidance feature.
    pub guidance: Vec<Conv2d>,
    /// Side heads for levels 1..4.
    pub heads: Vec<Conv2d>,
}

impl FapNet {
    pub fn new(store: &mut ParamStore, config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let cl = config.decoder_channels;
        let ab = config.ablation;
        let backbone = Backbone::new(store, "backbone", &config.backbone, rng)?;
        let ch = config.backbone.channels.clone();
        let bgm = ab.use_bgm.then(|| Bgm::new(store, "bgm", ch[0], ch[1], cl, rng));
        let reducers = (0..LEVELS)
            .map(|i| {
                let level = i + 1;
                if ab.use_mfam {
                    Reducer::Mfam(Mfam::new(store, &format!("mfam{level}"), level, ch[i], cl, config.mfam_norm, rng))
                } else {
                    Reducer::Plain(PlainReduce::new(store, &format!("reduce{level}"), level, ch[i], cl, rng))
                }
            })
            .collect();
        let stages = (1..=SIDES)
            .rev()
            .map(|level| {
                let name = format!("cfpm{level}");
                let top = level == SIDES;
                match (ab.use_fusion, ab.use_propagation) {
                    (true, true) if !top => Stage::Cfpm(Cfpm::gated(store, &name, cl, rng)),
                    (true, _) if top => Stage::Cfpm(Cfpm::top(store, &name, cl, rng)),
                    (true, _) => {
                        let cfpm = Cfpm::top(store, &name, cl, rng);
                        Stage::FuseThenMerge(cfpm, ConcatMerge::new(store, &format!("merge{level}"), cl, rng))
                    }
                    (false, _) => Stage::Merge(ConcatMerge::new(store, &format!("merge{level}"), cl, rng)),
                }
            })
            .collect();
        let guidance = if ab.use_bgm {
            (1..=SIDES)
                .map(|level| Conv2d::new(store, &format!("guide{level}"), cl, cl, 3, 1, true, rng))
                .collect()
        } else {
            Vec::new()
        };
        let heads = (1..=SIDES)
            .map(|level| Conv2d::new(store, &format!("head{level}"), cl, 1, 3, 1, true, rng))
            .collect();
        Ok(FapNet {
            config: config.clone(),
            backbone,
            bgm,
            reducers,
            stages,
            guidance,
            heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mfam(&self, level: usize) -> Option<&Mfam> {
        match self.reducers.get(level.checked_sub(1)?)? {
            Reducer::Mfam(m) => Some(m),
            Reducer::Plain(_) => None,
        }
    }

    /// The fusion/propagation block of decoder stage `level` (1..=4), if any.
    pub fn cfpm(&self, level: usize) -> Option<&Cfpm> {
        let idx = SIDES.checked_sub(level)?;
        match self.stages.get(idx)? {
            Stage::Cfpm(c) | Stage::FuseThenMerge(c, _) => Some(c),
            Stage::Merge(_) => None,
        }
    }

    /// `image` is `[N, 3, H, W]` in `[0, 1]` with `H, W` multiples of 32.
    pub fn forward(&self, g: &mut Graph<'_>, image: Var) -> Result<NetworkOutput> {
        let (_, _, h, w) = g.value(image).dims4();
        check_input_size(h, w)?;
        let pyramid = self.backbone.forward(g, image)?;
        let f = pyramid.levels;
        let bundle = match &self.bgm {
            Some(b) => Some(b.forward(g, f[0], f[1], (h, w))?),
            None => None,
        };
        let agg = self
            .reducers
            .iter()
            .zip(f)
            .map(|(r, x)| r.forward(g, x))
            .collect::<Result<Vec<_>>>()?;

        let mut stages_out = Vec::with_capacity(SIDES);
        let mut gates = Vec::new();
        let mut prev: Option<PropagatedFeature> = None;
        for (stage, level) in self.stages.iter().zip((1..=SIDES).rev()) {
            let (hi, lo) = (agg[level], agg[level - 1]);
            let value = match (stage, prev) {
                (Stage::Cfpm(c), None) => c.forward_top(g, hi, lo)?.value,
                (Stage::Cfpm(c), Some(p)) => {
                    let fused = c.fuse.forward(g, hi, lo)?;
                    let prop = c.propagate.as_ref().expect("gated stage below the top");
                    let t = prop.forward(g, fused, p, level)?;
                    gates.push(t.gates);
                    t.output.value
                }
                (Stage::FuseThenMerge(c, m), prev) => {
                    let fused = c.fuse.forward(g, hi, lo)?;
                    match prev {
                        Some(p) => m.forward(g, p.value, fused)?,
                        None => fused,
                    }
                }
                (Stage::Merge(m), prev) => {
                    let coarse = prev.map_or(hi.value, |p| p.value);
                    m.forward(g, coarse, lo.value)?
                }
            };
            let value = match &bundle {
                Some(b) => {
                    let (_, _, sh, sw) = g.value(value).dims4();
                    let r = g.resize(b.guidance, sh, sw);
                    let e = self.guidance[level - 1].forward(g, r);
                    g.add(value, e)
                }
                None => value,
            };
            let feature = PropagatedFeature { value, level };
            stages_out.push(feature);
            prev = Some(feature);
        }
        stages_out.reverse();

        let mut logits = Vec::with_capacity(SIDES);
        let mut maps = Vec::with_capacity(SIDES);
        for (stage, head) in stages_out.iter().zip(&self.heads) {
            let l = head.forward(g, stage.value);
            let l = g.resize(l, h, w);
            maps.push(g.sigmoid(l));
            logits.push(l);
        }
        Ok(NetworkOutput {
            pyramid,
            aggregated: agg,
            stages: stages_out,
            logits: logits.try_into().expect("four sides"),
            maps: maps.try_into().expect("four sides"),
            boundary: bundle.map(|b| b.boundary),
            gates,
        })
    }
}

/// A network together with the parameters it reads.
#[derive(Clone, Debug)]
pub struct Model {
    pub net: FapNet,
    pub store: ParamStore,
}

/// Saliency map at original resolution and its optional binarization.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub map: Tensor,
    pub mask: Option<Tensor>,
}

impl Model {
    /// Fresh weights drawn from a ChaCha8 stream seeded with `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = FapNet::new(&mut store, config, &mut rng)?;
        if let Some(path) = &config.backbone.pretrained {
            let fp = net.backbone.load_pretrained(&mut store, path)?;
            log::info!("loaded pretrained backbone {} ({fp})", path.display());
        }
        Ok(Model { net, store })
    }

    pub fn config(&self) -> &ModelConfig {
        self.net.config()
    }

    pub fn num_parameters(&self) -> usize {
        self.store
            .ids()
            .filter(|&id| self.store.kind(id) == ParamKind::Trainable)
            .map(|id| self.store.get(id).len())
            .sum()
    }

    /// Evaluation-mode forward pass.
    pub fn forward(&self, image: &Tensor) -> Result<SideOutputs> {
        let mut g = Graph::new(&self.store, false);
        let x = g.input(image.clone());
        let out = self.net.forward(&mut g, x)?;
        Ok(SideOutputs::from_graph(&g, &out))
    }

    /// Runs `image` (`[1, 3, H, W]`, any size) at `input_size`² and rescales
    /// `S_1` back to `H`×`W`.
    pub fn predict(&self, image: &Tensor, input_size: usize, threshold: Option<f64>) -> Result<Prediction> {
        let (n, c, h, w) = image.dims4();
        if n != 1 || c != 3 {
            return Err(Error::contract(format!("predict expects one RGB image, got {:?}", image.shape())));
        }
        let x = resize_bilinear(image, input_size, input_size);
        let out = self.forward(&x)?;
        let map = resize_bilinear(&out.maps[0], h, w).reshape(&[1, h, w])?;
        let mask = threshold.map(|t| map.map(|v| if v >= t { 1.0 } else { 0.0 }));
        Ok(Prediction { map, mask })
    }

    pub fn predict_path(&self, path: &Path, input_size: usize, threshold: Option<f64>) -> Result<Prediction> {
        self.predict(&read_rgb(path)?, input_size, threshold)
    }
}
