//! Multi-scale feature aggregation.
//!
//! Three 1×1 projections reduce a backbone level to `C_l` channels. Two of
//! them feed interacting 3×3 / 5×5 streams whose products and sums form the
//! fused feature; the third is added back as a residual:
//!
//! ```text
//! a      = relu(conv3(p1)),  b = relu(conv5(p2))
//! t3     = relu(conv3(a + b)),  t5 = relu(conv5(a + b))
//! fused  = t3 * t5 + a + b
//! output = relu(conv3(fused)) + p3
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, ConvBlock, ParamStore};

/// A level-tagged `[N, C_l, H_m, W_m]` feature.
#[derive(Clone, Copy, Debug)]
pub struct AggregatedFeature {
    pub value: Var,
    pub level: usize,
}

#[derive(Clone, Debug)]
pub struct Mfam {
    pub proj: [Conv2d; 3],
    pub stream3: ConvBlock,
    pub stream5: ConvBlock,
    pub mix3: ConvBlock,
    pub mix5: ConvBlock,
    pub out: ConvBlock,
    level: usize,
}

impl Mfam {
    /// `norm` inserts batch norm before every ReLU.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        level: usize,
        in_channels: usize,
        cl: usize,
        norm: bool,
        rng: &mut R,
    ) -> Self {
        let proj = [0, 1, 2].map(|i| Conv2d::new(store, &format!("{name}.proj{}", i + 1), in_channels, cl, 1, 1, true, rng));
        let block = |store: &mut ParamStore, rng: &mut R, part: &str, k| {
            ConvBlock::new(store, &format!("{name}.{part}"), cl, cl, k, 1, norm, true, rng)
        };
        Mfam {
            proj,
            stream3: block(store, rng, "stream3", 3),
            stream5: block(store, rng, "stream5", 5),
            mix3: block(store, rng, "mix3", 3),
            mix5: block(store, rng, "mix5", 5),
            out: block(store, rng, "out", 3),
            level,
        }
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn forward(&self, g: &mut Graph<'_>, f: Var) -> Result<AggregatedFeature> {
        let c = g.value(f).dims4().1;
        if c != self.proj[0].in_channels {
            return Err(Error::contract(format!(
                "MFAM at level {} expects {} channels, got {c}",
                self.level, self.proj[0].in_channels
            )));
        }
        let p1 = self.proj[0].forward(g, f);
        let p2 = self.proj[1].forward(g, f);
        let p3 = self.proj[2].forward(g, f);
        let a = self.stream3.forward(g, p1);
        let b = self.stream5.forward(g, p2);
        let ab = g.add(a, b);
        let t3 = self.mix3.forward(g, ab);
        let t5 = self.mix5.forward(g, ab);
        let prod = g.mul(t3, t5);
        let fused = g.add(prod, ab);
        let y = self.out.forward(g, fused);
        let value = g.add(y, p3);
        Ok(AggregatedFeature { value, level: self.level })
    }
}

/// Channel reduction by a single 3×3 convolution, used when MFAM is ablated.
#[derive(Clone, Debug)]
pub struct PlainReduce {
    pub conv: Conv2d,
    level: usize,
}

impl PlainReduce {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, level: usize, in_channels: usize, cl: usize, rng: &mut R) -> Self {
        PlainReduce {
            conv: Conv2d::new(store, name, in_channels, cl, 3, 1, true, rng),
            level,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, f: Var) -> Result<AggregatedFeature> {
        let c = g.value(f).dims4().1;
        if c != self.conv.in_channels {
            return Err(Error::contract(format!("reducer expects {} channels, got {c}", self.conv.in_channels)));
        }
        let value = self.conv.forward(g, f);
        Ok(AggregatedFeature { value, level: self.level })
    }
}
