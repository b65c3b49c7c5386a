//! Cross-level fusion and gated feature propagation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mfam::AggregatedFeature;
use crate::nn::{Conv2d, ParamStore};
use crate::tensor::Tensor;

/// Decoder feature at pyramid level `level`.
#[derive(Clone, Copy, Debug)]
pub struct PropagatedFeature {
    pub value: Var,
    pub level: usize,
}

/// Intermediates of one gated propagation step. `gates` holds `w1, w2` as
/// channels 0 and 1 of an `[N, 2, H, W]` map.
#[derive(Clone, Copy, Debug)]
pub struct PropagationTrace {
    pub output: PropagatedFeature,
    pub p1: Var,
    pub p2: Var,
    pub gates: Var,
}

fn check_channels(g: &Graph<'_>, v: Var, want: usize, what: &str) -> Result<()> {
    let c = g.value(v).dims4().1;
    if c != want {
        return Err(Error::contract(format!("{what}: expected {want} channels, got {c}")));
    }
    Ok(())
}

/// Shared-attention fusion of adjacent aggregated features.
#[derive(Clone, Debug)]
pub struct CfpmFuse {
    pub attention: Conv2d,
    pub smooth_hi: Conv2d,
    pub smooth_lo: Conv2d,
    pub out: Conv2d,
}

impl CfpmFuse {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cl: usize, rng: &mut R) -> Self {
        let conv = |store: &mut ParamStore, rng: &mut R, part: &str| Conv2d::new(store, &format!("{name}.{part}"), cl, cl, 3, 1, true, rng);
        CfpmFuse {
            attention: conv(store, rng, "attention"),
            smooth_hi: conv(store, rng, "smooth_hi"),
            smooth_lo: conv(store, rng, "smooth_lo"),
            out: conv(store, rng, "out"),
        }
    }

    /// `hi` is upsampled bilinearly to `lo`'s resolution first.
    pub fn forward(&self, g: &mut Graph<'_>, hi: AggregatedFeature, lo: AggregatedFeature) -> Result<Var> {
        if hi.level != lo.level + 1 {
            return Err(Error::contract(format!(
                "cross-level fusion needs adjacent levels, got {} and {}",
                hi.level, lo.level
            )));
        }
        let cl = self.attention.in_channels;
        check_channels(g, hi.value, cl, "fusion input")?;
        check_channels(g, lo.value, cl, "fusion input")?;
        let (_, _, h, w) = g.value(lo.value).dims4();
        let up = g.resize(hi.value, h, w);
        let sum = g.add(up, lo.value);
        let logit = self.attention.forward(g, sum);
        let a = g.sigmoid(logit);
        let a_hi = g.mul(a, up);
        let en_hi = g.add(up, a_hi);
        let a_lo = g.mul(a, lo.value);
        let en_lo = g.add(lo.value, a_lo);
        let s_hi = self.smooth_hi.forward(g, en_hi);
        let s_lo = self.smooth_lo.forward(g, en_lo);
        let s = g.add(s_hi, s_lo);
        Ok(self.out.forward(g, s))
    }
}

/// Softmax-gated merge of the fused feature with the previous decoder output.
#[derive(Clone, Debug)]
pub struct CfpmPropagate {
    pub from_fused: Conv2d,
    pub from_prev: Conv2d,
    pub gate: Conv2d,
}

impl CfpmPropagate {
    /// The 1×1 gate convolution starts at zero, so both streams begin with weight 1/2.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cl: usize, rng: &mut R) -> Self {
        let from_fused = Conv2d::new(store, &format!("{name}.from_fused"), cl, cl, 3, 1, true, rng);
        let from_prev = Conv2d::new(store, &format!("{name}.from_prev"), cl, cl, 3, 1, true, rng);
        let gate = Conv2d::new(store, &format!("{name}.gate"), 2 * cl, 2, 1, 1, true, rng);
        store.get_mut(gate.weight).data_mut().fill(0.0);
        if let Some(b) = gate.bias {
            store.get_mut(b).data_mut().fill(0.0);
        }
        CfpmPropagate { from_fused, from_prev, gate }
    }

    /// `prev` is upsampled to `fused`'s resolution; the result is tagged `level`.
    pub fn forward(&self, g: &mut Graph<'_>, fused: Var, prev: PropagatedFeature, level: usize) -> Result<PropagationTrace> {
        let cl = self.from_fused.in_channels;
        check_channels(g, fused, cl, "propagation input")?;
        check_channels(g, prev.value, cl, "propagation input")?;
        let (_, _, h, w) = g.value(fused).dims4();
        let up = g.resize(prev.value, h, w);
        let p1 = self.from_fused.forward(g, fused);
        let p2 = self.from_prev.forward(g, up);
        let cat = g.concat(&[p1, p2]);
        let logits = self.gate.forward(g, cat);
        let gates = g.softmax_channels(logits);
        let value = gate_mix(g, gates, p1, p2);
        Ok(PropagationTrace {
            output: PropagatedFeature { value, level },
            p1,
            p2,
            gates,
        })
    }
}

/// `w1 ⊗ p1 + w2 ⊗ p2` with `w1, w2` the two channels of `gates`.
pub fn gate_mix(g: &mut Graph<'_>, gates: Var, p1: Var, p2: Var) -> Var {
    let w1 = g.narrow(gates, 0, 1);
    let w2 = g.narrow(gates, 1, 1);
    let a = g.mul_plane(w1, p1);
    let b = g.mul_plane(w2, p2);
    g.add(a, b)
}

/// Largest `|w1 + w2 - 1|` over a `[N, 2, H, W]` gate map.
pub fn gate_normalization_error(gates: &Tensor) -> f64 {
    let (n, c, h, w) = gates.dims4();
    assert_eq!(c, 2, "gate map must have two planes");
    let hw = h * w;
    let d = gates.data();
    (0..n)
        .flat_map(|b| (0..hw).map(move |i| (d[b * 2 * hw + i] + d[(b * 2 + 1) * hw + i] - 1.0).abs()))
        .fold(0.0, f64::max)
}

/// Fusion followed by propagation; the top stage (levels 5 and 4) has no propagation.
#[derive(Clone, Debug)]
pub struct Cfpm {
    pub fuse: CfpmFuse,
    pub propagate: Option<CfpmPropagate>,
}

impl Cfpm {
    pub fn top<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cl: usize, rng: &mut R) -> Self {
        Cfpm {
            fuse: CfpmFuse::new(store, &format!("{name}.fuse"), cl, rng),
            propagate: None,
        }
    }

    pub fn gated<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cl: usize, rng: &mut R) -> Self {
        Cfpm {
            fuse: CfpmFuse::new(store, &format!("{name}.fuse"), cl, rng),
            propagate: Some(CfpmPropagate::new(store, &format!("{name}.propagate"), cl, rng)),
        }
    }

    pub fn forward_top(&self, g: &mut Graph<'_>, agg5: AggregatedFeature, agg4: AggregatedFeature) -> Result<PropagatedFeature> {
        let value = self.fuse.forward(g, agg5, agg4)?;
        Ok(PropagatedFeature { value, level: agg4.level })
    }
}

/// Concatenation followed by a 3×3 convolution, the merge used in place of
/// fusion and/or propagation in the ablation configurations.
#[derive(Clone, Debug)]
pub struct ConcatMerge {
    pub conv: Conv2d,
}

impl ConcatMerge {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cl: usize, rng: &mut R) -> Self {
        ConcatMerge {
            conv: Conv2d::new(store, name, 2 * cl, cl, 3, 1, true, rng),
        }
    }

    /// `coarse` is upsampled to `fine`'s resolution before concatenation.
    pub fn forward(&self, g: &mut Graph<'_>, coarse: Var, fine: Var) -> Result<Var> {
        let cl = self.conv.out_channels;
        check_channels(g, coarse, cl, "merge input")?;
        check_channels(g, fine, cl, "merge input")?;
        let (_, _, h, w) = g.value(fine).dims4();
        let up = g.resize(coarse, h, w);
        let cat = g.concat(&[up, fine]);
        Ok(self.conv.forward(g, cat))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn agg(g: &mut Graph<'_>, shape: &[usize], level: usize, rng: &mut ChaCha8Rng) -> AggregatedFeature {
        AggregatedFeature {
            value: g.input(Tensor::uniform(shape, -1.0, 1.0, rng)),
            level,
        }
    }

    #[test]
    fn top_stage_shapes_and_definition() {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let top = Cfpm::top(&mut store, "cfpm.4", 8, &mut rng);
        let mut g = Graph::new(&store, false);
        let a5 = agg(&mut g, &[1, 8, 2, 2], 5, &mut rng);
        let a4 = agg(&mut g, &[1, 8, 4, 4], 4, &mut rng);
        let p = top.forward_top(&mut g, a5, a4).unwrap();
        let f = top.fuse.forward(&mut g, a5, a4).unwrap();
        assert_eq!(g.shape(p.value), &[1, 8, 4, 4]);
        assert_eq!(p.level, 4);
        assert_eq!(g.value(p.value), g.value(f));
    }

    #[test]
    fn non_adjacent_levels_are_rejected() {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fuse = CfpmFuse::new(&mut store, "f", 4, &mut rng);
        let mut g = Graph::new(&store, false);
        let a5 = agg(&mut g, &[1, 4, 2, 2], 5, &mut rng);
        let a3 = agg(&mut g, &[1, 4, 8, 8], 3, &mut rng);
        assert!(matches!(fuse.forward(&mut g, a5, a3), Err(Error::Contract(_))));
    }

    #[test]
    fn saturated_negative_attention_is_pure_residual() {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fuse = CfpmFuse::new(&mut store, "f", 4, &mut rng);
        store.get_mut(fuse.attention.weight).data_mut().fill(0.0);
        store.get_mut(fuse.attention.bias.unwrap()).data_mut().fill(-1e3);
        let mut g = Graph::new(&store, false);
        let a5 = agg(&mut g, &[1, 4, 2, 2], 5, &mut rng);
        let a4 = agg(&mut g, &[1, 4, 4, 4], 4, &mut rng);
        let out = fuse.forward(&mut g, a5, a4).unwrap();
        let up = g.resize(a5.value, 4, 4);
        let s_hi = fuse.smooth_hi.forward(&mut g, up);
        let s_lo = fuse.smooth_lo.forward(&mut g, a4.value);
        let s = g.add(s_hi, s_lo);
        let want = fuse.out.forward(&mut g, s);
        assert!(g.value(out).max_abs_diff(g.value(want)) < 1e-12);
    }

    #[test]
    fn fresh_gates_mix_equally() {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let prop = CfpmPropagate::new(&mut store, "p", 4, &mut rng);
        let mut g = Graph::new(&store, false);
        let fused = g.input(Tensor::uniform(&[2, 4, 8, 8], -1.0, 1.0, &mut rng));
        let prev = PropagatedFeature {
            value: g.input(Tensor::uniform(&[2, 4, 4, 4], -1.0, 1.0, &mut rng)),
            level: 3,
        };
        let t = prop.forward(&mut g, fused, prev, 2).unwrap();
        assert!(g.value(t.gates).data().iter().all(|&w| w == 0.5));
        let mean = g.value(t.p1).zip_map(g.value(t.p2), |a, b| (a + b) / 2.0);
        assert!(g.value(t.output.value).max_abs_diff(&mean) < 1e-15);
        assert_eq!(t.output.level, 2);
    }

    #[test]
    fn gate_saturation_and_monotonicity() {
        let store = ParamStore::default();
        let mut g = Graph::new(&store, false);
        let logits = |d: f64| Tensor::from_vec(&[1, 2, 1, 1], vec![d, 0.0]).unwrap();
        let w1 = |g: &mut Graph<'_>, d: f64| {
            let x = g.input(logits(d));
            let s = g.softmax_channels(x);
            g.value(s).data()[0]
        };
        assert!(w1(&mut g, 20.0) > 0.9999);
        let mut last = 0.0;
        for d in [-5.0, -1.0, 0.0, 0.5, 3.0] {
            let v = w1(&mut g, d);
            assert!(v > last);
            last = v;
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let prop = CfpmPropagate::new(&mut store, "p", 4, &mut rng);
        let merge = ConcatMerge::new(&mut store, "m", 4, &mut rng);
        let mut g = Graph::new(&store, false);
        let fused = g.input(Tensor::zeros(&[1, 4, 4, 4]));
        let bad = g.input(Tensor::zeros(&[1, 3, 2, 2]));
        let prev = PropagatedFeature { value: bad, level: 3 };
        assert!(prop.forward(&mut g, fused, prev, 2).is_err());
        assert!(merge.forward(&mut g, bad, fused).is_err());
    }
}
