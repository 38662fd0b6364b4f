//! Degradation information encoder: a small conv trunk producing a spatial type map and a
//! global severity vector, plus the quality head used for rank supervision.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::ModelConfig;
use crate::nn::{act, Bound, Conv, Dense, Init, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Spatial degradation-type map, `[H/S, W/S]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TypeMap<R>(pub Tensor<R>);

/// Global degradation-severity vector, `[D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeverityVector<R>(pub Tensor<R>);

/// Predicted quality in `[0, 1]`; higher means less degraded.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct QualityScore(pub f64);

impl<R: Real> TypeMap<R> {
    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.data().iter().map(|v| v.to_f64_lossy()).collect()
    }
}

impl<R: Real> SeverityVector<R> {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.data().iter().map(|v| v.to_f64_lossy()).collect()
    }

    pub fn from_f64(v: &[f64]) -> Self {
        Self(Tensor::from_f64(&[v.len()], v))
    }
}

/// Graph handles of one encoder pass.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[1, H/S, W/S]`
    pub type_map: Var,
    /// `[D]`
    pub severity: Var,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    stages: [Conv; 3],
    // 2x2 pools after stage 1 and after stage 2
    pools: [usize; 2],
    fuse: Conv,
    type_head: Conv,
    iqa_hidden: Dense,
    iqa_out: Dense,
}

/// Prefix of every encoder parameter name.
pub const PREFIX: &str = "die.";

impl Encoder {
    pub fn new<R: Real, G: Rng>(store: &mut ParamStore<R>, rng: &mut G, cfg: &ModelConfig) -> Self {
        let d = cfg.dim;
        let widths = [d / 4, d / 2, d];
        let n = cfg.downsample.trailing_zeros() as usize;
        let pools = [n.div_ceil(2), n / 2];
        let s1 = Conv::new(store, rng, "die.stage1", 3, widths[0], 3, 1, Init::Uniform);
        let s2 = Conv::new(store, rng, "die.stage2", widths[0], widths[1], 3, 1, Init::Uniform);
        let s3 = Conv::new(store, rng, "die.stage3", widths[1], widths[2], 3, 1, Init::Uniform);
        let cat = widths.iter().sum();
        let fuse = Conv::new(store, rng, "die.fuse", cat, d / 4, 3, 1, Init::Uniform);
        let type_head = Conv::new(store, rng, "die.type", d / 4, 1, 1, 1, Init::Uniform);
        let iqa_hidden = Dense::new(store, rng, "die.iqa1", d, cfg.iqa_hidden, Init::Uniform);
        let iqa_out = Dense::new(store, rng, "die.iqa2", cfg.iqa_hidden, 1, Init::Uniform);
        Self {
            stages: [s1, s2, s3],
            pools,
            fuse,
            type_head,
            iqa_hidden,
            iqa_out,
        }
    }

    /// `x: [3, H, W]` with `H, W` divisible by the model's downsampling factor.
    pub fn encode<R: Real>(&self, g: &mut Graph<R>, p: &Bound, x: Var) -> Encoded {
        let pool = |g: &mut Graph<R>, mut v: Var, times: usize| {
            for _ in 0..times {
                v = g.avg_pool2(v);
            }
            v
        };
        let h1 = self.stages[0].forward(g, p, x);
        let h1 = act(g, h1);
        let d1 = pool(g, h1, self.pools[0]);
        let h2 = self.stages[1].forward(g, p, d1);
        let h2 = act(g, h2);
        let d2 = pool(g, h2, self.pools[1]);
        let h3 = self.stages[2].forward(g, p, d2);
        let h3 = act(g, h3);

        // multi-level features brought to the output resolution
        let l1 = pool(g, h1, self.pools[0] + self.pools[1]);
        let l2 = pool(g, h2, self.pools[1]);
        let cat = g.concat(&[l1, l2, h3]);
        let f = self.fuse.forward(g, p, cat);
        let f = act(g, f);
        let t = self.type_head.forward(g, p, f);
        // zero-mean, so cosine similarity compares spatial patterns rather than offsets
        let type_map = g.center(t);

        let severity = g.global_avg_pool(h3);
        Encoded { type_map, severity }
    }

    /// Scalar quality prediction in `(0, 1)` from a severity vector.
    pub fn predict_iqa<R: Real>(&self, g: &mut Graph<R>, p: &Bound, severity: Var) -> Var {
        let h = self.iqa_hidden.forward(g, p, severity);
        let h = act(g, h);
        let o = self.iqa_out.forward(g, p, h);
        let o = g.sigmoid(o);
        g.reshape(o, &[])
    }
}

pub(crate) fn check_severity<R: Real>(sv: &SeverityVector<R>, dim: usize) -> Result<()> {
    if sv.0.shape() != [dim] {
        return Err(Error::Shape(alloc::format!(
            "severity vector must have shape [{dim}], got {:?}",
            sv.0.shape()
        )));
    }
    Ok(())
}
