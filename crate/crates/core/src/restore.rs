//! Restoration network: strided feature extractor, degradation-conditioned residual blocks,
//! type-guided cross attention and an upsampling reconstructor.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::ModelConfig;
use crate::nn::{act, Bound, Conv, Dense, Init, ParamStore};
use crate::real::Real;

/// Prefix of every restoration-network parameter name.
pub const PREFIX: &str = "net.";

/// Epsilon of the instance normalization inside the residual blocks.
pub const NORM_EPS: f64 = 1e-5;

/// Probability clamp used when mapping the input into logit space for the output skip.
pub const LOGIT_EPS: f64 = 1e-3;

/// Local (per-position) and global (per-channel) affine parameters of one block.
#[derive(Clone, Copy, Debug)]
pub struct Affines {
    /// `[1, h, w]`
    pub alpha_l: Var,
    pub beta_l: Var,
    /// `[D]`
    pub alpha_g: Var,
    pub beta_g: Var,
}

#[derive(Clone, Debug)]
pub struct ResBlock {
    conv1: Conv,
    conv2: Conv,
    local_hidden: Conv,
    local_scale: Conv,
    local_shift: Conv,
    global_hidden: Dense,
    global_scale: Dense,
    global_shift: Dense,
}

#[derive(Clone, Debug)]
pub struct Dgca {
    lift: Conv,
    query: Conv,
    key: Conv,
    value: Conv,
    proj: Conv,
    heads: usize,
}

#[derive(Clone, Debug)]
pub struct RestoreNet {
    extract: Vec<Conv>,
    blocks: Vec<ResBlock>,
    dgca: Dgca,
    up: Vec<Conv>,
    out: Conv,
}

impl RestoreNet {
    pub fn new<R: Real, G: Rng>(store: &mut ParamStore<R>, rng: &mut G, cfg: &ModelConfig) -> Self {
        let d = cfg.dim;
        let n = cfg.downsample.trailing_zeros() as usize;
        let mut extract = Vec::with_capacity(n);
        let mut cin = 3;
        for i in 0..n {
            let cout = d >> (n - 1 - i);
            let name = format!("net.extract{i}");
            extract.push(Conv::new(store, rng, &name, cin, cout, 3, 2, Init::Uniform));
            cin = cout;
        }

        let hid = cfg.affine_hidden;
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let pre = format!("net.block{i}");
                let mut conv =
                    |s: &str, ci, co, k, init| Conv::new(store, rng, &format!("{pre}.{s}"), ci, co, k, 1, init);
                let conv1 = conv("conv1", d, d, 3, Init::Uniform);
                let conv2 = conv("conv2", d, d, 3, Init::Constant(0.0));
                let local_hidden = conv("local", 1, hid, 3, Init::Uniform);
                let local_scale = conv("local_scale", hid, 1, 3, Init::Constant(1.0));
                let local_shift = conv("local_shift", hid, 1, 3, Init::Constant(0.0));
                let mut dense = |s: &str, init| Dense::new(store, rng, &format!("{pre}.{s}"), d, d, init);
                let global_hidden = dense("global", Init::Uniform);
                let global_scale = dense("global_scale", Init::Constant(1.0));
                let global_shift = dense("global_shift", Init::Constant(0.0));
                ResBlock {
                    conv1,
                    conv2,
                    local_hidden,
                    local_scale,
                    local_shift,
                    global_hidden,
                    global_scale,
                    global_shift,
                }
            })
            .collect();

        let mut c1 = |s: &str, ci, co, init| Conv::new(store, rng, s, ci, co, 1, 1, init);
        let dgca = Dgca {
            lift: c1("net.dgca.lift", 1, d, Init::Uniform),
            query: c1("net.dgca.query", d, d, Init::Uniform),
            key: c1("net.dgca.key", d, d, Init::Uniform),
            value: c1("net.dgca.value", d, d, Init::Uniform),
            proj: c1("net.dgca.proj", d, d, Init::Constant(0.0)),
            heads: cfg.heads,
        };

        let mut up = Vec::with_capacity(n);
        let mut cin = d;
        for i in 0..n {
            let cout = (d >> (i + 1)).max(4);
            let name = format!("net.up{i}");
            up.push(Conv::new(store, rng, &name, cin, cout, 3, 1, Init::Uniform));
            cin = cout;
        }
        let out = Conv::new(store, rng, "net.out", cin, 3, 3, 1, Init::Constant(0.0));
        Self {
            extract,
            blocks,
            dgca,
            up,
            out,
        }
    }

    pub fn blocks(&self) -> usize {
        self.blocks.len()
    }

    /// `[3, H, W] -> [D, H/S, W/S]`
    pub fn extract_features<R: Real>(&self, g: &mut Graph<R>, p: &Bound, x: Var) -> Var {
        let mut h = x;
        for c in &self.extract {
            let y = c.forward(g, p, h);
            h = act(g, y);
        }
        h
    }

    /// Local affine maps from the type map and global affine vectors from the severity
    /// vector. At initialization both scales are 1 and both shifts 0.
    pub fn make_affines<R: Real>(
        &self,
        g: &mut Graph<R>,
        p: &Bound,
        block: usize,
        type_map: Var,
        severity: Var,
    ) -> Affines {
        let b = &self.blocks[block];
        let l = b.local_hidden.forward(g, p, type_map);
        let l = act(g, l);
        let alpha_l = b.local_scale.forward(g, p, l);
        let beta_l = b.local_shift.forward(g, p, l);
        let s = b.global_hidden.forward(g, p, severity);
        let s = act(g, s);
        let alpha_g = b.global_scale.forward(g, p, s);
        let beta_g = b.global_shift.forward(g, p, s);
        Affines {
            alpha_l,
            beta_l,
            alpha_g,
            beta_g,
        }
    }

    pub fn residual_block<R: Real>(
        &self,
        g: &mut Graph<R>,
        p: &Bound,
        block: usize,
        f: Var,
        type_map: Var,
        severity: Var,
    ) -> Var {
        let b = &self.blocks[block];
        let aff = self.make_affines(g, p, block, type_map, severity);
        let h = b.conv1.forward(g, p, f);
        let h = di_lg_adain(g, h, &aff).expect("affine heads match feature shapes");
        let h = act(g, h);
        let h = b.conv2.forward(g, p, h);
        g.add(f, h)
    }

    /// Cross attention with queries from the lifted type map and keys/values from the
    /// features, added back onto the features.
    pub fn dgca<R: Real>(&self, g: &mut Graph<R>, p: &Bound, f: Var, type_map: Var) -> Var {
        let a = &self.dgca;
        let t = a.lift.forward(g, p, type_map);
        let q = a.query.forward(g, p, t);
        let k = a.key.forward(g, p, f);
        let v = a.value.forward(g, p, f);
        let o = g.attention(q, k, v, a.heads);
        let o = a.proj.forward(g, p, o);
        g.add(f, o)
    }

    /// Upsamples features back to `[3, H, W]` and adds the predicted residual to the
    /// input in logit space, so the all-zero output layer yields the input itself.
    pub fn reconstruct<R: Real>(&self, g: &mut Graph<R>, p: &Bound, f: Var, input: Var) -> Var {
        let mut h = f;
        for c in &self.up {
            let u = g.upsample2(h);
            let y = c.forward(g, p, u);
            h = act(g, y);
        }
        let r = self.out.forward(g, p, h);
        let base = g.clamp_logit(input, R::lit(LOGIT_EPS));
        let z = g.add(base, r);
        g.sigmoid(z)
    }

    /// Full restoration pass given already-computed degradation information.
    pub fn forward<R: Real>(&self, g: &mut Graph<R>, p: &Bound, x: Var, type_map: Var, severity: Var) -> Var {
        let mut f = self.extract_features(g, p, x);
        for i in 0..self.blocks.len() {
            f = self.residual_block(g, p, i, f, type_map, severity);
        }
        let f = self.dgca(g, p, f, type_map);
        self.reconstruct(g, p, f, x)
    }
}

/// Instance-normalizes `f: [D, h, w]` and applies the local affine per position, then the
/// global affine per channel.
pub fn di_lg_adain<R: Real>(g: &mut Graph<R>, f: Var, aff: &Affines) -> Result<Var> {
    let s = g.shape(f);
    if s.len() != 3 {
        return Err(Error::Shape(format!("features must be [D, h, w], got {s:?}")));
    }
    let (d, n) = (s[0], s[1] * s[2]);
    let fits = |g: &Graph<R>, v: Var, len: usize| g.value(v).len() == len;
    if !(fits(g, aff.alpha_l, n) && fits(g, aff.beta_l, n)) {
        return Err(Error::Shape("local affine maps must match the feature grid".into()));
    }
    if !(fits(g, aff.alpha_g, d) && fits(g, aff.beta_g, d)) {
        return Err(Error::Shape(
            "global affine vectors must match the channel count".into(),
        ));
    }
    let n = g.instance_norm(f, R::lit(NORM_EPS));
    Ok(g.lg_affine(n, aff.alpha_l, aff.beta_l, aff.alpha_g, aff.beta_g))
}
