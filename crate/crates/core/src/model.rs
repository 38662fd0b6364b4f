//! The full model: encoder plus restoration network sharing one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{self, check_severity, Encoded, Encoder, QualityScore, SeverityVector, TypeMap};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::nn::{Bound, ParamStore};
use crate::real::Real;
use crate::restore::{self, RestoreNet};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Spatial downsampling factor `S` of features and type map (power of two).
    pub downsample: usize,
    /// Feature width `D`, also the severity-vector length.
    pub dim: usize,
    /// Number of residual blocks `K`.
    pub blocks: usize,
    /// Attention heads.
    pub heads: usize,
    /// Hidden width of the local affine head.
    pub affine_hidden: usize,
    /// Hidden width of the quality head.
    pub iqa_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Full-size configuration.
    pub fn desk() -> Self {
        Self {
            downsample: 4,
            dim: 128,
            blocks: 6,
            heads: 4,
            affine_hidden: 16,
            iqa_hidden: 64,
        }
    }

    /// Small configuration for quick CPU training runs.
    pub fn smoke() -> Self {
        Self {
            downsample: 4,
            dim: 32,
            blocks: 2,
            heads: 2,
            affine_hidden: 8,
            iqa_hidden: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(alloc::format!("model: {m}")));
        let s = self.downsample;
        if !(2..=16).contains(&s) || !s.is_power_of_two() {
            return bad("downsample must be a power of two in 2..=16");
        }
        if self.dim < 4 || !self.dim.is_multiple_of(4) {
            return bad("dim must be a positive multiple of 4");
        }
        if self.dim >> (s.trailing_zeros() - 1) == 0 {
            return bad("dim too small for the downsampling factor");
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad("dim must be divisible by heads");
        }
        if self.affine_hidden == 0 || self.iqa_hidden == 0 {
            return bad("hidden widths must be positive");
        }
        Ok(())
    }
}

/// Parameter counts by component.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelSummary {
    pub total: usize,
    pub encoder: usize,
    pub restorer: usize,
}

impl ModelSummary {
    pub fn encoder_fraction(&self) -> f64 {
        self.encoder as f64 / self.total as f64
    }
}

#[derive(Clone, Debug)]
pub struct Model<R> {
    config: ModelConfig,
    pub params: ParamStore<R>,
    encoder: Encoder,
    restorer: RestoreNet,
}

impl<R: Real> Model<R> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, &mut rng, &config);
        let restorer = RestoreNet::new(&mut params, &mut rng, &config);
        Ok(Self {
            config,
            params,
            encoder,
            restorer,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn restorer(&self) -> &RestoreNet {
        &self.restorer
    }

    pub fn summary(&self) -> ModelSummary {
        ModelSummary {
            total: self.params.count(),
            encoder: self.params.count_prefix(encoder::PREFIX),
            restorer: self.params.count_prefix(restore::PREFIX),
        }
    }

    pub fn cast<T: Real>(&self) -> Model<T> {
        Model {
            config: self.config,
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            restorer: self.restorer.clone(),
        }
    }

    pub fn bind(&self, g: &mut Graph<R>, requires_grad: bool) -> Bound {
        self.params.bind(g, requires_grad)
    }

    /// Binds with gradients only for the restoration network.
    pub fn bind_restorer_only(&self, g: &mut Graph<R>) -> Bound {
        self.params.bind_where(g, |n| n.starts_with(restore::PREFIX))
    }

    pub fn encode_var(&self, g: &mut Graph<R>, p: &Bound, x: Var) -> Encoded {
        self.encoder.encode(g, p, x)
    }

    pub fn iqa_var(&self, g: &mut Graph<R>, p: &Bound, severity: Var) -> Var {
        self.encoder.predict_iqa(g, p, severity)
    }

    pub fn restore_var(&self, g: &mut Graph<R>, p: &Bound, x: Var, enc: Encoded) -> Var {
        self.restorer.forward(g, p, x, enc.type_map, enc.severity)
    }

    /// Reflect-pads `img` so both dimensions are multiples of the downsampling factor.
    pub fn pad_input(&self, img: &Image) -> Result<Image> {
        if img.height() == 0 || img.width() == 0 {
            return Err(Error::Empty("image has no pixels"));
        }
        Ok(img.pad_to_multiple(self.config.downsample))
    }

    /// Type map and severity vector of an image whose dimensions are multiples of the
    /// downsampling factor (see [`pad_input`](Self::pad_input)).
    pub fn encode(&self, img: &Image) -> Result<(TypeMap<R>, SeverityVector<R>)> {
        let s = self.config.downsample;
        if img.height() == 0 || img.width() == 0 {
            return Err(Error::Empty("image has no pixels"));
        }
        if !img.height().is_multiple_of(s) || !img.width().is_multiple_of(s) {
            return Err(Error::Shape(alloc::format!(
                "{}x{} is not divisible by {s}; pad first",
                img.height(),
                img.width()
            )));
        }
        let mut g = Graph::inference();
        let p = self.bind(&mut g, false);
        let x = g.constant(img.to_tensor());
        let enc = self.encode_var(&mut g, &p, x);
        let tm = g.value(enc.type_map).clone();
        let (h, w) = (tm.shape()[1], tm.shape()[2]);
        Ok((
            TypeMap(tm.reshaped(&[h, w])),
            SeverityVector(g.value(enc.severity).clone()),
        ))
    }

    pub fn predict_iqa(&self, sv: &SeverityVector<R>) -> Result<QualityScore> {
        check_severity(sv, self.config.dim)?;
        let mut g = Graph::inference();
        let p = self.bind(&mut g, false);
        let s = g.constant(sv.0.clone());
        let q = self.iqa_var(&mut g, &p, s);
        Ok(QualityScore(g.value(q).item().to_f64_lossy().clamp(0.0, 1.0)))
    }

    /// Encodes the padded image; the result fits [`restore_with`](Self::restore_with) for
    /// `img` of any size.
    pub fn encode_any(&self, img: &Image) -> Result<(TypeMap<R>, SeverityVector<R>)> {
        self.encode(&self.pad_input(img)?)
    }

    /// Restores an image of any size (padded internally, cropped back).
    pub fn restore(&self, img: &Image) -> Result<Image> {
        let (tm, sv) = self.encode_any(img)?;
        self.restore_with(img, &tm, &sv)
    }

    /// Restores `img` conditioned on the given degradation information instead of the
    /// image's own. The type map must match the padded image.
    pub fn restore_with(&self, img: &Image, tm: &TypeMap<R>, sv: &SeverityVector<R>) -> Result<Image> {
        let padded = self.pad_input(img)?;
        let s = self.config.downsample;
        let (th, tw) = (padded.height() / s, padded.width() / s);
        if tm.0.shape() != [th, tw] {
            return Err(Error::Shape(alloc::format!(
                "type map must be [{th}, {tw}], got {:?}",
                tm.0.shape()
            )));
        }
        check_severity(sv, self.config.dim)?;
        let mut g = Graph::inference();
        let p = self.bind(&mut g, false);
        let x = g.constant(padded.to_tensor());
        let t = g.constant(tm.0.clone().reshaped(&[1, th, tw]));
        let v = g.constant(sv.0.clone());
        let out = self.restore_var(
            &mut g,
            &p,
            x,
            Encoded {
                type_map: t,
                severity: v,
            },
        );
        let full = Image::from_tensor(g.value(out))?;
        if !full.data().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                step: 0,
                epoch: 0,
                detail: "restored image".into(),
            });
        }
        full.crop(0, 0, img.height(), img.width())
    }
}
