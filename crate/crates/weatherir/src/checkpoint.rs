//! Single-file training checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "WXIRCKPT" | version u32
//! config: len u32, UTF-8 key = value text
//! progress: stage u8, epoch u64, step_in_epoch u64, global_step u64
//! rng: seed [u8; 32], stream u64, word_pos u128
//! params: count u32, then per tensor: name (len u16, bytes), rank u8, dims u32 x rank,
//!         values f32 x numel
//! optimizer: flag u8; if 1: beta1, beta2, eps, weight_decay f64, then per tensor in
//!            parameter order: t u64, m f32 x numel, v f32 x numel
//! ```

use std::path::Path;

use weatherir_core::nn::ParamStore;
use weatherir_core::trainer::{AdamW, Progress, RngState, Stage, Trainer};
use weatherir_core::{Model, Tensor};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"WXIRCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ParamStore<f32>,
    pub optimizer: Option<AdamW<f32>>,
    pub progress: Progress,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn of_trainer(trainer: &Trainer, config: &RunConfig) -> Self {
        let mut config = config.clone();
        config.train = trainer.config().clone();
        Self {
            config,
            params: trainer.model().params.clone(),
            optimizer: Some(trainer.optimizer().clone()),
            progress: trainer.progress(),
            rng: trainer.rng_state(),
        }
    }

    /// Weights only, for a model that was never trained by a [`Trainer`].
    pub fn of_model(model: &Model<f32>, config: &RunConfig) -> Self {
        let mut config = config.clone();
        config.train.model = *model.config();
        Self {
            config,
            params: model.params.clone(),
            optimizer: None,
            progress: Progress {
                stage: Stage::One,
                epoch: 0,
                step_in_epoch: 0,
                global_step: 0,
            },
            rng: RngState {
                seed: [0; 32],
                stream: 0,
                word_pos: 0,
            },
        }
    }

    pub fn model(&self) -> Result<Model<f32>> {
        let mut m = Model::new(self.config.train.model, self.config.train.seed)?;
        weatherir_core::trainer::load_params(&mut m.params, &self.params)?;
        Ok(m)
    }

    pub fn into_trainer(self) -> Result<Trainer> {
        Ok(Trainer::resume(
            self.config.train,
            self.params,
            self.optimizer,
            self.rng,
            self.progress,
        )?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&VERSION.to_le_bytes());
        let text = self.config.to_text();
        w.extend_from_slice(&(text.len() as u32).to_le_bytes());
        w.extend_from_slice(text.as_bytes());

        let p = &self.progress;
        w.push(p.stage.number());
        w.extend_from_slice(&(p.epoch as u64).to_le_bytes());
        w.extend_from_slice(&(p.step_in_epoch as u64).to_le_bytes());
        w.extend_from_slice(&p.global_step.to_le_bytes());
        w.extend_from_slice(&self.rng.seed);
        w.extend_from_slice(&self.rng.stream.to_le_bytes());
        w.extend_from_slice(&self.rng.word_pos.to_le_bytes());

        w.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            w.extend_from_slice(&(name.len() as u16).to_le_bytes());
            w.extend_from_slice(name.as_bytes());
            w.push(t.shape().len() as u8);
            for &d in t.shape() {
                w.extend_from_slice(&(d as u32).to_le_bytes());
            }
            put_f32s(&mut w, t.data());
        }

        match &self.optimizer {
            None => w.push(0),
            Some(o) => {
                w.push(1);
                for v in [o.beta1, o.beta2, o.eps, o.weight_decay] {
                    w.extend_from_slice(&v.to_le_bytes());
                }
                for i in 0..o.m.len() {
                    w.extend_from_slice(&o.t[i].to_le_bytes());
                    put_f32s(&mut w, o.m[i].data());
                    put_f32s(&mut w, o.v[i].data());
                }
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CliError::Data("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CliError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let len = r.u32()? as usize;
        let text =
            std::str::from_utf8(r.take(len)?).map_err(|_| CliError::Data("checkpoint config is not UTF-8".into()))?;
        let config = RunConfig::parse_text(text).map_err(|e| CliError::Data(format!("checkpoint config: {e}")))?;

        let stage = Stage::from_number(r.u8()?).map_err(|e| CliError::Data(e.to_string()))?;
        let progress = Progress {
            stage,
            epoch: r.u64()? as usize,
            step_in_epoch: r.u64()? as usize,
            global_step: r.u64()?,
        };
        let mut seed = [0u8; 32];
        seed.copy_from_slice(r.take(32)?);
        let rng = RngState {
            seed,
            stream: r.u64()?,
            word_pos: u128::from_le_bytes(r.take(16)?.try_into().unwrap()),
        };

        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| CliError::Data("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().product();
            let data = r.f32s(numel)?;
            params.add(&name, Tensor::new(&shape, data));
        }

        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let mut h = [0.0; 4];
                for v in &mut h {
                    *v = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
                }
                let mut o = AdamW::new(&params, h[0], h[1], h[2], h[3]);
                for (i, (_, p)) in params.iter().enumerate() {
                    o.t[i] = r.u64()?;
                    o.m[i] = Tensor::new(p.shape(), r.f32s(p.len())?);
                    o.v[i] = Tensor::new(p.shape(), r.f32s(p.len())?);
                }
                Some(o)
            }
            f => return Err(CliError::Data(format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(CliError::Data("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            config,
            params,
            optimizer,
            progress,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_f32s(w: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        w.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CliError::Data("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let b = self.take(
            n.checked_mul(4)
                .ok_or_else(|| CliError::Data("bad tensor size".into()))?,
        )?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
