//! Two-stage training: joint encoder/restorer training with ranking, contrastive and
//! restoration losses, then restorer-only fine-tuning at a lower learning rate.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::Encoded;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::losses::{
    contrastive_var, direct_iqa_var, l1_var, mqrl_var, mrl_var, perceptual_var, ssim_loss_var, total_loss_var,
    LossComponents, LossWeights, RandomConvPyramid,
};
use crate::metrics::gt_quality;
use crate::model::{Model, ModelConfig};
use crate::nn::ParamStore;
use crate::real::Real;
use crate::synth::WeatherKind;
use crate::tensor::Tensor;

/// Supervision applied to the quality head during stage 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SeverityRegime {
    None,
    Mrl,
    Mqrl,
    Direct,
}

impl SeverityRegime {
    pub const ALL: [SeverityRegime; 4] = [
        SeverityRegime::None,
        SeverityRegime::Mrl,
        SeverityRegime::Mqrl,
        SeverityRegime::Direct,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SeverityRegime::None => "none",
            SeverityRegime::Mrl => "mrl",
            SeverityRegime::Mqrl => "mqrl",
            SeverityRegime::Direct => "direct",
        }
    }
}

impl fmt::Display for SeverityRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SeverityRegime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown severity regime '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub crop_size: usize,
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Optimizer steps per epoch; 0 means one pass over the data (`ceil(n / batch)`).
    pub steps_per_epoch: usize,
    pub lr: f64,
    /// First epoch (0-based, within each stage) of the linear decay to zero.
    pub decay_start: usize,
    /// Stage-2 learning rate as a fraction of `lr`.
    pub stage2_lr_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Margin of the ranking losses.
    pub margin: f64,
    /// Contrastive temperature.
    pub temperature: f64,
    pub weights: LossWeights,
    pub regime: SeverityRegime,
    pub seed: u64,
    /// Seed of the frozen perceptual feature extractor.
    pub perceptual_seed: u64,
    /// Allow a rank pair to be a sample paired with itself when a kind has one sample.
    pub allow_self_pair: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            crop_size: 256,
            batch_size: 2,
            stage1_epochs: 40,
            stage2_epochs: 30,
            steps_per_epoch: 0,
            lr: 1e-4,
            decay_start: 18,
            stage2_lr_factor: 0.1,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            margin: 0.05,
            temperature: 0.25,
            weights: LossWeights::default(),
            regime: SeverityRegime::Mqrl,
            seed: 0,
            perceptual_seed: 7,
            allow_self_pair: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let s = self.model.downsample;
        if self.crop_size == 0 || !self.crop_size.is_multiple_of(s) {
            return bad("crop_size must be a positive multiple of the downsampling factor");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.stage2_lr_factor > 0.0 && self.stage2_lr_factor < 1.0) {
            return bad("stage2_lr_factor must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.adam_eps <= 0.0 || self.weight_decay < 0.0 {
            return bad("adam_eps must be positive and weight_decay nonnegative");
        }
        if self.margin < 0.0 || !self.margin.is_finite() {
            return bad("margin must be >= 0");
        }
        if self.temperature <= 0.0 || !self.temperature.is_finite() {
            return bad("temperature must be > 0");
        }
        Ok(())
    }

    pub fn epochs(&self, stage: Stage) -> usize {
        match stage {
            Stage::One => self.stage1_epochs,
            Stage::Two => self.stage2_epochs,
        }
    }

    pub fn base_lr(&self, stage: Stage) -> f64 {
        match stage {
            Stage::One => self.lr,
            Stage::Two => self.lr * self.stage2_lr_factor,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            _ => Err(Error::Config(format!("no training stage {n}"))),
        }
    }
}

/// Learning rate for `epoch` (0-based) of `stage`: constant before `decay_start`, then
/// linear towards zero, reaching `base / (E - decay_start)` in the last epoch.
pub fn lr_at(config: &TrainConfig, stage: Stage, epoch: usize) -> f64 {
    let base = config.base_lr(stage);
    let total = config.epochs(stage);
    let d = config.decay_start;
    if epoch < d || d >= total {
        base
    } else {
        // ratio first: it is at most 1, so the product never exceeds base
        base * ((total - epoch.min(total)) as f64 / (total - d) as f64)
    }
}

/// AdamW with decoupled weight decay. Parameters without a gradient are left untouched,
/// moments included; each parameter keeps its own step count for bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<R> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<Tensor<R>>,
    pub v: Vec<Tensor<R>>,
    pub t: Vec<u64>,
}

impl<R: Real> AdamW<R> {
    pub fn new(params: &ParamStore<R>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor<R>> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: zeros.clone(),
            v: zeros,
            t: vec![0; params.len()],
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<R>, grads: &[Option<Tensor<R>>], lr: f64) {
        assert_eq!(grads.len(), params.len(), "one gradient slot per parameter");
        let ids: Vec<_> = params.ids().collect();
        let (b1, b2) = (R::lit(self.beta1), R::lit(self.beta2));
        let (one, eps) = (R::one(), R::lit(self.eps));
        let decay = R::lit(1.0 - lr * self.weight_decay);
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let c1 = R::lit(1.0 - self.beta1.powi(t));
            let c2 = R::lit(1.0 - self.beta2.powi(t));
            let step = R::lit(lr);
            let p = params.get_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m).zip(v).zip(g.data()) {
                *p *= decay;
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= step * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainSample {
    pub kind: WeatherKind,
    pub degraded: Image,
    pub clean: Image,
}

/// Training samples with a per-kind row index.
#[derive(Clone, Debug)]
pub struct Dataset {
    samples: Vec<TrainSample>,
    by_kind: [Vec<usize>; 4],
}

impl Dataset {
    pub fn new(samples: Vec<TrainSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let mut by_kind: [Vec<usize>; 4] = Default::default();
        for (i, s) in samples.iter().enumerate() {
            if !s.degraded.same_shape(&s.clean) {
                return Err(Error::Data(format!("row {i}: degraded and clean differ in size")));
            }
            by_kind[s.kind.id() as usize].push(i);
        }
        Ok(Self { samples, by_kind })
    }

    pub fn samples(&self) -> &[TrainSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn rows_of(&self, kind: WeatherKind) -> &[usize] {
        &self.by_kind[kind.id() as usize]
    }
}

/// Two rows drawn uniformly from `rows`, distinct unless only one row exists and
/// `allow_self_pair` is set.
pub fn sample_rank_pair<G: Rng>(rows: &[usize], rng: &mut G, allow_self_pair: bool) -> Result<(usize, usize)> {
    match rows.len() {
        0 => Err(Error::Data("no samples of the requested kind".into())),
        1 if allow_self_pair => Ok((rows[0], rows[0])),
        1 => Err(Error::Data(
            "a rank pair needs two samples of the same kind (self-pairs are disabled)".into(),
        )),
        n => {
            let a = rng.random_range(0..n);
            let mut b = rng.random_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            Ok((rows[a], rows[b]))
        }
    }
}

/// A training crop and where it came from.
#[derive(Clone, Debug)]
pub struct Crop {
    pub row: usize,
    pub top: usize,
    pub left: usize,
    pub degraded: Image,
    pub clean: Image,
    /// Ground-truth quality of the degraded crop.
    pub gt_quality: f64,
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub kinds: Vec<WeatherKind>,
    pub anchors: Vec<Crop>,
    /// Same-kind rank partners; also the contrastive positives.
    pub partners: Vec<Crop>,
    /// At least two kinds are present, so contrastive negatives exist.
    pub contrastive: bool,
}

fn random_crop<G: Rng>(data: &Dataset, row: usize, size: usize, rng: &mut G) -> Result<Crop> {
    let s = &data.samples[row];
    let (h, w) = (s.degraded.height(), s.degraded.width());
    if h < size || w < size {
        return Err(Error::Data(format!(
            "row {row} is {h}x{w}, smaller than the {size}x{size} crop"
        )));
    }
    let top = rng.random_range(0..=h - size);
    let left = rng.random_range(0..=w - size);
    let degraded = s.degraded.crop(top, left, size, size)?;
    let clean = s.clean.crop(top, left, size, size)?;
    let gt_quality = gt_quality(&degraded, &clean)?;
    Ok(Crop {
        row,
        top,
        left,
        degraded,
        clean,
        gt_quality,
    })
}

/// Samples a batch: anchor kinds cycle through a shuffled list of usable kinds so a batch
/// mixes kinds whenever it can; each anchor gets a same-kind partner.
pub fn build_batch<G: Rng>(data: &Dataset, config: &TrainConfig, rng: &mut G) -> Result<Batch> {
    let min_rows = if config.allow_self_pair { 1 } else { 2 };
    let mut kinds: Vec<WeatherKind> = WeatherKind::ALL
        .into_iter()
        .filter(|&k| data.rows_of(k).len() >= min_rows)
        .collect();
    if kinds.is_empty() {
        return Err(Error::Data(
            "no weather kind has two samples to form a rank pair".into(),
        ));
    }
    for i in (1..kinds.len()).rev() {
        let j = rng.random_range(0..=i);
        kinds.swap(i, j);
    }
    let mut batch = Batch {
        kinds: Vec::with_capacity(config.batch_size),
        anchors: Vec::with_capacity(config.batch_size),
        partners: Vec::with_capacity(config.batch_size),
        contrastive: false,
    };
    for b in 0..config.batch_size {
        let kind = kinds[b % kinds.len()];
        let (ra, rb) = sample_rank_pair(data.rows_of(kind), rng, config.allow_self_pair)?;
        batch.kinds.push(kind);
        batch.anchors.push(random_crop(data, ra, config.crop_size, rng)?);
        batch.partners.push(random_crop(data, rb, config.crop_size, rng)?);
    }
    batch.contrastive = batch.kinds.iter().any(|&k| k != batch.kinds[0]);
    Ok(batch)
}

/// Where training stands. `epoch` and `step_in_epoch` count within the current stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Progress {
    pub stage: Stage,
    pub epoch: usize,
    pub step_in_epoch: usize,
    pub global_step: u64,
}

/// Per-step record for the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub stage: u8,
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub losses: LossComponents,
    pub total: f64,
    pub contrastive_active: bool,
}

/// Serializable ChaCha8 stream position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn of(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

/// Losses and per-parameter gradients of one batch.
pub struct StepGradients {
    pub losses: LossComponents,
    pub total: f64,
    pub grads: Vec<Option<Tensor<f32>>>,
}

pub struct Trainer {
    config: TrainConfig,
    model: Model<f32>,
    optim: AdamW<f32>,
    rng: ChaCha8Rng,
    progress: Progress,
    perceptual: RandomConvPyramid<f32>,
    last_batch: Option<Batch>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model, config.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let stage = if config.stage1_epochs == 0 {
            Stage::Two
        } else {
            Stage::One
        };
        Self::resume(
            config,
            model.params.clone(),
            None,
            RngState::of(&rng),
            Progress {
                stage,
                epoch: 0,
                step_in_epoch: 0,
                global_step: 0,
            },
        )
    }

    /// Rebuilds a trainer from saved state. `params` must match the configured model's
    /// parameter names and shapes; `optim` of `None` starts fresh moments.
    pub fn resume(
        config: TrainConfig,
        params: ParamStore<f32>,
        optim: Option<AdamW<f32>>,
        rng: RngState,
        progress: Progress,
    ) -> Result<Self> {
        config.validate()?;
        let mut model = Model::new(config.model, config.seed)?;
        load_params(&mut model.params, &params)?;
        let fresh = || {
            AdamW::new(
                &model.params,
                config.beta1,
                config.beta2,
                config.adam_eps,
                config.weight_decay,
            )
        };
        let optim = match optim {
            Some(o) => {
                let ok = o.m.len() == model.params.len()
                    && o.v.len() == o.m.len()
                    && o.t.len() == o.m.len()
                    && model
                        .params
                        .iter()
                        .zip(o.m.iter().zip(&o.v))
                        .all(|((_, p), (m, v))| m.shape() == p.shape() && v.shape() == p.shape());
                if !ok {
                    return Err(Error::Shape("optimizer state does not match the model".into()));
                }
                o
            }
            None => fresh(),
        };
        let perceptual = RandomConvPyramid::new(config.perceptual_seed);
        Ok(Self {
            config,
            model,
            optim,
            rng: rng.rng(),
            progress,
            perceptual,
            last_batch: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn optimizer(&self) -> &AdamW<f32> {
        &self.optim
    }

    pub fn rng_state(&self) -> RngState {
        RngState::of(&self.rng)
    }

    pub fn progress(&self) -> Progress {
        self.progress
    }

    pub fn steps_per_epoch(&self, data: &Dataset) -> usize {
        if self.config.steps_per_epoch > 0 {
            self.config.steps_per_epoch
        } else {
            data.len().div_ceil(self.config.batch_size)
        }
    }

    pub fn finished(&self) -> bool {
        self.progress.stage == Stage::Two && self.progress.epoch >= self.config.stage2_epochs
    }

    pub fn stage_finished(&self, stage: Stage) -> bool {
        self.progress.stage > stage || self.finished()
    }

    pub fn current_lr(&self) -> f64 {
        lr_at(&self.config, self.progress.stage, self.progress.epoch)
    }

    pub fn sample_batch(&mut self, data: &Dataset) -> Result<Batch> {
        build_batch(data, &self.config, &mut self.rng)
    }

    /// Losses and gradients of `batch` under the rules of `stage`, without updating.
    pub fn gradients(&self, batch: &Batch, stage: Stage) -> Result<StepGradients> {
        let mut g = Graph::<f32>::new();
        let p = match stage {
            Stage::One => self.model.bind(&mut g, true),
            Stage::Two => self.model.bind_restorer_only(&mut g),
        };
        let cfg = &self.config;
        let w = &cfg.weights;
        let n = batch.anchors.len();
        let inv_n = 1.0 / n as f32;

        let mut l1s = Vec::new();
        let mut ssims = Vec::new();
        let mut pers = Vec::new();
        let mut anchor_enc: Vec<Encoded> = Vec::new();
        for a in &batch.anchors {
            let x = g.constant(a.degraded.to_tensor());
            let y = g.constant(a.clean.to_tensor());
            let enc = self.model.encode_var(&mut g, &p, x);
            let out = self.model.restore_var(&mut g, &p, x, enc);
            if w.l1 > 0.0 {
                l1s.push(l1_var(&mut g, out, y));
            }
            if w.ssim > 0.0 {
                ssims.push(ssim_loss_var(&mut g, out, y));
            }
            if stage == Stage::One && w.perceptual > 0.0 {
                pers.push(perceptual_var(&mut g, out, y, &self.perceptual));
            }
            anchor_enc.push(enc);
        }

        let mut sev = Vec::new();
        let mut cls = Vec::new();
        if stage == Stage::One {
            let need_partner = cfg.regime != SeverityRegime::None || (w.cl > 0.0 && batch.contrastive);
            let mut partner_enc = Vec::new();
            if need_partner {
                for b in &batch.partners {
                    let x = g.constant(b.degraded.to_tensor());
                    partner_enc.push(self.model.encode_var(&mut g, &p, x));
                }
            }
            if cfg.regime != SeverityRegime::None {
                for i in 0..n {
                    let (a, b) = (&batch.anchors[i], &batch.partners[i]);
                    let pa = self.model.iqa_var(&mut g, &p, anchor_enc[i].severity);
                    let pb = self.model.iqa_var(&mut g, &p, partner_enc[i].severity);
                    let term = match cfg.regime {
                        SeverityRegime::Mqrl => mqrl_var(&mut g, pa, pb, a.gt_quality, b.gt_quality, cfg.margin)?,
                        SeverityRegime::Mrl => mrl_var(&mut g, pa, pb, a.gt_quality, b.gt_quality, cfg.margin)?,
                        SeverityRegime::Direct => {
                            let da = direct_iqa_var(&mut g, pa, a.gt_quality);
                            let db = direct_iqa_var(&mut g, pb, b.gt_quality);
                            let s = g.add(da, db);
                            g.mul_scalar(s, 0.5)
                        }
                        SeverityRegime::None => unreachable!(),
                    };
                    sev.push(term);
                }
            }
            if w.cl > 0.0 && batch.contrastive {
                for i in 0..n {
                    let negatives: Vec<Var> = (0..n)
                        .filter(|&j| batch.kinds[j] != batch.kinds[i])
                        .flat_map(|j| [anchor_enc[j].type_map, partner_enc[j].type_map])
                        .collect();
                    if negatives.is_empty() {
                        continue;
                    }
                    cls.push(contrastive_var(
                        &mut g,
                        anchor_enc[i].type_map,
                        partner_enc[i].type_map,
                        &negatives,
                        cfg.temperature,
                    )?);
                }
            }
        }

        let mean = |g: &mut Graph<f32>, terms: &[Var]| -> Option<Var> {
            let first = *terms.first()?;
            let s = terms[1..].iter().fold(first, |acc, &t| g.add(acc, t));
            let scale = if terms.len() == n {
                inv_n
            } else {
                1.0 / terms.len() as f32
            };
            Some(g.mul_scalar(s, scale))
        };
        let sev_v = mean(&mut g, &sev);
        let cl_v = mean(&mut g, &cls);
        let l1_v = mean(&mut g, &l1s);
        let ssim_v = mean(&mut g, &ssims);
        let per_v = mean(&mut g, &pers);
        let val = |g: &Graph<f32>, v: Option<Var>| v.map_or(0.0, |v| f64::from(g.value(v).item()));
        let losses = LossComponents {
            severity: val(&g, sev_v),
            cl: val(&g, cl_v),
            l1: val(&g, l1_v),
            ssim: val(&g, ssim_v),
            perceptual: val(&g, per_v),
        };
        let total = total_loss_var(&mut g, sev_v, cl_v, l1_v, ssim_v, per_v, w);
        let Some(total) = total else {
            return Err(Error::Config("every loss term is disabled".into()));
        };
        let total_value = f64::from(g.value(total).item());
        if !total_value.is_finite() {
            return Err(self.non_finite(format!("loss is {total_value} ({losses:?})")));
        }
        let mut grads = g.backward(total);
        let mut out = Vec::with_capacity(self.model.params.len());
        for id in self.model.params.ids() {
            let gr = grads.take(p.var(id));
            if let Some(t) = &gr {
                if !t.is_finite() {
                    return Err(self.non_finite(format!("gradient of {} is not finite", self.model.params.name(id))));
                }
            }
            out.push(gr);
        }
        Ok(StepGradients {
            losses,
            total: total_value,
            grads: out,
        })
    }

    fn non_finite(&self, detail: alloc::string::String) -> Error {
        Error::NonFinite {
            step: self.progress.global_step,
            epoch: self.progress.epoch,
            detail,
        }
    }

    fn enter_stage_two(&mut self) {
        self.progress.stage = Stage::Two;
        self.progress.epoch = 0;
        self.progress.step_in_epoch = 0;
        let c = &self.config;
        self.optim = AdamW::new(&self.model.params, c.beta1, c.beta2, c.adam_eps, c.weight_decay);
    }

    /// Runs one optimizer step at the current position and advances it.
    pub fn step(&mut self, data: &Dataset) -> Result<StepLog> {
        if self.finished() {
            return Err(Error::Config("training already finished".into()));
        }
        let stage = self.progress.stage;
        let lr = self.current_lr();
        let batch = self.sample_batch(data)?;
        let sg = self.gradients(&batch, stage);
        self.last_batch = Some(batch);
        let sg = sg?;
        self.optim.step(&mut self.model.params, &sg.grads, lr);
        let log = StepLog {
            stage: stage.number(),
            epoch: self.progress.epoch,
            step: self.progress.global_step,
            lr,
            losses: sg.losses,
            total: sg.total,
            contrastive_active: self.last_batch.as_ref().is_some_and(|b| b.contrastive),
        };
        self.progress.global_step += 1;
        self.progress.step_in_epoch += 1;
        if self.progress.step_in_epoch >= self.steps_per_epoch(data) {
            self.progress.step_in_epoch = 0;
            self.progress.epoch += 1;
            if stage == Stage::One && self.progress.epoch >= self.config.stage1_epochs {
                self.enter_stage_two();
            }
        }
        Ok(log)
    }

    /// Steps until the current epoch ends (or training finishes).
    pub fn run_epoch(&mut self, data: &Dataset, on_step: &mut dyn FnMut(&StepLog)) -> Result<()> {
        let (stage, epoch) = (self.progress.stage, self.progress.epoch);
        while !self.finished() && self.progress.stage == stage && self.progress.epoch == epoch {
            let log = self.step(data)?;
            on_step(&log);
        }
        Ok(())
    }

    pub fn run_steps(&mut self, data: &Dataset, steps: usize, on_step: &mut dyn FnMut(&StepLog)) -> Result<()> {
        for _ in 0..steps {
            if self.finished() {
                break;
            }
            let log = self.step(data)?;
            on_step(&log);
        }
        Ok(())
    }

    pub fn run_stage(&mut self, data: &Dataset, stage: Stage, on_step: &mut dyn FnMut(&StepLog)) -> Result<()> {
        while !self.stage_finished(stage) {
            self.run_epoch(data, on_step)?;
        }
        Ok(())
    }

    /// Batch of the most recent step, kept for failure diagnostics.
    pub fn last_batch(&self) -> Option<&Batch> {
        self.last_batch.as_ref()
    }

    pub fn into_model(self) -> Model<f32> {
        self.model
    }
}

/// Copies `src` into `dst`, which must hold the same names with the same shapes.
pub fn load_params<R: Real>(dst: &mut ParamStore<R>, src: &ParamStore<R>) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Shape(format!(
            "expected {} parameter tensors, got {}",
            dst.len(),
            src.len()
        )));
    }
    for id in dst.ids().collect::<Vec<_>>() {
        let name = dst.name(id).to_string();
        let sid = src
            .find(&name)
            .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))?;
        let s = src.get(sid);
        if s.shape() != dst.get(id).shape() {
            return Err(Error::Shape(format!(
                "parameter {name}: expected {:?}, got {:?}",
                dst.get(id).shape(),
                s.shape()
            )));
        }
        *dst.get_mut(id) = s.clone();
    }
    Ok(())
}

/// Stage 1 from scratch.
pub fn train_stage1(data: &Dataset, config: TrainConfig, on_step: &mut dyn FnMut(&StepLog)) -> Result<Trainer> {
    let mut t = Trainer::new(config)?;
    t.run_stage(data, Stage::One, on_step)?;
    Ok(t)
}

/// Stage 2 continuing from a trainer that finished stage 1.
pub fn train_stage2(mut trainer: Trainer, data: &Dataset, on_step: &mut dyn FnMut(&StepLog)) -> Result<Trainer> {
    trainer.run_stage(data, Stage::Two, on_step)?;
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::scene;
    use crate::synth::{degrade, DegradationSpec};

    pub(crate) fn tiny_config() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                downsample: 2,
                dim: 8,
                blocks: 1,
                heads: 2,
                affine_hidden: 4,
                iqa_hidden: 4,
            },
            crop_size: 8,
            batch_size: 2,
            stage1_epochs: 2,
            stage2_epochs: 1,
            steps_per_epoch: 2,
            lr: 1e-3,
            decay_start: 1,
            ..TrainConfig::default()
        }
    }

    fn dataset(kinds: &[WeatherKind], per_kind: usize) -> Dataset {
        let mut s = Vec::new();
        for (ki, &k) in kinds.iter().enumerate() {
            for i in 0..per_kind {
                let clean = scene(12, 12, (ki * 10 + i) as u64);
                let sev = 0.2 + 0.6 * i as f64 / per_kind.max(2) as f64;
                let spec = DegradationSpec::new(k, sev, i as u64).unwrap();
                s.push(TrainSample {
                    kind: k,
                    degraded: degrade(&clean, &spec).unwrap(),
                    clean,
                });
            }
        }
        Dataset::new(s).unwrap()
    }

    #[test]
    fn lr_schedule_shape() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(&c, Stage::One, 0), 1e-4);
        assert_eq!(lr_at(&c, Stage::One, 17), 1e-4);
        assert!(lr_at(&c, Stage::One, 18) <= 1e-4);
        assert!(lr_at(&c, Stage::One, 39) > 0.0);
        for e in 1..40 {
            assert!(lr_at(&c, Stage::One, e) <= lr_at(&c, Stage::One, e - 1));
        }
        assert!(lr_at(&c, Stage::Two, 0) < lr_at(&c, Stage::One, 0));
        assert!((lr_at(&c, Stage::Two, 0) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn rank_pairs_are_distinct_and_uniform() {
        let rows = [3, 5, 9];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut counts = [[0usize; 3]; 3];
        for _ in 0..6000 {
            let (a, b) = sample_rank_pair(&rows, &mut rng, false).unwrap();
            assert_ne!(a, b);
            let ia = rows.iter().position(|&r| r == a).unwrap();
            let ib = rows.iter().position(|&r| r == b).unwrap();
            counts[ia][ib] += 1;
        }
        for (i, row) in counts.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                if i != j {
                    assert!((800..1200).contains(&c), "{counts:?}");
                }
            }
        }
    }

    #[test]
    fn single_sample_kind_needs_self_pair_opt_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_rank_pair(&[4], &mut rng, false), Err(Error::Data(_))));
        assert_eq!(sample_rank_pair(&[4], &mut rng, true).unwrap(), (4, 4));
        assert!(sample_rank_pair(&[], &mut rng, true).is_err());
    }

    #[test]
    fn batches_mix_kinds_and_keep_pairs_same_kind() {
        let data = dataset(&[WeatherKind::Haze, WeatherKind::Snow, WeatherKind::Raindrop], 3);
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let b = build_batch(&data, &cfg, &mut rng).unwrap();
            assert!(b.contrastive);
            for i in 0..b.anchors.len() {
                let (ra, rb) = (b.anchors[i].row, b.partners[i].row);
                assert_ne!(ra, rb);
                assert_eq!(data.samples()[ra].kind, b.kinds[i]);
                assert_eq!(data.samples()[rb].kind, b.kinds[i]);
                assert_eq!(b.anchors[i].degraded.height(), 8);
            }
        }
    }

    #[test]
    fn single_kind_batches_disable_contrastive() {
        let data = dataset(&[WeatherKind::Haze], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = build_batch(&data, &tiny_config(), &mut rng).unwrap();
        assert!(!b.contrastive);
    }

    #[test]
    fn oversized_crop_is_a_data_error() {
        let data = dataset(&[WeatherKind::Haze], 2);
        let cfg = TrainConfig {
            crop_size: 16,
            ..tiny_config()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(build_batch(&data, &cfg, &mut rng), Err(Error::Data(_))));
    }

    #[test]
    fn adamw_skips_missing_gradients_and_decays() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::full(&[2], 1.0));
        let b = store.add("b", Tensor::full(&[2], 1.0));
        let mut opt = AdamW::new(&store, 0.5, 0.999, 1e-8, 0.1);
        opt.step(&mut store, &[Some(Tensor::full(&[2], 2.0)), None], 0.1);
        // decoupled decay then a unit-size Adam step on the first update
        let want = 1.0 * (1.0 - 0.01) - 0.1;
        assert!((store.get(a).data()[0] - want).abs() < 1e-9);
        assert_eq!(store.get(b).data(), &[1.0, 1.0]);
        assert_eq!(opt.t, vec![1, 0]);
    }

    #[test]
    fn stage_progression_and_lr_drop() {
        let data = dataset(&[WeatherKind::Haze, WeatherKind::Snow], 2);
        let mut logs = Vec::new();
        let t = train_stage1(&data, tiny_config(), &mut |l| logs.push(l.clone())).unwrap();
        assert_eq!(logs.len(), 4);
        assert_eq!(t.progress().stage, Stage::Two);
        let t = train_stage2(t, &data, &mut |l| logs.push(l.clone())).unwrap();
        assert!(t.finished());
        assert_eq!(logs.len(), 6);
        let s1 = logs
            .iter()
            .filter(|l| l.stage == 1)
            .map(|l| l.lr)
            .fold(f64::MAX, f64::min);
        let s2 = logs.iter().filter(|l| l.stage == 2).map(|l| l.lr).fold(0.0, f64::max);
        assert!(s2 < s1);
        assert!(logs.iter().all(|l| l.total.is_finite()));
        assert!(logs
            .iter()
            .filter(|l| l.stage == 2)
            .all(|l| l.losses.severity == 0.0 && l.losses.cl == 0.0));
    }

    #[test]
    fn stage_two_leaves_encoder_without_gradient() {
        let data = dataset(&[WeatherKind::Haze, WeatherKind::Snow], 2);
        let mut t = Trainer::new(tiny_config()).unwrap();
        t.run_steps(&data, 1, &mut |_| {}).unwrap();
        let batch = t.sample_batch(&data).unwrap();
        let sg = t.gradients(&batch, Stage::Two).unwrap();
        for (id, gr) in t.model().params.ids().zip(&sg.grads) {
            let name = t.model().params.name(id);
            if name.starts_with("die.") {
                assert!(gr.is_none(), "{name}");
            }
        }
        assert!(sg.grads.iter().any(|g| g.is_some()));
    }

    #[test]
    fn restoration_loss_reaches_encoder_after_first_update() {
        let data = dataset(&[WeatherKind::Haze, WeatherKind::Snow], 2);
        let cfg = TrainConfig {
            regime: SeverityRegime::None,
            weights: LossWeights {
                cl: 0.0,
                ..LossWeights::default()
            },
            ..tiny_config()
        };
        let mut t = Trainer::new(cfg).unwrap();
        // zero-initialized output layers need a few updates before gradients reach back
        t.run_steps(&data, 3, &mut |_| {}).unwrap();
        let batch = t.sample_batch(&data).unwrap();
        let sg = t.gradients(&batch, Stage::One).unwrap();
        let id = t.model().params.find("die.stage3.weight").unwrap();
        let g = sg.grads[id.index()].as_ref().unwrap();
        assert!(g.data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn resume_is_bit_exact() {
        let data = dataset(&[WeatherKind::Haze, WeatherKind::Snow], 2);
        let mut a = Trainer::new(tiny_config()).unwrap();
        a.run_steps(&data, 5, &mut |_| {}).unwrap();

        let mut b = Trainer::new(tiny_config()).unwrap();
        b.run_steps(&data, 3, &mut |_| {}).unwrap();
        let mut b = Trainer::resume(
            b.config().clone(),
            b.model().params.clone(),
            Some(b.optimizer().clone()),
            b.rng_state(),
            b.progress(),
        )
        .unwrap();
        b.run_steps(&data, 2, &mut |_| {}).unwrap();
        assert_eq!(a.progress(), b.progress());
        for ((_, x), (_, y)) in a.model().params.iter().zip(b.model().params.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn nan_input_aborts() {
        let mut data = dataset(&[WeatherKind::Haze, WeatherKind::Snow], 2);
        for s in &mut data.samples {
            s.degraded.data_mut().fill(f32::NAN);
        }
        let mut t = Trainer::new(tiny_config()).unwrap();
        assert!(matches!(t.step(&data), Err(Error::NonFinite { .. })));
        let b = t.last_batch().unwrap();
        assert!(b.anchors[0].degraded.data()[0].is_nan());
        assert_eq!(t.progress().global_step, 0);
    }

    #[test]
    fn regimes_parse() {
        for r in SeverityRegime::ALL {
            assert_eq!(r.as_str().parse::<SeverityRegime>().unwrap(), r);
        }
        assert!("rank".parse::<SeverityRegime>().is_err());
    }
}
