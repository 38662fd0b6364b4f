//! Flat `key = value` configuration files.
//!
//! Keys mirror [`TrainConfig`] fields (`lr`, `batch_size`, `model.dim`, `weight.cl`, ...)
//! plus `synth.*` keys for corpus generation. Later assignments win, so command-line
//! `--set key=value` overrides are applied after the file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use weatherir_core::synth::{SeveritySampler, WeatherKind};
use weatherir_core::trainer::{SeverityRegime, TrainConfig};
use weatherir_core::ModelConfig;

use crate::error::{CliError, Result};

/// Corpus generation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Directory of clean PNGs; procedural scenes are rendered when unset.
    pub clean_dir: Option<PathBuf>,
    /// Side length of procedural scenes.
    pub size: usize,
    /// Number of procedural scenes.
    pub clean_count: usize,
    /// Degraded images per kind.
    pub per_kind: usize,
    pub kinds: Vec<WeatherKind>,
    pub severity: SeveritySampler,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            clean_dir: None,
            size: 64,
            clean_count: 8,
            per_kind: 8,
            kinds: WeatherKind::ALL.to_vec(),
            severity: SeveritySampler::Uniform { low: 0.2, high: 0.9 },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("invalid value '{value}' for '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::Usage(format!("invalid value '{value}' for '{key}'"))),
    }
}

pub fn format_sampler(s: &SeveritySampler) -> String {
    match *s {
        SeveritySampler::Fixed(v) => format!("fixed:{v}"),
        SeveritySampler::Uniform { low, high } => format!("uniform:{low}:{high}"),
        SeveritySampler::Ladder { low, high, steps } => format!("ladder:{low}:{high}:{steps}"),
    }
}

pub fn parse_sampler(value: &str) -> Result<SeveritySampler> {
    let bad = || CliError::Usage(format!("invalid severity sampler '{value}'"));
    let parts: Vec<&str> = value.split(':').collect();
    let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
    let s = match parts.as_slice() {
        ["fixed", v] => SeveritySampler::Fixed(num(v)?),
        ["uniform", lo, hi] => SeveritySampler::Uniform {
            low: num(lo)?,
            high: num(hi)?,
        },
        ["ladder", lo, hi, n] => SeveritySampler::Ladder {
            low: num(lo)?,
            high: num(hi)?,
            steps: n.parse().map_err(|_| bad())?,
        },
        _ => return Err(bad()),
    };
    s.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(s)
}

impl RunConfig {
    /// Applies one assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let m = &mut t.model;
        let s = &mut self.synth;
        match key {
            "model" => {
                *m = match value {
                    "desk" => ModelConfig::desk(),
                    "smoke" => ModelConfig::smoke(),
                    _ => return Err(CliError::Usage(format!("unknown model preset '{value}'"))),
                }
            }
            "model.downsample" => m.downsample = parse(key, value)?,
            "model.dim" => m.dim = parse(key, value)?,
            "model.blocks" => m.blocks = parse(key, value)?,
            "model.heads" => m.heads = parse(key, value)?,
            "model.affine_hidden" => m.affine_hidden = parse(key, value)?,
            "model.iqa_hidden" => m.iqa_hidden = parse(key, value)?,
            "crop_size" => t.crop_size = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "stage1_epochs" => t.stage1_epochs = parse(key, value)?,
            "stage2_epochs" => t.stage2_epochs = parse(key, value)?,
            "steps_per_epoch" => t.steps_per_epoch = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "decay_start" => t.decay_start = parse(key, value)?,
            "stage2_lr_factor" => t.stage2_lr_factor = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "adam_eps" => t.adam_eps = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "margin" => t.margin = parse(key, value)?,
            "temperature" => t.temperature = parse(key, value)?,
            "weight.cl" => t.weights.cl = parse(key, value)?,
            "weight.l1" => t.weights.l1 = parse(key, value)?,
            "weight.ssim" => t.weights.ssim = parse(key, value)?,
            "weight.perceptual" => t.weights.perceptual = parse(key, value)?,
            "regime" => t.regime = parse::<SeverityRegime>(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "perceptual_seed" => t.perceptual_seed = parse(key, value)?,
            "allow_self_pair" => t.allow_self_pair = parse_bool(key, value)?,
            "synth.clean_dir" => s.clean_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "synth.size" => s.size = parse(key, value)?,
            "synth.clean_count" => s.clean_count = parse(key, value)?,
            "synth.per_kind" => s.per_kind = parse(key, value)?,
            "synth.kinds" => {
                s.kinds = value
                    .split(',')
                    .map(|k| parse::<WeatherKind>(key, k.trim()))
                    .collect::<Result<_>>()?
            }
            "synth.severity" => s.severity = parse_sampler(value)?,
            _ => return Err(CliError::Usage(format!("unknown configuration key '{key}'"))),
        }
        Ok(())
    }

    /// Applies a `key=value` string.
    pub fn assign(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("expected key=value, got '{kv}'")))?;
        self.set(k.trim(), v.trim())
    }

    /// Parses a whole file over the defaults. `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            c.assign(line)
                .map_err(|e| CliError::Usage(format!("line {}: {e}", n + 1)))?;
        }
        Ok(c)
    }

    /// Defaults, then the file (if any), then overrides in order, then `seed`.
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut c = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                Self::parse_text(&text)?
            }
            None => Self::default(),
        };
        for kv in overrides {
            c.assign(kv)?;
        }
        if let Some(s) = seed {
            c.train.seed = s;
        }
        c.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(c)
    }

    /// Every key with its effective value; [`RunConfig::parse_text`] reads it back.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let m = &t.model;
        let s = &self.synth;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("model.downsample", m.downsample.to_string());
        kv("model.dim", m.dim.to_string());
        kv("model.blocks", m.blocks.to_string());
        kv("model.heads", m.heads.to_string());
        kv("model.affine_hidden", m.affine_hidden.to_string());
        kv("model.iqa_hidden", m.iqa_hidden.to_string());
        kv("crop_size", t.crop_size.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("stage1_epochs", t.stage1_epochs.to_string());
        kv("stage2_epochs", t.stage2_epochs.to_string());
        kv("steps_per_epoch", t.steps_per_epoch.to_string());
        kv("lr", t.lr.to_string());
        kv("decay_start", t.decay_start.to_string());
        kv("stage2_lr_factor", t.stage2_lr_factor.to_string());
        kv("beta1", t.beta1.to_string());
        kv("beta2", t.beta2.to_string());
        kv("adam_eps", t.adam_eps.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv("margin", t.margin.to_string());
        kv("temperature", t.temperature.to_string());
        kv("weight.cl", t.weights.cl.to_string());
        kv("weight.l1", t.weights.l1.to_string());
        kv("weight.ssim", t.weights.ssim.to_string());
        kv("weight.perceptual", t.weights.perceptual.to_string());
        kv("regime", t.regime.to_string());
        kv("seed", t.seed.to_string());
        kv("perceptual_seed", t.perceptual_seed.to_string());
        kv("allow_self_pair", t.allow_self_pair.to_string());
        let dir = s
            .clean_dir
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        kv("synth.clean_dir", dir);
        kv("synth.size", s.size.to_string());
        kv("synth.clean_count", s.clean_count.to_string());
        kv("synth.per_kind", s.per_kind.to_string());
        let kinds: Vec<&str> = s.kinds.iter().map(|k| k.as_str()).collect();
        kv("synth.kinds", kinds.join(","));
        kv("synth.severity", format_sampler(&s.severity));
        out
    }

    /// Writes the effective configuration as `config.txt` in `dir`.
    pub fn echo_into(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.txt");
        std::fs::write(&path, self.to_text()).map_err(|e| CliError::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut c = RunConfig::default();
        c.assign("model=smoke").unwrap();
        c.assign("lr = 0.00025").unwrap();
        c.assign("weight.cl=0.5").unwrap();
        c.assign("regime=mrl").unwrap();
        c.assign("synth.kinds=haze,snow").unwrap();
        c.assign("synth.severity=ladder:0.1:0.9:9").unwrap();
        let back = RunConfig::parse_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), c.to_text());
        assert_eq!(back.train.model, ModelConfig::smoke());
    }

    #[test]
    fn comments_and_errors() {
        let c = RunConfig::parse_text("# comment\n\nbatch_size = 4 # trailing\n").unwrap();
        assert_eq!(c.train.batch_size, 4);
        assert!(matches!(RunConfig::parse_text("nope = 1"), Err(CliError::Usage(_))));
        assert!(matches!(RunConfig::parse_text("lr = fast"), Err(CliError::Usage(_))));
        assert!(matches!(RunConfig::parse_text("lr"), Err(CliError::Usage(_))));
        assert!(parse_sampler("uniform:0.5:0.2").is_err());
    }

    #[test]
    fn overrides_apply_in_order() {
        let c = RunConfig::load(None, &["lr=0.5".into(), "lr=0.25".into()], Some(9)).unwrap();
        assert_eq!(c.train.lr, 0.25);
        assert_eq!(c.train.seed, 9);
        let bad = RunConfig::load(None, &["batch_size=0".into()], None);
        assert!(matches!(bad, Err(CliError::Usage(_))));
    }
}
