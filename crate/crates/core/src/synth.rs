//! Paired (clean, degraded) image synthesis with a known, continuous severity.
//!
//! Every generator is a pure function of the clean image and its [`DegradationSpec`].
//! Randomness comes from a ChaCha8 stream seeded by `spec.seed` on a stream id derived
//! from the weather kind, so no global RNG state is involved.
//!
//! Severity-to-parameter maps are linear. Element sets are nested across severities
//! (the first `n` elements of a fixed seeded sequence), which makes the distortion
//! grow monotonically with severity for a fixed seed.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum WeatherKind {
    RainStreak,
    Haze,
    Snow,
    Raindrop,
}

impl WeatherKind {
    pub const ALL: [WeatherKind; 4] = [
        WeatherKind::RainStreak,
        WeatherKind::Haze,
        WeatherKind::Snow,
        WeatherKind::Raindrop,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            WeatherKind::RainStreak => "rain_streak",
            WeatherKind::Haze => "haze",
            WeatherKind::Snow => "snow",
            WeatherKind::Raindrop => "raindrop",
        }
    }

    pub fn id(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for WeatherKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WeatherKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        WeatherKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(alloc::format!("unknown weather kind '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationSpec {
    pub kind: WeatherKind,
    pub severity: f64,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn new(kind: WeatherKind, severity: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&severity) {
            return Err(Error::Severity(severity));
        }
        Ok(Self { kind, severity, seed })
    }

    fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.kind.id());
        rng
    }

    fn check(&self, expected: WeatherKind) -> Result<()> {
        if self.kind != expected {
            return Err(Error::WrongKind {
                expected,
                got: self.kind,
            });
        }
        if !(0.0..=1.0).contains(&self.severity) {
            return Err(Error::Severity(self.severity));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub clean: Image,
    pub degraded: Image,
    pub spec: DegradationSpec,
}

impl PairedSample {
    pub fn synthesize(clean: Image, spec: DegradationSpec) -> Result<Self> {
        let degraded = degrade(&clean, &spec)?;
        Ok(Self { clean, degraded, spec })
    }
}

/// What a generator drew: number of streaks/flakes/drops and changed pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DegradationLog {
    pub elements: usize,
    pub affected_pixels: usize,
}

/// Haze transmission is uniform: `t = 1 - HAZE_DEPTH * severity`.
pub const HAZE_DEPTH: f64 = 0.9;
pub const HAZE_AIRLIGHT: f64 = 0.9;

pub fn apply_haze(clean: &Image, spec: &DegradationSpec) -> Result<Image> {
    Ok(haze_logged(clean, spec)?.0)
}

fn haze_logged(clean: &Image, spec: &DegradationSpec) -> Result<(Image, DegradationLog)> {
    spec.check(WeatherKind::Haze)?;
    let t = 1.0 - HAZE_DEPTH * spec.severity;
    let mut out = clean.clone();
    let mut affected = 0;
    for v in out.data_mut() {
        let nv = (f64::from(*v) * t + HAZE_AIRLIGHT * (1.0 - t)).clamp(0.0, 1.0) as f32;
        if nv != *v {
            affected += 1;
        }
        *v = nv;
    }
    let log = DegradationLog {
        elements: usize::from(spec.severity > 0.0),
        affected_pixels: affected / 3,
    };
    Ok((out, log))
}

fn element_count(severity: f64, max: usize) -> usize {
    (severity * max as f64).round() as usize
}

const RAIN_DENSITY: usize = 40; // pixels per streak at severity 1
const RAIN_MAX_OPACITY: f64 = 0.8;

pub fn apply_rain_streak(clean: &Image, spec: &DegradationSpec) -> Result<Image> {
    Ok(rain_logged(clean, spec)?.0)
}

fn rain_logged(clean: &Image, spec: &DegradationSpec) -> Result<(Image, DegradationLog)> {
    spec.check(WeatherKind::RainStreak)?;
    let (h, w) = (clean.height(), clean.width());
    let count = element_count(spec.severity, (h * w / RAIN_DENSITY).max(1));
    let mut rng = spec.rng();
    let base_angle: f64 = rng.random_range(-0.35..0.35);
    let scale = h.min(w) as f64;
    let mut field = vec![0.0f64; h * w];
    for _ in 0..count {
        let cx: f64 = rng.random_range(0.0..w as f64);
        let cy: f64 = rng.random_range(0.0..h as f64);
        let len = rng.random_range(0.06..0.18) * scale + 2.0;
        let angle = base_angle + rng.random_range(-0.05..0.05);
        let brightness: f64 = rng.random_range(0.5..1.0);
        let opacity = RAIN_MAX_OPACITY * spec.severity * brightness;
        let (dx, dy) = (angle.sin(), angle.cos());
        let steps = (len * 2.0).ceil() as usize;
        for s in 0..=steps {
            let d = s as f64 * 0.5 - len / 2.0;
            let x = (cx + d * dx).round();
            let y = (cy + d * dy).round();
            if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
                let i = y as usize * w + x as usize;
                field[i] = field[i].max(opacity);
            }
        }
    }
    let mut out = clean.clone();
    let mut affected = 0;
    for (i, &s) in field.iter().enumerate() {
        if s > 0.0 {
            affected += 1;
            for c in 0..3 {
                let v = &mut out.data_mut()[i * 3 + c];
                *v = (f64::from(*v) + s).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok((
        out,
        DegradationLog {
            elements: count,
            affected_pixels: affected,
        },
    ))
}

const SNOW_DENSITY: usize = 30;

pub fn apply_snow(clean: &Image, spec: &DegradationSpec) -> Result<Image> {
    Ok(snow_logged(clean, spec)?.0)
}

fn snow_logged(clean: &Image, spec: &DegradationSpec) -> Result<(Image, DegradationLog)> {
    spec.check(WeatherKind::Snow)?;
    let (h, w) = (clean.height(), clean.width());
    let count = element_count(spec.severity, (h * w / SNOW_DENSITY).max(1));
    let mut rng = spec.rng();
    let size_scale = 0.6 + 0.8 * spec.severity;
    let alpha_scale = 0.3 + 0.7 * spec.severity;
    let mut cover = vec![0.0f64; h * w];
    for _ in 0..count {
        let cx: f64 = rng.random_range(0.0..w as f64);
        let cy: f64 = rng.random_range(0.0..h as f64);
        let r = rng.random_range(0.6..1.8) * size_scale;
        let a = rng.random_range(0.6..1.0) * alpha_scale;
        let y0 = (cy - r).floor().max(0.0) as usize;
        let y1 = ((cy + r).ceil() as usize).min(h.saturating_sub(1));
        let x0 = (cx - r).floor().max(0.0) as usize;
        let x1 = ((cx + r).ceil() as usize).min(w.saturating_sub(1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                if d2 < r * r {
                    let v = a * (1.0 - d2 / (r * r));
                    let i = y * w + x;
                    cover[i] = cover[i].max(v);
                }
            }
        }
    }
    let mut out = clean.clone();
    let mut affected = 0;
    for (i, &a) in cover.iter().enumerate() {
        if a > 0.0 {
            affected += 1;
            for c in 0..3 {
                let v = &mut out.data_mut()[i * 3 + c];
                *v = (f64::from(*v) * (1.0 - a) + a).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok((
        out,
        DegradationLog {
            elements: count,
            affected_pixels: affected,
        },
    ))
}

const DROP_AREA: usize = 400;

pub fn apply_raindrop(clean: &Image, spec: &DegradationSpec) -> Result<Image> {
    Ok(raindrop_logged(clean, spec)?.0)
}

fn box_blur(img: &Image, radius: usize) -> Image {
    let (h, w) = (img.height(), img.width());
    let pass = |src: &Image, horizontal: bool| {
        Image::from_fn(h, w, |y, x, c| {
            let mut s = 0.0f32;
            let mut n = 0.0f32;
            let (pos, lim) = if horizontal { (x, w) } else { (y, h) };
            let lo = pos.saturating_sub(radius);
            let hi = (pos + radius).min(lim - 1);
            for p in lo..=hi {
                s += if horizontal { src.get(y, p, c) } else { src.get(p, x, c) };
                n += 1.0;
            }
            s / n
        })
    };
    pass(&pass(img, true), false)
}

fn raindrop_logged(clean: &Image, spec: &DegradationSpec) -> Result<(Image, DegradationLog)> {
    spec.check(WeatherKind::Raindrop)?;
    let (h, w) = (clean.height(), clean.width());
    let count = element_count(spec.severity, (h * w / DROP_AREA).max(1));
    if count == 0 {
        return Ok((clean.clone(), DegradationLog::default()));
    }
    let mut rng = spec.rng();
    let scale = h.min(w) as f64;
    let mut mask = vec![false; h * w];
    for _ in 0..count {
        let cx: f64 = rng.random_range(0.0..w as f64);
        let cy: f64 = rng.random_range(0.0..h as f64);
        let a = (rng.random_range(0.04..0.1) * scale).max(2.0);
        let b = a * rng.random_range(0.7..1.3);
        let y0 = (cy - b).floor().max(0.0) as usize;
        let y1 = ((cy + b).ceil() as usize).min(h - 1);
        let x0 = (cx - a).floor().max(0.0) as usize;
        let x1 = ((cx + a).ceil() as usize).min(w - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                if ((px - cx) / a).powi(2) + ((py - cy) / b).powi(2) <= 1.0 {
                    mask[y * w + x] = true;
                }
            }
        }
    }
    let blurred = box_blur(clean, (h.min(w) / 32).max(1));
    let mut out = clean.clone();
    let mut affected = 0;
    for (i, &m) in mask.iter().enumerate() {
        if m {
            affected += 1;
            for c in 0..3 {
                let v = blurred.data()[i * 3 + c] * 0.85 + 0.15;
                out.data_mut()[i * 3 + c] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok((
        out,
        DegradationLog {
            elements: count,
            affected_pixels: affected,
        },
    ))
}

/// Dispatches on `spec.kind`.
pub fn degrade(clean: &Image, spec: &DegradationSpec) -> Result<Image> {
    Ok(degrade_logged(clean, spec)?.0)
}

pub fn degrade_logged(clean: &Image, spec: &DegradationSpec) -> Result<(Image, DegradationLog)> {
    match spec.kind {
        WeatherKind::RainStreak => rain_logged(clean, spec),
        WeatherKind::Haze => haze_logged(clean, spec),
        WeatherKind::Snow => snow_logged(clean, spec),
        WeatherKind::Raindrop => raindrop_logged(clean, spec),
    }
}

/// How corpus rows pick their severity.
#[derive(Clone, Debug, PartialEq)]
pub enum SeveritySampler {
    Fixed(f64),
    Uniform {
        low: f64,
        high: f64,
    },
    /// `steps` evenly spaced severities from `low` to `high`, cycled by row index.
    Ladder {
        low: f64,
        high: f64,
        steps: usize,
    },
}

impl SeveritySampler {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| (0.0..=1.0).contains(&v);
        match *self {
            SeveritySampler::Fixed(v) if ok(v) => Ok(()),
            SeveritySampler::Uniform { low, high } if ok(low) && ok(high) && low <= high => Ok(()),
            SeveritySampler::Ladder { low, high, steps } if ok(low) && ok(high) && low <= high && steps >= 1 => Ok(()),
            _ => Err(Error::Config(alloc::format!("invalid severity sampler {self:?}"))),
        }
    }

    fn sample(&self, index: usize, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            SeveritySampler::Fixed(v) => v,
            SeveritySampler::Uniform { low, high } => {
                if low == high {
                    low
                } else {
                    rng.random_range(low..=high)
                }
            }
            SeveritySampler::Ladder { low, high, steps } => {
                if steps == 1 {
                    low
                } else {
                    let k = index % steps;
                    low + (high - low) * k as f64 / (steps - 1) as f64
                }
            }
        }
    }
}

/// One row of a planned corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusItem {
    pub index: usize,
    pub clean_index: usize,
    pub spec: DegradationSpec,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-image generator seed keyed by (corpus seed, kind, image index).
pub fn item_seed(seed: u64, kind: WeatherKind, index: usize) -> u64 {
    splitmix(seed ^ splitmix(kind.id().wrapping_add(1) << 40 ^ index as u64))
}

/// Plans `count` rows per kind, cycling through `clean_count` clean images.
pub fn plan_corpus(
    clean_count: usize,
    counts: &[(WeatherKind, usize)],
    sampler: &SeveritySampler,
    seed: u64,
) -> Result<Vec<CorpusItem>> {
    if clean_count == 0 {
        return Err(Error::Empty("no clean images"));
    }
    sampler.validate()?;
    let mut items = Vec::new();
    for &(kind, n) in counts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x100 + kind.id());
        for i in 0..n {
            let severity = sampler.sample(i, &mut rng);
            items.push(CorpusItem {
                index: items.len(),
                clean_index: i % clean_count,
                spec: DegradationSpec::new(kind, severity, item_seed(seed, kind, i))?,
            });
        }
    }
    Ok(items)
}
