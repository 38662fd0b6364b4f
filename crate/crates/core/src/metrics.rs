//! Image quality metrics and evaluation summaries.

use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::image::Image;
use crate::losses::ssim_var;
use crate::synth::WeatherKind;

/// PSNR reported for identical images, and the upper end of the quality normalization.
pub const PSNR_CAP: f64 = 50.0;

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape(alloc::format!(
            "{}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    if a.data().is_empty() {
        return Err(Error::Empty("image has no pixels"));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    Ok(s / a.data().len() as f64)
}

/// `10 log10(1 / MSE)` for unit-range images, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    psnr_capped(a, b, PSNR_CAP)
}

pub fn psnr_capped(a: &Image, b: &Image, cap: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m <= 0.0 {
        return Ok(cap);
    }
    Ok((-10.0 * m.log10()).min(cap))
}

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5) over valid positions and all three
/// channels. Images smaller than the window use the largest odd window that fits.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    let mut g = Graph::<f64>::inference();
    let x = g.constant(a.to_tensor());
    let y = g.constant(b.to_tensor());
    let s = ssim_var(&mut g, x, y);
    Ok(g.value(s).item())
}

/// Ground-truth quality of a degraded image: PSNR against its clean reference clipped to
/// `[0, 50]` and scaled to `[0, 1]`.
pub fn gt_quality(degraded: &Image, clean: &Image) -> Result<f64> {
    Ok(psnr(degraded, clean)?.clamp(0.0, PSNR_CAP) / PSNR_CAP)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KindScores {
    pub count: usize,
    pub psnr_before: f64,
    pub psnr_after: f64,
    pub ssim_before: f64,
    pub ssim_after: f64,
}

impl KindScores {
    fn add(&mut self, pb: f64, pa: f64, sb: f64, sa: f64) {
        self.count += 1;
        self.psnr_before += pb;
        self.psnr_after += pa;
        self.ssim_before += sb;
        self.ssim_after += sa;
    }

    fn finish(mut self) -> Self {
        if self.count > 0 {
            let n = self.count as f64;
            self.psnr_before /= n;
            self.psnr_after /= n;
            self.ssim_before /= n;
            self.ssim_after /= n;
        }
        self
    }

    pub fn psnr_gain(&self) -> f64 {
        self.psnr_after - self.psnr_before
    }
}

/// Mean scores per weather kind (only kinds present) plus over everything.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub per_kind: Vec<(WeatherKind, KindScores)>,
    pub overall: KindScores,
}

impl EvalReport {
    pub fn kind(&self, kind: WeatherKind) -> Option<&KindScores> {
        self.per_kind.iter().find(|(k, _)| *k == kind).map(|(_, s)| s)
    }
}

pub struct EvalItem<'a> {
    pub kind: WeatherKind,
    pub degraded: &'a Image,
    pub clean: &'a Image,
}

/// Restores every item with `restore` and averages PSNR/SSIM before and after.
pub fn evaluate<'a, F>(items: impl IntoIterator<Item = EvalItem<'a>>, mut restore: F) -> Result<EvalReport>
where
    F: FnMut(&Image) -> Result<Image>,
{
    let mut acc = [KindScores::default(); 4];
    let mut overall = KindScores::default();
    for it in items {
        let out = restore(it.degraded)?;
        let pb = psnr(it.degraded, it.clean)?;
        let pa = psnr(&out, it.clean)?;
        let sb = ssim(it.degraded, it.clean)?;
        let sa = ssim(&out, it.clean)?;
        acc[it.kind.id() as usize].add(pb, pa, sb, sa);
        overall.add(pb, pa, sb, sa);
    }
    if overall.count == 0 {
        return Err(Error::Empty("nothing to evaluate"));
    }
    let per_kind = WeatherKind::ALL
        .iter()
        .filter(|k| acc[k.id() as usize].count > 0)
        .map(|&k| (k, acc[k.id() as usize].finish()))
        .collect();
    Ok(EvalReport {
        per_kind,
        overall: overall.finish(),
    })
}

/// Fraction of same-kind pairs (with distinct ground truth) whose predicted order matches
/// the ground-truth order. `None` when no such pair exists.
pub fn ordering_accuracy(preds: &[f64], gts: &[f64], kinds: &[WeatherKind]) -> Option<f64> {
    let n = preds.len();
    assert!(gts.len() == n && kinds.len() == n);
    let (mut good, mut total) = (0usize, 0usize);
    for i in 0..n {
        for j in i + 1..n {
            if kinds[i] != kinds[j] || (gts[i] - gts[j]).abs() < 1e-9 {
                continue;
            }
            total += 1;
            if (preds[i] - preds[j]) * (gts[i] - gts[j]) > 0.0 {
                good += 1;
            }
        }
    }
    (total > 0).then(|| good as f64 / total as f64)
}

fn min_max(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    v.iter()
        .map(|x| if span > 0.0 { (x - lo) / span } else { 0.5 })
        .collect()
}

/// Mean over same-kind pairs of `|Δpred - Δgt|` after min-max normalizing predictions and
/// ground truth separately within each kind. `None` when no pair exists.
pub fn interval_error(preds: &[f64], gts: &[f64], kinds: &[WeatherKind]) -> Option<f64> {
    let n = preds.len();
    assert!(gts.len() == n && kinds.len() == n);
    let (mut sum, mut total) = (0.0, 0usize);
    for k in WeatherKind::ALL {
        let idx: Vec<usize> = (0..n).filter(|&i| kinds[i] == k).collect();
        if idx.len() < 2 {
            continue;
        }
        let p = min_max(&idx.iter().map(|&i| preds[i]).collect::<Vec<_>>());
        let t = min_max(&idx.iter().map(|&i| gts[i]).collect::<Vec<_>>());
        for a in 0..idx.len() {
            for b in a + 1..idx.len() {
                sum += ((p[a] - p[b]) - (t[a] - t[b])).abs();
                total += 1;
            }
        }
    }
    (total > 0).then(|| sum / total as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean pairwise cosine similarity within the same kind and across kinds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Clustering {
    pub intra: f64,
    pub inter: f64,
}

pub fn type_clustering(maps: &[Vec<f64>], kinds: &[WeatherKind]) -> Option<Clustering> {
    assert_eq!(maps.len(), kinds.len());
    let (mut si, mut ni, mut sx, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..maps.len() {
        for j in i + 1..maps.len() {
            let c = cosine(&maps[i], &maps[j]);
            if kinds[i] == kinds[j] {
                si += c;
                ni += 1;
            } else {
                sx += c;
                nx += 1;
            }
        }
    }
    (ni > 0 && nx > 0).then(|| Clustering {
        intra: si / ni as f64,
        inter: sx / nx as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{gaussian_window, SSIM_C1, SSIM_C2};

    fn img(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f32) -> Image {
        Image::from_fn(h, w, f)
    }

    #[test]
    fn psnr_identical_is_capped() {
        let a = img(8, 8, |y, x, c| ((y + x + c) % 5) as f32 / 5.0);
        assert_eq!(psnr(&a, &a).unwrap(), 50.0);
        assert_eq!(gt_quality(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn psnr_of_uniform_offset() {
        let a = Image::filled(4, 4, 0.5);
        let b = Image::filled(4, 4, 0.6);
        // mse = 0.01 -> 20 dB
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-4);
        assert!((gt_quality(&a, &b).unwrap() - 0.4).abs() < 1e-5);
    }

    #[test]
    fn psnr_rejects_shape_mismatch() {
        let a = Image::filled(4, 4, 0.5);
        let b = Image::filled(4, 5, 0.5);
        assert!(matches!(psnr(&a, &b), Err(Error::Shape(_))));
        assert!(ssim(&a, &b).is_err());
    }

    #[test]
    fn gt_quality_clips_low_end() {
        let a = Image::filled(4, 4, 0.0);
        let b = Image::filled(4, 4, 1.0);
        assert_eq!(psnr(&a, &b).unwrap(), 0.0);
        assert_eq!(gt_quality(&a, &b).unwrap(), 0.0);
    }

    // direct 2-D windowed SSIM with explicit loops
    fn ssim_oracle(a: &Image, b: &Image) -> f64 {
        let k1 = gaussian_window(11, 1.5);
        let (h, w) = (a.height(), a.width());
        let mut total = 0.0;
        let mut n = 0usize;
        for c in 0..3 {
            for y0 in 0..=h - 11 {
                for x0 in 0..=w - 11 {
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in 0..11 {
                        for dx in 0..11 {
                            let wt = k1[dy] * k1[dx];
                            let u = f64::from(a.get(y0 + dy, x0 + dx, c));
                            let v = f64::from(b.get(y0 + dy, x0 + dx, c));
                            mx += wt * u;
                            my += wt * v;
                            sxx += wt * u * u;
                            syy += wt * v * v;
                            sxy += wt * u * v;
                        }
                    }
                    let vx = sxx - mx * mx;
                    let vy = syy - my * my;
                    let cv = sxy - mx * my;
                    total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cv + SSIM_C2))
                        / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                    n += 1;
                }
            }
        }
        total / n as f64
    }

    #[test]
    fn ssim_matches_windowed_oracle() {
        let a = img(16, 18, |y, x, c| ((y * 7 + x * 3 + c * 5) % 11) as f32 / 11.0);
        let b = img(16, 18, |y, x, c| ((y * 5 + x * 2 + c) % 13) as f32 / 13.0);
        let want = ssim_oracle(&a, &b);
        let got = ssim(&a, &b).unwrap();
        assert!((want - got).abs() < 1e-9, "{want} vs {got}");
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
    }

    #[test]
    fn ssim_of_complementary_constants() {
        // zero variance everywhere leaves only the luminance term
        let v = 0.3f32;
        let a = Image::filled(16, 16, v);
        let b = Image::filled(16, 16, 1.0 - v);
        let (p, q) = (f64::from(v), 1.0 - f64::from(v));
        let want = (2.0 * p * q + SSIM_C1) / (p * p + q * q + SSIM_C1);
        let got = ssim(&a, &b).unwrap();
        assert!((want - got).abs() < 1e-6, "{want} vs {got}");
        assert!((ssim_oracle(&a, &b) - got).abs() < 1e-9);
    }

    #[test]
    fn ssim_small_images_use_shrunk_window() {
        let a = img(5, 6, |y, x, _| (y * x) as f32 / 30.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn evaluate_identity_restorer() {
        let clean = Image::filled(12, 12, 0.4);
        let deg = Image::filled(12, 12, 0.5);
        let items = [
            EvalItem {
                kind: WeatherKind::Haze,
                degraded: &deg,
                clean: &clean,
            },
            EvalItem {
                kind: WeatherKind::Snow,
                degraded: &deg,
                clean: &clean,
            },
        ];
        let r = evaluate(items, |x| Ok(x.clone())).unwrap();
        assert_eq!(r.overall.count, 2);
        assert_eq!(r.per_kind.len(), 2);
        assert!(r.kind(WeatherKind::Haze).unwrap().psnr_gain().abs() < 1e-12);
        assert!(r.kind(WeatherKind::RainStreak).is_none());
        let perfect = evaluate(
            [EvalItem {
                kind: WeatherKind::Haze,
                degraded: &deg,
                clean: &clean,
            }],
            |_| Ok(clean.clone()),
        )
        .unwrap();
        assert_eq!(perfect.overall.psnr_after, 50.0);
    }

    #[test]
    fn ranking_statistics() {
        use WeatherKind::*;
        let kinds = [Haze, Haze, Haze, Snow, Snow];
        let gts = [0.2, 0.5, 0.8, 0.3, 0.6];
        let preds = [0.1, 0.3, 0.9, 0.7, 0.2];
        // haze: 3 pairs correct; snow: 1 pair wrong
        assert_eq!(ordering_accuracy(&preds, &gts, &kinds), Some(0.75));
        let perfect = interval_error(&gts, &gts, &kinds).unwrap();
        assert!(perfect.abs() < 1e-12);
        let e = interval_error(&preds, &gts, &kinds).unwrap();
        assert!(e > 0.0);
        assert_eq!(ordering_accuracy(&[0.1], &[0.2], &[Haze]), None);
    }

    #[test]
    fn clustering_separates_directions() {
        use WeatherKind::*;
        let maps = [
            alloc::vec![1.0, 0.0],
            alloc::vec![0.9, 0.1],
            alloc::vec![0.0, 1.0],
            alloc::vec![0.1, 1.0],
        ];
        let c = type_clustering(&maps, &[Haze, Haze, Snow, Snow]).unwrap();
        assert!(c.intra > 0.9 && c.inter < 0.2);
    }
}
