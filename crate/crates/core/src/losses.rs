//! Training objectives, written against [`Graph`] so every term is differentiable.
//!
//! Scalar-valued helpers (`mqrl`, `mrl_baseline`, ...) evaluate the same graph code in
//! `f64` and are the reference entry points for plain numbers.

use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::nn::{Bound, Conv, Init, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Differences smaller than this in magnitude count as sign-compatible with anything.
pub const SIGN_DEAD_ZONE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub cl: f64,
    pub l1: f64,
    pub ssim: f64,
    pub perceptual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cl: 0.2,
            l1: 1.0,
            ssim: 0.5,
            perceptual: 0.04,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.cl, self.l1, self.ssim, self.perceptual];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(alloc::format!(
                "loss weights must be nonnegative: {self:?}"
            )))
        }
    }
}

/// Predicted and ground-truth quality of two same-kind images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankPair {
    pub pred_a: f64,
    pub pred_b: f64,
    pub gt_a: f64,
    pub gt_b: f64,
}

fn check_margin(margin: f64) -> Result<()> {
    if margin >= 0.0 && margin.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(alloc::format!("margin must be >= 0, got {margin}")))
    }
}

/// Sign with the dead zone mapped to 0.
pub fn dead_zone_sign(x: f64) -> i8 {
    if x.abs() < SIGN_DEAD_ZONE {
        0
    } else if x > 0.0 {
        1
    } else {
        -1
    }
}

fn signs_compatible(a: f64, b: f64) -> bool {
    let (sa, sb) = (dead_zone_sign(a), dead_zone_sign(b));
    sa == 0 || sb == 0 || sa == sb
}

/// Marginal quality ranking loss on graph predictions.
///
/// With `diff_in = pred_a - pred_b`, `diff_gt = gt_a - gt_b` and
/// `diff = |diff_gt - diff_in|`: a sign disagreement costs `diff`, otherwise only the
/// part of `diff` beyond `margin` is penalized.
pub fn mqrl_var<R: Real>(g: &mut Graph<R>, pred_a: Var, pred_b: Var, gt_a: f64, gt_b: f64, margin: f64) -> Result<Var> {
    check_margin(margin)?;
    let diff_in = g.sub(pred_a, pred_b);
    let diff_gt = gt_a - gt_b;
    let shape = g.shape(diff_in).to_vec();
    let gt = g.constant(Tensor::full(&shape, R::lit(diff_gt)));
    let gap = g.sub(gt, diff_in);
    let diff = g.abs(gap);
    let din = g.value(diff_in).item().to_f64_lossy();
    if signs_compatible(diff_gt, din) {
        let shifted = g.add_scalar(diff, R::lit(-margin));
        Ok(g.relu(shifted))
    } else {
        Ok(diff)
    }
}

/// Interval-blind margin ranking loss `max(0, -y (pred_a - pred_b) + margin)` with
/// `y = sgn(gt_a - gt_b)`.
pub fn mrl_var<R: Real>(g: &mut Graph<R>, pred_a: Var, pred_b: Var, gt_a: f64, gt_b: f64, margin: f64) -> Result<Var> {
    check_margin(margin)?;
    let y = f64::from(dead_zone_sign(gt_a - gt_b));
    let d = g.sub(pred_a, pred_b);
    let s = g.mul_scalar(d, R::lit(-y));
    let s = g.add_scalar(s, R::lit(margin));
    Ok(g.relu(s))
}

/// Squared error between a predicted and a ground-truth quality score.
pub fn direct_iqa_var<R: Real>(g: &mut Graph<R>, pred: Var, gt: f64) -> Var {
    let shape = g.shape(pred).to_vec();
    let t = g.constant(Tensor::full(&shape, R::lit(gt)));
    let d = g.sub(pred, t);
    let s = g.square(d);
    g.sum(s)
}

fn eval_pair(pair: &RankPair, f: impl Fn(&mut Graph<f64>, Var, Var) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::<f64>::inference();
    let a = g.scalar(pair.pred_a);
    let b = g.scalar(pair.pred_b);
    let l = f(&mut g, a, b)?;
    Ok(g.value(l).item())
}

pub fn mqrl(pair: &RankPair, margin: f64) -> Result<f64> {
    eval_pair(pair, |g, a, b| mqrl_var(g, a, b, pair.gt_a, pair.gt_b, margin))
}

pub fn mrl_baseline(pair: &RankPair, margin: f64) -> Result<f64> {
    eval_pair(pair, |g, a, b| mrl_var(g, a, b, pair.gt_a, pair.gt_b, margin))
}

pub fn direct_iqa_baseline(pred: f64, gt: f64) -> f64 {
    let mut g = Graph::<f64>::inference();
    let p = g.scalar(pred);
    let l = direct_iqa_var(&mut g, p, gt);
    g.value(l).item()
}

fn cosine<R: Real>(g: &mut Graph<R>, a: Var, b: Var) -> Result<Var> {
    let norm = |g: &mut Graph<R>, v: Var| -> Result<Var> {
        let sq = g.square(v);
        let s = g.sum(sq);
        if g.value(s).item().to_f64_lossy() <= 1e-24 {
            return Err(Error::ZeroNorm);
        }
        Ok(g.sqrt(s))
    };
    let na = norm(g, a)?;
    let nb = norm(g, b)?;
    let p = g.mul(a, b);
    let dot = g.sum(p);
    let den = g.mul(na, nb);
    Ok(g.div(dot, den))
}

/// Temperature-scaled cosine-softmax contrastive loss:
/// `-ln( e^{cos(a,p)/t} / (e^{cos(a,p)/t} + sum_j e^{cos(a,n_j)/t}) )`.
///
/// Inputs are flattened to vectors; all must have the same number of elements.
pub fn contrastive_var<R: Real>(
    g: &mut Graph<R>,
    anchor: Var,
    positive: Var,
    negatives: &[Var],
    temperature: f64,
) -> Result<Var> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::Config(alloc::format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    if negatives.is_empty() {
        return Err(Error::Empty("contrastive loss needs at least one negative"));
    }
    let n = g.value(anchor).len();
    let flat = |g: &mut Graph<R>, v: Var| -> Result<Var> {
        if g.value(v).len() != n {
            return Err(Error::Shape("contrastive inputs differ in length".into()));
        }
        Ok(g.reshape(v, &[n]))
    };
    let a = flat(g, anchor)?;
    let inv_t = R::lit(1.0 / temperature);
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    let p = flat(g, positive)?;
    let cp = cosine(g, a, p)?;
    let lp = g.mul_scalar(cp, inv_t);
    logits.push(lp);
    for &neg in negatives {
        let nv = flat(g, neg)?;
        let c = cosine(g, a, nv)?;
        logits.push(g.mul_scalar(c, inv_t));
    }
    let all = g.concat(&logits);
    let lse = g.log_sum_exp(all);
    Ok(g.sub(lse, lp))
}

pub fn contrastive(anchor: &[f64], positive: &[f64], negatives: &[&[f64]], temperature: f64) -> Result<f64> {
    let mut g = Graph::<f64>::inference();
    let leaf = |g: &mut Graph<f64>, v: &[f64]| g.constant(Tensor::from_f64(&[v.len()], v));
    let a = leaf(&mut g, anchor);
    let p = leaf(&mut g, positive);
    let ns: Vec<Var> = negatives.iter().map(|n| leaf(&mut g, n)).collect();
    let l = contrastive_var(&mut g, a, p, &ns, temperature)?;
    Ok(g.value(l).item())
}

/// Mean absolute error.
pub fn l1_var<R: Real>(g: &mut Graph<R>, restored: Var, target: Var) -> Var {
    let d = g.sub(restored, target);
    let a = g.abs(d);
    g.mean(a)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalized 1-D Gaussian window. The window shrinks (keeping sigma) to the largest odd
/// size that fits images smaller than [`SSIM_WINDOW`].
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

pub(crate) fn ssim_window_for(h: usize, w: usize) -> usize {
    let m = h.min(w).min(SSIM_WINDOW);
    if m.is_multiple_of(2) {
        m - 1
    } else {
        m
    }
}

/// Mean SSIM of two `[C, H, W]` tensors over all valid window positions and channels.
pub fn ssim_var<R: Real>(g: &mut Graph<R>, x: Var, y: Var) -> Var {
    let s = g.shape(x).to_vec();
    assert_eq!(&s[..], g.shape(y), "ssim shape mismatch");
    let win = ssim_window_for(s[1], s[2]);
    let k: Vec<R> = gaussian_window(win, SSIM_SIGMA).into_iter().map(R::lit).collect();
    let mx = g.blur(x, &k);
    let my = g.blur(y, &k);
    let xx = g.square(x);
    let yy = g.square(y);
    let xy = g.mul(x, y);
    let bxx = g.blur(xx, &k);
    let byy = g.blur(yy, &k);
    let bxy = g.blur(xy, &k);
    let mx2 = g.square(mx);
    let my2 = g.square(my);
    let mxy = g.mul(mx, my);
    let vx = g.sub(bxx, mx2);
    let vy = g.sub(byy, my2);
    let cxy = g.sub(bxy, mxy);
    let n1 = g.mul_scalar(mxy, R::lit(2.0));
    let n1 = g.add_scalar(n1, R::lit(SSIM_C1));
    let n2 = g.mul_scalar(cxy, R::lit(2.0));
    let n2 = g.add_scalar(n2, R::lit(SSIM_C2));
    let d1 = g.add(mx2, my2);
    let d1 = g.add_scalar(d1, R::lit(SSIM_C1));
    let d2 = g.add(vx, vy);
    let d2 = g.add_scalar(d2, R::lit(SSIM_C2));
    let num = g.mul(n1, n2);
    let den = g.mul(d1, d2);
    let map = g.div(num, den);
    g.mean(map)
}

/// `1 - SSIM(restored, target)`.
pub fn ssim_loss_var<R: Real>(g: &mut Graph<R>, restored: Var, target: Var) -> Var {
    let s = ssim_var(g, restored, target);
    let neg = g.mul_scalar(s, R::lit(-1.0));
    g.add_scalar(neg, R::one())
}

/// Frozen multi-stage feature pyramid used by the perceptual loss.
pub trait FeatureExtractor<R: Real> {
    /// Feature maps of a `[3, H, W]` input, shallow to deep.
    fn stages(&self, g: &mut Graph<R>, x: Var) -> Vec<Var>;
}

/// Seeded, randomly initialized three-stage conv pyramid (conv + ReLU, 2x2 pooling between
/// stages). Weights are constants in the graph and never trained.
#[derive(Clone, Debug)]
pub struct RandomConvPyramid<R> {
    params: ParamStore<R>,
    convs: Vec<Conv>,
}

impl<R: Real> RandomConvPyramid<R> {
    pub const WIDTHS: [usize; 3] = [16, 32, 64];

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x9e7c);
        let mut params = ParamStore::new();
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &w) in Self::WIDTHS.iter().enumerate() {
            // He-style scale keeps activations from vanishing through the ReLUs
            let c = Conv::new(
                &mut params,
                &mut rng,
                &alloc::format!("per{i}"),
                cin,
                w,
                3,
                1,
                Init::Uniform,
            );
            let scale = R::lit(3.0f64.sqrt() * 2.0f64.sqrt());
            for v in params.get_mut(c.weight).data_mut() {
                *v *= scale;
            }
            let _ = rng.random::<u32>();
            convs.push(c);
            cin = w;
        }
        Self { params, convs }
    }

    pub fn params(&self) -> &ParamStore<R> {
        &self.params
    }
}

impl<R: Real> FeatureExtractor<R> for RandomConvPyramid<R> {
    fn stages(&self, g: &mut Graph<R>, x: Var) -> Vec<Var> {
        let p: Bound = self.params.bind(g, false);
        let mut out = Vec::new();
        let mut h = x;
        for (i, c) in self.convs.iter().enumerate() {
            if i > 0 {
                let s = g.shape(h).to_vec();
                if s[1].is_multiple_of(2) && s[2].is_multiple_of(2) && s[1] >= 2 && s[2] >= 2 {
                    h = g.avg_pool2(h);
                }
            }
            let y = c.forward(g, &p, h);
            h = g.relu(y);
            out.push(h);
        }
        out
    }
}

/// `sum_j mean((psi_j(restored) - psi_j(target))^2)`.
pub fn perceptual_var<R: Real, E: FeatureExtractor<R> + ?Sized>(
    g: &mut Graph<R>,
    restored: Var,
    target: Var,
    extractor: &E,
) -> Var {
    let fr = extractor.stages(g, restored);
    let ft = extractor.stages(g, target);
    let mut total: Option<Var> = None;
    for (a, b) in fr.into_iter().zip(ft) {
        let d = g.sub(a, b);
        let sq = g.square(d);
        let m = g.mean(sq);
        total = Some(match total {
            Some(t) => g.add(t, m),
            None => m,
        });
    }
    total.expect("extractor produced no stages")
}

fn eval_images(a: &Image, b: &Image, f: impl Fn(&mut Graph<f64>, Var, Var) -> Var) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Shape(alloc::format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let mut g = Graph::<f64>::inference();
    let x = g.constant(a.to_tensor());
    let y = g.constant(b.to_tensor());
    let l = f(&mut g, x, y);
    Ok(g.value(l).item())
}

pub fn l1(restored: &Image, target: &Image) -> Result<f64> {
    eval_images(restored, target, l1_var)
}

pub fn ssim_loss(restored: &Image, target: &Image) -> Result<f64> {
    eval_images(restored, target, ssim_loss_var)
}

pub fn perceptual<E: FeatureExtractor<f64> + ?Sized>(restored: &Image, target: &Image, extractor: &E) -> Result<f64> {
    eval_images(restored, target, |g, x, y| perceptual_var(g, x, y, extractor))
}

/// Per-term values entering the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub severity: f64,
    pub cl: f64,
    pub l1: f64,
    pub ssim: f64,
    pub perceptual: f64,
}

/// `severity + w.cl * cl + w.l1 * l1 + w.ssim * ssim + w.perceptual * perceptual`.
/// The severity (ranking) term carries no weight.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    c.severity + w.cl * c.cl + w.l1 * c.l1 + w.ssim * c.ssim + w.perceptual * c.perceptual
}

/// Graph version of [`total_loss`]; absent terms are skipped.
pub fn total_loss_var<R: Real>(
    g: &mut Graph<R>,
    severity: Option<Var>,
    cl: Option<Var>,
    l1: Option<Var>,
    ssim: Option<Var>,
    perceptual: Option<Var>,
    w: &LossWeights,
) -> Option<Var> {
    let terms = [
        (severity, 1.0),
        (cl, w.cl),
        (l1, w.l1),
        (ssim, w.ssim),
        (perceptual, w.perceptual),
    ];
    let mut acc: Option<Var> = None;
    for (t, wt) in terms {
        if let Some(t) = t {
            let s = g.mul_scalar(t, R::lit(wt));
            acc = Some(match acc {
                Some(a) => g.add(a, s),
                None => s,
            });
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(pa: f64, pb: f64, ga: f64, gb: f64) -> RankPair {
        RankPair {
            pred_a: pa,
            pred_b: pb,
            gt_a: ga,
            gt_b: gb,
        }
    }

    #[test]
    fn mqrl_sign_match_subtracts_margin() {
        let v = mqrl(&pair(0.8, 0.5, 0.7, 0.6), 0.05).unwrap();
        assert!((v - 0.15).abs() < 1e-6, "{v}");
    }

    #[test]
    fn mqrl_sign_mismatch_keeps_full_distance() {
        let v = mqrl(&pair(0.3, 0.5, 0.6, 0.5), 0.05).unwrap();
        assert!((v - 0.3).abs() < 1e-6, "{v}");
    }

    #[test]
    fn mqrl_margin_absorbs_small_gap() {
        let v = mqrl(&pair(0.62, 0.5, 0.6, 0.5), 0.05).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn mqrl_rejects_negative_margin() {
        assert!(matches!(mqrl(&pair(0.1, 0.2, 0.3, 0.4), -0.1), Err(Error::Config(_))));
        assert!(mrl_baseline(&pair(0.1, 0.2, 0.3, 0.4), -0.1).is_err());
    }

    #[test]
    fn mqrl_zero_gt_difference_is_compatible() {
        // diff_gt = 0 sits in the dead zone: margin branch
        let v = mqrl(&pair(0.53, 0.5, 0.5, 0.5), 0.05).unwrap();
        assert_eq!(v, 0.0);
        let v = mqrl(&pair(0.6, 0.5, 0.5, 0.5), 0.05).unwrap();
        assert!((v - 0.05).abs() < 1e-9);
    }

    #[test]
    fn mrl_cases() {
        assert_eq!(mrl_baseline(&pair(0.9, 0.5, 0.7, 0.6), 0.05).unwrap(), 0.0);
        assert!(mrl_baseline(&pair(0.4, 0.6, 0.7, 0.6), 0.05).unwrap() > 0.0);
    }

    #[test]
    fn direct_iqa_values() {
        assert_eq!(direct_iqa_baseline(0.4, 0.4), 0.0);
        assert!((direct_iqa_baseline(0.2, 0.7) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn contrastive_symmetric_case_is_ln_n_plus_one() {
        let a = [1.0, 0.0];
        let v = contrastive(&a, &a, &[&a, &a, &a], 0.25).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-6, "{v}");
    }

    #[test]
    fn contrastive_saturates() {
        let a = [1.0, 2.0];
        let n = [-1.0, -2.0];
        let v = contrastive(&a, &a, &[&n, &n, &n], 0.07).unwrap();
        let want = (1.0 + 3.0 * (-2.0f64 / 0.07).exp()).ln();
        assert!((v - want).abs() < 1e-12);
        assert!(v < 1e-9);
    }

    #[test]
    fn contrastive_errors() {
        let a = [1.0, 0.0];
        let z = [0.0, 0.0];
        assert_eq!(contrastive(&a, &z, &[&a], 0.5), Err(Error::ZeroNorm));
        assert!(matches!(contrastive(&a, &a, &[&a], 0.0), Err(Error::Config(_))));
        assert!(contrastive(&a, &a, &[], 0.5).is_err());
    }

    #[test]
    fn total_loss_combines_linearly() {
        let w = LossWeights {
            cl: 0.0,
            l1: 1.0,
            ssim: 0.0,
            perceptual: 0.0,
        };
        let c = LossComponents {
            severity: 0.3,
            cl: 5.0,
            l1: 0.2,
            ssim: 7.0,
            perceptual: 9.0,
        };
        assert!((total_loss(&c, &w) - 0.5).abs() < 1e-12);
        assert_eq!(total_loss(&LossComponents::default(), &LossWeights::default()), 0.0);
    }

    #[test]
    fn gaussian_window_is_normalized_and_symmetric() {
        let k = gaussian_window(11, 1.5);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..5 {
            assert!((k[i] - k[10 - i]).abs() < 1e-15);
        }
        assert_eq!(ssim_window_for(8, 20), 7);
        assert_eq!(ssim_window_for(64, 64), 11);
    }

    #[test]
    fn perceptual_pyramid_is_seeded() {
        let a = RandomConvPyramid::<f32>::new(3);
        let b = RandomConvPyramid::<f32>::new(3);
        let c = RandomConvPyramid::<f32>::new(4);
        let first = |p: &RandomConvPyramid<f32>| p.params().iter().next().unwrap().1.clone();
        assert_eq!(first(&a), first(&b));
        assert_ne!(first(&a), first(&c));
    }
}

#[cfg(test)]
mod oracle_tests {
    use super::*;
    use crate::gradcheck::random_input;

    fn pair(pa: f64, pb: f64, ga: f64, gb: f64) -> RankPair {
        RankPair {
            pred_a: pa,
            pred_b: pb,
            gt_a: ga,
            gt_b: gb,
        }
    }

    fn noise(h: usize, w: usize, seed: u64) -> Image {
        let v = random_input(3 * h * w, 0.0, 1.0, seed);
        Image::new(h, w, v.into_iter().map(|x| x as f32).collect())
    }

    #[test]
    fn equal_rankings_separated_only_by_intervals() {
        // both predictions rank a above b like the ground truth, by a wide gap
        let exact = pair(0.8, 0.4, 0.9, 0.5);
        let squeezed = pair(0.6, 0.5, 0.9, 0.5);
        let eps = 0.05;
        assert_eq!(mrl_baseline(&exact, eps).unwrap(), 0.0);
        assert_eq!(mrl_baseline(&squeezed, eps).unwrap(), 0.0);
        let (a, b) = (mqrl(&exact, eps).unwrap(), mqrl(&squeezed, eps).unwrap());
        assert_eq!(a, 0.0);
        assert!((b - 0.25).abs() < 1e-9);
        assert!(b - a >= eps);
    }

    #[test]
    fn contrastive_matches_softmax_loop() {
        let unit = |seed| {
            let v = random_input(8, -1.0, 1.0, seed);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect::<Vec<_>>()
        };
        let a = unit(1);
        let p = unit(2);
        let negs: Vec<Vec<f64>> = (3..8).map(unit).collect();
        let refs: Vec<&[f64]> = negs.iter().map(|n| n.as_slice()).collect();
        let tau = 0.25;
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
        let pos = (dot(&a, &p) / tau).exp();
        let mut den = pos;
        for n in &negs {
            den += (dot(&a, n) / tau).exp();
        }
        let want = -(pos / den).ln();
        let got = contrastive(&a, &p, &refs, tau).unwrap();
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn l1_values() {
        let a = noise(5, 6, 1);
        assert_eq!(l1(&a, &a).unwrap(), 0.0);
        assert_eq!(l1(&Image::filled(4, 4, 0.0), &Image::filled(4, 4, 1.0)).unwrap(), 1.0);
        let b = noise(5, 6, 2);
        let want = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| f64::from((x - y).abs()))
            .sum::<f64>()
            / 90.0;
        assert!((l1(&a, &b).unwrap() - want).abs() < 1e-6);
        assert!(l1(&a, &noise(5, 5, 1)).is_err());
    }

    #[test]
    fn ssim_loss_bounds() {
        let a = noise(12, 12, 3);
        assert!(ssim_loss(&a, &a).unwrap().abs() < 1e-12);
        let inv = Image::new(12, 12, a.data().iter().map(|v| 1.0 - v).collect());
        let v = ssim_loss(&a, &inv).unwrap();
        assert!((0.0..=2.0).contains(&v) && v > 1.0, "{v}");
    }

    #[test]
    fn perceptual_matches_loop_oracle() {
        let ext = RandomConvPyramid::<f64>::new(7);
        let (a, b) = (noise(8, 8, 4), noise(8, 8, 5));
        assert_eq!(perceptual(&a, &a, &ext).unwrap(), 0.0);

        // stage 0 by explicit 3x3 zero-padded convolution + ReLU
        let w = ext
            .params()
            .get(ext.params().find("per0.weight").unwrap())
            .data()
            .to_vec();
        let bias = ext
            .params()
            .get(ext.params().find("per0.bias").unwrap())
            .data()
            .to_vec();
        let conv = |img: &Image| {
            let mut out = alloc::vec![0.0f64; 16 * 64];
            for o in 0..16 {
                for y in 0..8 {
                    for x in 0..8 {
                        let mut acc = bias[o];
                        for c in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (iy, ix) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                                    if (0..8).contains(&iy) && (0..8).contains(&ix) {
                                        let v = f64::from(img.get(iy as usize, ix as usize, c));
                                        acc += w[((o * 3 + c) * 3 + ky) * 3 + kx] * v;
                                    }
                                }
                            }
                        }
                        out[(o * 8 + y) * 8 + x] = acc.max(0.0);
                    }
                }
            }
            out
        };
        let (fa, fb) = (conv(&a), conv(&b));
        let mut g = Graph::<f64>::inference();
        let xa = g.constant(a.to_tensor());
        let xb = g.constant(b.to_tensor());
        let sa = ext.stages(&mut g, xa);
        let sb = ext.stages(&mut g, xb);
        for (u, v) in g.value(sa[0]).data().iter().zip(&fa) {
            assert!((u - v).abs() < 1e-9);
        }
        let mut want = 0.0;
        for (x, y) in sa.iter().zip(&sb) {
            let (x, y) = (g.value(*x).data(), g.value(*y).data());
            want += x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / x.len() as f64;
        }
        let first = fa.iter().zip(&fb).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / fa.len() as f64;
        assert!(first > 0.0 && first < want);
        assert!((perceptual(&a, &b, &ext).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn total_loss_is_linear_per_component() {
        let w = LossWeights::default();
        let base = LossComponents {
            severity: 0.1,
            cl: 0.2,
            l1: 0.3,
            ssim: 0.4,
            perceptual: 0.5,
        };
        let t0 = total_loss(&base, &w);
        let weights = [1.0, w.cl, w.l1, w.ssim, w.perceptual];
        for (k, wt) in weights.iter().enumerate() {
            let mut c = base;
            let f = [&mut c.severity, &mut c.cl, &mut c.l1, &mut c.ssim, &mut c.perceptual];
            *f.into_iter().nth(k).unwrap() += 1.0;
            assert!((total_loss(&c, &w) - t0 - wt).abs() < 1e-12);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn unit() -> impl Strategy<Value = f64> {
            0.0f64..1.0
        }

        proptest! {
            #[test]
            fn mqrl_nonnegative_and_symmetric(pa in unit(), pb in unit(), ga in unit(), gb in unit(), eps in 0.0f64..0.2) {
                let v = mqrl(&pair(pa, pb, ga, gb), eps).unwrap();
                prop_assert!(v >= 0.0);
                let s = mqrl(&pair(pb, pa, gb, ga), eps).unwrap();
                prop_assert!((v - s).abs() < 1e-12);
                let diff = ((ga - gb) - (pa - pb)).abs();
                if v == 0.0 {
                    prop_assert!(diff <= eps + 1e-12);
                }
            }

            #[test]
            fn contrastive_ignores_positive_rescaling(
                v in proptest::collection::vec(-1.0f64..1.0, 12),
                k in 0.1f64..10.0,
                which in 0usize..3,
            ) {
                let (a, p, n) = (&v[0..4], &v[4..8], &v[8..12]);
                prop_assume!([a, p, n].iter().all(|x| x.iter().map(|t| t * t).sum::<f64>() > 1e-3));
                let base = contrastive(a, p, &[n], 0.25).unwrap();
                let scaled: Vec<f64> = v[which * 4..which * 4 + 4].iter().map(|t| t * k).collect();
                let mut parts = [a.to_vec(), p.to_vec(), n.to_vec()];
                parts[which] = scaled;
                let other = contrastive(&parts[0], &parts[1], &[&parts[2]], 0.25).unwrap();
                prop_assert!((base - other).abs() < 1e-9);
            }
        }
    }
}
