//! Inference-time tools: progressive restoration and restoration-level modulation along
//! the latent severity direction.

use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::encoder::{SeverityVector, TypeMap};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::Model;
use crate::real::Real;
use crate::tensor::Tensor;

/// Applies the restorer `n` times, feeding each output back in. Returns every
/// intermediate result; `out[0]` is a single restoration.
pub fn iterative_restore<R: Real>(model: &Model<R>, image: &Image, n: usize) -> Result<Vec<Image>> {
    if n == 0 {
        return Err(Error::Config("iteration count must be at least 1".into()));
    }
    let mut out: Vec<Image> = Vec::with_capacity(n);
    for _ in 0..n {
        let next = model.restore(out.last().unwrap_or(image))?;
        out.push(next);
    }
    Ok(out)
}

/// Degradation information of an image and of its restoration.
#[derive(Clone, Debug)]
pub struct Direction<R> {
    pub type_map: TypeMap<R>,
    /// Severity vector of the input.
    pub severity: SeverityVector<R>,
    /// Severity vector of the restored input.
    pub restored_severity: SeverityVector<R>,
}

impl<R: Real> Direction<R> {
    /// `restored_severity - severity`.
    pub fn vector(&self) -> Vec<f64> {
        self.restored_severity
            .to_f64()
            .iter()
            .zip(self.severity.to_f64())
            .map(|(b, a)| b - a)
            .collect()
    }

    /// `(1 - alpha) * severity + alpha * restored_severity`, exact at both endpoints.
    pub fn interpolate(&self, alpha: f64) -> SeverityVector<R> {
        let a = R::lit(alpha);
        let b = R::lit(1.0 - alpha);
        let data = self
            .severity
            .0
            .data()
            .iter()
            .zip(self.restored_severity.0.data())
            .map(|(&s, &t)| b * s + a * t)
            .collect();
        SeverityVector(Tensor::new(self.severity.0.shape(), data))
    }
}

/// Encodes `image`, restores it, and re-encodes the restoration.
pub fn find_direction<R: Real>(model: &Model<R>, image: &Image) -> Result<Direction<R>> {
    let (type_map, severity) = model.encode_any(image)?;
    let restored = model.restore_with(image, &type_map, &severity)?;
    let (_, restored_severity) = model.encode_any(&restored)?;
    Ok(Direction {
        type_map,
        severity,
        restored_severity,
    })
}

/// Restores with severity moved by `alpha` along a precomputed direction; the type map is
/// held fixed.
pub fn modulate_with<R: Real>(model: &Model<R>, image: &Image, dir: &Direction<R>, alpha: f64) -> Result<Image> {
    if !alpha.is_finite() {
        return Err(Error::Config("alpha must be finite".into()));
    }
    model.restore_with(image, &dir.type_map, &dir.interpolate(alpha))
}

/// `alpha = 0` reproduces [`Model::restore`]; `alpha = 1` conditions on the severity of the
/// restored image; values outside `[0, 1]` extrapolate.
pub fn modulate<R: Real>(model: &Model<R>, image: &Image, alpha: f64) -> Result<Image> {
    let dir = find_direction(model, image)?;
    modulate_with(model, image, &dir, alpha)
}

/// Root-mean-square difference between two images.
pub fn residual_energy(a: &Image, b: &Image) -> Result<f64> {
    Ok(crate::metrics::mse(a, b)?.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlphaMetrics {
    pub alpha: f64,
    /// RMS difference between the modulated output and the input.
    pub residual_energy: f64,
    /// Predicted quality of the interpolated severity vector.
    pub predicted_quality: f64,
}

#[derive(Clone, Debug)]
pub struct ModulationGrid {
    /// Panels side by side, in `alphas` order.
    pub sheet: Image,
    pub panels: Vec<Image>,
    pub metrics: Vec<AlphaMetrics>,
}

pub fn modulation_grid<R: Real>(model: &Model<R>, image: &Image, alphas: &[f64]) -> Result<ModulationGrid> {
    if alphas.is_empty() {
        return Err(Error::Empty("no alpha values"));
    }
    let dir = find_direction(model, image)?;
    let mut panels = Vec::with_capacity(alphas.len());
    let mut metrics = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let out = modulate_with(model, image, &dir, alpha)?;
        metrics.push(AlphaMetrics {
            alpha,
            residual_energy: residual_energy(&out, image)?,
            predicted_quality: model.predict_iqa(&dir.interpolate(alpha))?.0,
        });
        panels.push(out);
    }
    Ok(ModulationGrid {
        sheet: Image::hstack(&panels)?,
        panels,
        metrics,
    })
}

/// Whether `values` is non-decreasing or non-increasing.
pub fn is_monotone(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[1] >= w[0]) || values.windows(2).all(|w| w[1] <= w[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> Model<f32> {
        let mut m = Model::new(ModelConfig::smoke(), 5).unwrap();
        // perturb the zero-initialized layers so conditioning actually matters
        let ids: Vec<_> = m.params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            for (i, v) in m.params.get_mut(id).data_mut().iter_mut().enumerate() {
                *v += 0.01 * (((i * 31 + k * 17) % 13) as f32 - 6.0) / 6.0;
            }
        }
        m
    }

    fn image() -> Image {
        Image::from_fn(20, 24, |y, x, c| 0.2 + 0.6 * (((y * 3 + x * 5 + c) % 9) as f32 / 9.0))
    }

    #[test]
    fn single_iteration_is_restore() {
        let m = model();
        let img = image();
        let out = iterative_restore(&m, &img, 1).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0], m.restore(&img).unwrap());
        let three = iterative_restore(&m, &img, 3).unwrap();
        assert_eq!(three[2], m.restore(&three[1]).unwrap());
        assert!(three.iter().all(|o| o.same_shape(&img) && o.in_unit_range()));
        assert!(iterative_restore(&m, &img, 0).is_err());
    }

    #[test]
    fn modulation_endpoints() {
        let m = model();
        let img = image();
        assert_eq!(modulate(&m, &img, 0.0).unwrap(), m.restore(&img).unwrap());
        let dir = find_direction(&m, &img).unwrap();
        let one = modulate_with(&m, &img, &dir, 1.0).unwrap();
        let want = m.restore_with(&img, &dir.type_map, &dir.restored_severity).unwrap();
        assert_eq!(one, want);
        assert!(dir.vector().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn direction_is_deterministic() {
        let m = model();
        let img = image();
        let a = find_direction(&m, &img).unwrap();
        let b = find_direction(&m, &img).unwrap();
        assert_eq!(a.restored_severity, b.restored_severity);
        assert_eq!(a.type_map, b.type_map);
    }

    #[test]
    fn grid_layout() {
        let m = model();
        let img = image();
        let alphas = [-0.5, 0.0, 0.5, 1.0];
        let g = modulation_grid(&m, &img, &alphas).unwrap();
        assert_eq!(g.sheet.width(), img.width() * 4);
        assert_eq!(g.sheet.height(), img.height());
        assert_eq!(g.panels[1], m.restore(&img).unwrap());
        assert_eq!(g.metrics.len(), 4);
        assert!(modulation_grid(&m, &img, &[]).is_err());
    }

    #[test]
    fn monotone_helper() {
        assert!(is_monotone(&[1.0, 2.0, 2.0, 3.0]));
        assert!(is_monotone(&[3.0, 1.0]));
        assert!(!is_monotone(&[1.0, 3.0, 2.0]));
    }
}
