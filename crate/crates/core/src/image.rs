//! RGB images with values in `[0, 1]`, stored height x width x 3.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width * 3, "image buffer size");
        Self { height, width, data }
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self::new(height, width, vec![value; height * width * 3])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn clamped(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    /// Channel-major tensor `[3, H, W]`.
    pub fn to_tensor<R: Real>(&self) -> Tensor<R> {
        let (h, w) = (self.height, self.width);
        let mut out = vec![R::zero(); 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[(c * h + y) * w + x] = R::from_f32(self.get(y, x, c)).unwrap();
                }
            }
        }
        Tensor::new(&[3, h, w], out)
    }

    pub fn from_tensor<R: Real>(t: &Tensor<R>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Shape(alloc::format!("expected [3, H, W] tensor, got {s:?}")));
        }
        let (h, w) = (s[1], s[2]);
        let d = t.data();
        Ok(Self::from_fn(h, w, |y, x, c| {
            d[(c * h + y) * w + x].to_f32().unwrap_or(f32::NAN)
        }))
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Shape(alloc::format!(
                "crop {height}x{width}+{top}+{left} outside {}x{}",
                self.height,
                self.width
            )));
        }
        Ok(Self::from_fn(height, width, |y, x, c| self.get(top + y, left + x, c)))
    }

    /// Reflect-pads bottom and right so both dims are multiples of `multiple`.
    pub fn pad_to_multiple(&self, multiple: usize) -> Self {
        let ph = self.height.div_ceil(multiple) * multiple;
        let pw = self.width.div_ceil(multiple) * multiple;
        if ph == self.height && pw == self.width {
            return self.clone();
        }
        let reflect = |i: usize, n: usize| -> usize {
            if n == 1 {
                return 0;
            }
            let period = 2 * (n - 1);
            let m = i % period;
            if m < n {
                m
            } else {
                period - m
            }
        };
        Self::from_fn(ph, pw, |y, x, c| {
            self.get(reflect(y, self.height), reflect(x, self.width), c)
        })
    }

    /// Panels side by side, left to right. All panels must share a shape.
    pub fn hstack(panels: &[Image]) -> Result<Self> {
        let first = panels.first().ok_or(Error::Empty("no panels"))?;
        if panels.iter().any(|p| !p.same_shape(first)) {
            return Err(Error::Shape("panels differ in shape".into()));
        }
        let (h, w) = (first.height, first.width);
        Ok(Self::from_fn(h, w * panels.len(), |y, x, c| {
            panels[x / w].get(y, x % w, c)
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip_is_exact() {
        let img = Image::from_fn(3, 5, |y, x, c| (y * 15 + x * 3 + c) as f32 / 45.0);
        let t: Tensor<f32> = img.to_tensor();
        assert_eq!(t.shape(), &[3, 3, 5]);
        assert_eq!(Image::from_tensor(&t).unwrap(), img);
    }

    #[test]
    fn reflect_pad_keeps_original_region() {
        let img = Image::from_fn(5, 6, |y, x, c| (y * 18 + x * 3 + c) as f32 / 90.0);
        let p = img.pad_to_multiple(4);
        assert_eq!((p.height(), p.width()), (8, 8));
        assert_eq!(p.crop(0, 0, 5, 6).unwrap(), img);
        assert_eq!(p.get(5, 0, 0), img.get(3, 0, 0));
    }

    #[test]
    fn crop_out_of_bounds_is_error() {
        let img = Image::filled(4, 4, 0.5);
        assert!(img.crop(2, 2, 3, 1).is_err());
    }
}
