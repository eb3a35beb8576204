use image::imageops::{self, FilterType};
use image::{ImageBuffer, Rgb, RgbImage};
use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};

use super::normalize;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Crop {
    #[default]
    None,
    /// Largest centered square (178 × 218 → 178 × 178).
    CenterSquare,
    /// Centered `size × size` window.
    Center { size: usize },
}

/// Crop, resize to a square and map bytes to `[−1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessSpec {
    #[serde(default)]
    pub crop: Crop,
    pub resize_to: usize,
}

impl PreprocessSpec {
    pub fn new(crop: Crop, resize_to: usize) -> Result<Self> {
        let p = Self { crop, resize_to };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.resize_to < 8 {
            return Err(Error::Config(format!("resize_to must be at least 8, got {}", self.resize_to)));
        }
        if let Crop::Center { size: 0 } = self.crop {
            return Err(Error::Config("crop size must be positive".into()));
        }
        Ok(())
    }

    /// Crop window `(top, left, height, width)` for an `h × w` image.
    pub fn crop_window(&self, h: usize, w: usize) -> Result<(usize, usize, usize, usize)> {
        match self.crop {
            Crop::None => Ok((0, 0, h, w)),
            Crop::CenterSquare => {
                let m = h.min(w);
                Ok(((h - m) / 2, (w - m) / 2, m, m))
            }
            Crop::Center { size } => {
                if size > h || size > w {
                    return Err(Error::Data(format!("cannot crop {size}x{size} from a {h}x{w} image")));
                }
                Ok(((h - size) / 2, (w - size) / 2, size, size))
            }
        }
    }

    pub fn apply(&self, img: &RgbImage) -> Result<Array3<f64>> {
        let (w, h) = img.dimensions();
        let (top, left, ch, cw) = self.crop_window(h as usize, w as usize)?;
        let cropped = imageops::crop_imm(img, left as u32, top as u32, cw as u32, ch as u32).to_image();
        let r = self.resize_to as u32;
        let resized = if cropped.dimensions() == (r, r) {
            cropped
        } else {
            imageops::resize(&cropped, r, r, FilterType::Triangle)
        };
        Ok(Array3::from_shape_fn((r as usize, r as usize, 3), |(y, x, k)| {
            normalize(resized.get_pixel(x as u32, y as u32)[k])
        }))
    }

    /// The same pipeline on an already normalized tensor. Identity when no
    /// crop is requested and the size already matches.
    pub fn apply_tensor(&self, t: &Array3<f64>) -> Result<Array3<f64>> {
        let (h, w, _) = t.dim();
        let (top, left, ch, cw) = self.crop_window(h, w)?;
        let cropped = t.slice(s![top..top + ch, left..left + cw, ..]).to_owned();
        let r = self.resize_to;
        if (ch, cw) == (r, r) {
            return Ok(cropped);
        }
        let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
            ImageBuffer::from_fn(cw as u32, ch as u32, |x, y| {
                let p = |k| cropped[[y as usize, x as usize, k]] as f32;
                Rgb([p(0), p(1), p(2)])
            });
        let resized = imageops::resize(&buf, r as u32, r as u32, FilterType::Triangle);
        Ok(Array3::from_shape_fn((r, r, 3), |(y, x, k)| {
            (resized.get_pixel(x as u32, y as u32)[k] as f64).clamp(-1.0, 1.0)
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x * 7 % 256) as u8, (y * 5 % 256) as u8, ((x + y) % 256) as u8]))
    }

    #[test]
    fn celeba_style_crop_and_resize() {
        let p = PreprocessSpec::new(Crop::CenterSquare, 128).unwrap();
        assert_eq!(p.crop_window(218, 178).unwrap(), (20, 0, 178, 178));
        let t = p.apply(&checker(178, 218)).unwrap();
        assert_eq!(t.dim(), (128, 128, 3));
        assert!(t.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn rafd_style_crop() {
        let p = PreprocessSpec::new(Crop::Center { size: 256 }, 128).unwrap();
        assert_eq!(p.crop_window(1024, 681).unwrap(), (384, 212, 256, 256));
        assert_eq!(p.apply(&checker(300, 280)).unwrap().dim(), (128, 128, 3));
        assert!(p.apply(&checker(200, 280)).is_err());
    }

    #[test]
    fn no_crop_same_size_is_identity() {
        let p = PreprocessSpec::new(Crop::None, 16).unwrap();
        let img = checker(16, 16);
        let once = p.apply(&img).unwrap();
        assert_eq!(once[[3, 5, 0]], normalize(img.get_pixel(5, 3)[0]));
        assert_eq!(p.apply_tensor(&once).unwrap(), once);
        let twice = p.apply_tensor(&p.apply_tensor(&once).unwrap()).unwrap();
        assert_eq!(twice, once);
    }

    #[test]
    fn tensor_resize_changes_extent() {
        let p = PreprocessSpec::new(Crop::CenterSquare, 8).unwrap();
        let t = Array3::from_elem((12, 16, 3), 0.25);
        let r = p.apply_tensor(&t).unwrap();
        assert_eq!(r.dim(), (8, 8, 3));
        assert!(r.iter().all(|v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn tiny_targets_rejected() {
        assert!(PreprocessSpec::new(Crop::None, 4).is_err());
    }
}
