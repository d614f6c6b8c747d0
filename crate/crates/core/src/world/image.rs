//! Channel-major images and the pixel-level edits the pipeline needs:
//! threshold masking, occlusion, cropping/resizing and feathered pasting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn intersection(&self, other: &PixelBox) -> usize {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        w * h
    }

    pub fn iou(&self, other: &PixelBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Centroid in normalized image coordinates.
    pub fn centroid(&self, width: usize, height: usize) -> [f64; 2] {
        [
            (self.x0 + self.x1) as f64 / (2.0 * width as f64),
            (self.y0 + self.y1) as f64 / (2.0 * height as f64),
        ]
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x0 <= self.x1 && self.y0 <= self.y1 && self.x1 <= width && self.y1 <= height
    }

    /// Same-size box with its top-left corner moved, clamped inside the image.
    pub fn moved_to(&self, x0: usize, y0: usize, width: usize, height: usize) -> PixelBox {
        let x0 = x0.min(width - self.width());
        let y0 = y0.min(height - self.height());
        PixelBox::new(x0, y0, x0 + self.width(), y0 + self.height())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(channels: usize, height: usize, width: usize, value: &[f64]) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            data.extend(std::iter::repeat_n(value[c % value.len()], height * width));
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn full_box(&self) -> PixelBox {
        PixelBox::new(0, 0, self.width, self.height)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.channels, self.height, self.width],
            self.data.clone(),
        )
        .expect("image buffer matches its dimensions")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [c, h, w] => Ok(Self {
                channels: *c,
                height: *h,
                width: *w,
                data: t.data().to_vec(),
            }),
            s => Err(Error::shape("image", s, &[3, 0, 0])),
        }
    }

    /// Mean value of each channel.
    pub fn channel_means(&self) -> Vec<f64> {
        let n = (self.height * self.width) as f64;
        self.data
            .chunks(self.height * self.width)
            .map(|c| c.iter().sum::<f64>() / n)
            .collect()
    }

    pub fn crop(&self, b: &PixelBox) -> Result<Image> {
        if !b.fits(self.width, self.height) || b.area() == 0 {
            return Err(Error::InvalidArgument(format!("crop box {b:?} outside image")));
        }
        let mut out = Image::filled(self.channels, b.height(), b.width(), &[0.0]);
        for c in 0..self.channels {
            for y in 0..b.height() {
                for x in 0..b.width() {
                    out.set(c, y, x, self.at(c, b.y0 + y, b.x0 + x));
                }
            }
        }
        Ok(out)
    }

    /// Bilinear resize with pixel-center alignment.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = Image::filled(self.channels, height, width, &[0.0]);
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                for c in 0..self.channels {
                    let top = self.at(c, y0, x0) * (1.0 - wx) + self.at(c, y0, x1) * wx;
                    let bot = self.at(c, y1, x0) * (1.0 - wx) + self.at(c, y1, x1) * wx;
                    out.set(c, y, x, top * (1.0 - wy) + bot * wy);
                }
            }
        }
        out
    }

    /// Pastes `patch` (resized to `target`) with a linear feather of
    /// `feather` pixels at the border, blending toward the existing content.
    pub fn paste(&mut self, patch: &Image, target: &PixelBox, feather: usize) -> Result<()> {
        if !target.fits(self.width, self.height) || target.area() == 0 {
            return Err(Error::InvalidArgument(format!("paste box {target:?} outside image")));
        }
        if patch.channels != self.channels {
            return Err(Error::shape(
                "paste",
                &[self.channels],
                &[patch.channels],
            ));
        }
        let p = patch.resize(target.height(), target.width());
        let (h, w) = (target.height(), target.width());
        for y in 0..h {
            for x in 0..w {
                let edge = x.min(y).min(w - 1 - x).min(h - 1 - y);
                let alpha = if feather == 0 {
                    1.0
                } else {
                    ((edge as f64 + 1.0) / (feather as f64 + 1.0)).min(1.0)
                };
                for c in 0..self.channels {
                    let old = self.at(c, target.y0 + y, target.x0 + x);
                    // Written as a correction so pasting a region onto itself is exact.
                    let v = old + alpha * (p.at(c, y, x) - old);
                    self.set(c, target.y0 + y, target.x0 + x, v);
                }
            }
        }
        Ok(())
    }
}

/// Binary mask paired with the masked image `Ī = I × M̄`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedImage {
    pub image: Image,
    /// `true` where the binarized attention map kept the pixel.
    pub keep: Vec<bool>,
}

impl MaskedImage {
    /// An unmasked view of `image` (every pixel kept).
    pub fn unmasked(image: Image) -> Self {
        let n = image.height * image.width;
        Self {
            image,
            keep: vec![true; n],
        }
    }

    /// Fraction of pixels inside `b` that were masked out.
    pub fn masked_fraction(&self, b: &PixelBox) -> f64 {
        let w = self.image.width;
        let mut masked = 0usize;
        for y in b.y0..b.y1 {
            for x in b.x0..b.x1 {
                if !self.keep[y * w + x] {
                    masked += 1;
                }
            }
        }
        masked as f64 / b.area().max(1) as f64
    }
}

/// Binarizes `map` at `tau` (values below `tau` → 0, others → 1) and
/// multiplies every channel of `image` by the result.
pub fn mask_image(image: &Image, map: &[f64], tau: f64) -> Result<MaskedImage> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!("mask threshold {tau} not in (0,1)")));
    }
    let n = image.height * image.width;
    if map.len() != n {
        return Err(Error::shape("mask_image", &[image.height, image.width], &[map.len()]));
    }
    let keep: Vec<bool> = map.iter().map(|&m| m >= tau).collect();
    let mut out = image.clone();
    for c in 0..image.channels {
        for (i, &k) in keep.iter().enumerate() {
            if !k {
                out.data[c * n + i] = 0.0;
            }
        }
    }
    Ok(MaskedImage { image: out, keep })
}

/// Replaces every pixel inside `b` with `fill` (one value per channel).
pub fn occlude_region(image: &Image, b: &PixelBox, fill: &[f64]) -> Result<Image> {
    if b.area() == 0 {
        return Err(Error::InvalidArgument(format!("degenerate occlusion box {b:?}")));
    }
    if !b.fits(image.width, image.height) {
        return Err(Error::InvalidArgument(format!("occlusion box {b:?} outside image")));
    }
    let mut out = image.clone();
    for c in 0..image.channels {
        let v = fill[c % fill.len()];
        for y in b.y0..b.y1 {
            for x in b.x0..b.x1 {
                out.set(c, y, x, v);
            }
        }
    }
    Ok(out)
}
