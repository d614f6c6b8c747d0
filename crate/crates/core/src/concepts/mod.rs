//! Visual concept extraction: attention-filtered multi-resolution patches,
//! clustered in teacher feature space and ranked by occlusion importance.

pub mod bank;
pub mod discover;
pub mod kmeans;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{Image, MaskedImage, PixelBox, TeacherModel};

pub use bank::{load_bank, save_bank, Concept, ConceptBank, Exemplar, BANK_VERSION};
pub use discover::{discover_concepts, discover_concepts_detailed, DiscoverConfig, Discovery};
pub use kmeans::{kmeans, KMeans, KMeansConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentConfig {
    /// Grid sides, one per resolution level.
    pub grids: Vec<usize>,
    /// Patches with a larger masked-pixel share are dropped.
    pub max_masked_fraction: f64,
    /// Side length every patch is resized to before featurization.
    pub patch_size: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            grids: vec![2, 4, 8],
            max_masked_fraction: 0.9,
            patch_size: 32,
        }
    }
}

/// A concept candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub image_id: usize,
    #[serde(rename = "box")]
    pub bbox: PixelBox,
    pub level: usize,
    pub feature: Vec<f64>,
    pub centroid: [f64; 2],
}

/// Cells of every grid level, coarse to fine, row-major within a level.
pub fn grid_boxes(width: usize, height: usize, grids: &[usize]) -> Vec<(PixelBox, usize)> {
    let mut out = Vec::new();
    for (level, &g) in grids.iter().enumerate() {
        for gy in 0..g {
            for gx in 0..g {
                let b = PixelBox::new(gx * width / g, gy * height / g, (gx + 1) * width / g, (gy + 1) * height / g);
                if b.area() > 0 {
                    out.push((b, level));
                }
            }
        }
    }
    out
}

/// Teacher feature of one image region, resized to `patch_size`².
pub fn patch_feature(teacher: &TeacherModel, image: &Image, b: &PixelBox, patch_size: usize) -> Result<Vec<f64>> {
    teacher.features(&image.crop(b)?.resize(patch_size, patch_size))
}

/// Grid patches of `image`, keeping only cells that the attention mask
/// (if any) leaves mostly visible. Features are taken from the unmasked
/// pixels so candidates from discovery and from detection live in the same
/// feature space.
pub fn segment_multiresolution(
    teacher: &TeacherModel,
    image: &Image,
    mask: Option<&MaskedImage>,
    image_id: usize,
    cfg: &SegmentConfig,
) -> Result<Vec<Patch>> {
    if cfg.patch_size == 0 || cfg.grids.is_empty() {
        return Err(Error::InvalidArgument("segmentation needs grids and a patch size".into()));
    }
    let mut out = Vec::new();
    for (b, level) in grid_boxes(image.width, image.height, &cfg.grids) {
        if let Some(m) = mask {
            if m.masked_fraction(&b) > cfg.max_masked_fraction {
                continue;
            }
        }
        out.push(Patch {
            image_id,
            bbox: b,
            level,
            feature: patch_feature(teacher, image, &b, cfg.patch_size)?,
            centroid: b.centroid(image.width, image.height),
        });
    }
    if out.is_empty() {
        return Err(Error::EmptySegmentation(format!("image {image_id}")));
    }
    Ok(out)
}
