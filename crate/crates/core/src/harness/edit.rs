//! Image edits used by the experiments: patch substitution and relocation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{Image, PixelBox};

/// Where a replacement patch comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    /// A good exemplar of the concept the explanation blames.
    VrxGuided,
    /// An arbitrary crop of an arbitrary image.
    RandomPatch,
    /// A good exemplar replacing a concept that already contributes well.
    GoodForGood,
    /// The least credited instance of the same concept found elsewhere.
    WeakInstance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubstitutionPlan {
    pub target_image: usize,
    pub class_id: usize,
    pub concept_id: usize,
    pub source: Source,
    pub target_box: PixelBox,
    pub donor_image: usize,
    pub donor_box: PixelBox,
}

impl SubstitutionPlan {
    /// Pastes the donor crop over the target box with a feathered border.
    pub fn apply(&self, target: &Image, donor: &Image, feather: usize) -> Result<Image> {
        if !self.target_box.fits(target.width, target.height) {
            return Err(Error::InvalidArgument(format!(
                "target box {:?} does not fit the image",
                self.target_box
            )));
        }
        let patch = donor.crop(&self.donor_box)?;
        let mut out = target.clone();
        out.paste(&patch, &self.target_box, feather)?;
        Ok(out)
    }
}

/// Box mirrored through the image center.
pub fn point_reflect(b: &PixelBox, width: usize, height: usize) -> PixelBox {
    PixelBox::new(width - b.x1, height - b.y1, width - b.x0, height - b.y0)
}

/// Moves the content of `from` to `to`, leaving `background` behind.
pub fn relocate(image: &Image, from: &PixelBox, to: &PixelBox, background: &[f64], feather: usize) -> Result<Image> {
    let patch = image.crop(from)?;
    let mut out = crate::world::occlude_region(image, from, background)?;
    out.paste(&patch, to, feather)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflection_is_an_involution_on_grid_cells() {
        let b = PixelBox::new(8, 16, 24, 32);
        let r = point_reflect(&b, 64, 64);
        assert_eq!(r, PixelBox::new(40, 32, 56, 48));
        assert_eq!(point_reflect(&r, 64, 64), b);
    }

    #[test]
    fn self_substitution_is_exact() {
        let mut img = Image::filled(3, 16, 16, &[0.2, 0.4, 0.6]);
        img.set(1, 5, 5, 0.9);
        let b = PixelBox::new(2, 2, 10, 10);
        let plan = SubstitutionPlan {
            target_image: 0,
            class_id: 0,
            concept_id: 0,
            source: Source::GoodForGood,
            target_box: b,
            donor_image: 0,
            donor_box: b,
        };
        assert_eq!(plan.apply(&img, &img, 2).unwrap(), img);
    }

    #[test]
    fn relocation_moves_content() {
        let mut img = Image::filled(1, 8, 8, &[0.0]);
        img.set(0, 1, 1, 1.0);
        let out = relocate(&img, &PixelBox::new(0, 0, 2, 2), &PixelBox::new(6, 6, 8, 8), &[0.5], 0).unwrap();
        assert_eq!(out.at(0, 1, 1), 0.5);
        assert_eq!(out.at(0, 7, 7), 1.0);
    }
}
