//! Grad-CAM attention maps over the teacher's last conv block.

use serde::{Deserialize, Serialize};

use super::image::Image;
use super::teacher::TeacherModel;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub height: usize,
    pub width: usize,
    /// Row-major values in [0, 1].
    pub values: Vec<f64>,
    /// Set when the raw map was constant (e.g. every channel dead), in
    /// which case `values` is all zeros.
    pub degenerate: bool,
}

impl AttentionMap {
    pub fn mass_inside(&self, b: &super::image::PixelBox) -> f64 {
        let total: f64 = self.values.iter().sum();
        if total <= 0.0 {
            return 0.0;
        }
        let mut inside = 0.0;
        for y in b.y0..b.y1.min(self.height) {
            for x in b.x0..b.x1.min(self.width) {
                inside += self.values[y * self.width + x];
            }
        }
        inside / total
    }
}

/// Channel weights are the spatially averaged gradients of the class logit;
/// the map is `relu(Σ_k w_k A_k)`, bilinearly upsampled to the image size
/// and min-max normalized.
pub fn grad_attention(teacher: &TeacherModel, image: &Image, class_id: usize) -> Result<AttentionMap> {
    let (a, g, c, h, w) = teacher.cam_inputs(image, class_id)?;
    let hw = h * w;
    let mut cam = vec![0.0; hw];
    for k in 0..c {
        let weight = g[k * hw..(k + 1) * hw].iter().sum::<f64>() / hw as f64;
        if weight == 0.0 {
            continue;
        }
        for (o, &v) in cam.iter_mut().zip(&a[k * hw..(k + 1) * hw]) {
            *o += weight * v;
        }
    }
    for v in &mut cam {
        *v = v.max(0.0);
    }
    let small = Image {
        channels: 1,
        height: h,
        width: w,
        data: cam,
    };
    let mut values = small.resize(image.height, image.width).data;
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let degenerate = (hi - lo).is_nan() || hi - lo <= 1e-12;
    if degenerate {
        values.iter_mut().for_each(|v| *v = 0.0);
    } else {
        values.iter_mut().for_each(|v| *v = ((*v - lo) / (hi - lo)).clamp(0.0, 1.0));
    }
    Ok(AttentionMap {
        height: image.height,
        width: image.width,
        values,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::teacher::TeacherArch;

    #[test]
    fn untrained_teacher_map_in_range() {
        let t = TeacherModel::new(TeacherArch::new(3), 4).unwrap();
        let img = Image::filled(3, 64, 64, &[0.5]);
        let m = grad_attention(&t, &img, 1).unwrap();
        assert_eq!((m.height, m.width, m.values.len()), (64, 64, 4096));
        assert!(m.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
