//! Deterministic rendering of labeled images from a [`WorldSpec`].

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::{Image, PixelBox};
use super::spec::{Glyph, PartSpec, WorldSpec};
use crate::error::{Error, Result};
use crate::rng;

/// Where one part ended up in a rendered image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartPlacement {
    /// Index into the class's part list.
    pub part: usize,
    pub glyph: Glyph,
    pub color: [f64; 3],
    #[serde(rename = "box")]
    pub bbox: PixelBox,
    pub pose: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub id: usize,
    pub pixels: Image,
    pub label: usize,
    pub pose: usize,
    pub provenance: Vec<PartPlacement>,
    /// Part drawn faded, if any.
    pub flawed_part: Option<usize>,
}

/// `n_per_class` images per class, interleaved by class (`id % n_classes`
/// is the label). Each image draws from its own seeded stream, so the output
/// is a pure function of `(spec, n_per_class, seed)`.
pub fn generate_dataset(spec: &WorldSpec, n_per_class: usize, seed: u64) -> Result<Vec<LabeledImage>> {
    generate_range(spec, 0, n_per_class * spec.n_classes(), seed, n_per_class)
}

/// Images `start..end` of the interleaved sequence. Useful to extend a set
/// without re-rendering it.
pub fn generate_range(
    spec: &WorldSpec,
    start: usize,
    end: usize,
    seed: u64,
    n_per_class: usize,
) -> Result<Vec<LabeledImage>> {
    spec.validate()?;
    if n_per_class == 0 {
        return Err(Error::InvalidArgument("n_per_class must be ≥ 1".into()));
    }
    (start..end)
        .map(|id| render_image(spec, id, id % spec.n_classes(), seed))
        .collect()
}

/// Renders image `id` of class `label`.
pub fn render_image(spec: &WorldSpec, id: usize, label: usize, seed: u64) -> Result<LabeledImage> {
    let class = spec
        .classes
        .get(label)
        .ok_or(Error::UnknownClass(label))?;
    let mut rng = rng::stream(seed, "world/image", id as u64);
    let pose_id = class.poses[rng.random_range(0..class.poses.len())];
    let pose = spec.poses[pose_id];

    let n_parts = class.parts.len();
    let mut present: Vec<bool> = (0..n_parts)
        .map(|_| !(spec.part_dropout > 0.0 && rng.random::<f64>() < spec.part_dropout))
        .collect();
    if !present.iter().any(|&p| p) {
        present[rng.random_range(0..n_parts)] = true;
    }
    let flawed_part = if spec.flaw_prob > 0.0 && rng.random::<f64>() < spec.flaw_prob {
        let drawn: Vec<usize> = (0..n_parts).filter(|&i| present[i]).collect();
        Some(drawn[rng.random_range(0..drawn.len())])
    } else {
        None
    };

    let s = spec.image_size;
    let mut img = Image::filled(3, s, s, &spec.background);
    let mut provenance = Vec::with_capacity(class.parts.len());
    for (pi, part) in class.parts.iter().enumerate() {
        if !present[pi] {
            continue;
        }
        let mut drawn = part.clone();
        if spec.color_jitter > 0.0 {
            for c in &mut drawn.color {
                *c = (*c + rng.random_range(-spec.color_jitter..=spec.color_jitter)).clamp(0.0, 1.0);
            }
        }
        if spec.size_jitter > 0.0 {
            drawn.size *= 1.0 + rng.random_range(-spec.size_jitter..=spec.size_jitter);
        }
        if flawed_part == Some(pi) {
            for (c, b) in drawn.color.iter_mut().zip(spec.background) {
                *c = spec.flaw_fade * b + (1.0 - spec.flaw_fade) * *c;
            }
        }
        let [mut cx, mut cy] = pose.apply(part.position);
        if spec.jitter > 0.0 {
            cx += rng.random_range(-spec.jitter..=spec.jitter);
            cy += rng.random_range(-spec.jitter..=spec.jitter);
        }
        let bbox = draw_part(&mut img, &drawn, cx, cy);
        provenance.push(PartPlacement {
            part: pi,
            glyph: drawn.glyph,
            color: drawn.color,
            bbox,
            pose: pose_id,
        });
    }

    if spec.noise_level > 0.0 {
        let normal = Normal::new(0.0, spec.noise_level)
            .map_err(|e| Error::InvalidWorld(format!("noise: {e}")))?;
        for v in &mut img.data {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }

    Ok(LabeledImage {
        id,
        pixels: img,
        label,
        pose: pose_id,
        provenance,
        flawed_part,
    })
}

/// Draws one part centered at normalized `(cx, cy)` with 2×2 supersampling
/// and returns its (clipped) bounding box.
pub fn draw_part(img: &mut Image, part: &PartSpec, cx: f64, cy: f64) -> PixelBox {
    let (w, h) = (img.width as f64, img.height as f64);
    let half = part.size * w;
    let (px, py) = (cx * w, cy * h);
    let x0 = (px - half).floor().max(0.0) as usize;
    let y0 = (py - half).floor().max(0.0) as usize;
    let x1 = ((px + half).ceil() as usize).min(img.width);
    let y1 = ((py + half).ceil() as usize).min(img.height);
    const SUB: [f64; 2] = [0.25, 0.75];
    for y in y0..y1 {
        for x in x0..x1 {
            let mut hits = 0;
            for sy in SUB {
                for sx in SUB {
                    let dx = (x as f64 + sx - px) / half;
                    let dy = (y as f64 + sy - py) / half;
                    if part.glyph.covers(dx, dy) {
                        hits += 1;
                    }
                }
            }
            if hits == 0 {
                continue;
            }
            let a = hits as f64 / 4.0;
            for c in 0..3 {
                let old = img.at(c, y, x);
                img.set(c, y, x, a * part.color[c] + (1.0 - a) * old);
            }
        }
    }
    PixelBox::new(x0, y0, x1.max(x0 + 1), y1.max(y0 + 1))
}

/// Per-channel mean pixel of a dataset (the default occlusion fill).
pub fn mean_pixel(images: &[LabeledImage]) -> Vec<f64> {
    let mut acc = [0.0; 3];
    for img in images {
        for (a, m) in acc.iter_mut().zip(img.pixels.channel_means()) {
            *a += m;
        }
    }
    let n = images.len().max(1) as f64;
    acc.iter().map(|a| a / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::spec::WorldSpec;

    #[test]
    fn deterministic() {
        let w = WorldSpec::three_class();
        let a = generate_dataset(&w, 3, 11).unwrap();
        let b = generate_dataset(&w, 3, 11).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&w, 3, 12).unwrap();
        assert_ne!(a[0].pixels, c[0].pixels);
    }

    #[test]
    fn noiseless_fixed_single_part_is_constant() {
        let mut w = WorldSpec::single_part(2);
        w.noise_level = 0.0;
        let d = generate_dataset(&w, 4, 3).unwrap();
        for img in &d {
            assert_eq!(img.pixels, d[img.label].pixels);
        }
    }

    #[test]
    fn provenance_within_bounds_and_labels_valid() {
        let w = WorldSpec::pose_biased().unbiased();
        for img in generate_dataset(&w, 10, 5).unwrap() {
            assert!(img.label < 3);
            for p in &img.provenance {
                assert!(p.bbox.fits(64, 64) && p.bbox.area() > 0);
            }
            assert!(img.pixels.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn pose_bias_restricts_pose_marginal_only() {
        let biased = WorldSpec::pose_biased();
        let d = generate_dataset(&biased, 30, 1).unwrap();
        for img in &d {
            assert_eq!(img.pose, img.label);
        }
        let u = generate_dataset(&biased.unbiased(), 30, 1).unwrap();
        let poses: std::collections::BTreeSet<_> = u.iter().map(|i| i.pose).collect();
        assert_eq!(poses.len(), 3);
        for (a, b) in d.iter().zip(&u) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.provenance.len(), b.provenance.len());
            for (pa, pb) in a.provenance.iter().zip(&b.provenance) {
                assert_eq!((pa.glyph, pa.color), (pb.glyph, pb.color));
            }
        }
    }

    #[test]
    fn flawed_part_is_drawn_faded() {
        let mut w = WorldSpec::three_class().with_flaw_prob(1.0);
        w.color_jitter = 0.0;
        for img in generate_dataset(&w, 5, 2).unwrap() {
            let k = img.flawed_part.unwrap();
            let own = &w.classes[img.label].parts[k];
            let p = img.provenance.iter().find(|p| p.part == k).unwrap();
            for c in 0..3 {
                let toward_bg = (p.color[c] - w.background[c]).abs();
                assert!(toward_bg < (own.color[c] - w.background[c]).abs() * 0.3 + 1e-12);
            }
        }
    }

    #[test]
    fn dropout_keeps_at_least_one_part() {
        let mut w = WorldSpec::three_class();
        w.part_dropout = 0.9;
        let d = generate_dataset(&w, 20, 3).unwrap();
        assert!(d.iter().all(|i| !i.provenance.is_empty()));
        assert!(d.iter().any(|i| i.provenance.len() < 4));
    }

    #[test]
    fn zero_per_class_rejected() {
        assert!(generate_dataset(&WorldSpec::three_class(), 0, 1).is_err());
    }
}
