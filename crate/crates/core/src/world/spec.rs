//! World description: glyph catalog, per-class part layouts and poses.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Renderable part shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Glyph {
    Disc,
    Bar,
    Cross,
    Ring,
    Wedge,
}

impl Glyph {
    pub const ALL: [Glyph; 5] = [Glyph::Disc, Glyph::Bar, Glyph::Cross, Glyph::Ring, Glyph::Wedge];

    /// Coverage test in glyph-local coordinates scaled so the glyph spans [-1, 1]².
    pub fn covers(self, dx: f64, dy: f64) -> bool {
        match self {
            Glyph::Disc => dx * dx + dy * dy <= 1.0,
            Glyph::Ring => {
                let r2 = dx * dx + dy * dy;
                (0.3..=1.0).contains(&r2)
            }
            Glyph::Bar => dx.abs() <= 1.0 && dy.abs() <= 0.4,
            Glyph::Cross => {
                (dx.abs() <= 1.0 && dy.abs() <= 0.3) || (dy.abs() <= 1.0 && dx.abs() <= 0.3)
            }
            Glyph::Wedge => (-1.0..=1.0).contains(&dy) && dx.abs() <= (dy + 1.0) / 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartSpec {
    pub glyph: Glyph,
    pub color: [f64; 3],
    /// Canonical center in normalized image coordinates.
    pub position: [f64; 2],
    /// Half-extent as a fraction of the image side.
    #[serde(default = "default_part_size")]
    pub size: f64,
}

fn default_part_size() -> f64 {
    0.1
}

impl PartSpec {
    pub fn new(glyph: Glyph, color: [f64; 3], position: [f64; 2]) -> Self {
        Self {
            glyph,
            color,
            position,
            size: default_part_size(),
        }
    }

    /// Appearance key (glyph + quantized color), ignoring position.
    pub fn appearance(&self) -> (Glyph, [i64; 3]) {
        (self.glyph, self.color.map(|c| (c * 1000.0).round() as i64))
    }
}

/// Global layout transform about the image center; glyphs keep their orientation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Pose {
    Identity,
    MirrorX,
    MirrorY,
    Rotate90,
    Rotate180,
    Shift { dx: f64, dy: f64 },
}

impl Pose {
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let [x, y] = p;
        match *self {
            Pose::Identity => [x, y],
            Pose::MirrorX => [1.0 - x, y],
            Pose::MirrorY => [x, 1.0 - y],
            Pose::Rotate90 => [1.0 - y, x],
            Pose::Rotate180 => [1.0 - x, 1.0 - y],
            Pose::Shift { dx, dy } => [x + dx, y + dy],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub parts: Vec<PartSpec>,
    /// Indices into [`WorldSpec::poses`] this class may be drawn in.
    pub poses: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub classes: Vec<ClassSpec>,
    pub poses: Vec<Pose>,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_background")]
    pub background: [f64; 3],
    #[serde(default = "default_noise")]
    pub noise_level: f64,
    /// Uniform per-part positional jitter (normalized units).
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    /// Probability that an image has one part rendered faded (its color
    /// pulled most of the way toward the background).
    #[serde(default)]
    pub flaw_prob: f64,
    /// Share of a faded part's color taken from the background.
    #[serde(default = "default_fade")]
    pub flaw_fade: f64,
    /// Independent per-part omission probability; at least one part is
    /// always drawn.
    #[serde(default)]
    pub part_dropout: f64,
    /// Per-part uniform color perturbation (per channel).
    #[serde(default)]
    pub color_jitter: f64,
    /// Per-part relative size perturbation.
    #[serde(default)]
    pub size_jitter: f64,
}

fn default_image_size() -> usize {
    64
}
fn default_background() -> [f64; 3] {
    [0.5, 0.5, 0.5]
}
fn default_noise() -> f64 {
    0.03
}
fn default_jitter() -> f64 {
    0.015
}
fn default_fade() -> f64 {
    0.75
}

pub const RED: [f64; 3] = [0.92, 0.12, 0.12];
pub const BLUE: [f64; 3] = [0.12, 0.25, 0.95];
pub const GREEN: [f64; 3] = [0.1, 0.78, 0.2];
pub const YELLOW: [f64; 3] = [0.98, 0.88, 0.1];
pub const MAGENTA: [f64; 3] = [0.85, 0.15, 0.85];
pub const CYAN: [f64; 3] = [0.1, 0.85, 0.9];
pub const BLACK: [f64; 3] = [0.05, 0.05, 0.05];
pub const WHITE: [f64; 3] = [0.97, 0.97, 0.97];

impl WorldSpec {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::InvalidWorld("no classes".into()));
        }
        if self.poses.is_empty() {
            return Err(Error::InvalidWorld("no poses".into()));
        }
        if self.image_size < 8 || !self.image_size.is_multiple_of(8) {
            return Err(Error::InvalidWorld(format!(
                "image size {} must be a positive multiple of 8",
                self.image_size
            )));
        }
        if !(self.noise_level >= 0.0 && self.color_jitter >= 0.0)
            || !(0.0..1.0).contains(&self.size_jitter)
            || !(0.0..=1.0).contains(&self.flaw_prob)
            || !(0.0..=1.0).contains(&self.flaw_fade)
            || !(0.0..1.0).contains(&self.part_dropout)
        {
            return Err(Error::InvalidWorld("noise, jitter or flaw probability out of range".into()));
        }
        let mut signatures = BTreeSet::new();
        for (ci, class) in self.classes.iter().enumerate() {
            if class.parts.is_empty() {
                return Err(Error::InvalidWorld(format!("class {ci} has no parts")));
            }
            if class.poses.is_empty() || class.poses.iter().any(|&p| p >= self.poses.len()) {
                return Err(Error::InvalidWorld(format!("class {ci} has an invalid pose set")));
            }
            for part in &class.parts {
                let [x, y] = part.position;
                if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                    return Err(Error::InvalidWorld(format!(
                        "class {ci} part position {:?} outside [0,1]²",
                        part.position
                    )));
                }
                if !(part.size > 0.0 && part.size < 0.5) {
                    return Err(Error::InvalidWorld(format!("class {ci} part size {}", part.size)));
                }
            }
            let mut sig: Vec<_> = class
                .parts
                .iter()
                .map(|p| {
                    let (g, c) = p.appearance();
                    (g, c, p.position.map(|v| (v * 1000.0).round() as i64))
                })
                .collect();
            sig.sort();
            if !signatures.insert(sig) {
                return Err(Error::InvalidWorld(format!(
                    "class {ci} duplicates another class's parts and layout"
                )));
            }
        }
        Ok(())
    }

    /// Same world with every class allowed in every pose.
    pub fn unbiased(&self) -> WorldSpec {
        let mut w = self.clone();
        let all: Vec<usize> = (0..self.poses.len()).collect();
        for c in &mut w.classes {
            c.poses = all.clone();
        }
        w
    }

    pub fn with_flaw_prob(&self, p: f64) -> WorldSpec {
        WorldSpec {
            flaw_prob: p,
            ..self.clone()
        }
    }

    /// Three layout-defined classes: all share the same four parts and
    /// differ only in where they sit (the arrangement turned by 0°, 90° and
    /// 180°). Any single part's position identifies the class; random part
    /// dropout makes the teacher rely on all of them.
    pub fn three_class() -> WorldSpec {
        // Slots sit on 4×4 grid cell centers so one cell holds one part.
        const TL: [f64; 2] = [0.375, 0.375];
        const TR: [f64; 2] = [0.625, 0.375];
        const BL: [f64; 2] = [0.375, 0.625];
        const BR: [f64; 2] = [0.625, 0.625];
        let class = |name: &str, disc, cross, bar, ring| ClassSpec {
            name: name.into(),
            parts: vec![
                PartSpec::new(Glyph::Disc, RED, disc),
                PartSpec::new(Glyph::Cross, GREEN, cross),
                PartSpec::new(Glyph::Bar, BLUE, bar),
                PartSpec::new(Glyph::Ring, YELLOW, ring),
            ],
            poses: vec![0],
        };
        WorldSpec {
            classes: vec![
                class("school_bus", TL, TR, BL, BR),
                class("fire_engine", TR, BR, TL, BL),
                class("ambulance", BR, BL, TR, TL),
            ],
            poses: vec![Pose::Identity],
            image_size: default_image_size(),
            background: default_background(),
            noise_level: default_noise(),
            jitter: default_jitter(),
            flaw_prob: 0.0,
            flaw_fade: default_fade(),
            part_dropout: 0.25,
            color_jitter: 0.08,
            size_jitter: 0.12,
        }
    }

    /// Three vehicle-like classes whose training poses are disjoint:
    /// class `i` is only ever drawn in pose `i`.
    pub fn pose_biased() -> WorldSpec {
        let classes = vec![
            ClassSpec {
                name: "bus".into(),
                parts: vec![
                    PartSpec::new(Glyph::Disc, RED, [0.25, 0.75]),
                    PartSpec::new(Glyph::Cross, GREEN, [0.25, 0.25]),
                    PartSpec::new(Glyph::Ring, YELLOW, [0.75, 0.3]),
                    PartSpec::new(Glyph::Bar, BLUE, [0.7, 0.72]),
                ],
                poses: vec![0],
            },
            ClassSpec {
                name: "military".into(),
                parts: vec![
                    PartSpec::new(Glyph::Disc, RED, [0.25, 0.75]),
                    PartSpec::new(Glyph::Cross, GREEN, [0.25, 0.25]),
                    PartSpec::new(Glyph::Ring, YELLOW, [0.75, 0.3]),
                    PartSpec::new(Glyph::Bar, CYAN, [0.7, 0.72]),
                ],
                poses: vec![1],
            },
            ClassSpec {
                name: "tank".into(),
                parts: vec![
                    PartSpec::new(Glyph::Disc, RED, [0.25, 0.75]),
                    PartSpec::new(Glyph::Cross, GREEN, [0.25, 0.25]),
                    PartSpec::new(Glyph::Ring, YELLOW, [0.75, 0.3]),
                    PartSpec::new(Glyph::Bar, MAGENTA, [0.7, 0.72]),
                ],
                poses: vec![2],
            },
        ];
        WorldSpec {
            classes,
            poses: vec![Pose::Identity, Pose::MirrorX, Pose::MirrorY],
            image_size: default_image_size(),
            background: default_background(),
            noise_level: default_noise(),
            jitter: default_jitter(),
            flaw_prob: 0.0,
            flaw_fade: default_fade(),
            part_dropout: 0.0,
            color_jitter: 0.08,
            size_jitter: 0.12,
        }
    }

    /// `n` classes, each a single glyph at a fixed position.
    pub fn single_part(n: usize) -> WorldSpec {
        let catalog = [
            (Glyph::Disc, RED, [0.3, 0.3]),
            (Glyph::Cross, GREEN, [0.7, 0.3]),
            (Glyph::Ring, BLUE, [0.3, 0.7]),
            (Glyph::Wedge, MAGENTA, [0.7, 0.7]),
            (Glyph::Bar, YELLOW, [0.5, 0.5]),
        ];
        let classes = (0..n)
            .map(|i| {
                let (g, c, p) = catalog[i % catalog.len()];
                let mut part = PartSpec::new(g, c, p);
                part.size = 0.14;
                ClassSpec {
                    name: format!("{:?}", g).to_lowercase(),
                    parts: vec![part],
                    poses: vec![0],
                }
            })
            .collect();
        WorldSpec {
            classes,
            poses: vec![Pose::Identity],
            image_size: default_image_size(),
            background: default_background(),
            noise_level: default_noise(),
            jitter: 0.0,
            flaw_prob: 0.0,
            flaw_fade: default_fade(),
            part_dropout: 0.0,
            color_jitter: 0.0,
            size_jitter: 0.0,
        }
    }
}
