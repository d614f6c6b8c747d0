//! Concept banks and their versioned JSON schema.
//!
//! ```text
//! {
//!   "version": 1,
//!   "class_id": 0,
//!   "teacher_dim": 64,
//!   "config_hash": "…",              // optional
//!   "concepts": [{
//!     "id": 0,
//!     "mean_feature": [...],         // length teacher_dim
//!     "importance": 1.25,
//!     "members": 37,
//!     "exemplars": [{"image": 12, "box": {"x0":0,"y0":0,"x1":16,"y1":16}}],
//!     "distance_p90": 0.8,           // optional, enables adaptive thresholds
//!     "location": [0.25, 0.75],      // optional, mean member centroid
//!     "box_size": [16, 16]           // optional, typical member box (w, h)
//!   }]
//! }
//! ```
//!
//! Banks extracted elsewhere (e.g. from a large backbone) enter the system
//! through this format; only `id`, `mean_feature`, `importance` and
//! `members` are required per concept.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::PixelBox;

pub const BANK_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub image: usize,
    #[serde(rename = "box")]
    pub bbox: PixelBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub id: usize,
    pub mean_feature: Vec<f64>,
    pub importance: f64,
    pub members: usize,
    #[serde(default)]
    pub exemplars: Vec<Exemplar>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance_p90: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub box_size: Option<[usize; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptBank {
    pub version: u32,
    pub class_id: usize,
    pub teacher_dim: usize,
    #[serde(default)]
    pub config_hash: String,
    pub concepts: Vec<Concept>,
}

impl ConceptBank {
    pub fn n_concepts(&self) -> usize {
        self.concepts.len()
    }

    pub fn check_compatible(&self, teacher_dim: usize) -> Result<()> {
        if self.teacher_dim != teacher_dim {
            return Err(Error::IncompatibleBank {
                bank: self.teacher_dim,
                teacher: teacher_dim,
            });
        }
        Ok(())
    }

    /// Structural checks shared by load and construction.
    pub fn validate(&self) -> Result<()> {
        if self.version != BANK_VERSION {
            return Err(Error::schema("version", format!("unsupported bank version {}", self.version)));
        }
        if self.concepts.is_empty() {
            return Err(Error::schema("concepts", "bank has no concepts"));
        }
        for (i, c) in self.concepts.iter().enumerate() {
            if c.mean_feature.len() != self.teacher_dim {
                return Err(Error::schema(
                    format!("concepts[{i}].mean_feature"),
                    format!("length {} but teacher_dim is {}", c.mean_feature.len(), self.teacher_dim),
                ));
            }
            if !c.importance.is_finite() || c.mean_feature.iter().any(|v| !v.is_finite()) {
                return Err(Error::schema(format!("concepts[{i}]"), "non-finite value"));
            }
        }
        for w in self.concepts.windows(2) {
            if w[0].importance < w[1].importance {
                return Err(Error::schema("concepts", "not sorted by descending importance"));
            }
        }
        Ok(())
    }

    /// Short content hash, recorded in model checkpoints.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(self).expect("bank serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }

    /// Typical box for a concept: member size centered at its mean location.
    pub fn typical_box(&self, concept: usize, width: usize, height: usize) -> Option<PixelBox> {
        let c = self.concepts.get(concept)?;
        let [x, y] = c.location?;
        let [bw, bh] = c.box_size?;
        let (bw, bh) = (bw.clamp(1, width), bh.clamp(1, height));
        let x0 = ((x * width as f64) - bw as f64 / 2.0).round().max(0.0) as usize;
        let y0 = ((y * height as f64) - bh as f64 / 2.0).round().max(0.0) as usize;
        Some(PixelBox::new(0, 0, bw, bh).moved_to(x0, y0, width, height))
    }
}

pub fn save_bank(bank: &ConceptBank, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(bank)?)?;
    Ok(())
}

/// Loads and validates a bank; with `teacher_dim` set, also checks that the
/// bank's feature dimension matches the teacher in use.
pub fn load_bank(path: &Path, teacher_dim: Option<usize>) -> Result<ConceptBank> {
    let bank: ConceptBank = serde_json::from_slice(&std::fs::read(path)?)?;
    bank.validate()?;
    if let Some(d) = teacher_dim {
        bank.check_compatible(d)?;
    }
    Ok(bank)
}
