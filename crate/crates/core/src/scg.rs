//! Structural concept graphs: per-class concept detection and the fully
//! connected graphs built from it, one hypothesis per class of interest.
//!
//! SCG JSON schema (version 1):
//!
//! ```text
//! {"version":1, "class_id":0, "image_id":12,
//!  "nodes":[{"concept_id":0, "detected":true, "feature":[...], "location":[x,y],
//!            "distance":1.3, "box":{"x0":..}, "level":1}],
//!  "edges":[{"from":0, "to":1, "spatial":[x0,y0,x1,y1]}]}
//! ```
//!
//! Nodes are ordered by concept id; edges by `(from, to)` lexicographically.
//! `image_id`, `box` and `level` are optional.

use serde::{Deserialize, Serialize};

use crate::concepts::{grid_boxes, patch_feature, segment_multiresolution, ConceptBank, Patch, SegmentConfig};
use crate::error::{Error, Result};
use crate::kernels::squared_distance;
use crate::world::{occlude_region, Image, PixelBox, TeacherModel};

pub const SCG_VERSION: u32 = 1;

/// Detection threshold on patch-to-concept Euclidean distance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Threshold {
    /// One `t` for every concept.
    Global { t: f64 },
    /// `t_k = scale × (90th percentile of concept k's member distances)`.
    Adaptive { scale: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectConfig {
    pub threshold: Threshold,
    /// Constant feature value of dummy nodes.
    pub epsilon: f64,
    pub segment: SegmentConfig,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            threshold: Threshold::Adaptive { scale: 1.0 },
            epsilon: 1e-3,
            segment: SegmentConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptDetection {
    pub concept_id: usize,
    pub detected: bool,
    pub feature: Vec<f64>,
    pub location: [f64; 2],
    /// Distance of the closest candidate patch to the concept mean, whether
    /// or not it passed the threshold; `None` when there were no patches.
    pub distance: Option<f64>,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<PixelBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub spatial: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scg {
    pub version: u32,
    pub class_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<usize>,
    pub nodes: Vec<ConceptDetection>,
    pub edges: Vec<Edge>,
}

/// Ordered `(from, to)` pairs of the complete directed graph on `n` nodes.
pub fn edge_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(n * n.saturating_sub(1));
    for j in 0..n {
        for i in 0..n {
            if i != j {
                out.push((j, i));
            }
        }
    }
    out
}

impl Scg {
    /// Builds the complete graph over `nodes` (which must be in concept-id
    /// order) with `[x_j, y_j, x_i, y_i]` edge features.
    pub fn from_nodes(class_id: usize, image_id: Option<usize>, nodes: Vec<ConceptDetection>) -> Self {
        let edges = edge_pairs(nodes.len())
            .into_iter()
            .map(|(j, i)| Edge {
                from: j,
                to: i,
                spatial: [
                    nodes[j].location[0],
                    nodes[j].location[1],
                    nodes[i].location[0],
                    nodes[i].location[1],
                ],
            })
            .collect();
        Self {
            version: SCG_VERSION,
            class_id,
            image_id,
            nodes,
            edges,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_detected(&self) -> usize {
        self.nodes.iter().filter(|n| n.detected).count()
    }

    pub fn feature_dim(&self) -> usize {
        self.nodes.first().map_or(0, |n| n.feature.len())
    }

    /// Checks the structural invariants; errors carry a field path.
    pub fn validate(&self) -> Result<()> {
        if self.version != SCG_VERSION {
            return Err(Error::schema("version", format!("unsupported version {}", self.version)));
        }
        let n = self.nodes.len();
        if n == 0 {
            return Err(Error::schema("nodes", "graph has no nodes"));
        }
        let d = self.feature_dim();
        for (k, node) in self.nodes.iter().enumerate() {
            if node.concept_id != k {
                return Err(Error::schema(
                    format!("nodes[{k}].concept_id"),
                    format!("expected {k} (nodes must be in concept-id order), got {}", node.concept_id),
                ));
            }
            if node.feature.len() != d {
                return Err(Error::schema(format!("nodes[{k}].feature"), "feature length differs from node 0"));
            }
        }
        let expected = edge_pairs(n);
        for (idx, &(j, i)) in expected.iter().enumerate() {
            let Some(e) = self.edges.iter().find(|e| e.from == j && e.to == i) else {
                return Err(Error::schema("edges", format!("missing edge ({j},{i})")));
            };
            if self.edges.get(idx) != Some(e) {
                return Err(Error::schema(
                    format!("edges[{idx}]"),
                    format!("edges out of canonical order; expected ({j},{i})"),
                ));
            }
            let want = [
                self.nodes[j].location[0],
                self.nodes[j].location[1],
                self.nodes[i].location[0],
                self.nodes[i].location[1],
            ];
            if e.spatial != want {
                return Err(Error::schema(
                    format!("edges[{idx}].spatial"),
                    format!("({j},{i}) does not match its endpoint locations"),
                ));
            }
        }
        if self.edges.len() != expected.len() {
            return Err(Error::schema(
                "edges",
                format!("expected {} edges, found {}", expected.len(), self.edges.len()),
            ));
        }
        Ok(())
    }
}

pub fn serialize_scg(scg: &Scg) -> Result<String> {
    Ok(serde_json::to_string_pretty(scg)?)
}

pub fn parse_scg(json: &str) -> Result<Scg> {
    let scg: Scg = serde_json::from_str(json).map_err(|e| Error::schema("$", e.to_string()))?;
    scg.validate()?;
    Ok(scg)
}

/// One SCG per class of interest, all built from the same image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisSet {
    pub image_id: Option<usize>,
    pub graphs: Vec<Scg>,
}

impl HypothesisSet {
    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn all_dummy(&self) -> bool {
        self.graphs.iter().all(|g| g.n_detected() == 0)
    }
}

/// Matches the bank's concepts against candidate patches. Pairs are taken
/// greedily by ascending distance (normalized by each concept's threshold
/// scale), each patch serving at most one concept.
pub fn detect_in_patches(patches: &[Patch], bank: &ConceptBank, cfg: &DetectConfig) -> Result<Vec<ConceptDetection>> {
    let n = bank.n_concepts();
    let d = bank.teacher_dim;
    if let Some(p) = patches.first() {
        if p.feature.len() != d {
            return Err(Error::IncompatibleBank {
                bank: d,
                teacher: p.feature.len(),
            });
        }
    }
    // Per-concept threshold and the scale its distances are ranked on.
    let mut limits = Vec::with_capacity(n);
    for c in &bank.concepts {
        limits.push(match cfg.threshold {
            Threshold::Global { t } => (t, 1.0),
            Threshold::Adaptive { scale } => {
                let p90 = c.distance_p90.ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "concept {} has no distance statistics; use a global threshold",
                        c.id
                    ))
                })?;
                (scale * p90, p90.max(f64::MIN_POSITIVE))
            }
        });
    }

    let mut dist = vec![vec![0.0; patches.len()]; n];
    let mut pairs = Vec::with_capacity(n * patches.len());
    for (k, c) in bank.concepts.iter().enumerate() {
        for (p, patch) in patches.iter().enumerate() {
            let dd = squared_distance(&patch.feature, &c.mean_feature).sqrt();
            dist[k][p] = dd;
            if dd <= limits[k].0 {
                pairs.push((dd / limits[k].1, k, p));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut assigned: Vec<Option<usize>> = vec![None; n];
    let mut used = vec![false; patches.len()];
    for (_, k, p) in pairs {
        if assigned[k].is_none() && !used[p] {
            assigned[k] = Some(p);
            used[p] = true;
        }
    }

    Ok((0..n)
        .map(|k| {
            let best = dist[k].iter().copied().min_by(f64::total_cmp);
            match assigned[k] {
                Some(p) => ConceptDetection {
                    concept_id: k,
                    detected: true,
                    feature: patches[p].feature.clone(),
                    location: patches[p].centroid,
                    distance: Some(dist[k][p]),
                    bbox: Some(patches[p].bbox),
                    level: Some(patches[p].level),
                },
                None => ConceptDetection {
                    concept_id: k,
                    detected: false,
                    feature: vec![cfg.epsilon; d],
                    location: [0.0, 0.0],
                    distance: best,
                    bbox: None,
                    level: None,
                },
            }
        })
        .collect())
}

/// All grid patches of an unmasked image.
pub fn image_patches(teacher: &TeacherModel, image: &Image, image_id: usize, cfg: &DetectConfig) -> Result<Vec<Patch>> {
    segment_multiresolution(teacher, image, None, image_id, &cfg.segment)
}

pub fn detect_concepts(
    image: &Image,
    bank: &ConceptBank,
    teacher: &TeacherModel,
    cfg: &DetectConfig,
) -> Result<Vec<ConceptDetection>> {
    bank.check_compatible(teacher.feature_dim())?;
    detect_in_patches(&image_patches(teacher, image, 0, cfg)?, bank, cfg)
}

pub fn hypotheses_from_patches(
    patches: &[Patch],
    banks: &[ConceptBank],
    image_id: Option<usize>,
    cfg: &DetectConfig,
) -> Result<HypothesisSet> {
    if banks.is_empty() {
        return Err(Error::InvalidArgument("at least one concept bank is required".into()));
    }
    let graphs = banks
        .iter()
        .map(|b| Ok(Scg::from_nodes(b.class_id, image_id, detect_in_patches(patches, b, cfg)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(HypothesisSet { image_id, graphs })
}

/// Segments the image once and builds one hypothesis per bank.
pub fn build_hypotheses(
    image: &Image,
    image_id: Option<usize>,
    banks: &[ConceptBank],
    teacher: &TeacherModel,
    cfg: &DetectConfig,
) -> Result<HypothesisSet> {
    for b in banks {
        b.check_compatible(teacher.feature_dim())?;
    }
    let patches = image_patches(teacher, image, image_id.unwrap_or(0), cfg)?;
    hypotheses_from_patches(&patches, banks, image_id, cfg)
}

/// Patches of `edited`, re-featurizing only the cells that intersect
/// `changed` and reusing `original` (patches of the unedited image) elsewhere.
pub fn patches_after_edit(
    teacher: &TeacherModel,
    edited: &Image,
    original: &[Patch],
    changed: &PixelBox,
    cfg: &DetectConfig,
) -> Result<Vec<Patch>> {
    let boxes = grid_boxes(edited.width, edited.height, &cfg.segment.grids);
    if boxes.len() != original.len() {
        return Err(Error::InvalidArgument("patch list does not match the grid".into()));
    }
    original
        .iter()
        .map(|p| {
            if p.bbox.intersection(changed) == 0 {
                Ok(p.clone())
            } else {
                Ok(Patch {
                    feature: patch_feature(teacher, edited, &p.bbox, cfg.segment.patch_size)?,
                    ..p.clone()
                })
            }
        })
        .collect()
}

/// Occludes the box of a detected concept and rebuilds the hypotheses.
#[allow(clippy::too_many_arguments)]
pub fn mask_concept(
    image: &Image,
    hypotheses: &HypothesisSet,
    class_id: usize,
    concept_id: usize,
    banks: &[ConceptBank],
    teacher: &TeacherModel,
    cfg: &DetectConfig,
    fill: &[f64],
) -> Result<(Image, HypothesisSet)> {
    let b = detected_box(hypotheses, class_id, concept_id)?;
    let masked = occlude_region(image, &b, fill)?;
    let rebuilt = build_hypotheses(&masked, hypotheses.image_id, banks, teacher, cfg)?;
    Ok((masked, rebuilt))
}

/// Box of a detected concept in the given class's hypothesis.
pub fn detected_box(hypotheses: &HypothesisSet, class_id: usize, concept_id: usize) -> Result<PixelBox> {
    let g = hypotheses
        .graphs
        .iter()
        .find(|g| g.class_id == class_id)
        .ok_or(Error::UnknownClass(class_id))?;
    let node = g.nodes.get(concept_id).ok_or(Error::NotDetected {
        class: class_id,
        concept: concept_id,
    })?;
    match (node.detected, node.bbox) {
        (true, Some(b)) => Ok(b),
        _ => Err(Error::NotDetected {
            class: class_id,
            concept: concept_id,
        }),
    }
}
