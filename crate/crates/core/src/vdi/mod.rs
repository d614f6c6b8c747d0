//! Decision interpretation: split each class logit of the graph network
//! into hypothesis, node and edge contributions.
//!
//! The fusion layer is linear, so with `α_i = ∂y^c/∂G^i` and
//! `s_i = α_i · G^i` the decomposition `y^c = b_c + Σ_i s_i` is exact, and
//! restricting the dot product to a node's or an edge's slice of `G^i`
//! splits `s_i` further without remainder.

pub mod render;

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, Tape};
use crate::concepts::ConceptBank;
use crate::error::{Error, Result};
use crate::grn::{teacher_probs, GrnConfig, GrnModel};
use crate::scg::{build_hypotheses, DetectConfig, HypothesisSet};
use crate::tensor::Tensor;
use crate::world::{argmax, Image, PixelBox, TeacherModel};

pub use render::{parse_explanation, render_dot, render_explanation, render_json, render_svg, Format};

pub const EXPLANATION_VERSION: u32 = 1;

/// Tolerance of the decomposition identities checked on every explanation.
pub const IDENTITY_TOL: f64 = 1e-8;

/// `α_i = ∂y^c/∂G^i(h_i)` for every hypothesis slot `i`, computed by
/// back-propagating the class logit through the fusion layer.
/// `embeddings` holds one row per slot.
pub fn contribution_weights(model: &GrnModel, embeddings: &[Vec<f64>], class_id: usize) -> Result<Vec<Vec<f64>>> {
    let n = model.config.n_classes;
    let p = model.config.embed_dim();
    if embeddings.len() != n || embeddings.iter().any(|e| e.len() != p) {
        return Err(Error::InvalidArgument(format!(
            "expected {n} embeddings of length {p}"
        )));
    }
    let c = model
        .class_ids
        .iter()
        .position(|&k| k == class_id)
        .ok_or(Error::UnknownClass(class_id))?;
    let mut tape = Tape::new();
    let flat: Vec<f64> = embeddings.concat();
    let hyp = tape.leaf(Tensor::new(vec![n, p], flat)?.with_requires_grad(true));
    let pv = model.record_params(&mut tape, false);
    let fwd = model.fuse(&mut tape, &pv, hyp, 1)?;
    let mut pick = vec![0.0; n];
    pick[c] = 1.0;
    let sel = tape.constant(Tensor::new(vec![1, n], pick)?);
    let picked = tape.mul(fwd.logits, sel)?;
    let y = tape.sum(picked)?;
    tape.backward(y)?;
    let g = tape
        .grad(hyp)
        .ok_or_else(|| Error::Autodiff("embedding gradient missing".into()))?;
    Ok(g.chunks(p).map(<[f64]>::to_vec).collect())
}

/// Contribution of one hypothesis to one class logit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceScores {
    pub total: f64,
    /// One per node, in concept order.
    pub nodes: Vec<f64>,
    /// One per edge, in `(from, to)` order.
    pub edges: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `s_i = α_i · G^i` and its node/edge slice partition.
pub fn contribution_scores(config: &GrnConfig, alpha: &[Vec<f64>], embeddings: &[Vec<f64>]) -> Vec<SliceScores> {
    let (nn, no, eo) = (config.n_concepts, config.node_out(), config.edge_out());
    alpha
        .iter()
        .zip(embeddings)
        .map(|(a, g)| {
            let nodes = (0..nn).map(|v| dot(&a[v * no..(v + 1) * no], &g[v * no..(v + 1) * no])).collect();
            let base = nn * no;
            let edges = (0..config.n_edges())
                .map(|k| {
                    let r = base + k * eo..base + (k + 1) * eo;
                    dot(&a[r.clone()], &g[r])
                })
                .collect();
            SliceScores {
                total: dot(a, g),
                nodes,
                edges,
            }
        })
        .collect()
}

/// Display bucket of a normalized score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    StrongNegative,
    Negative,
    Neutral,
    Positive,
    StrongPositive,
}

impl Bucket {
    pub fn color(self) -> &'static str {
        match self {
            Bucket::StrongNegative => "#b2182b",
            Bucket::Negative => "#ef8a62",
            Bucket::Neutral => "#bababa",
            Bucket::Positive => "#67a9cf",
            Bucket::StrongPositive => "#2166ac",
        }
    }
}

/// Symmetric thresholds on normalized scores: `|x| ≤ neutral` is neutral,
/// `|x| > strong` is strong.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContributionScale {
    pub neutral: f64,
    pub strong: f64,
}

impl Default for ContributionScale {
    fn default() -> Self {
        Self {
            neutral: 0.05,
            strong: 0.5,
        }
    }
}

impl ContributionScale {
    pub fn bucket(&self, x: f64) -> Bucket {
        if x.abs() <= self.neutral {
            Bucket::Neutral
        } else if x > self.strong {
            Bucket::StrongPositive
        } else if x > 0.0 {
            Bucket::Positive
        } else if x < -self.strong {
            Bucket::StrongNegative
        } else {
            Bucket::Negative
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeScore {
    pub concept_id: usize,
    pub detected: bool,
    pub score: f64,
    /// Score divided by the largest magnitude in the explanation.
    pub normalized: f64,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<PixelBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeScore {
    pub from: usize,
    pub to: usize,
    pub score: f64,
    pub normalized: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisScore {
    /// Class whose concept graph this hypothesis is.
    pub class_id: usize,
    pub score: f64,
    pub nodes: Vec<NodeScore>,
    pub edges: Vec<EdgeScore>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Question {
    Why,
    WhyNot,
}

/// Decomposition of one class logit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSection {
    pub class_id: usize,
    pub question: Question,
    pub logit: f64,
    pub bias: f64,
    /// Every hypothesis's contribution to this logit, in slot order.
    pub hypotheses: Vec<HypothesisScore>,
}

impl ClassSection {
    /// The class's own hypothesis, the one its answer is read from.
    pub fn own(&self) -> &HypothesisScore {
        self.hypotheses
            .iter()
            .find(|h| h.class_id == self.class_id)
            .expect("every section holds its own hypothesis")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<usize>,
    pub class_ids: Vec<usize>,
    /// Teacher output restricted to the classes of interest, normalized.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_probs: Option<Vec<f64>>,
    pub student_logits: Vec<f64>,
    pub student_probs: Vec<f64>,
    pub predicted_class: usize,
    pub no_concepts_detected: bool,
    /// Largest node or edge score magnitude (the normalizer).
    pub max_abs_score: f64,
    pub sections: Vec<ClassSection>,
}

impl Explanation {
    pub fn section(&self, class_id: usize) -> Option<&ClassSection> {
        self.sections.iter().find(|s| s.class_id == class_id)
    }

    /// Re-checks both decomposition identities.
    pub fn check_identities(&self, tol: f64) -> Result<()> {
        for s in &self.sections {
            let sum: f64 = s.hypotheses.iter().map(|h| h.score).sum();
            let gap = (s.bias + sum - s.logit).abs();
            if gap > tol {
                return Err(Error::Consistency(format!(
                    "class {}: bias + Σ s_i differs from the logit by {gap:e}",
                    s.class_id
                )));
            }
            for h in &s.hypotheses {
                let parts: f64 =
                    h.nodes.iter().map(|n| n.score).sum::<f64>() + h.edges.iter().map(|e| e.score).sum::<f64>();
                let gap = (parts - h.score).abs();
                if gap > tol {
                    return Err(Error::Consistency(format!(
                        "class {} hypothesis {}: slice scores differ from s_i by {gap:e}",
                        s.class_id, h.class_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Explains precomputed hypotheses. `teacher_probs` is carried through
/// for display only.
pub fn explain_hypotheses(
    hypotheses: &HypothesisSet,
    model: &GrnModel,
    teacher_probs: Option<Vec<f64>>,
) -> Result<Explanation> {
    let (mut emb, mut logits) = model.forward(&[hypotheses])?;
    let (emb, logits) = (emb.remove(0), logits.remove(0));
    let predicted_slot = argmax(&logits);
    let bias = model.embed_b.data();

    let mut raw = Vec::with_capacity(model.class_ids.len());
    for &c in &model.class_ids {
        let alpha = contribution_weights(model, &emb, c)?;
        raw.push(contribution_scores(&model.config, &alpha, &emb));
    }
    let max_abs = raw
        .iter()
        .flatten()
        .flat_map(|s| s.nodes.iter().chain(&s.edges))
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let norm = |v: f64| if max_abs > 0.0 { v / max_abs } else { 0.0 };

    let sections = raw
        .into_iter()
        .enumerate()
        .map(|(slot, per_hyp)| ClassSection {
            class_id: model.class_ids[slot],
            question: if slot == predicted_slot { Question::Why } else { Question::WhyNot },
            logit: logits[slot],
            bias: bias[slot],
            hypotheses: per_hyp
                .into_iter()
                .zip(&hypotheses.graphs)
                .map(|(s, g)| HypothesisScore {
                    class_id: g.class_id,
                    score: s.total,
                    nodes: g
                        .nodes
                        .iter()
                        .zip(&s.nodes)
                        .map(|(n, &v)| NodeScore {
                            concept_id: n.concept_id,
                            detected: n.detected,
                            score: v,
                            normalized: norm(v),
                            bbox: n.bbox,
                            distance: n.distance,
                        })
                        .collect(),
                    edges: g
                        .edges
                        .iter()
                        .zip(&s.edges)
                        .map(|(e, &v)| EdgeScore {
                            from: e.from,
                            to: e.to,
                            score: v,
                            normalized: norm(v),
                        })
                        .collect(),
                })
                .collect(),
        })
        .collect();

    let expl = Explanation {
        version: EXPLANATION_VERSION,
        image_id: hypotheses.image_id,
        class_ids: model.class_ids.clone(),
        teacher_probs,
        student_probs: softmax(&logits),
        predicted_class: model.class_ids[predicted_slot],
        student_logits: logits,
        no_concepts_detected: hypotheses.all_dummy(),
        max_abs_score: max_abs,
        sections,
    };
    expl.check_identities(IDENTITY_TOL)?;
    Ok(expl)
}

/// Full path from pixels: detect concepts, run the model, decompose.
pub fn explain(
    image: &Image,
    image_id: Option<usize>,
    model: &GrnModel,
    teacher: &TeacherModel,
    banks: &[ConceptBank],
    cfg: &DetectConfig,
) -> Result<Explanation> {
    model.check_banks(banks)?;
    let hyps = build_hypotheses(image, image_id, banks, teacher, cfg)?;
    let probs = teacher_probs(teacher, image, &model.class_ids)?;
    explain_hypotheses(&hyps, model, Some(probs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buckets_partition_and_keep_sign() {
        let s = ContributionScale::default();
        assert_eq!(s.bucket(0.0), Bucket::Neutral);
        assert_eq!(s.bucket(0.05), Bucket::Neutral);
        assert_eq!(s.bucket(-0.05), Bucket::Neutral);
        assert_eq!(s.bucket(0.2), Bucket::Positive);
        assert_eq!(s.bucket(0.9), Bucket::StrongPositive);
        assert_eq!(s.bucket(-0.2), Bucket::Negative);
        assert_eq!(s.bucket(-0.9), Bucket::StrongNegative);
        assert_eq!(s.bucket(0.5), Bucket::Positive);
    }

    #[test]
    fn slice_scores_partition_total() {
        let mut cfg = GrnConfig::new(1, 3, 4);
        cfg.node_dims = vec![4, 2];
        cfg.edge_dims = vec![4, 3];
        let p = cfg.embed_dim();
        let a: Vec<f64> = (0..p).map(|i| (i as f64 * 0.37).sin()).collect();
        let g: Vec<f64> = (0..p).map(|i| (i as f64 * 0.91).cos()).collect();
        let s = &contribution_scores(&cfg, &[a], &[g])[0];
        assert_eq!(s.nodes.len(), 3);
        assert_eq!(s.edges.len(), 6);
        let parts: f64 = s.nodes.iter().chain(&s.edges).sum();
        assert!((parts - s.total).abs() < 1e-10);
    }
}
