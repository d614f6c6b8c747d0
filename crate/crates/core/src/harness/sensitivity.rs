//! Sensitivity: appearance edits should move node scores, layout edits
//! should move edge scores.

use serde::{Deserialize, Serialize};

use super::edit::{point_reflect, relocate, Source, SubstitutionPlan};
use super::{mean, rate, Artifacts, Check, ExperimentReport, Log};
use crate::concepts::Patch;
use crate::error::{Error, Result};
use crate::scg::{hypotheses_from_patches, image_patches, patches_after_edit};
use crate::vdi::{explain_hypotheses, Explanation, HypothesisScore};
use crate::world::{render_image, Image, LabeledImage, PixelBox, WorldSpec};

pub const SENSITIVITY_ID_OFFSET: usize = 3_000_000;
const DONOR_ID_OFFSET: usize = 3_500_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensitivityConfig {
    pub pool_size: usize,
    pub max_candidates: usize,
    /// Same-class images rendered with one part faded; the donor patch is
    /// cut from one whose faded part sits in the target box.
    pub donor_images_per_class: usize,
    /// Share of a donor part's color taken from the background.
    pub donor_fade: f64,
    /// Overlap of the faded part's box and the target box, as a share of
    /// the smaller one.
    pub donor_overlap: f64,
    pub feather: usize,
    /// Half-width of the "unchanged" band, as a share of the largest score.
    pub band: f64,
    /// Pool images also run through the no-op edit.
    pub noop_trials: usize,
    pub min_rate: f64,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self {
            pool_size: 100,
            max_candidates: 600,
            donor_images_per_class: 150,
            donor_fade: 0.5,
            donor_overlap: 0.5,
            feather: 2,
            band: 0.25,
            noop_trials: 10,
            min_rate: 0.8,
        }
    }
}

/// A same-class image with one faded part.
struct Donor {
    image: usize,
    faded: PixelBox,
}

#[derive(Serialize)]
struct VisualTrial {
    plan: SubstitutionPlan,
    node_before: f64,
    node_after: f64,
    node_decreased: bool,
    still_detected: bool,
    edges_within_band: bool,
}

#[derive(Serialize)]
struct StructuralTrial {
    concept_id: usize,
    from: PixelBox,
    to: PixelBox,
    edges_before: f64,
    edges_after: f64,
    edges_decreased: bool,
    node_within_band: bool,
}

#[derive(Serialize)]
struct SensitivityTrial {
    image_id: usize,
    label: usize,
    visual: Option<VisualTrial>,
    structural: Option<StructuralTrial>,
}

/// Mean score of the edges touching `node`.
fn incident_mean(h: &HypothesisScore, node: usize) -> f64 {
    let v: Vec<f64> = h.edges.iter().filter(|e| e.from == node || e.to == node).map(|e| e.score).collect();
    mean(&v)
}

fn own(e: &Explanation, class_id: usize) -> Result<&HypothesisScore> {
    Ok(e.section(class_id).ok_or(Error::UnknownClass(class_id))?.own())
}

struct Prepared {
    patches: Vec<Patch>,
    expl: Explanation,
}

fn prepare(a: &Artifacts, image: &Image, id: usize) -> Result<Prepared> {
    let patches = image_patches(&a.teacher, image, id, &a.config.detect)?;
    let expl = explain_from(a, &patches, id)?;
    Ok(Prepared { patches, expl })
}

fn explain_from(a: &Artifacts, patches: &[Patch], id: usize) -> Result<Explanation> {
    let hyps = hypotheses_from_patches(patches, &a.banks, Some(id), &a.config.detect)?;
    explain_hypotheses(&hyps, &a.model, None)
}

/// Explanation after editing the cells that intersect `changed`.
fn explain_edit(a: &Artifacts, p: &Prepared, edited: &Image, changed: &[PixelBox], id: usize) -> Result<Explanation> {
    let mut patches = p.patches.clone();
    for b in changed {
        patches = patches_after_edit(&a.teacher, edited, &patches, b, &a.config.detect)?;
    }
    explain_from(a, &patches, id)
}

/// Index of the detected node with the highest score, if any.
fn top_node(h: &HypothesisScore) -> Option<usize> {
    h.nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| n.detected && n.bbox.is_some())
        .max_by(|x, y| x.1.score.total_cmp(&y.1.score))
        .map(|(k, _)| k)
}

/// Correctly classified images (teacher and student) whose best detected
/// true-class concept contributes positively.
fn correct_pool(a: &Artifacts, cfg: &SensitivityConfig) -> Result<(Vec<(LabeledImage, Prepared)>, usize)> {
    let mut pool = Vec::new();
    let mut scanned = 0;
    for id in SENSITIVITY_ID_OFFSET..SENSITIVITY_ID_OFFSET + cfg.max_candidates {
        if pool.len() >= cfg.pool_size {
            break;
        }
        scanned += 1;
        let img = render_image(&a.config.world, id, id % a.config.world.n_classes(), a.seed)?;
        if a.teacher.predict(&img.pixels)? != img.label {
            continue;
        }
        let p = prepare(a, &img.pixels, img.id)?;
        if p.expl.predicted_class != img.label {
            continue;
        }
        let h = own(&p.expl, img.label)?;
        if top_node(h).is_some_and(|k| h.nodes[k].score > 0.0) {
            pool.push((img, p));
        }
    }
    Ok((pool, scanned))
}

fn donor_world(a: &Artifacts) -> WorldSpec {
    WorldSpec {
        flaw_fade: a.config.sensitivity.donor_fade,
        ..a.config.world.with_flaw_prob(1.0)
    }
}

/// Per class, images with a faded part and that part's box.
fn donor_index(a: &Artifacts, cfg: &SensitivityConfig) -> Result<Vec<Vec<Donor>>> {
    let n = a.config.world.n_classes();
    let world = donor_world(a);
    let mut index: Vec<Vec<Donor>> = (0..n).map(|_| Vec::new()).collect();
    for (c, slot) in index.iter_mut().enumerate() {
        for i in 0..cfg.donor_images_per_class {
            let id = DONOR_ID_OFFSET + i * n + c;
            let img = render_image(&world, id, c, a.seed)?;
            if let Some(p) = img.provenance.iter().find(|p| Some(p.part) == img.flawed_part) {
                slot.push(Donor { image: id, faded: p.bbox });
            }
        }
    }
    Ok(index)
}

pub fn run_sensitivity(a: &Artifacts, log: Log) -> Result<ExperimentReport> {
    let cfg = &a.config.sensitivity;
    let mut report = ExperimentReport::new("sensitivity", a.seed, cfg);
    let (pool, scanned) = correct_pool(a, cfg)?;
    log(&format!("  {} of {scanned} scanned images in the pool", pool.len()));
    report.aggregate("candidates_scanned", scanned as f64);
    let donors = donor_index(a, cfg)?;
    let size = a.config.world.image_size;
    let background = a.config.world.background;

    let (mut vis, mut vis_hit, mut vis_band, mut vis_detected) = (0, 0, 0, 0);
    let (mut st, mut st_hit, mut st_band) = (0, 0, 0);
    let (mut noop, mut noop_exact) = (0, 0);
    for (t, (img, p)) in pool.iter().enumerate() {
        let c = img.label;
        let before = own(&p.expl, c)?;
        let band = cfg.band * p.expl.max_abs_score;
        let k = top_node(before).expect("pool images have a top node");
        let node = &before.nodes[k];
        let target_box = node.bbox.expect("filtered on boxes");

        if t < cfg.noop_trials {
            let plan = SubstitutionPlan {
                target_image: img.id,
                class_id: c,
                concept_id: node.concept_id,
                source: Source::GoodForGood,
                target_box,
                donor_image: img.id,
                donor_box: target_box,
            };
            let edited = plan.apply(&img.pixels, &img.pixels, cfg.feather)?;
            let after = explain_edit(a, p, &edited, &[target_box], img.id)?;
            noop += 1;
            noop_exact += usize::from(after == p.expl);
        }

        // Appearance: the weakest instance of the same concept from another image.
        // Appearance: the same slot cut from an image where its part is faded.
        let fits: Vec<&Donor> = donors[c]
            .iter()
            .filter(|d| {
                let smaller = d.faded.area().min(target_box.area()) as f64;
                d.faded.intersection(&target_box) as f64 >= cfg.donor_overlap * smaller
            })
            .collect();
        let visual = match fits.get(t % fits.len().max(1)) {
            None => None,
            Some(d) => {
                let plan = SubstitutionPlan {
                    target_image: img.id,
                    class_id: c,
                    concept_id: node.concept_id,
                    source: Source::WeakInstance,
                    target_box,
                    donor_image: d.image,
                    donor_box: target_box,
                };
                let donor = render_image(&donor_world(a), d.image, c, a.seed)?.pixels;
                let edited = plan.apply(&img.pixels, &donor, cfg.feather)?;
                let after_e = explain_edit(a, p, &edited, &[target_box], img.id)?;
                let after = own(&after_e, c)?;
                let node_after = after.nodes[k].score;
                let edges_within_band = before
                    .edges
                    .iter()
                    .zip(&after.edges)
                    .filter(|(e, _)| e.from == k || e.to == k)
                    .all(|(x, y)| (x.score - y.score).abs() <= band);
                vis += 1;
                vis_hit += usize::from(node_after < node.score);
                vis_band += usize::from(edges_within_band);
                vis_detected += usize::from(after.nodes[k].detected);
                Some(VisualTrial {
                    plan,
                    node_before: node.score,
                    node_after,
                    node_decreased: node_after < node.score,
                    still_detected: after.nodes[k].detected,
                    edges_within_band,
                })
            }
        };

        // Layout: move the same pixels to the mirrored position.
        let to = point_reflect(&target_box, size, size);
        let structural = if to == target_box {
            None
        } else {
            let edited = relocate(&img.pixels, &target_box, &to, &background, cfg.feather)?;
            let after_e = explain_edit(a, p, &edited, &[target_box, to], img.id)?;
            let after = own(&after_e, c)?;
            let (eb, ea) = (incident_mean(before, k), incident_mean(after, k));
            let node_within_band = (after.nodes[k].score - node.score).abs() <= band;
            st += 1;
            st_hit += usize::from(ea < eb);
            st_band += usize::from(node_within_band);
            Some(StructuralTrial {
                concept_id: node.concept_id,
                from: target_box,
                to,
                edges_before: eb,
                edges_after: ea,
                edges_decreased: ea < eb,
                node_within_band,
            })
        };
        report.trial(&SensitivityTrial {
            image_id: img.id,
            label: c,
            visual,
            structural,
        });
    }

    report.aggregate("pool_size", pool.len() as f64);
    report.aggregate("visual_skipped_no_donor", (pool.len() - vis) as f64);
    report.aggregate("visual_trials", vis as f64);
    report.aggregate("structural_trials", st as f64);
    report.aggregate("visual_node_decrease_rate", rate(vis_hit, vis));
    report.aggregate("visual_edge_band_rate", rate(vis_band, vis));
    report.aggregate("visual_still_detected_rate", rate(vis_detected, vis));
    report.aggregate("structural_edge_decrease_rate", rate(st_hit, st));
    report.aggregate("structural_node_band_rate", rate(st_band, st));
    report.aggregate("noop_exact_rate", rate(noop_exact, noop));
    if pool.len() < cfg.pool_size {
        report.flag(format!("pool holds {} of {} requested images", pool.len(), cfg.pool_size));
    }
    report.check(Check::at_least("visual_node_decrease_rate", rate(vis_hit, vis), cfg.min_rate));
    report.check(Check::at_least("structural_edge_decrease_rate", rate(st_hit, st), cfg.min_rate));
    report.check(Check::at_least("noop_exact_rate", rate(noop_exact, noop), 1.0));
    Ok(report)
}
