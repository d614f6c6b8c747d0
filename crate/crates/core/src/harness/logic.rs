//! Logic consistency: do edits guided by the explanation fix the teacher's
//! mistakes more often than unguided edits of the same size?

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::edit::{Source, SubstitutionPlan};
use super::{rate, Artifacts, Check, ExperimentReport, Log};
use crate::error::{Error, Result};
use crate::rng;
use crate::scg::{image_patches, hypotheses_from_patches};
use crate::vdi::{explain_hypotheses, HypothesisScore};
use crate::world::{generate_range, render_image, Image, LabeledImage, PixelBox};

pub const LOGIC_ID_OFFSET: usize = 2_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogicConfig {
    /// Chance that one drawn part is faded in pool candidates.
    pub flaw_prob: f64,
    /// Part dropout of pool candidates.
    pub part_dropout: f64,
    /// Candidates scanned for teacher mistakes before giving up.
    pub max_candidates: usize,
    pub pool_max: usize,
    pub min_pool: usize,
    pub feather: usize,
    /// Share of negative mass one score family needs to be named the cause.
    pub cause_majority: f64,
    /// Required lead of the guided arm over the better control.
    pub min_margin: f64,
}

impl Default for LogicConfig {
    fn default() -> Self {
        Self {
            flaw_prob: 1.0,
            part_dropout: 0.4,
            max_candidates: 8000,
            pool_max: 120,
            min_pool: 50,
            feather: 2,
            cause_majority: 0.65,
            min_margin: 0.3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cause {
    Concept,
    Structure,
    Both,
}

/// Names the score family carrying most of the hypothesis's negative mass.
pub fn classify_cause(h: &HypothesisScore, majority: f64) -> (Cause, f64, f64) {
    let neg = |v: f64| (-v).max(0.0);
    let nodes: f64 = h.nodes.iter().map(|n| neg(n.score)).sum();
    let edges: f64 = h.edges.iter().map(|e| neg(e.score)).sum();
    let total = nodes + edges;
    let cause = if total <= 0.0 {
        Cause::Both
    } else if nodes / total > majority {
        Cause::Concept
    } else if edges / total > majority {
        Cause::Structure
    } else {
        Cause::Both
    };
    (cause, nodes, edges)
}

#[derive(Serialize)]
struct ArmResult {
    plan: SubstitutionPlan,
    prediction: usize,
    corrected: bool,
}

#[derive(Serialize)]
struct LogicTrial {
    image_id: usize,
    label: usize,
    teacher_prediction: usize,
    flawed_part: Option<usize>,
    parts_drawn: usize,
    cause: Cause,
    node_negative_mass: f64,
    edge_negative_mass: f64,
    guided: ArmResult,
    random_patch: ArmResult,
    good_for_good: ArmResult,
}

/// Teacher-misclassified images from the flawed variant of the world.
fn misclassified_pool(a: &Artifacts, cfg: &LogicConfig) -> Result<(Vec<LabeledImage>, usize)> {
    let mut world = a.config.world.clone();
    world.flaw_prob = cfg.flaw_prob;
    world.part_dropout = cfg.part_dropout;
    let mut pool = Vec::new();
    let mut scanned = 0;
    const CHUNK: usize = 300;
    while scanned < cfg.max_candidates && pool.len() < cfg.pool_max {
        let start = LOGIC_ID_OFFSET + scanned;
        let end = start + CHUNK.min(cfg.max_candidates - scanned);
        for img in generate_range(&world, start, end, a.seed, 1)? {
            if pool.len() < cfg.pool_max && a.teacher.predict(&img.pixels)? != img.label {
                pool.push(img);
            }
        }
        scanned = end - LOGIC_ID_OFFSET;
    }
    Ok((pool, scanned))
}

fn train_image(a: &Artifacts, id: usize) -> Result<Image> {
    let n = a.config.world.n_classes();
    Ok(render_image(&a.config.world, id, id % n, a.seed)?.pixels)
}

pub fn run_logic_consistency(a: &Artifacts, log: Log) -> Result<ExperimentReport> {
    let cfg = &a.config.logic;
    let mut report = ExperimentReport::new("logic_consistency", a.seed, cfg);
    let (pool, scanned) = misclassified_pool(a, cfg)?;
    log(&format!("  {} misclassified of {scanned} scanned", pool.len()));
    report.aggregate("candidates_scanned", scanned as f64);
    report.aggregate("pool_size", pool.len() as f64);
    if pool.is_empty() {
        report.flag("no teacher-misclassified images found; the pool is empty");
    }

    let (w, h) = (a.config.world.image_size, a.config.world.image_size);
    let n_train = a.config.train_per_class * a.config.world.n_classes();
    let mut counts = [0usize; 3];
    let mut causes = [0usize; 3];
    for (t, img) in pool.iter().enumerate() {
        let patches = image_patches(&a.teacher, &img.pixels, img.id, &a.config.detect)?;
        let hyps = hypotheses_from_patches(&patches, &a.banks, Some(img.id), &a.config.detect)?;
        let expl = explain_hypotheses(&hyps, &a.model, None)?;
        let section = expl.section(img.label).ok_or(Error::UnknownClass(img.label))?;
        let own = section.own();
        let bank = a.banks.iter().find(|b| b.class_id == img.label).ok_or(Error::UnknownClass(img.label))?;
        let (cause, node_neg, edge_neg) = classify_cause(own, cfg.cause_majority);
        causes[cause as usize] += 1;

        let box_of = |k: usize| -> Result<PixelBox> {
            own.nodes[k]
                .bbox
                .or_else(|| bank.typical_box(k, w, h))
                .ok_or_else(|| Error::InvalidArgument(format!("concept {k} has no box")))
        };
        let exemplar = |k: usize| -> Result<(usize, PixelBox)> {
            let ex = &bank.concepts[k].exemplars;
            if ex.is_empty() {
                return Err(Error::InvalidArgument(format!("concept {k} has no exemplars")));
            }
            let e = &ex[t % ex.len()];
            Ok((e.image, e.bbox))
        };
        let run_arm = |plan: SubstitutionPlan| -> Result<ArmResult> {
            let donor = if plan.donor_image == img.id { img.pixels.clone() } else { train_image(a, plan.donor_image)? };
            let edited = plan.apply(&img.pixels, &donor, cfg.feather)?;
            let prediction = a.teacher.predict(&edited)?;
            Ok(ArmResult {
                plan,
                prediction,
                corrected: prediction == img.label,
            })
        };

        // Guided: the most negative node of the true class, filled with a good exemplar.
        let worst = (0..own.nodes.len())
            .min_by(|&i, &j| own.nodes[i].score.total_cmp(&own.nodes[j].score))
            .expect("hypotheses have nodes");
        let target_box = box_of(worst)?;
        let (donor_image, donor_box) = exemplar(worst)?;
        let guided = run_arm(SubstitutionPlan {
            target_image: img.id,
            class_id: img.label,
            concept_id: worst,
            source: Source::VrxGuided,
            target_box,
            donor_image,
            donor_box,
        })?;

        // Random patch: same slot, a same-sized crop from a random image.
        let mut r = rng::stream(a.seed, "logic/random-patch", t as u64);
        let rid = r.random_range(0..n_train);
        let (bw, bh) = (target_box.width(), target_box.height());
        let (x0, y0) = (r.random_range(0..=w - bw), r.random_range(0..=h - bh));
        let random_patch = run_arm(SubstitutionPlan {
            target_image: img.id,
            class_id: img.label,
            concept_id: worst,
            source: Source::RandomPatch,
            target_box,
            donor_image: rid,
            donor_box: PixelBox::new(x0, y0, x0 + bw, y0 + bh),
        })?;

        // Good for good: the best detected node replaced by its own kind.
        let best = (0..own.nodes.len())
            .filter(|&k| own.nodes[k].detected)
            .max_by(|&i, &j| own.nodes[i].score.total_cmp(&own.nodes[j].score))
            .unwrap_or_else(|| {
                (0..own.nodes.len())
                    .max_by(|&i, &j| own.nodes[i].score.total_cmp(&own.nodes[j].score))
                    .expect("hypotheses have nodes")
            });
        let (donor_image, donor_box) = exemplar(best)?;
        let good_for_good = run_arm(SubstitutionPlan {
            target_image: img.id,
            class_id: img.label,
            concept_id: best,
            source: Source::GoodForGood,
            target_box: box_of(best)?,
            donor_image,
            donor_box,
        })?;

        counts[0] += usize::from(guided.corrected);
        counts[1] += usize::from(random_patch.corrected);
        counts[2] += usize::from(good_for_good.corrected);
        report.trial(&LogicTrial {
            image_id: img.id,
            label: img.label,
            teacher_prediction: a.teacher.predict(&img.pixels)?,
            flawed_part: img.flawed_part,
            parts_drawn: img.provenance.len(),
            cause,
            node_negative_mass: node_neg,
            edge_negative_mass: edge_neg,
            guided,
            random_patch,
            good_for_good,
        });
    }

    let n = pool.len();
    let (g, rp, gg) = (rate(counts[0], n), rate(counts[1], n), rate(counts[2], n));
    report.aggregate("guided_correction_rate", g);
    report.aggregate("random_patch_correction_rate", rp);
    report.aggregate("good_for_good_correction_rate", gg);
    report.aggregate("remaining_misclassified_guided", (n - counts[0]) as f64);
    report.aggregate("remaining_misclassified_random_patch", (n - counts[1]) as f64);
    report.aggregate("remaining_misclassified_good_for_good", (n - counts[2]) as f64);
    report.aggregate("cause_concept", causes[0] as f64);
    report.aggregate("cause_structure", causes[1] as f64);
    report.aggregate("cause_both", causes[2] as f64);
    report.check(Check::at_least("pool_size", n as f64, cfg.min_pool as f64));
    report.check(Check::at_least("guided_margin_over_controls", g - rp.max(gg), cfg.min_margin));
    Ok(report)
}
