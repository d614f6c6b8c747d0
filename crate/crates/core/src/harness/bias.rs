//! Bias diagnosis: a teacher trained where each class appears in a single
//! pose misreads unseen poses. The explanation should blame the layout
//! (edges) while crediting the parts (nodes), and adding pose-diverse data
//! for the affected class should help more than adding the same amount of
//! single-pose data.

use serde::{Deserialize, Serialize};

use super::pipeline::{concept_stage, distill_stage, teacher_stage};
use super::{mean, rate, Artifacts, Check, ExperimentReport, HarnessConfig, Log};
use crate::error::{Error, Result};
use crate::grn::build_samples;
use crate::scg::build_hypotheses;
use crate::vdi::{explain_hypotheses, HypothesisScore, NodeScore};
use crate::world::{generate_dataset, generate_range, mean_pixel, LabeledImage, TeacherModel, WorldSpec};

pub const BIAS_TEST_ID_OFFSET: usize = 4_000_000;
const DIVERSE_ID_OFFSET: usize = 5_000_000;
const SAME_POSE_ID_OFFSET: usize = 6_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BiasConfig {
    /// Training world; every class should be confined to its own poses.
    pub world: WorldSpec,
    pub train_per_class: usize,
    /// Test images per class drawn in every pose.
    pub test_per_class: usize,
    pub discovery_images_per_class: usize,
    pub distill_epochs: usize,
    /// Class given extra data; the one with the most test errors when unset.
    pub augment_class: Option<usize>,
    /// Extra images per pose in the pose-diverse setting. The same-pose
    /// setting adds as many images in total.
    pub extra_per_pose: usize,
    /// Fewer misclassified test images than this makes the result inconclusive.
    pub min_errors: usize,
    pub min_signature_rate: f64,
    pub min_gain: f64,
}

impl Default for BiasConfig {
    fn default() -> Self {
        Self {
            world: WorldSpec::pose_biased(),
            train_per_class: 400,
            test_per_class: 200,
            discovery_images_per_class: 100,
            distill_epochs: 300,
            augment_class: None,
            extra_per_pose: 150,
            min_errors: 20,
            min_signature_rate: 0.6,
            min_gain: 0.05,
        }
    }
}

#[derive(Serialize)]
struct BiasTrial {
    image_id: usize,
    label: usize,
    pose: usize,
    teacher_prediction: usize,
    detected_nodes: usize,
    positive_nodes: usize,
    /// Edges whose endpoints were both detected.
    detected_edges: usize,
    negative_edges: usize,
    mean_node_score: f64,
    mean_edge_score: f64,
    signature: bool,
}

/// Most detected concepts support the class while most relations between
/// them oppose it.
fn signature_counts(own: &HypothesisScore) -> (usize, usize, usize, usize) {
    let detected: Vec<&NodeScore> = own.nodes.iter().filter(|n| n.detected).collect();
    let positive = detected.iter().filter(|n| n.score > 0.0).count();
    let is_detected = |i: usize| own.nodes.get(i).is_some_and(|n| n.detected);
    let edges: Vec<_> = own.edges.iter().filter(|e| is_detected(e.from) && is_detected(e.to)).collect();
    let negative = edges.iter().filter(|e| e.score < 0.0).count();
    (detected.len(), positive, edges.len(), negative)
}

#[derive(Serialize)]
struct SettingRow {
    setting: &'static str,
    extra_images: usize,
    test_accuracy: f64,
    augmented_class_accuracy: f64,
}

fn accuracy_on(teacher: &TeacherModel, images: &[LabeledImage], class: Option<usize>) -> Result<f64> {
    let subset: Vec<&LabeledImage> = images.iter().filter(|i| class.is_none_or(|c| i.label == c)).collect();
    let mut hits = 0;
    for img in &subset {
        hits += usize::from(teacher.predict(&img.pixels)? == img.label);
    }
    Ok(rate(hits, subset.len()))
}

/// `count` images of `class` in `pose`, numbered from `offset`.
fn class_in_pose(world: &WorldSpec, class: usize, pose: usize, offset: usize, count: usize, seed: u64) -> Result<Vec<LabeledImage>> {
    let mut w = world.clone();
    w.classes[class].poses = vec![pose];
    (offset..offset + count)
        .map(|id| crate::world::render_image(&w, id, class, seed))
        .collect()
}

/// The harness settings for the biased world.
fn biased_harness(base: &HarnessConfig) -> HarnessConfig {
    let b = &base.bias;
    let mut cfg = base.clone();
    cfg.world = b.world.clone();
    cfg.train_per_class = b.train_per_class;
    cfg.discovery_images_per_class = b.discovery_images_per_class.min(b.train_per_class);
    cfg.distill.epochs = b.distill_epochs;
    cfg
}

pub fn run_bias_diagnosis(base: &HarnessConfig, seed: u64, log: Log) -> Result<ExperimentReport> {
    let b = &base.bias;
    let mut report = ExperimentReport::new("bias_diagnosis", seed, b);
    let cfg = biased_harness(base);
    cfg.validate()?;
    let n = cfg.world.n_classes();
    let unbiased = cfg.world.unbiased();

    log("bias: generating the pose-confined world");
    let train = generate_dataset(&cfg.world, cfg.train_per_class, seed).map_err(|e| e.in_stage("world"))?;
    let test = generate_range(&unbiased, BIAS_TEST_ID_OFFSET, BIAS_TEST_ID_OFFSET + n * b.test_per_class, seed, 1)?;
    let fill = mean_pixel(&train);
    log("bias: training the teacher");
    let teacher = teacher_stage(&cfg, &train, seed)?;
    log("bias: discovering concepts");
    let banks = concept_stage(&cfg, &train, &teacher, &fill, seed)?;
    log("bias: distilling");
    let samples = build_samples(&train, &banks, &teacher, &cfg.detect, &fill, seed).map_err(|e| e.in_stage("hypotheses"))?;
    let (model, _) = distill_stage(&cfg, &samples, &banks, &teacher, seed, log)?;
    let a = Artifacts {
        config: cfg.clone(),
        seed,
        teacher,
        banks,
        model,
        fill,
    };

    // Explanations of the teacher's mistakes on unseen poses. Correct
    // images are explained too, as the baseline for the score shifts.
    log("bias: explaining errors");
    let mut errors_per_class = vec![0usize; n];
    let (mut errors, mut signatures, mut mean_signatures) = (0, 0, 0);
    // Per class and outcome (correct, wrong): summed node and edge means.
    let mut shift = vec![[[0.0f64; 3]; 2]; n];
    for img in &test {
        let pred = a.teacher.predict(&img.pixels)?;
        let wrong = pred != img.label;
        let hyps = build_hypotheses(&img.pixels, Some(img.id), &a.banks, &a.teacher, &cfg.detect)?;
        let expl = explain_hypotheses(&hyps, &a.model, None)?;
        let own = expl.section(img.label).ok_or(Error::UnknownClass(img.label))?.own();
        let node_mean = mean(&own.nodes.iter().map(|x| x.score).collect::<Vec<_>>());
        let edge_mean = mean(&own.edges.iter().map(|x| x.score).collect::<Vec<_>>());
        let acc = &mut shift[img.label][usize::from(wrong)];
        acc[0] += node_mean;
        acc[1] += edge_mean;
        acc[2] += 1.0;
        if !wrong {
            continue;
        }
        errors += 1;
        errors_per_class[img.label] += 1;
        let (dn, pn, de, ne) = signature_counts(own);
        let signature = 2 * pn > dn && 2 * ne > de;
        signatures += usize::from(signature);
        mean_signatures += usize::from(node_mean > 0.0 && edge_mean < 0.0);
        report.trial(&BiasTrial {
            image_id: img.id,
            label: img.label,
            pose: img.pose,
            teacher_prediction: pred,
            detected_nodes: dn,
            positive_nodes: pn,
            detected_edges: de,
            negative_edges: ne,
            mean_node_score: node_mean,
            mean_edge_score: edge_mean,
            signature,
        });
    }
    // Mean score change from correct to misclassified images of a class.
    // Not gated: it separates a layout-driven drop from the per-class
    // offsets that decide the absolute signs.
    for (c, [ok, bad]) in shift.iter().enumerate() {
        if ok[2] > 0.0 && bad[2] > 0.0 {
            report.aggregate(&format!("node_shift_class_{c}"), bad[0] / bad[2] - ok[0] / ok[2]);
            report.aggregate(&format!("edge_shift_class_{c}"), bad[1] / bad[2] - ok[1] / ok[2]);
        }
    }
    let signature_rate = rate(signatures, errors);
    report.aggregate("test_errors", errors as f64);
    report.aggregate("signature_rate", signature_rate);
    // Same signature read off mean node and edge scores instead of counts.
    report.aggregate("mean_score_signature_rate", rate(mean_signatures, errors));
    report.aggregate("teacher_train_pose_accuracy", a.teacher.val_accuracy);
    for (c, e) in errors_per_class.iter().enumerate() {
        report.aggregate(&format!("test_errors_class_{c}"), *e as f64);
    }
    if errors < b.min_errors {
        report.flag(format!(
            "inconclusive: only {errors} pose errors on the unbiased test set (need {})",
            b.min_errors
        ));
    }

    // Retraining with pose-diverse or same-pose extra data for one class.
    let target = b.augment_class.unwrap_or_else(|| {
        (0..n).max_by_key(|&c| (errors_per_class[c], std::cmp::Reverse(c))).unwrap_or(0)
    });
    if target >= n {
        return Err(Error::UnknownClass(target));
    }
    let n_poses = cfg.world.poses.len();
    let total_extra = b.extra_per_pose * n_poses;
    let mut diverse = train.clone();
    for p in 0..n_poses {
        let offset = DIVERSE_ID_OFFSET + p * b.extra_per_pose;
        diverse.extend(class_in_pose(&cfg.world, target, p, offset, b.extra_per_pose, seed)?);
    }
    let own_pose = cfg.world.classes[target].poses[0];
    let mut same = train.clone();
    same.extend(class_in_pose(&cfg.world, target, own_pose, SAME_POSE_ID_OFFSET, total_extra, seed)?);

    let mut accs = Vec::new();
    for (setting, extra, teacher) in [
        ("original", 0, None),
        ("pose_diverse", total_extra, Some(&diverse)),
        ("same_pose", total_extra, Some(&same)),
    ] {
        let t = match teacher {
            None => a.teacher.clone(),
            Some(data) => {
                log(&format!("bias: retraining the teacher ({setting})"));
                teacher_stage(&cfg, data, seed)?
            }
        };
        let acc = accuracy_on(&t, &test, None)?;
        report.table_row(
            "retraining",
            &SettingRow {
                setting,
                extra_images: extra,
                test_accuracy: acc,
                augmented_class_accuracy: accuracy_on(&t, &test, Some(target))?,
            },
        );
        report.aggregate(&format!("{setting}_test_accuracy"), acc);
        accs.push(acc);
    }
    report.aggregate("augmented_class", target as f64);
    report.check(Check::at_least("signature_rate", signature_rate, b.min_signature_rate));
    report.check(Check::at_least(
        "pose_diverse_gain",
        accs[1] - accs[0].max(accs[2]),
        b.min_gain,
    ));
    Ok(report)
}
