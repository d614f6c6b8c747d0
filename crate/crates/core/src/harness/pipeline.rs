//! dataset → teacher → concept banks → hypotheses → distilled graph network.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{rate, Check, ExperimentReport, HarnessConfig, Log};
use crate::concepts::{discover_concepts, load_bank, save_bank, ConceptBank};
use crate::error::{Error, Result};
use crate::grn::{
    build_samples, distill_train_with, load_model, save_model, teacher_probs, DistillSample, GrnModel, History,
};
use crate::scg::{build_hypotheses, mask_concept};
use crate::world::{
    argmax, generate_dataset, generate_range, mean_pixel, train_teacher, LabeledImage, TeacherModel,
};

/// Held-out images are numbered from here, so they never collide with
/// training ids.
pub const TEST_ID_OFFSET: usize = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FidelityConfig {
    pub min_agreement: f64,
    /// Test images per class shown with their masked variants.
    pub display_per_class: usize,
}

impl Default for FidelityConfig {
    fn default() -> Self {
        Self {
            min_agreement: 0.9,
            display_per_class: 1,
        }
    }
}

pub struct Artifacts {
    pub config: HarnessConfig,
    pub seed: u64,
    pub teacher: TeacherModel,
    pub banks: Vec<ConceptBank>,
    pub model: GrnModel,
    /// Occlusion fill: mean training pixel.
    pub fill: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    seed: u64,
    fill: Vec<f64>,
}

impl Artifacts {
    pub fn class_ids(&self) -> &[usize] {
        &self.model.class_ids
    }

    pub fn class_name(&self, class_id: usize) -> &str {
        self.config.world.classes.get(class_id).map_or("?", |c| c.name.as_str())
    }

    pub fn train_images(&self) -> Result<Vec<LabeledImage>> {
        generate_dataset(&self.config.world, self.config.train_per_class, self.seed)
    }

    pub fn test_images(&self) -> Result<Vec<LabeledImage>> {
        test_images(&self.config, self.seed)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("banks"))?;
        self.config.save(&dir.join("config.json"))?;
        let meta = Meta {
            seed: self.seed,
            fill: self.fill.clone(),
        };
        fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
        self.teacher.save(&dir.join("teacher.json"))?;
        for b in &self.banks {
            save_bank(b, &dir.join("banks").join(format!("class_{}.json", b.class_id)))?;
        }
        save_model(&self.model, &dir.join("model"))
    }
}

/// Reads what [`Artifacts::save`] wrote.
pub fn load_artifacts(dir: &Path) -> Result<Artifacts> {
    let config = HarnessConfig::load(&dir.join("config.json"))?;
    let meta: Meta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
    let teacher = TeacherModel::load(&dir.join("teacher.json"))?;
    let banks = load_banks(&dir.join("banks"), teacher.feature_dim())?;
    let model = load_model(&dir.join("model"))?;
    model.check_banks(&banks)?;
    Ok(Artifacts {
        config,
        seed: meta.seed,
        teacher,
        banks,
        model,
        fill: meta.fill,
    })
}

/// Every `*.json` bank in `dir`, ordered by class id.
pub fn load_banks(dir: &Path, teacher_dim: usize) -> Result<Vec<ConceptBank>> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut banks = paths
        .iter()
        .map(|p| load_bank(p, Some(teacher_dim)))
        .collect::<Result<Vec<_>>>()?;
    banks.sort_by_key(|b| b.class_id);
    if banks.is_empty() {
        return Err(Error::InvalidArgument(format!("no concept banks in {}", dir.display())));
    }
    Ok(banks)
}

pub fn test_images(cfg: &HarnessConfig, seed: u64) -> Result<Vec<LabeledImage>> {
    let n = cfg.world.n_classes() * cfg.test_per_class;
    generate_range(&cfg.world, TEST_ID_OFFSET, TEST_ID_OFFSET + n, seed, cfg.test_per_class)
}

pub fn teacher_stage(cfg: &HarnessConfig, train: &[LabeledImage], seed: u64) -> Result<TeacherModel> {
    train_teacher(train, cfg.world.n_classes(), &cfg.teacher, seed).map_err(|e| e.in_stage("teacher"))
}

pub fn concept_stage(
    cfg: &HarnessConfig,
    train: &[LabeledImage],
    teacher: &TeacherModel,
    fill: &[f64],
    seed: u64,
) -> Result<Vec<ConceptBank>> {
    (0..cfg.world.n_classes())
        .map(|c| {
            let imgs: Vec<LabeledImage> = train
                .iter()
                .filter(|i| i.label == c)
                .take(cfg.discovery_images_per_class)
                .cloned()
                .collect();
            discover_concepts(&imgs, c, teacher, fill, &cfg.discover, seed)
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("concepts"))
}

pub fn distill_stage(
    cfg: &HarnessConfig,
    samples: &[DistillSample],
    banks: &[ConceptBank],
    teacher: &TeacherModel,
    seed: u64,
    log: Log,
) -> Result<(GrnModel, History)> {
    let class_ids: Vec<usize> = banks.iter().map(|b| b.class_id).collect();
    let n_concepts = banks.iter().map(|b| b.n_concepts()).min().unwrap_or(0);
    let gc = cfg.grn.config(class_ids.len(), n_concepts, teacher.feature_dim());
    let mut model = GrnModel::new(gc, class_ids, seed)?;
    model.bank_hashes = banks.iter().map(|b| b.digest()).collect();
    let history = distill_train_with(&mut model, samples, &cfg.distill, seed, |r| {
        if r.epoch == 1 || r.epoch % 25 == 0 {
            log(&format!("  epoch {:>3}: loss {:.4}, agreement {:.3}", r.epoch, r.loss, r.agreement));
        }
    })
    .map_err(|e| e.in_stage("distill"))?;
    Ok((model, history))
}

#[derive(Serialize)]
struct ImageRecord {
    image_id: usize,
    label: usize,
    teacher: usize,
    student: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    masked_teacher: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    masked_student: Option<usize>,
}

#[derive(Serialize)]
struct TableRow {
    row: String,
    image_id: usize,
    teacher: Vec<f64>,
    student: Vec<f64>,
}

fn rounded(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1e4).round() / 1e4).collect()
}

/// Runs every stage, writing artifacts to `out` when given.
pub fn run_pipeline(cfg: &HarnessConfig, seed: u64, out: Option<&Path>, log: Log) -> Result<(Artifacts, ExperimentReport)> {
    cfg.validate()?;
    log("generating world");
    let train = generate_dataset(&cfg.world, cfg.train_per_class, seed).map_err(|e| e.in_stage("world"))?;
    let test = test_images(cfg, seed).map_err(|e| e.in_stage("world"))?;
    let fill = mean_pixel(&train);

    log("training teacher");
    let teacher = teacher_stage(cfg, &train, seed)?;
    log(&format!("  validation accuracy {:.3}", teacher.val_accuracy));
    log("discovering concepts");
    let banks = concept_stage(cfg, &train, &teacher, &fill, seed)?;

    log("building hypotheses");
    let train_samples =
        build_samples(&train, &banks, &teacher, &cfg.detect, &fill, seed).map_err(|e| e.in_stage("hypotheses"))?;
    let test_samples =
        build_samples(&test, &banks, &teacher, &cfg.detect, &fill, seed).map_err(|e| e.in_stage("hypotheses"))?;

    log("distilling");
    let (model, history) = distill_stage(cfg, &train_samples, &banks, &teacher, seed, log)?;

    log("evaluating");
    let artifacts = Artifacts {
        config: cfg.clone(),
        seed,
        teacher,
        banks,
        model,
        fill,
    };
    let mut report = fidelity_report(&artifacts, &test, &test_samples)?;
    if let Some(last) = history.records.last() {
        report.aggregate("final_train_loss", last.loss);
        report.aggregate("final_train_agreement", last.agreement);
    }
    if let Some(dir) = out {
        artifacts.save(dir)?;
        history.save_csv(&dir.join("history.csv"))?;
    }
    Ok((artifacts, report))
}

fn fidelity_report(a: &Artifacts, test: &[LabeledImage], samples: &[DistillSample]) -> Result<ExperimentReport> {
    let mut report = ExperimentReport::new("pipeline", a.seed, &a.config);
    let originals: Vec<_> = samples.iter().map(|s| &s.original.hypotheses).collect();
    let student = a.model.logits_many(&originals)?;
    let masked: Vec<_> = samples.iter().filter_map(|s| s.masked.as_ref().map(|m| &m.hypotheses)).collect();
    let mut masked_student = a.model.logits_many(&masked)?.into_iter();

    let (mut agree, mut masked_agree, mut masked_n, mut teacher_correct, mut student_correct) = (0, 0, 0, 0, 0);
    for ((img, s), logits) in test.iter().zip(samples).zip(&student) {
        let slot = |c: usize| a.class_ids()[c];
        let t = slot(argmax(&s.original.probs));
        let st = slot(argmax(logits));
        agree += usize::from(t == st);
        teacher_correct += usize::from(t == img.label);
        student_correct += usize::from(st == img.label);
        let (mut mt, mut ms) = (None, None);
        if let Some(m) = &s.masked {
            let l = masked_student.next().expect("one logit row per masked sample");
            mt = Some(slot(argmax(&m.probs)));
            ms = Some(slot(argmax(&l)));
            masked_agree += usize::from(mt == ms);
            masked_n += 1;
        }
        report.trial(&ImageRecord {
            image_id: img.id,
            label: img.label,
            teacher: t,
            student: st,
            masked_teacher: mt,
            masked_student: ms,
        });
    }
    let agreement = rate(agree, test.len());
    report.aggregate("test_agreement", agreement);
    report.aggregate("test_masked_agreement", rate(masked_agree, masked_n));
    report.aggregate("teacher_test_accuracy", rate(teacher_correct, test.len()));
    report.aggregate("student_test_accuracy", rate(student_correct, test.len()));
    report.aggregate("teacher_val_accuracy", a.teacher.val_accuracy);
    report.aggregate("n_test", test.len() as f64);
    report.check(Check::at_least("test_agreement", agreement, a.config.fidelity.min_agreement));

    // Prediction-comparison table: a few images and each of their
    // detected true-class concepts masked out in turn.
    for &c in a.class_ids() {
        for img in test.iter().filter(|i| i.label == c).take(a.config.fidelity.display_per_class) {
            let name = a.class_name(c).to_string();
            let hyps = build_hypotheses(&img.pixels, Some(img.id), &a.banks, &a.teacher, &a.config.detect)?;
            report.table_row(
                "predictions",
                &TableRow {
                    row: name.clone(),
                    image_id: img.id,
                    teacher: rounded(&teacher_probs(&a.teacher, &img.pixels, a.class_ids())?),
                    student: rounded(&crate::autodiff::softmax(&a.model.logits(&hyps)?)),
                },
            );
            let own = hyps.graphs.iter().find(|g| g.class_id == c).expect("bank per class");
            for n in own.nodes.iter().filter(|n| n.detected) {
                let (masked_img, masked_h) = mask_concept(
                    &img.pixels,
                    &hyps,
                    c,
                    n.concept_id,
                    &a.banks,
                    &a.teacher,
                    &a.config.detect,
                    &a.fill,
                )?;
                report.table_row(
                    "predictions",
                    &TableRow {
                        row: format!("{name}_detect{}", n.concept_id),
                        image_id: img.id,
                        teacher: rounded(&teacher_probs(&a.teacher, &masked_img, a.class_ids())?),
                        student: rounded(&crate::autodiff::softmax(&a.model.logits(&masked_h)?)),
                    },
                );
            }
        }
    }
    Ok(report)
}
