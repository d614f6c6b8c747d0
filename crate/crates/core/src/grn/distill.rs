//! Distillation: fit the graph network to the teacher's normalized outputs
//! with an L1 objective, occasionally on a concept-masked copy of the image.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::GrnModel;
use crate::autodiff::{softmax, Tape};
use crate::concepts::ConceptBank;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rng;
use crate::scg::{image_patches, hypotheses_from_patches, patches_after_edit, DetectConfig, HypothesisSet};
use crate::world::{argmax, occlude_region, LabeledImage, TeacherModel};

/// Constant rate, then halved every `decay_every` epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub lr: f64,
    pub constant_epochs: usize,
    pub decay: f64,
    pub decay_every: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            lr: 0.01,
            constant_epochs: 100,
            decay: 0.5,
            decay_every: 50,
        }
    }
}

impl LrSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.constant_epochs {
            return self.lr;
        }
        let steps = 1 + (epoch - self.constant_epochs) / self.decay_every.max(1);
        self.lr * self.decay.powi(steps as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    /// Chance that a sample is replaced by its concept-masked variant.
    pub p_mask: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 128,
            schedule: LrSchedule::default(),
            beta1: 0.9,
            beta2: 0.999,
            p_mask: 0.5,
        }
    }
}

/// One input graph set with the teacher's normalized output on it.
#[derive(Clone, Debug)]
pub struct Target {
    pub hypotheses: HypothesisSet,
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct DistillSample {
    pub image_id: usize,
    pub original: Target,
    /// The same image with one detected concept occluded, when any was.
    pub masked: Option<Target>,
    /// `(class id, concept id)` that was occluded.
    pub masked_concept: Option<(usize, usize)>,
}

/// Teacher logits restricted to `class_ids`, softmax-normalized.
pub fn teacher_probs(teacher: &TeacherModel, image: &crate::world::Image, class_ids: &[usize]) -> Result<Vec<f64>> {
    let logits = teacher.logits(image)?;
    let picked = class_ids
        .iter()
        .map(|&c| logits.get(c).copied().ok_or(Error::UnknownClass(c)))
        .collect::<Result<Vec<_>>>()?;
    Ok(softmax(&picked))
}

/// Featurizes every image once, plus one masked variant that occludes a
/// randomly chosen detected concept. Only grid cells touching the occluded
/// box are re-featurized.
pub fn build_samples(
    images: &[LabeledImage],
    banks: &[ConceptBank],
    teacher: &TeacherModel,
    cfg: &DetectConfig,
    fill: &[f64],
    seed: u64,
) -> Result<Vec<DistillSample>> {
    if banks.is_empty() || banks.iter().any(|b| b.concepts.is_empty()) {
        return Err(Error::InvalidArgument("every class needs a non-empty concept bank".into()));
    }
    for b in banks {
        b.check_compatible(teacher.feature_dim())?;
    }
    let class_ids: Vec<usize> = banks.iter().map(|b| b.class_id).collect();
    images
        .iter()
        .map(|img| {
            let patches = image_patches(teacher, &img.pixels, img.id, cfg)?;
            let hyps = hypotheses_from_patches(&patches, banks, Some(img.id), cfg)?;
            let original = Target {
                probs: teacher_probs(teacher, &img.pixels, &class_ids)?,
                hypotheses: hyps,
            };
            let detected: Vec<(usize, usize)> = original
                .hypotheses
                .graphs
                .iter()
                .flat_map(|g| g.nodes.iter().filter(|n| n.detected).map(move |n| (g.class_id, n.concept_id)))
                .collect();
            let mut rng = rng::stream(seed, "grn/mask-choice", img.id as u64);
            let (masked, masked_concept) = if detected.is_empty() {
                (None, None)
            } else {
                let (c, k) = detected[rng.random_range(0..detected.len())];
                let b = crate::scg::detected_box(&original.hypotheses, c, k)?;
                let occluded = occlude_region(&img.pixels, &b, fill)?;
                let mp = patches_after_edit(teacher, &occluded, &patches, &b, cfg)?;
                let t = Target {
                    hypotheses: hypotheses_from_patches(&mp, banks, Some(img.id), cfg)?,
                    probs: teacher_probs(teacher, &occluded, &class_ids)?,
                };
                (Some(t), Some((c, k)))
            };
            Ok(DistillSample {
                image_id: img.id,
                original,
                masked,
                masked_concept,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over samples of the L1 distance between normalized outputs.
    pub loss: f64,
    /// Share of samples whose student and teacher top-1 agree.
    pub agreement: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.records {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Trains `model` in place. Deterministic given `seed`.
pub fn distill_train(
    model: &mut GrnModel,
    samples: &[DistillSample],
    cfg: &DistillConfig,
    seed: u64,
) -> Result<History> {
    distill_train_with(model, samples, cfg, seed, |_| {})
}

/// As [`distill_train`], calling `on_epoch` after every epoch.
pub fn distill_train_with(
    model: &mut GrnModel,
    samples: &[DistillSample],
    cfg: &DistillConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no distillation samples".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be ≥ 1".into()));
    }
    let n = model.config.n_classes;
    let lens: Vec<usize> = model.params().iter().map(|t| t.len()).collect();
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.schedule.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            ..Default::default()
        },
        &lens,
    );
    let mut history = History::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        adam.set_lr(cfg.schedule.lr_at(epoch));
        let mut rng = rng::stream(seed, "grn/distill", epoch as u64);
        order.shuffle(&mut rng);
        let picks: Vec<&Target> = order
            .iter()
            .map(|&i| {
                let s = &samples[i];
                match &s.masked {
                    Some(m) if rng.random::<f64>() < cfg.p_mask => m,
                    _ => &s.original,
                }
            })
            .collect();

        let (mut loss_sum, mut agree) = (0.0, 0usize);
        for batch in picks.chunks(cfg.batch_size) {
            let hyps: Vec<&HypothesisSet> = batch.iter().map(|t| &t.hypotheses).collect();
            let target: Vec<f64> = batch.iter().flat_map(|t| t.probs.iter().copied()).collect();

            let mut tape = Tape::new();
            let pv = model.record_params(&mut tape, true);
            let mut bn = model.bn_states();
            let fwd = model.forward_on_tape(&mut tape, &pv, &hyps, &mut bn, true)?;
            let probs = tape.softmax(fwd.logits)?;
            let t = tape.constant(crate::tensor::Tensor::new(vec![batch.len(), n], target)?);
            let l1 = tape.l1_loss(probs, t)?;
            // Per-sample L1 norm: the mean over elements times the class count.
            let loss = tape.scale(l1, n as f64)?;
            let lv = tape.value(loss).item()?;
            if !lv.is_finite() {
                return Err(Error::Diverged(format!("distillation loss {lv} at epoch {}", epoch + 1)));
            }
            loss_sum += lv * batch.len() as f64;
            let student = tape.value(probs).data();
            for (row, t) in student.chunks(n).zip(batch) {
                if argmax(row) == argmax(&t.probs) {
                    agree += 1;
                }
            }
            tape.backward(loss)?;

            let vars = GrnModel::param_var_list(&pv);
            let grads: Vec<Vec<f64>> = vars
                .iter()
                .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).len()]))
                .collect();
            let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            let mut params: Vec<&mut [f64]> = model.params_mut().into_iter().map(|t| t.data_mut()).collect();
            adam.step(&mut params, &grad_refs)?;
            for (l, s) in model.layers.iter_mut().zip(bn) {
                l.bn = s;
            }
        }
        let rec = EpochRecord {
            epoch: epoch + 1,
            loss: loss_sum / samples.len() as f64,
            agreement: agree as f64 / samples.len() as f64,
        };
        on_epoch(&rec);
        history.records.push(rec);
    }
    Ok(history)
}

/// Top-1 agreement between the model and the teacher targets.
pub fn agreement(model: &GrnModel, targets: &[&Target]) -> Result<f64> {
    if targets.is_empty() {
        return Ok(0.0);
    }
    let hyps: Vec<&HypothesisSet> = targets.iter().map(|t| &t.hypotheses).collect();
    let logits = model.logits_many(&hyps)?;
    let hits = logits
        .iter()
        .zip(targets)
        .filter(|(l, t)| argmax(l) == argmax(&t.probs))
        .count();
    Ok(hits as f64 / targets.len() as f64)
}
