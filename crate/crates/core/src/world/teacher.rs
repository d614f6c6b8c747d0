//! The teacher classifier: a three-block CNN with hand-written backward pass.
//!
//! Each block is a 3×3 same-padded cross-correlation, ReLU and 2×2 max-pool;
//! the last block's pooled map is globally averaged into the penultimate
//! feature vector (dimension D) and fed to a linear head. Two coordinate
//! channels are appended to the RGB input so the network can see where a
//! part sits, not just what it looks like.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::Image;
use super::render::LabeledImage;
use crate::autodiff::softmax;
use crate::error::{Error, Result};
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::optim::{Adam, AdamConfig};
use crate::rng;
use crate::tensor::{Tensor, TensorFile};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherArch {
    pub in_channels: usize,
    pub coord_channels: bool,
    /// Output channels per conv block; the last entry is D.
    pub channels: Vec<usize>,
    pub n_classes: usize,
}

impl TeacherArch {
    pub fn new(n_classes: usize) -> Self {
        Self {
            in_channels: 3,
            coord_channels: true,
            channels: vec![8, 16, 64],
            n_classes,
        }
    }

    pub fn feature_dim(&self) -> usize {
        *self.channels.last().expect("at least one block")
    }

    fn input_channels(&self) -> usize {
        self.in_channels + if self.coord_channels { 2 } else { 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub val_fraction: f64,
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            lr: 0.003,
            batch_size: 16,
            val_fraction: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Conv {
    cin: usize,
    cout: usize,
    /// `cout × (cin·9)`
    w: Vec<f64>,
    b: Vec<f64>,
}

/// `(map, grad, channels, h, w)` from [`TeacherModel::cam_inputs`].
pub type CamInputs = (Vec<f64>, Vec<f64>, usize, usize, usize);

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherModel {
    pub arch: TeacherArch,
    convs: Vec<Conv>,
    /// `n_classes × D`
    head_w: Vec<f64>,
    head_b: Vec<f64>,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

/// Intermediates of one forward pass, kept for backward and Grad-CAM.
pub struct Trace {
    blocks: Vec<BlockTrace>,
    pub features: Vec<f64>,
    pub logits: Vec<f64>,
}

struct BlockTrace {
    h: usize,
    w: usize,
    cols: Vec<f64>,
    /// Pre-activation conv output, `cout × h × w`.
    pre: Vec<f64>,
    /// Flat index into the `cout × h × w` map of each pooled maximum.
    argmax: Vec<usize>,
}

pub struct TeacherGrads {
    convs: Vec<(Vec<f64>, Vec<f64>)>,
    head_w: Vec<f64>,
    head_b: Vec<f64>,
}

fn im2col(input: &[f64], cin: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut cols = vec![0.0; cin * 9 * hw];
    for c in 0..cin {
        let plane = &input[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 9) + ky * 3 + kx) * hw..((c * 9) + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    for x in 0..w {
                        let sx = x as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            row[y * w + x] = plane[sy * w + sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], cin: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; cin * hw];
    for c in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 9) + ky * 3 + kx) * hw..((c * 9) + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    for x in 0..w {
                        let sx = x as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            out[c * hw + sy * w + sx as usize] += row[y * w + x];
                        }
                    }
                }
            }
        }
    }
    out
}

impl TeacherModel {
    /// He-initialized model drawn from the `teacher/init` stream of `seed`.
    pub fn new(arch: TeacherArch, seed: u64) -> Result<Self> {
        if arch.n_classes < 2 {
            return Err(Error::InvalidArgument("teacher needs ≥ 2 classes".into()));
        }
        if arch.channels.is_empty() {
            return Err(Error::InvalidArgument("teacher needs ≥ 1 conv block".into()));
        }
        let mut rng = rng::stream(seed, "teacher/init", 0);
        let mut convs = Vec::new();
        let mut cin = arch.input_channels();
        for &cout in &arch.channels {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            convs.push(Conv {
                cin,
                cout,
                w: (0..cout * cin * 9).map(|_| normal.sample(&mut rng)).collect(),
                b: vec![0.0; cout],
            });
            cin = cout;
        }
        let d = arch.feature_dim();
        let normal = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("positive std");
        let head_w = (0..arch.n_classes * d).map(|_| normal.sample(&mut rng)).collect();
        let head_b = vec![0.0; arch.n_classes];
        Ok(Self {
            arch,
            convs,
            head_w,
            head_b,
            train_accuracy: 0.0,
            val_accuracy: 0.0,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.feature_dim()
    }

    pub fn n_classes(&self) -> usize {
        self.arch.n_classes
    }

    fn param_lens(&self) -> Vec<usize> {
        let mut lens = Vec::new();
        for c in &self.convs {
            lens.push(c.w.len());
            lens.push(c.b.len());
        }
        lens.push(self.head_w.len());
        lens.push(self.head_b.len());
        lens
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.w);
            out.push(&mut c.b);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    /// Centered RGB plus optional coordinate planes in [-1, 1].
    fn input(&self, image: &Image) -> Result<Vec<f64>> {
        if image.channels != self.arch.in_channels {
            return Err(Error::shape("teacher input", &[self.arch.in_channels], &[image.channels]));
        }
        let min_side = 1 << self.convs.len();
        if image.height < min_side || image.width < min_side {
            return Err(Error::InvalidArgument(format!(
                "teacher input {}×{} smaller than {min_side}",
                image.height, image.width
            )));
        }
        let (h, w) = (image.height, image.width);
        let mut x: Vec<f64> = image.data.iter().map(|v| v - 0.5).collect();
        if self.arch.coord_channels {
            x.reserve(2 * h * w);
            for _y in 0..h {
                for xx in 0..w {
                    x.push(2.0 * (xx as f64 + 0.5) / w as f64 - 1.0);
                }
            }
            for y in 0..h {
                for _ in 0..w {
                    x.push(2.0 * (y as f64 + 0.5) / h as f64 - 1.0);
                }
            }
        }
        Ok(x)
    }

    pub fn forward(&self, image: &Image) -> Result<Trace> {
        let mut act = self.input(image)?;
        let (mut h, mut w) = (image.height, image.width);
        let mut blocks = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let hw = h * w;
            let cols = im2col(&act, conv.cin, h, w);
            let mut pre = vec![0.0; conv.cout * hw];
            gemm_nn(&conv.w, &cols, &mut pre, conv.cout, conv.cin * 9, hw);
            for (c, &b) in conv.b.iter().enumerate() {
                for v in &mut pre[c * hw..(c + 1) * hw] {
                    *v += b;
                }
            }
            let (ph, pw) = (h / 2, w / 2);
            let mut pooled = vec![0.0; conv.cout * ph * pw];
            let mut argmax = vec![0usize; conv.cout * ph * pw];
            for c in 0..conv.cout {
                for oy in 0..ph {
                    for ox in 0..pw {
                        let mut best = f64::NEG_INFINITY;
                        let mut at = 0;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let idx = c * hw + (2 * oy + dy) * w + 2 * ox + dx;
                            let v = pre[idx].max(0.0);
                            if v > best {
                                best = v;
                                at = idx;
                            }
                        }
                        pooled[(c * ph + oy) * pw + ox] = best;
                        argmax[(c * ph + oy) * pw + ox] = at;
                    }
                }
            }
            blocks.push(BlockTrace {
                h,
                w,
                cols,
                pre,
                argmax,
            });
            act = pooled;
            h = ph;
            w = pw;
        }
        let d = self.feature_dim();
        let area = (h * w) as f64;
        let features: Vec<f64> = act.chunks(h * w).map(|c| c.iter().sum::<f64>() / area).collect();
        debug_assert_eq!(features.len(), d);
        let logits = (0..self.arch.n_classes)
            .map(|k| crate::kernels::dot(&self.head_w[k * d..(k + 1) * d], &features) + self.head_b[k])
            .collect();
        Ok(Trace {
            blocks,
            features,
            logits,
        })
    }

    pub fn logits(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(self.forward(image)?.logits)
    }

    /// Penultimate feature vector (length D).
    pub fn features(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(self.forward(image)?.features)
    }

    pub fn predict(&self, image: &Image) -> Result<usize> {
        Ok(argmax(&self.logits(image)?))
    }

    /// Gradient of the pooled-then-averaged features with respect to the
    /// last block's post-ReLU (pre-pool) map, for a given feature adjoint.
    fn last_map_grad(&self, trace: &Trace, dfeat: &[f64]) -> Vec<f64> {
        let last = trace.blocks.last().expect("≥ 1 block");
        let cout = self.convs.last().expect("≥ 1 block").cout;
        let (ph, pw) = (last.h / 2, last.w / 2);
        let area = (ph * pw) as f64;
        let mut d = vec![0.0; cout * last.h * last.w];
        for c in 0..cout {
            for p in 0..ph * pw {
                d[last.argmax[c * ph * pw + p]] += dfeat[c] / area;
            }
        }
        d
    }

    /// Last block's post-ReLU map and d(logit_class)/d(map): the inputs of
    /// Grad-CAM. Returns `(map, grad, channels, h, w)`.
    pub fn cam_inputs(&self, image: &Image, class: usize) -> Result<CamInputs> {
        if class >= self.arch.n_classes {
            return Err(Error::UnknownClass(class));
        }
        let trace = self.forward(image)?;
        let d = self.feature_dim();
        let dfeat = &self.head_w[class * d..(class + 1) * d];
        let grad = self.last_map_grad(&trace, dfeat);
        let last = trace.blocks.last().expect("≥ 1 block");
        let map: Vec<f64> = last.pre.iter().map(|v| v.max(0.0)).collect();
        Ok((map, grad, d, last.h, last.w))
    }

    /// Parameter gradients of `dlogits · logits` for one traced sample.
    pub fn backward(&self, trace: &Trace, dlogits: &[f64]) -> TeacherGrads {
        let d = self.feature_dim();
        let n = self.arch.n_classes;
        let mut head_w = vec![0.0; n * d];
        let mut dfeat = vec![0.0; d];
        for k in 0..n {
            for j in 0..d {
                head_w[k * d + j] = dlogits[k] * trace.features[j];
                dfeat[j] += dlogits[k] * self.head_w[k * d + j];
            }
        }
        let head_b = dlogits.to_vec();

        let mut convs = vec![(Vec::new(), Vec::new()); self.convs.len()];
        let mut dpost = self.last_map_grad(trace, &dfeat);
        for li in (0..self.convs.len()).rev() {
            let conv = &self.convs[li];
            let bt = &trace.blocks[li];
            let hw = bt.h * bt.w;
            let dpre: Vec<f64> = dpost
                .iter()
                .zip(&bt.pre)
                .map(|(g, &p)| if p > 0.0 { *g } else { 0.0 })
                .collect();
            let mut dw = vec![0.0; conv.w.len()];
            gemm_nt(&dpre, &bt.cols, &mut dw, conv.cout, hw, conv.cin * 9);
            let db: Vec<f64> = dpre.chunks(hw).map(|c| c.iter().sum()).collect();
            convs[li] = (dw, db);
            if li == 0 {
                break;
            }
            let mut dcols = vec![0.0; conv.cin * 9 * hw];
            gemm_tn(&conv.w, &dpre, &mut dcols, conv.cin * 9, conv.cout, hw);
            let dpooled = col2im(&dcols, conv.cin, bt.h, bt.w);
            // Route through the previous block's pool and ReLU.
            let prev = &trace.blocks[li - 1];
            let mut dprev = vec![0.0; prev.pre.len()];
            for (g, &at) in dpooled.iter().zip(&prev.argmax) {
                dprev[at] += g;
            }
            dpost = dprev;
        }
        TeacherGrads {
            convs,
            head_w,
            head_b,
        }
    }

    fn apply_grads(&mut self, opt: &mut Adam, g: &TeacherGrads) -> Result<()> {
        let mut grads: Vec<&[f64]> = Vec::new();
        for (w, b) in &g.convs {
            grads.push(w);
            grads.push(b);
        }
        grads.push(&g.head_w);
        grads.push(&g.head_b);
        let mut params = self.params_mut();
        opt.step(&mut params, &grads)
    }

    pub fn accuracy(&self, images: &[LabeledImage]) -> Result<f64> {
        if images.is_empty() {
            return Ok(0.0);
        }
        let mut hit = 0usize;
        for img in images {
            if self.predict(&img.pixels)? == img.label {
                hit += 1;
            }
        }
        Ok(hit as f64 / images.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = BTreeMap::new();
        for (i, c) in self.convs.iter().enumerate() {
            tensors.insert(
                format!("conv{i}.w"),
                Tensor::new(vec![c.cout, c.cin, 3, 3], c.w.clone())?.to_container(),
            );
            tensors.insert(format!("conv{i}.b"), Tensor::vector(c.b.clone()).to_container());
        }
        tensors.insert(
            "head.w".into(),
            Tensor::new(vec![self.arch.n_classes, self.feature_dim()], self.head_w.clone())?.to_container(),
        );
        tensors.insert("head.b".into(), Tensor::vector(self.head_b.clone()).to_container());
        let file = TeacherFile {
            kind: "teacher".into(),
            arch: self.arch.clone(),
            train_accuracy: self.train_accuracy,
            val_accuracy: self.val_accuracy,
            tensors,
        };
        std::fs::write(path, serde_json::to_vec_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: TeacherFile = serde_json::from_slice(&std::fs::read(path)?)?;
        let p = path.display().to_string();
        let get = |name: &str| -> Result<Vec<f64>> {
            let t = file
                .tensors
                .get(name)
                .ok_or_else(|| Error::schema(format!("{p}:tensors.{name}"), "missing"))?;
            Ok(Tensor::from_container(t)?.into_data())
        };
        let mut model = TeacherModel::new(file.arch.clone(), 0)?;
        for i in 0..model.convs.len() {
            let w = get(&format!("conv{i}.w"))?;
            let b = get(&format!("conv{i}.b"))?;
            let c = &mut model.convs[i];
            if w.len() != c.w.len() || b.len() != c.b.len() {
                return Err(Error::schema(format!("{p}:tensors.conv{i}"), "size mismatch"));
            }
            c.w = w;
            c.b = b;
        }
        let hw = get("head.w")?;
        let hb = get("head.b")?;
        if hw.len() != model.head_w.len() || hb.len() != model.head_b.len() {
            return Err(Error::schema(format!("{p}:tensors.head"), "size mismatch"));
        }
        model.head_w = hw;
        model.head_b = hb;
        model.train_accuracy = file.train_accuracy;
        model.val_accuracy = file.val_accuracy;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct TeacherFile {
    kind: String,
    arch: TeacherArch,
    train_accuracy: f64,
    val_accuracy: f64,
    tensors: BTreeMap<String, TensorFile>,
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Trains a fresh teacher with softmax cross-entropy and Adam. A
/// `val_fraction` share of the (shuffled) data is held out for validation.
pub fn train_teacher(dataset: &[LabeledImage], n_classes: usize, cfg: &TeacherTrainConfig, seed: u64) -> Result<TeacherModel> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty teacher training set".into()));
    }
    if n_classes < 2 {
        return Err(Error::InvalidArgument("teacher needs ≥ 2 classes".into()));
    }
    if let Some(bad) = dataset.iter().find(|i| i.label >= n_classes) {
        return Err(Error::UnknownClass(bad.label));
    }
    let mut model = TeacherModel::new(TeacherArch::new(n_classes), seed)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng::stream(seed, "teacher/split", 0));
    let n_val = ((dataset.len() as f64) * cfg.val_fraction).round() as usize;
    let n_val = n_val.min(dataset.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();

    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &model.param_lens(),
    );
    let batch = cfg.batch_size.max(1);
    let mut last_epoch_hits = 0usize;
    for epoch in 0..cfg.epochs {
        train_idx.shuffle(&mut rng::stream(seed, "teacher/epoch", epoch as u64));
        last_epoch_hits = 0;
        let mut epoch_loss = 0.0;
        for chunk in train_idx.chunks(batch) {
            let mut acc: Option<TeacherGrads> = None;
            for &i in chunk {
                let sample = &dataset[i];
                let trace = model.forward(&sample.pixels)?;
                let p = softmax(&trace.logits);
                epoch_loss -= p[sample.label].max(1e-300).ln();
                if argmax(&trace.logits) == sample.label {
                    last_epoch_hits += 1;
                }
                let mut dl = p;
                dl[sample.label] -= 1.0;
                for v in &mut dl {
                    *v /= chunk.len() as f64;
                }
                let g = model.backward(&trace, &dl);
                acc = Some(match acc {
                    None => g,
                    Some(mut a) => {
                        for ((aw, ab), (gw, gb)) in a.convs.iter_mut().zip(&g.convs) {
                            aw.iter_mut().zip(gw).for_each(|(x, y)| *x += y);
                            ab.iter_mut().zip(gb).for_each(|(x, y)| *x += y);
                        }
                        a.head_w.iter_mut().zip(&g.head_w).for_each(|(x, y)| *x += y);
                        a.head_b.iter_mut().zip(&g.head_b).for_each(|(x, y)| *x += y);
                        a
                    }
                });
            }
            if let Some(g) = acc {
                model.apply_grads(&mut opt, &g)?;
            }
        }
        if !epoch_loss.is_finite() {
            return Err(Error::Diverged(format!(
                "teacher loss became {epoch_loss} in epoch {epoch} (lr {})",
                cfg.lr
            )));
        }
    }
    let val: Vec<LabeledImage> = val_idx.iter().map(|&i| dataset[i].clone()).collect();
    model.train_accuracy = if cfg.epochs == 0 {
        0.0
    } else {
        last_epoch_hits as f64 / train_idx.len() as f64
    };
    model.val_accuracy = model.accuracy(&val)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> TeacherModel {
        let arch = TeacherArch {
            in_channels: 3,
            coord_channels: true,
            channels: vec![3, 4, 5],
            n_classes: 3,
        };
        let mut m = TeacherModel::new(arch, 9).unwrap();
        // Non-zero biases so every code path carries gradient.
        for c in &mut m.convs {
            for (i, b) in c.b.iter_mut().enumerate() {
                *b = 0.05 * (i as f64 + 1.0);
            }
        }
        m
    }

    fn random_image(seed: u64) -> Image {
        let mut rng = rng::stream(seed, "test", 0);
        let mut img = Image::filled(3, 8, 8, &[0.0]);
        for v in &mut img.data {
            *v = rng.random();
        }
        img
    }

    #[test]
    fn backward_matches_finite_differences() {
        let model = tiny();
        let img = random_image(1);
        let r = [0.7, -1.3, 0.4];
        let loss = |m: &TeacherModel| -> f64 {
            let l = m.logits(&img).unwrap();
            l.iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let trace = model.forward(&img).unwrap();
        let g = model.backward(&trace, &r);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for li in 0..3 {
            for k in (0..model.convs[li].w.len()).step_by(7) {
                let mut p = model.clone();
                p.convs[li].w[k] += h;
                let mut q = model.clone();
                q.convs[li].w[k] -= h;
                let fd = (loss(&p) - loss(&q)) / (2.0 * h);
                let an = g.convs[li].0[k];
                worst = worst.max((fd - an).abs() / (fd.abs().max(an.abs()).max(1e-6)));
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn forward_is_deterministic() {
        let m = tiny();
        let img = random_image(2);
        assert_eq!(m.logits(&img).unwrap(), m.logits(&img).unwrap());
        assert_eq!(m.features(&img).unwrap().len(), 5);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = tiny();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.json");
        m.save(&p).unwrap();
        let back = TeacherModel::load(&p).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn unknown_cam_class_rejected() {
        assert!(matches!(
            tiny().cam_inputs(&random_image(3), 7),
            Err(Error::UnknownClass(7))
        ));
    }
}
