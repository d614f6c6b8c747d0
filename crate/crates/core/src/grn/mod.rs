//! Graph reasoning network: a shared GraphConv stack equipped with
//! class-specific aggregation weights, followed by one linear layer that
//! fuses the per-hypothesis embeddings into class logits.

pub mod checkpoint;
pub mod distill;
pub mod layer;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::concepts::ConceptBank;
use crate::autodiff::{BatchNormState, Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::scg::HypothesisSet;
use crate::tensor::Tensor;

pub use checkpoint::{load_model, save_model};
pub use distill::{
    agreement, build_samples, distill_train, distill_train_with, teacher_probs, DistillConfig, DistillSample, EpochRecord,
    History, LrSchedule, Target,
};
pub use layer::{graph_conv_layer, graph_conv_linear, LayerVars, Topology};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrnConfig {
    pub n_classes: usize,
    /// Concepts (nodes) per hypothesis graph.
    pub n_concepts: usize,
    /// Node feature width entering each layer, plus the final width.
    pub node_dims: Vec<usize>,
    /// Edge feature width entering each layer, plus the final width.
    pub edge_dims: Vec<usize>,
    /// Concatenate edge features into messages; off gives the
    /// shared-edge-weight ablation.
    pub edge_concat: bool,
    pub e_init: f64,
}

impl GrnConfig {
    pub fn new(n_classes: usize, n_concepts: usize, feature_dim: usize) -> Self {
        Self {
            n_classes,
            n_concepts,
            node_dims: vec![feature_dim, 64, 32, 32],
            edge_dims: vec![4, 5, 5, 5],
            edge_concat: true,
            e_init: 1.0,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.node_dims.len().saturating_sub(1)
    }

    pub fn n_edges(&self) -> usize {
        self.n_concepts * self.n_concepts.saturating_sub(1)
    }

    pub fn node_out(&self) -> usize {
        *self.node_dims.last().unwrap_or(&0)
    }

    pub fn edge_out(&self) -> usize {
        *self.edge_dims.last().unwrap_or(&0)
    }

    /// Length of one hypothesis embedding: all final node features, then
    /// all final edge features.
    pub fn embed_dim(&self) -> usize {
        self.n_concepts * self.node_out() + self.n_edges() * self.edge_out()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.n_concepts == 0 {
            return Err(Error::InvalidArgument("GRN needs ≥ 1 class and ≥ 1 concept".into()));
        }
        if self.node_dims.len() < 2 || self.node_dims.len() != self.edge_dims.len() {
            return Err(Error::InvalidArgument(format!(
                "node dims {:?} and edge dims {:?} must have equal length ≥ 2",
                self.node_dims, self.edge_dims
            )));
        }
        if self.edge_dims[0] != 4 {
            return Err(Error::InvalidArgument("input edge features are 4-dimensional".into()));
        }
        if self.node_dims.iter().chain(&self.edge_dims).any(|&d| d == 0) {
            return Err(Error::InvalidArgument("zero-width layer".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub w1: Tensor,
    pub w2: Tensor,
    pub w3: Option<Tensor>,
    pub w4: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub bn: BatchNormState,
}

/// One embedding per class hypothesis of a single image.
pub type Embeddings = Vec<Vec<f64>>;

#[derive(Clone, Debug, PartialEq)]
pub struct GrnModel {
    pub config: GrnConfig,
    /// Class id of each hypothesis slot, in order.
    pub class_ids: Vec<usize>,
    pub layers: Vec<LayerParams>,
    /// Aggregation weights `e^c_ji`, shape `[classes × N × N]`, indexed
    /// `(c, j, i)`; the diagonal is never read.
    pub e: Tensor,
    /// Fusion weights, shape `[classes·P × classes]` (P = embed dim).
    pub embed_w: Tensor,
    pub embed_b: Tensor,
    /// Digests of the concept banks the model was distilled against.
    pub bank_hashes: Vec<String>,
}

/// Tape handles of every parameter, in [`GrnModel::params`] order.
pub struct ParamVars {
    pub layers: Vec<LayerVars>,
    pub e: Var,
    pub embed_w: Var,
    pub embed_b: Var,
}

/// Output of a batched forward pass.
pub struct Forward {
    /// Per-hypothesis embeddings, `[classes·B × P]`, row `c·B + b`.
    pub hypothesis_embeddings: Var,
    /// Fusion input, `[B × classes·P]`.
    pub embeddings: Var,
    /// `[B × classes]`
    pub logits: Var,
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(vec![rows, cols], data).expect("sized buffer")
}

impl GrnModel {
    pub fn new(config: GrnConfig, class_ids: Vec<usize>, seed: u64) -> Result<Self> {
        config.validate()?;
        if class_ids.len() != config.n_classes {
            return Err(Error::InvalidArgument(format!(
                "{} class ids for {} classes",
                class_ids.len(),
                config.n_classes
            )));
        }
        let mut rng = rng::stream(seed, "grn/init", 0);
        let mut layers = Vec::with_capacity(config.n_layers());
        for k in 0..config.n_layers() {
            let (din, dout) = (config.node_dims[k], config.node_dims[k + 1]);
            let (ein, eout) = (config.edge_dims[k], config.edge_dims[k + 1]);
            layers.push(LayerParams {
                w1: uniform(&mut rng, din, dout),
                w2: uniform(&mut rng, din, dout),
                w3: config.edge_concat.then(|| uniform(&mut rng, dout + ein, dout)),
                w4: uniform(&mut rng, ein, eout),
                gamma: Tensor::ones(&[dout]),
                beta: Tensor::zeros(&[dout]),
                bn: BatchNormState::new(dout),
            });
        }
        let n = config.n_classes;
        let nn = config.n_concepts;
        let e = Tensor::full(&[n, nn, nn], config.e_init);
        let fan_in = n * config.embed_dim();
        let std = 1.0 / (fan_in as f64).sqrt();
        let embed_w = Tensor::new(
            vec![fan_in, n],
            (0..fan_in * n).map(|_| rng.random_range(-std..std)).collect(),
        )?;
        Ok(Self {
            config,
            class_ids,
            layers,
            e,
            embed_w,
            embed_b: Tensor::zeros(&[n]),
            bank_hashes: Vec::new(),
        })
    }

    /// Every trainable tensor, in a fixed order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.w1);
            out.push(&l.w2);
            if let Some(w3) = &l.w3 {
                out.push(w3);
            }
            out.push(&l.w4);
            out.push(&l.gamma);
            out.push(&l.beta);
        }
        out.push(&self.e);
        out.push(&self.embed_w);
        out.push(&self.embed_b);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.w1);
            out.push(&mut l.w2);
            if let Some(w3) = &mut l.w3 {
                out.push(w3);
            }
            out.push(&mut l.w4);
            out.push(&mut l.gamma);
            out.push(&mut l.beta);
        }
        out.push(&mut self.e);
        out.push(&mut self.embed_w);
        out.push(&mut self.embed_b);
        out
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Records parameters on `tape`; `trainable` makes them gradient leaves.
    pub fn record_params(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let mut rec = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone().with_requires_grad(true))
            } else {
                tape.constant(t.clone())
            }
        };
        let layers = self
            .layers
            .iter()
            .map(|l| LayerVars {
                w1: rec(&l.w1),
                w2: rec(&l.w2),
                w3: l.w3.as_ref().map(&mut rec),
                w4: rec(&l.w4),
                gamma: rec(&l.gamma),
                beta: rec(&l.beta),
            })
            .collect();
        let e = rec(&self.e);
        let embed_w = rec(&self.embed_w);
        let embed_b = rec(&self.embed_b);
        ParamVars {
            layers,
            e,
            embed_w,
            embed_b,
        }
    }

    /// Parameter vars in [`GrnModel::params`] order.
    pub fn param_var_list(pv: &ParamVars) -> Vec<Var> {
        let mut out = Vec::new();
        for l in &pv.layers {
            out.push(l.w1);
            out.push(l.w2);
            if let Some(w3) = l.w3 {
                out.push(w3);
            }
            out.push(l.w4);
            out.push(l.gamma);
            out.push(l.beta);
        }
        out.push(pv.e);
        out.push(pv.embed_w);
        out.push(pv.embed_b);
        out
    }

    pub fn check_hypotheses(&self, h: &HypothesisSet) -> Result<()> {
        let cfg = &self.config;
        if h.graphs.len() != cfg.n_classes {
            return Err(Error::InvalidArgument(format!(
                "{} hypotheses for a {}-class model",
                h.graphs.len(),
                cfg.n_classes
            )));
        }
        for (slot, g) in h.graphs.iter().enumerate() {
            if g.class_id != self.class_ids[slot] {
                return Err(Error::InvalidArgument(format!(
                    "hypothesis {slot} is for class {}, model expects {}",
                    g.class_id, self.class_ids[slot]
                )));
            }
            if g.nodes.len() != cfg.n_concepts {
                return Err(Error::InvalidArgument(format!(
                    "hypothesis {slot} has {} nodes, model expects {}",
                    g.nodes.len(),
                    cfg.n_concepts
                )));
            }
            if g.edges.len() != cfg.n_edges() {
                return Err(Error::InvalidArgument(format!(
                    "hypothesis {slot} has {} edges, model expects {}",
                    g.edges.len(),
                    cfg.n_edges()
                )));
            }
            if g.feature_dim() != cfg.node_dims[0] {
                return Err(Error::shape("grn input", &[cfg.node_dims[0]], &[g.feature_dim()]));
            }
        }
        Ok(())
    }

    /// Stacked node and edge input matrices, rows ordered `(class, image, ·)`.
    fn inputs(&self, batch: &[&HypothesisSet]) -> Result<(Tensor, Tensor)> {
        let cfg = &self.config;
        let d = cfg.node_dims[0];
        let mut nodes = Vec::with_capacity(cfg.n_classes * batch.len() * cfg.n_concepts * d);
        let mut edges = Vec::with_capacity(cfg.n_classes * batch.len() * cfg.n_edges() * 4);
        for h in batch {
            self.check_hypotheses(h)?;
        }
        for c in 0..cfg.n_classes {
            for h in batch {
                let g = &h.graphs[c];
                for n in &g.nodes {
                    nodes.extend_from_slice(&n.feature);
                }
                for e in &g.edges {
                    edges.extend_from_slice(&e.spatial);
                }
            }
        }
        let rows = cfg.n_classes * batch.len();
        Ok((
            Tensor::new(vec![rows * cfg.n_concepts, d], nodes)?,
            Tensor::new(vec![rows * cfg.n_edges(), 4], edges)?,
        ))
    }

    /// Records the forward pass of a batch. In training mode the batch-norm
    /// layers use batch statistics and update `bn`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        batch: &[&HypothesisSet],
        bn: &mut [BatchNormState],
        training: bool,
    ) -> Result<Forward> {
        let g = self.embed_graphs(tape, pv, batch, bn, training)?;
        self.fuse(tape, pv, g, batch.len())
    }

    /// Per-hypothesis embeddings `[classes·B × P]`, row `c·B + b`.
    pub fn embed_graphs(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        batch: &[&HypothesisSet],
        bn: &mut [BatchNormState],
        training: bool,
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let cfg = &self.config;
        let (n, b, nn, m) = (cfg.n_classes, batch.len(), cfg.n_concepts, cfg.n_edges());
        let (x0, e0) = self.inputs(batch)?;
        let graph_classes: Vec<usize> = (0..n).flat_map(|c| std::iter::repeat_n(c, b)).collect();
        let topo = Topology::new(nn, &graph_classes);
        let mut x = tape.constant(x0);
        let mut edges = tape.constant(e0);
        for (k, lv) in pv.layers.iter().enumerate() {
            let (nx, ne) = layer::graph_conv_layer(tape, x, edges, pv.e, lv, &topo, &mut bn[k], training)?;
            x = nx;
            edges = ne;
        }
        let node_part = tape.reshape(x, vec![n * b, nn * cfg.node_out()])?;
        let edge_part = tape.reshape(edges, vec![n * b, m * cfg.edge_out()])?;
        tape.concat(&[node_part, edge_part], 1)
    }

    /// Fusion layer on top of per-hypothesis embeddings.
    pub fn fuse(&self, tape: &mut Tape, pv: &ParamVars, hyp: Var, batch: usize) -> Result<Forward> {
        let n = self.config.n_classes;
        let p = self.config.embed_dim();
        let order: Vec<usize> = (0..batch).flat_map(|b| (0..n).map(move |c| c * batch + b)).collect();
        let per_image = tape.gather_rows(hyp, &order)?;
        let emb = tape.reshape(per_image, vec![batch, n * p])?;
        let lin = tape.matmul(emb, pv.embed_w)?;
        let logits = tape.add_bias(lin, pv.embed_b)?;
        Ok(Forward {
            hypothesis_embeddings: hyp,
            embeddings: emb,
            logits,
        })
    }

    pub fn bn_states(&self) -> Vec<BatchNormState> {
        self.layers.iter().map(|l| l.bn.clone()).collect()
    }

    /// Inference: per-hypothesis embeddings (`[classes][P]` per image) and logits.
    pub fn forward(&self, batch: &[&HypothesisSet]) -> Result<(Vec<Embeddings>, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let pv = self.record_params(&mut tape, false);
        let mut bn = self.bn_states();
        let f = self.forward_on_tape(&mut tape, &pv, batch, &mut bn, false)?;
        let n = self.config.n_classes;
        let p = self.config.embed_dim();
        let emb = tape.value(f.embeddings).data();
        let logits = tape.value(f.logits).data();
        let embeddings = (0..batch.len())
            .map(|b| (0..n).map(|c| emb[(b * n + c) * p..(b * n + c + 1) * p].to_vec()).collect())
            .collect();
        let logits = logits.chunks(n).map(|r| r.to_vec()).collect();
        Ok((embeddings, logits))
    }

    pub fn logits(&self, h: &HypothesisSet) -> Result<Vec<f64>> {
        Ok(self.forward(&[h])?.1.remove(0))
    }

    /// Logits of many samples, evaluated in chunks.
    pub fn logits_many(&self, hs: &[&HypothesisSet]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(hs.len());
        for chunk in hs.chunks(256) {
            out.extend(self.forward(chunk)?.1);
        }
        Ok(out)
    }

    /// Fails when `banks` are not the ones recorded at distillation time.
    pub fn check_banks(&self, banks: &[ConceptBank]) -> Result<()> {
        let ids: Vec<usize> = banks.iter().map(|b| b.class_id).collect();
        if ids != self.class_ids {
            return Err(Error::InvalidArgument(format!(
                "banks cover classes {ids:?}, model expects {:?}",
                self.class_ids
            )));
        }
        if !self.bank_hashes.is_empty() {
            for (b, h) in banks.iter().zip(&self.bank_hashes) {
                if &b.digest() != h {
                    return Err(Error::InvalidArgument(format!(
                        "bank for class {} differs from the one the model was trained with",
                        b.class_id
                    )));
                }
            }
        }
        Ok(())
    }

    fn slot_of(&self, class_id: usize) -> Result<usize> {
        self.class_ids
            .iter()
            .position(|&c| c == class_id)
            .ok_or(Error::UnknownClass(class_id))
    }

    /// `N×N` matrix of learned `e^c_ji` (row = start node j, column = end
    /// node i); the unused diagonal is reported as zeros.
    pub fn export_edge_weights(&self, class_id: usize) -> Result<Vec<Vec<f64>>> {
        let c = self.slot_of(class_id)?;
        let nn = self.config.n_concepts;
        let e = self.e.data();
        Ok((0..nn)
            .map(|j| {
                (0..nn)
                    .map(|i| if i == j { 0.0 } else { e[(c * nn + j) * nn + i] })
                    .collect()
            })
            .collect())
    }

    /// Column of the fusion weights for `class_id`, restricted to hypothesis
    /// slot `slot` (the exact gradient of that logit w.r.t. the slot's embedding).
    pub fn fusion_slice(&self, class_id: usize, slot: usize) -> Result<Vec<f64>> {
        let c = self.slot_of(class_id)?;
        let n = self.config.n_classes;
        let p = self.config.embed_dim();
        let w = self.embed_w.data();
        Ok((slot * p..(slot + 1) * p).map(|r| w[r * n + c]).collect())
    }
}
