//! The modified GraphConv layer on a batch of complete graphs.
//!
//! Node rows of all graphs are stacked into one matrix and edges into
//! another, so one tape op covers the whole batch:
//!
//! ```text
//! f_i' = BN(ReLU( W1 f_i + Σ_{j≠i} W3 [e^c_ji · W2 f_j ; edge_ji] ))
//! edge_ji' = W4 edge_ji
//! ```
//!
//! With edge concatenation off the message is just `e^c_ji · W2 f_j`.
//! Weights are stored input-major (`[d_in × d_out]`), so rows multiply as
//! `x · W`.

use crate::autodiff::{BatchNormState, Tape, Var};
use crate::error::Result;
use crate::scg::edge_pairs;

/// Index bookkeeping for a batch of complete graphs with `n_nodes` nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    pub n_nodes: usize,
    pub n_graphs: usize,
    /// Source node row of each edge row.
    pub src: Vec<usize>,
    /// Destination node row of each edge row.
    pub dst: Vec<usize>,
    /// Flat index of each edge's `e^c_ji` in the `[classes × N × N]` tensor.
    pub e_index: Vec<usize>,
}

impl Topology {
    /// `graph_classes[g]` is the class whose aggregation weights graph `g` uses.
    pub fn new(n_nodes: usize, graph_classes: &[usize]) -> Self {
        let pairs = edge_pairs(n_nodes);
        let mut src = Vec::with_capacity(pairs.len() * graph_classes.len());
        let mut dst = Vec::with_capacity(src.capacity());
        let mut e_index = Vec::with_capacity(src.capacity());
        for (g, &c) in graph_classes.iter().enumerate() {
            for &(j, i) in &pairs {
                src.push(g * n_nodes + j);
                dst.push(g * n_nodes + i);
                e_index.push((c * n_nodes + j) * n_nodes + i);
            }
        }
        Self {
            n_nodes,
            n_graphs: graph_classes.len(),
            src,
            dst,
            e_index,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_nodes * self.n_graphs
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub w1: Var,
    pub w2: Var,
    /// `None` selects the shared-edge-weight form (no edge concatenation).
    pub w3: Option<Var>,
    pub w4: Var,
    pub gamma: Var,
    pub beta: Var,
}

/// The layer before its nonlinearity: returns `(pre-activation nodes, next edges)`.
pub fn graph_conv_linear(
    tape: &mut Tape,
    nodes: Var,
    edges: Var,
    e: Var,
    lv: &LayerVars,
    topo: &Topology,
) -> Result<(Var, Var)> {
    let own = tape.matmul(nodes, lv.w1)?;
    let u = tape.matmul(nodes, lv.w2)?;
    let from = tape.gather_rows(u, &topo.src)?;
    let weights = tape.gather(e, &topo.e_index)?;
    let scaled = tape.scale_rows(from, weights)?;
    let msg = match lv.w3 {
        Some(w3) => {
            let cat = tape.concat(&[scaled, edges], 1)?;
            tape.matmul(cat, w3)?
        }
        None => scaled,
    };
    let agg = tape.scatter_add_rows(msg, &topo.dst, topo.n_rows())?;
    let pre = tape.add(own, agg)?;
    let next_edges = tape.matmul(edges, lv.w4)?;
    Ok((pre, next_edges))
}

/// Full layer: linear part, ReLU, then batch norm over node rows.
#[allow(clippy::too_many_arguments)]
pub fn graph_conv_layer(
    tape: &mut Tape,
    nodes: Var,
    edges: Var,
    e: Var,
    lv: &LayerVars,
    topo: &Topology,
    bn: &mut BatchNormState,
    training: bool,
) -> Result<(Var, Var)> {
    let (pre, next_edges) = graph_conv_linear(tape, nodes, edges, e, lv, topo)?;
    let act = tape.relu(pre)?;
    let out = tape.batch_norm(act, lv.gamma, lv.beta, bn, training)?;
    Ok((out, next_edges))
}
