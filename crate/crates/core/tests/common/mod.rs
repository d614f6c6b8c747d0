//! Helpers shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use reasongraph::grn::{GrnConfig, GrnModel, LayerVars};
use reasongraph::scg::{edge_pairs, ConceptDetection, HypothesisSet, Scg};
use reasongraph::{rng, BatchNormState, Tape, Tensor, Var};

pub const H: f64 = 1e-6;

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, "test/grad", shape.iter().product::<usize>() as u64);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Largest relative gap between backward-pass and central-difference
/// gradients of `f` with respect to every entry of every input.
pub fn max_rel_error(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    max_rel_error_with(inputs, H, f)
}

pub fn max_rel_error_with(inputs: &[Tensor], h: f64, f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_requires_grad(true))).collect();
    let out = f(&mut tape, &vars);
    tape.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();

    let eval = |ins: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &vs);
        t.value(o).item().unwrap()
    };
    let mut worst: f64 = 0.0;
    for (k, (input, grads)) in inputs.iter().zip(&analytic).enumerate() {
        for (i, &a) in grads.iter().enumerate().take(input.len()) {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Scalar probe `Σ w ⊙ x` with fixed random weights, so every output entry
/// carries a distinct gradient.
pub fn probe(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let shape = tape.value(x).shape().to_vec();
    let w = tape.constant(random(&shape, seed + 1000));
    let p = tape.mul(x, w).unwrap();
    tape.sum(p).unwrap()
}

/// A hypothesis set with random features and locations; `dummies` lists
/// `(class slot, node)` pairs to make undetected.
pub fn random_hypotheses(
    class_ids: &[usize],
    n_nodes: usize,
    dim: usize,
    seed: u64,
    dummies: &[(usize, usize)],
) -> HypothesisSet {
    let mut r = rng::stream(seed, "test/hyp", 0);
    let graphs = class_ids
        .iter()
        .enumerate()
        .map(|(slot, &c)| {
            let nodes = (0..n_nodes)
                .map(|k| {
                    let dummy = dummies.contains(&(slot, k));
                    ConceptDetection {
                        concept_id: k,
                        detected: !dummy,
                        feature: (0..dim)
                            .map(|_| if dummy { 1e-3 } else { r.random_range(0.0..2.0) })
                            .collect(),
                        location: if dummy {
                            [0.0, 0.0]
                        } else {
                            [r.random_range(0.0..1.0), r.random_range(0.0..1.0)]
                        },
                        distance: Some(r.random_range(0.0..1.0)),
                        bbox: None,
                        level: None,
                    }
                })
                .collect();
            Scg::from_nodes(c, Some(seed as usize), nodes)
        })
        .collect();
    HypothesisSet {
        image_id: Some(seed as usize),
        graphs,
    }
}

pub struct LayerInputs {
    pub nodes: Tensor,
    pub edges: Tensor,
    pub e: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
    pub w3: Tensor,
    pub w4: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub fn record(tape: &mut Tape, x: &LayerInputs, concat: bool) -> (Var, Var, Var, LayerVars) {
    let nodes = tape.constant(x.nodes.clone());
    let edges = tape.constant(x.edges.clone());
    let e = tape.constant(x.e.clone());
    let lv = LayerVars {
        w1: tape.constant(x.w1.clone()),
        w2: tape.constant(x.w2.clone()),
        w3: concat.then(|| tape.constant(x.w3.clone())),
        w4: tape.constant(x.w4.clone()),
        gamma: tape.constant(x.gamma.clone()),
        beta: tape.constant(x.beta.clone()),
    };
    (nodes, edges, e, lv)
}

pub fn random_layer(n: usize, graphs: usize, din: usize, dout: usize, ein: usize, eout: usize, seed: u64) -> LayerInputs {
    let m = n * (n - 1);
    LayerInputs {
        nodes: random(&[graphs * n, din], seed),
        edges: random(&[graphs * m, ein], seed + 1),
        e: random(&[3, n, n], seed + 2),
        w1: random(&[din, dout], seed + 3),
        w2: random(&[din, dout], seed + 4),
        w3: random(&[dout + ein, dout], seed + 5),
        w4: random(&[ein, eout], seed + 6),
        gamma: random(&[dout], seed + 7),
        beta: random(&[dout], seed + 8),
    }
}

/// Direct evaluation of the layer, one graph, node and output unit at a time.
#[allow(clippy::too_many_arguments)]
pub fn oracle(
    x: &LayerInputs,
    classes: &[usize],
    n: usize,
    concat: bool,
    bn: &BatchNormState,
) -> (Vec<f64>, Vec<f64>) {
    let din = x.w1.shape()[0];
    let dout = x.w1.shape()[1];
    let ein = x.w4.shape()[0];
    let eout = x.w4.shape()[1];
    let f = |g: usize, v: usize, d: usize| x.nodes.data()[(g * n + v) * din + d];
    let w = |t: &Tensor, r: usize, c: usize| t.data()[r * t.shape()[1] + c];
    let pairs = edge_pairs(n);
    let m = pairs.len();
    let mut nodes_out = Vec::new();
    let mut edges_out = Vec::new();
    for (g, &c) in classes.iter().enumerate() {
        let edge = |j: usize, i: usize| {
            let k = pairs.iter().position(|&p| p == (j, i)).unwrap();
            &x.edges.data()[(g * m + k) * ein..(g * m + k + 1) * ein]
        };
        for i in 0..n {
            for o in 0..dout {
                let mut v: f64 = (0..din).map(|d| f(g, i, d) * w(&x.w1, d, o)).sum();
                for j in (0..n).filter(|&j| j != i) {
                    let eji = x.e.data()[(c * n + j) * n + i];
                    let msg: Vec<f64> = (0..dout)
                        .map(|q| eji * (0..din).map(|d| f(g, j, d) * w(&x.w2, d, q)).sum::<f64>())
                        .collect();
                    if concat {
                        let cat: Vec<f64> = msg.iter().chain(edge(j, i)).copied().collect();
                        v += cat.iter().enumerate().map(|(q, z)| z * w(&x.w3, q, o)).sum::<f64>();
                    } else {
                        v += msg[o];
                    }
                }
                let r = v.max(0.0);
                let norm = (r - bn.running_mean[o]) / (bn.running_var[o] + bn.eps).sqrt();
                nodes_out.push(x.gamma.data()[o] * norm + x.beta.data()[o]);
            }
        }
        for &(j, i) in &pairs {
            for o in 0..eout {
                edges_out.push((0..ein).map(|q| edge(j, i)[q] * w(&x.w4, q, o)).sum());
            }
        }
    }
    (nodes_out, edges_out)
}

/// A three-class model with distinct aggregation weights and nontrivial
/// batch-norm statistics.
pub fn small_model(seed: u64) -> GrnModel {
    let mut cfg = GrnConfig::new(3, 3, 6);
    cfg.node_dims = vec![6, 5, 4];
    cfg.edge_dims = vec![4, 3, 2];
    let mut m = GrnModel::new(cfg, vec![0, 1, 2], seed).unwrap();
    // Move the aggregation weights off their shared init so classes differ.
    let mut r = random(&[3, 3, 3], seed + 100);
    r.data_mut().iter_mut().for_each(|v| *v += 1.0);
    m.e = r;
    for l in &mut m.layers {
        l.bn.running_mean.iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 * i as f64);
        l.bn.running_var.iter_mut().enumerate().for_each(|(i, v)| *v = 0.5 + 0.2 * i as f64);
    }
    m
}
