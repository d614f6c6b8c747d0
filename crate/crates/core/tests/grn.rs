mod common;

use common::{max_rel_error, oracle, probe, random, random_hypotheses, random_layer, record, LayerInputs, small_model};
use proptest::prelude::*;
use reasongraph::grn::{graph_conv_layer, graph_conv_linear, GrnConfig, GrnModel, LayerVars, Topology};
use reasongraph::{BatchNormState, Tape, Tensor};

fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor {
    Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
}

#[test]
fn two_node_layer_matches_hand_evaluation() {
    // One graph, scalar node features, 4-d edges mapped to 1-d.
    let (a, b) = (2.0, -3.0);
    let (w1, w2) = (0.5, 1.5);
    let w3 = [0.25, 1.0, -1.0, 2.0, 0.5];
    let e01 = [0.1, 0.2, 0.3, 0.4];
    let e10 = [0.3, 0.4, 0.1, 0.2];
    let (c01, c10) = (0.7, -1.2);
    let x = LayerInputs {
        nodes: mat(2, 1, &[a, b]),
        edges: mat(2, 4, &[e01, e10].concat()),
        e: Tensor::new(vec![1, 2, 2], vec![9.0, c01, c10, 9.0]).unwrap(),
        w1: mat(1, 1, &[w1]),
        w2: mat(1, 1, &[w2]),
        w3: mat(5, 1, &w3),
        w4: mat(4, 1, &[1.0, -1.0, 0.5, 2.0]),
        gamma: Tensor::ones(&[1]),
        beta: Tensor::zeros(&[1]),
    };
    let mut tape = Tape::new();
    let (n, ed, e, lv) = record(&mut tape, &x, true);
    let (pre, next) = graph_conv_linear(&mut tape, n, ed, e, &lv, &Topology::new(2, &[0])).unwrap();

    let dot = |s: f64, edge: &[f64; 4]| w3[0] * s + (0..4).map(|k| w3[k + 1] * edge[k]).sum::<f64>();
    // Node 0 receives along (1, 0); node 1 along (0, 1).
    let f0 = w1 * a + dot(c10 * w2 * b, &e10);
    let f1 = w1 * b + dot(c01 * w2 * a, &e01);
    let got = tape.value(pre).data();
    assert!((got[0] - f0).abs() < 1e-12 && (got[1] - f1).abs() < 1e-12, "{got:?} vs {f0}, {f1}");
    let edge_out = |v: &[f64; 4]| v[0] - v[1] + 0.5 * v[2] + 2.0 * v[3];
    assert!((tape.value(next).data()[0] - edge_out(&e01)).abs() < 1e-12);
    assert!((tape.value(next).data()[1] - edge_out(&e10)).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn layer_matches_direct_evaluation(
        n in 1usize..=3,
        classes in prop::collection::vec(0usize..3, 1..=3),
        din in 1usize..=4,
        dout in 1usize..=4,
        ein in 1usize..=4,
        eout in 1usize..=4,
        concat in any::<bool>(),
        seed in 0u64..1_000_000,
    ) {
        let x = random_layer(n, classes.len(), din, dout, ein, eout, seed);
        let mut bn = BatchNormState::new(dout);
        let stats = random(&[2, dout], seed + 9);
        bn.running_mean = stats.row(0).to_vec();
        bn.running_var = stats.row(1).iter().map(|v| v.abs() + 0.1).collect();
        let expected = oracle(&x, &classes, n, concat, &bn);

        let mut tape = Tape::new();
        let (nodes, edges, e, lv) = record(&mut tape, &x, concat);
        let topo = Topology::new(n, &classes);
        let (out, next) = graph_conv_layer(&mut tape, nodes, edges, e, &lv, &topo, &mut bn.clone(), false).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(&expected.0) {
            prop_assert!((a - b).abs() < 1e-10, "{} vs {}", a, b);
        }
        prop_assert_eq!(tape.value(out).len(), expected.0.len());
        for (a, b) in tape.value(next).data().iter().zip(&expected.1) {
            prop_assert!((a - b).abs() < 1e-10, "{} vs {}", a, b);
        }
    }
}

#[test]
fn zero_aggregation_weights_cut_neighbor_influence() {
    let mut x = random_layer(3, 1, 4, 3, 4, 2, 77);
    x.e = Tensor::zeros(&[3, 3, 3]);
    let eval = |x: &LayerInputs| {
        let mut tape = Tape::new();
        let (n, ed, e, lv) = record(&mut tape, x, true);
        let (pre, _) = graph_conv_linear(&mut tape, n, ed, e, &lv, &Topology::new(3, &[1])).unwrap();
        tape.value(pre).data().to_vec()
    };
    let before = eval(&x);
    // Perturb node 0 only.
    for v in &mut x.nodes.data_mut()[..4] {
        *v += 3.0;
    }
    let after = eval(&x);
    assert_ne!(before[..3], after[..3]);
    assert_eq!(before[3..], after[3..]);
}

#[test]
fn aggregation_weight_gradient_matches_finite_differences() {
    let x = random_layer(3, 4, 4, 3, 4, 2, 5);
    let classes = [0, 1, 2, 1];
    let err = max_rel_error(std::slice::from_ref(&x.e), |tape, v| {
        let nodes = tape.constant(x.nodes.clone());
        let edges = tape.constant(x.edges.clone());
        let lv = LayerVars {
            w1: tape.constant(x.w1.clone()),
            w2: tape.constant(x.w2.clone()),
            w3: Some(tape.constant(x.w3.clone())),
            w4: tape.constant(x.w4.clone()),
            gamma: tape.constant(x.gamma.clone()),
            beta: tape.constant(x.beta.clone()),
        };
        let mut bn = BatchNormState::new(3);
        let (out, _) =
            graph_conv_layer(tape, nodes, edges, v[0], &lv, &Topology::new(3, &classes), &mut bn, true).unwrap();
        probe(tape, out, 6)
    });
    assert!(err < 1e-4, "{err}");
}

fn hypothesis_embeddings(m: &GrnModel, h: &reasongraph::scg::HypothesisSet) -> Vec<Vec<f64>> {
    m.forward(&[h]).unwrap().0.remove(0)
}

#[test]
fn changing_one_class_weights_leaves_other_hypotheses_bitwise_equal() {
    let m = small_model(1);
    let h = random_hypotheses(&[0, 1, 2], 3, 6, 2, &[(1, 2)]);
    let base = hypothesis_embeddings(&m, &h);
    for c in 0..3 {
        let mut p = m.clone();
        for v in &mut p.e.data_mut()[c * 9..(c + 1) * 9] {
            *v = *v * 1.7 - 0.3;
        }
        let moved = hypothesis_embeddings(&p, &h);
        for i in 0..3 {
            if i == c {
                assert_ne!(moved[i], base[i]);
            } else {
                assert_eq!(moved[i], base[i]);
            }
        }
    }
}

#[test]
fn identical_hypotheses_embed_differently_per_class() {
    let m = small_model(3);
    let mut h = random_hypotheses(&[0, 1, 2], 3, 6, 4, &[]);
    let g = h.graphs[0].clone();
    for (slot, graph) in h.graphs.iter_mut().enumerate() {
        *graph = g.clone();
        graph.class_id = slot;
    }
    let emb = hypothesis_embeddings(&m, &h);
    assert_ne!(emb[0], emb[1]);
    assert_ne!(emb[1], emb[2]);
}

#[test]
fn embedding_and_logit_sizes() {
    let m = GrnModel::new(GrnConfig::new(3, 4, 16), vec![0, 1, 2], 0).unwrap();
    let h = random_hypotheses(&[0, 1, 2], 4, 16, 1, &[(0, 3)]);
    let (emb, logits) = m.forward(&[&h]).unwrap();
    assert_eq!(emb[0].len(), 3);
    assert!(emb[0].iter().all(|e| e.len() == 188));
    assert_eq!(logits[0].len(), 3);
}

#[test]
fn mismatched_hypotheses_rejected() {
    let m = GrnModel::new(GrnConfig::new(3, 4, 16), vec![0, 1, 2], 0).unwrap();
    assert!(m.forward(&[&random_hypotheses(&[0, 1], 4, 16, 1, &[])]).is_err());
    assert!(m.forward(&[&random_hypotheses(&[0, 2, 1], 4, 16, 1, &[])]).is_err());
    assert!(m.forward(&[&random_hypotheses(&[0, 1, 2], 3, 16, 1, &[])]).is_err());
    assert!(m.forward(&[&random_hypotheses(&[0, 1, 2], 4, 15, 1, &[])]).is_err());
}

/// Batch norm in inference mode, so each sample's loss is a smooth function
/// of the parameters (away from ReLU and L1 kinks).
#[test]
fn end_to_end_gradient_matches_finite_differences() {
    use rand::Rng;
    let m = small_model(11);
    let hyps: Vec<_> = (0..4).map(|s| random_hypotheses(&[0, 1, 2], 3, 6, 20 + s, &[(2, 0)])).collect();
    let refs: Vec<_> = hyps.iter().collect();
    let target = {
        let mut t = random(&[4, 3], 30);
        for row in t.data_mut().chunks_mut(3) {
            reasongraph::autodiff::softmax_in_place(row);
        }
        t
    };
    let loss_of = |model: &GrnModel, tape: &mut Tape, trainable: bool| {
        let pv = model.record_params(tape, trainable);
        let mut bn = model.bn_states();
        let f = model.forward_on_tape(tape, &pv, &refs, &mut bn, false).unwrap();
        let s = tape.softmax(f.logits).unwrap();
        let t = tape.constant(target.clone());
        (tape.l1_loss(s, t).unwrap(), pv)
    };
    let mut tape = Tape::new();
    let (loss, pv) = loss_of(&m, &mut tape, true);
    tape.backward(loss).unwrap();
    let vars = GrnModel::param_var_list(&pv);

    let eval = |model: &GrnModel| {
        let mut t = Tape::new();
        let (l, _) = loss_of(model, &mut t, false);
        t.value(l).item().unwrap()
    };
    let mut r = reasongraph::rng::stream(7, "test/e2e", 0);
    let sizes: Vec<usize> = m.params().iter().map(|p| p.len()).collect();
    let total: usize = sizes.iter().sum();
    assert!(total >= 200);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..250 {
        let mut flat = r.random_range(0..total);
        let mut k = 0;
        while flat >= sizes[k] {
            flat -= sizes[k];
            k += 1;
        }
        let analytic = tape.grad(vars[k]).unwrap()[flat];
        let mut plus = m.clone();
        plus.params_mut()[k].data_mut()[flat] += h;
        let mut minus = m.clone();
        minus.params_mut()[k].data_mut()[flat] -= h;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4));
    }
    assert!(worst < 1e-3, "{worst}");
}
