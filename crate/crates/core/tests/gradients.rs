//! Finite-difference checks of the reverse-mode primitives.

mod common;

use common::{max_rel_error, probe, random};
use reasongraph::BatchNormState;

#[test]
fn matmul_matches_finite_differences() {
    let err = max_rel_error(&[random(&[3, 4], 1), random(&[4, 2], 2)], |t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        probe(t, y, 3)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn concat_matches_finite_differences() {
    let err = max_rel_error(&[random(&[2, 3], 4), random(&[2, 1], 5), random(&[1, 4], 6)], |t, v| {
        let a = t.concat(&[v[0], v[1]], 1).unwrap();
        let b = t.concat(&[a, v[2]], 0).unwrap();
        probe(t, b, 7)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn batch_norm_training_matches_finite_differences() {
    let inputs = [random(&[8, 4], 8), random(&[4], 9), random(&[4], 10)];
    let err = max_rel_error(&inputs, |t, v| {
        let mut st = BatchNormState::new(4);
        let y = t.batch_norm(v[0], v[1], v[2], &mut st, true).unwrap();
        probe(t, y, 11)
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn batch_norm_inference_matches_finite_differences() {
    let inputs = [random(&[8, 4], 12), random(&[4], 13), random(&[4], 14)];
    let err = max_rel_error(&inputs, |t, v| {
        let mut st = BatchNormState::new(4);
        st.running_mean = vec![0.1, -0.2, 0.3, 0.0];
        st.running_var = vec![0.5, 2.0, 1.0, 0.25];
        let y = t.batch_norm(v[0], v[1], v[2], &mut st, false).unwrap();
        probe(t, y, 15)
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn l1_of_softmax_matches_finite_differences() {
    let target = {
        let mut t = random(&[5, 3], 16);
        for row in t.data_mut().chunks_mut(3) {
            reasongraph::autodiff::softmax_in_place(row);
        }
        t
    };
    let err = max_rel_error(&[random(&[5, 3], 17)], |t, v| {
        let s = t.softmax(v[0]).unwrap();
        let c = t.constant(target.clone());
        t.l1_loss(s, c).unwrap()
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn graph_indexing_ops_match_finite_differences() {
    let err = max_rel_error(&[random(&[4, 3], 18), random(&[6], 19)], |t, v| {
        let g = t.gather_rows(v[0], &[0, 2, 2, 3, 1]).unwrap();
        let w = t.gather(v[1], &[5, 0, 0, 3, 2]).unwrap();
        let s = t.scale_rows(g, w).unwrap();
        let sc = t.scatter_add_rows(s, &[1, 1, 0, 3, 2], 5).unwrap();
        let r = t.relu(sc).unwrap();
        let rs = t.reshape(r, vec![3, 5]).unwrap();
        probe(t, rs, 20)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let err = max_rel_error(&[random(&[3, 2], 21), random(&[3, 2], 22), random(&[2], 23)], |t, v| {
        let a = t.add(v[0], v[1]).unwrap();
        let b = t.sub(a, v[1]).unwrap();
        let c = t.mul(b, v[1]).unwrap();
        let d = t.add_bias(c, v[2]).unwrap();
        let e = t.scale(d, -1.5).unwrap();
        probe(t, e, 24)
    });
    assert!(err < 1e-6, "{err}");
}
