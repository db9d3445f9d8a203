mod common;

use common::max_grad_error;
use maulab::numerics::{seeded, Graph, ParamStore, Rng, Tensor};
use rand::Rng as _;

fn uniform(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn single_op_store(rng: &mut Rng, shapes: &[(&str, &[usize])]) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, shape) in shapes {
        s.add(*name, uniform(rng, shape));
    }
    s
}

#[test]
fn sum_of_squares_gradient() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::row(vec![1.0, 2.0]));
    let mut g = Graph::new();
    let wv = g.param(&store, w);
    let sq = g.mul(wv, wv).unwrap();
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap().param_grads(&store);
    assert_eq!(grads.get(w).data(), &[2.0, 4.0]);
}

#[test]
fn detached_parameter_gets_zero_gradient() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::row(vec![1.0, 2.0]));
    let p = store.add("p", Tensor::row(vec![3.0]));
    let mut g = Graph::new();
    let wv = g.param(&store, w);
    let _pv = g.param(&store, p);
    let loss = g.sum(wv);
    let grads = g.backward(loss).unwrap().param_grads(&store);
    assert_eq!(grads.get(p).data(), &[0.0]);
    assert_eq!(grads.get(w).data(), &[1.0, 1.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::row(vec![1.0, 2.0]));
    let mut g = Graph::new();
    let wv = g.param(&store, w);
    let y = g.scale(wv, 2.0);
    assert!(matches!(g.backward(y), Err(maulab::Error::Contract(_))));
}

#[test]
fn shape_errors_name_the_operation() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
}

#[test]
fn elementwise_and_shape_ops_match_finite_differences() {
    let mut rng = seeded(11);
    let store = single_op_store(&mut rng, &[("a", &[3, 4]), ("b", &[3, 4]), ("c", &[4, 2]), ("bias", &[4])]);
    let ids: Vec<_> = store.ids().collect();
    let (err, at) = max_grad_error(&store, |g, s| {
        let a = g.param(s, ids[0]);
        let b = g.param(s, ids[1]);
        let c = g.param(s, ids[2]);
        let bias = g.param(s, ids[3]);
        let x = g.mul(a, b).unwrap();
        let x = g.sub(x, a).unwrap();
        let x = g.add_row(x, bias).unwrap();
        let x = g.sigmoid(x);
        let y = g.matmul(x, c).unwrap();
        let yt = g.transpose(y).unwrap();
        let z = g.matmul_nt(yt, yt).unwrap();
        let top = g.slice_rows(z, 0, 1).unwrap();
        let right = g.slice_cols(z, 1, 1).unwrap();
        let rt = g.transpose(right).unwrap();
        let cat = g.concat_rows(&[top, rt]).unwrap();
        let cat = g.concat_cols(&[cat, cat]).unwrap();
        let sm = g.log_softmax(cat).unwrap();
        let m = g.mean_rows(sm).unwrap();
        let gl = g.gelu(m);
        g.mean(gl)
    });
    assert!(err < 1e-4, "{err} at {at}");
}

#[test]
fn loss_heads_match_finite_differences() {
    let mut rng = seeded(12);
    let store = single_op_store(&mut rng, &[("z", &[5, 4]), ("m", &[5, 1]), ("r", &[2, 3]), ("t", &[2, 3])]);
    let ids: Vec<_> = store.ids().collect();
    let (err, at) = max_grad_error(&store, |g, s| {
        let z = g.param(s, ids[0]);
        let m = g.param(s, ids[1]);
        let r = g.param(s, ids[2]);
        let t = g.param(s, ids[3]);
        let ce = g.cross_entropy(z, &[0, 3, 1, 1, 2]).unwrap();
        let bce = g.bce_with_logits(m, &[1.0, 0.0, 0.0, 1.0, 0.5]).unwrap();
        let mse = g.mse(r, t).unwrap();
        let p = g.softmax(z).unwrap();
        let pbar = g.mean_rows(p).unwrap();
        let div = g.diversity(pbar);
        let a = g.add(ce, bce).unwrap();
        let a = g.add(a, mse).unwrap();
        g.add(a, div).unwrap()
    });
    assert!(err < 1e-4, "{err} at {at}");
}
