use autofocus::autodiff::*;
use autofocus::Tensor;

fn t(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::from_values(shape, v.to_vec()).unwrap()
}

#[test]
fn forward_examples() {
    let mut g = Graph::new();
    let x = g.input(t(&[2], &[1.0, 2.0]));
    let y = g.add(x, x).unwrap();
    assert_eq!(g.value(y).data(), &[2.0, 4.0]);
    let m = g.input(Tensor::scalar(-1.0));
    let r = g.relu(m);
    assert_eq!(g.value(r).data(), &[0.0]);
}

#[test]
fn weighted_sum_gradient_is_input() {
    let mut g = Graph::new();
    let x = g.input(t(&[3], &[0.5, -1.0, 2.0]));
    let w = g.param("w", t(&[3], &[1.0, 1.0, 1.0])).unwrap();
    let p = g.mul(w, x).unwrap();
    let loss = g.sum(p);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.param("w").unwrap().data(), &[0.5, -1.0, 2.0]);
    assert!(grads.unreachable().is_empty());
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[2], &[1.0, 2.0]));
    assert!(g.backward(x).is_err());
}

#[test]
fn unused_parameter_gets_zero_and_is_flagged() {
    let mut g = Graph::new();
    let a = g.param("a", t(&[2], &[1.0, 2.0])).unwrap();
    let _b = g.param("b", t(&[2], &[3.0, 4.0])).unwrap();
    let loss = g.sum(a);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.param("b").unwrap().data(), &[0.0, 0.0]);
    assert_eq!(grads.unreachable(), &["b".to_string()]);
}

#[test]
fn duplicate_param_name_is_an_error() {
    let mut g = Graph::new();
    g.param("k", Tensor::scalar(1.0)).unwrap();
    assert!(g.param("k", Tensor::scalar(2.0)).is_err());
}

#[test]
fn shape_error_names_node() {
    let mut g = Graph::new();
    let a = g.input(t(&[2], &[1.0, 2.0]));
    let b = g.input(t(&[3], &[1.0, 2.0, 3.0]));
    let err = g.add(a, b).unwrap_err().to_string();
    assert!(err.contains("#2 add"), "{err}");
}

#[test]
fn shared_use_accumulates() {
    // loss = sum(w*x1) + sum(w*x2) -> dL/dw = x1 + x2
    let mut g = Graph::new();
    let w = g.param("w", t(&[2], &[1.0, 1.0])).unwrap();
    let x1 = g.input(t(&[2], &[1.0, 2.0]));
    let x2 = g.input(t(&[2], &[10.0, 20.0]));
    let a = g.mul(w, x1).unwrap();
    let b = g.mul(w, x2).unwrap();
    let s = g.add(a, b).unwrap();
    let loss = g.sum(s);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.param("w").unwrap().data(), &[11.0, 22.0]);
}

#[test]
fn softmax_rows() {
    let x = t(&[1, 4, 1], &[0.0; 4]);
    let y = softmax(&x, 1).unwrap();
    assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    let x = t(&[3], &[0.3, -1.2, 2.0]);
    let shifted = softmax(&x.add_scalar(100.0), 0).unwrap();
    let base = softmax(&x, 0).unwrap();
    for (a, b) in shifted.data().iter().zip(base.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}
