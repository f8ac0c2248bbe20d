use autofocus::autodiff::{grad_check, GradCheckOptions};
use autofocus::verify::*;
use autofocus::Tensor;

#[test]
fn registry_names_are_unique() {
    let mut names: Vec<_> = cases().iter().map(|c| c.name).collect();
    let n = names.len();
    names.sort_unstable();
    names.dedup();
    assert_eq!(names.len(), n);
}

#[test]
fn every_case_passes_two_seeds() {
    for r in run_all(None, 2, &GradCheckOptions::default()).unwrap() {
        assert!(r.passed, "{r:?}");
        assert!(r.probed > 0, "{r:?}");
    }
}

#[test]
fn a_detached_gradient_is_caught() {
    let x = Tensor::from_values(&[3], vec![0.3, -0.2, 0.9]).unwrap();
    // sum(x ⊙ stop_grad(x)): analytic x, numeric 2x
    let r = grad_check(
        &[("x".into(), x.clone())],
        |g, i| {
            let frozen = g.input(g.value(i[0]).clone());
            let y = g.mul(i[0], frozen)?;
            Ok(g.sum(y))
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(!r.passed());
    assert!((r.max_rel_error() - 1.0 / 3.0).abs() < 1e-6);
}
