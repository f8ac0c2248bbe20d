use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use autofocus::autodiff::BatchStats;
use autofocus::layers::*;
use autofocus::Tensor;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_values(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Single-volume same-padded dilated convolution by direct summation.
fn conv_oracle(x: &Tensor, k: &Tensor, r: usize) -> Tensor {
    let [c_in, d, h, w] = <[usize; 4]>::try_from(x.shape()).unwrap();
    let c_out = k.shape()[0];
    let mut out = Tensor::zeros(&[c_out, d, h, w]).unwrap();
    for o in 0..c_out {
        for z in 0..d {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for c in 0..c_in {
                        for kz in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iz = z as isize + (kz as isize - 1) * r as isize;
                                    let iy = y as isize + (ky as isize - 1) * r as isize;
                                    let ix = xx as isize + (kx as isize - 1) * r as isize;
                                    if [iz, iy, ix].iter().zip([d, h, w]).any(|(&i, e)| i < 0 || i >= e as isize) {
                                        continue;
                                    }
                                    acc += k.get(&[o, c, kz, ky, kx]).unwrap()
                                        * x.get(&[c, iz as usize, iy as usize, ix as usize]).unwrap();
                                }
                            }
                        }
                    }
                    out.set(&[o, z, y, xx], acc).unwrap();
                }
            }
        }
    }
    out
}

fn attention_params(rng: &mut ChaCha8Rng, cfg: &AutofocusConfig) -> AttentionParams {
    let s1 = cfg.attention_conv1_spec();
    let s2 = cfg.attention_conv2_spec();
    AttentionParams {
        conv1_kernel: rand_tensor(rng, &s1.kernel_shape()),
        conv1_bias: Some(rand_tensor(rng, &[s1.out_channels])),
        conv2_kernel: rand_tensor(rng, &s2.kernel_shape()).mul_scalar(3.0),
        conv2_bias: Some(rand_tensor(rng, &[s2.out_channels])),
    }
}

fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() <= tol, "{x} vs {y}");
    }
}

#[test]
fn delta_kernel_is_identity_at_any_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[2, 5, 6, 7]);
    for r in [1, 2, 6] {
        let spec = ConvSpec::new(2, 2).with_dilation(r).with_bias(false);
        let mut k = Tensor::zeros(&spec.kernel_shape()).unwrap();
        k.set(&[0, 0, 1, 1, 1], 1.0).unwrap();
        k.set(&[1, 1, 1, 1, 1], 1.0).unwrap();
        let y = conv3d(&x, &spec, &k, None).unwrap();
        assert_eq!(y, x);
    }
}

#[test]
fn conv_valid_ones() {
    let x = Tensor::fill(&[1, 5, 5, 5], 1.0).unwrap();
    let spec = ConvSpec::new(1, 1).with_dilation(2).with_padding(Padding::Valid).with_bias(false);
    let k = Tensor::fill(&spec.kernel_shape(), 1.0).unwrap();
    let y = conv3d(&x, &spec, &k, None).unwrap();
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert_eq!(y.data(), &[27.0]);
    let spec = ConvSpec::new(2, 1).with_bias(false);
    assert!(conv3d(&x, &spec, &Tensor::fill(&spec.kernel_shape(), 1.0).unwrap(), None).is_err());
}

#[test]
fn conv_same_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for r in [1, 2, 3] {
        let x = rand_tensor(&mut rng, &[3, 6, 5, 7]);
        let spec = ConvSpec::new(3, 2).with_dilation(r).with_bias(false);
        let k = rand_tensor(&mut rng, &spec.kernel_shape());
        assert_close(&conv3d(&x, &spec, &k, None).unwrap(), &conv_oracle(&x, &k, r), 1e-12);
    }
}

#[test]
fn relu_and_softmax() {
    let x = Tensor::from_values(&[3], vec![-2.0, 0.0, 3.0]).unwrap();
    assert_eq!(relu(&x).data(), &[0.0, 0.0, 3.0]);
    let logits = Tensor::zeros(&[4, 2, 2, 2]).unwrap();
    let s = channel_softmax(&logits, 0).unwrap();
    assert!(s.data().iter().all(|&v| v == 0.25));
}

#[test]
fn attention_head_shapes_and_zero_logits() {
    let cfg = AutofocusConfig::new(vec![2, 6, 10, 14], 50, 50).unwrap();
    assert_eq!(cfg.attention_mid_channels(), 25);
    assert_eq!(cfg.attention_kernel_count(), 33_850);

    let cfg = AutofocusConfig::new(vec![1, 2, 3], 4, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut p = attention_params(&mut rng, &cfg);
    p.conv2_kernel = Tensor::zeros(p.conv2_kernel.shape()).unwrap();
    p.conv2_bias = Some(Tensor::zeros(&[3]).unwrap());
    let x = rand_tensor(&mut rng, &[4, 5, 5, 5]);
    let maps = attention_net(&x, &cfg, &p).unwrap();
    assert_eq!(maps.spatial(), [5, 5, 5]);
    assert!(maps.tensor().data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

    assert!(AutofocusConfig::new(vec![2, 6], 1, 4).is_err());
    assert!(AutofocusConfig::new(vec![], 4, 4).is_err());
    assert!(AutofocusConfig::new(vec![6, 2], 4, 4).is_err());
}

#[test]
fn autofocus_k1_equals_single_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = AutofocusConfig::new(vec![3], 4, 3).unwrap();
    let x = rand_tensor(&mut rng, &[4, 6, 6, 6]);
    let k = rand_tensor(&mut rng, &[3, 4, 3, 3, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    let p = attention_params(&mut rng, &cfg);
    let (out, maps) = autofocus_forward(&x, &cfg, &k, Some(&b), &p).unwrap();
    assert!(maps.tensor().data().iter().all(|&v| v == 1.0));
    let direct = conv3d(&x, &ConvSpec::new(4, 3).with_dilation(3), &k, Some(&b)).unwrap();
    assert_eq!(out, direct);
}

#[test]
fn autofocus_one_hot_selects_branch() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = AutofocusConfig::new(vec![1, 2, 4], 2, 2).unwrap();
    let x = rand_tensor(&mut rng, &[2, 7, 6, 5]);
    let k = rand_tensor(&mut rng, &[2, 2, 3, 3, 3]);
    for j in 0..3 {
        let maps = AttentionMaps::one_hot(3, j, [7, 6, 5]).unwrap();
        let out = autofocus_with_maps(&x, &cfg, &k, None, &maps).unwrap();
        let direct = conv3d(&x, &cfg.branch_spec(j), &k, None).unwrap();
        assert_close(&out, &direct, 1e-6);
    }
}

#[test]
fn autofocus_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = AutofocusConfig::new(vec![1, 2], 4, 2).unwrap();
    let x = rand_tensor(&mut rng, &[4, 5, 6, 5]);
    let k = rand_tensor(&mut rng, &[2, 4, 3, 3, 3]);
    let p = attention_params(&mut rng, &cfg);
    let (out, maps) = autofocus_forward(&x, &cfg, &k, None, &p).unwrap();
    let branches: Vec<Tensor> = cfg.rates.iter().map(|&r| conv_oracle(&x, &k, r)).collect();
    let vol = 5 * 6 * 5;
    let mut expect = Tensor::zeros(out.shape()).unwrap();
    for c in 0..2 {
        for v in 0..vol {
            let mut acc = 0.0;
            for (j, b) in branches.iter().enumerate() {
                acc += maps.tensor().data()[j * vol + v] * b.data()[c * vol + v];
            }
            expect.data_mut()[c * vol + v] = acc;
        }
    }
    assert_close(&out, &expect, 1e-12);
    assert!(maps.max_normalization_error() < ATTENTION_SUM_TOL);
}

#[test]
fn shared_kernel_moves_every_branch() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = AutofocusConfig::new(vec![1, 3], 2, 2).unwrap();
    let x = rand_tensor(&mut rng, &[2, 6, 6, 6]);
    let k = rand_tensor(&mut rng, &[2, 2, 3, 3, 3]);
    let mut k2 = k.clone();
    k2.data_mut()[5] += 0.5;
    for j in 0..2 {
        let maps = AttentionMaps::one_hot(2, j, [6, 6, 6]).unwrap();
        let a = autofocus_with_maps(&x, &cfg, &k, None, &maps).unwrap();
        let b = autofocus_with_maps(&x, &cfg, &k2, None, &maps).unwrap();
        let delta = b.sub(&a).unwrap();
        let direct = conv3d(&x, &cfg.branch_spec(j), &k2, None)
            .unwrap()
            .sub(&conv3d(&x, &cfg.branch_spec(j), &k, None).unwrap())
            .unwrap();
        assert!(delta.max_abs() > 0.0);
        assert_close(&delta, &direct, 1e-12);
    }
}

#[test]
fn aspp_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[3, 6, 6, 6]);
    let w1 = ConvWeights { kernel: rand_tensor(&mut rng, &[2, 3, 3, 3, 3]), bias: Some(rand_tensor(&mut rng, &[2])) };
    let w2 = ConvWeights { kernel: rand_tensor(&mut rng, &[2, 3, 3, 3, 3]), bias: Some(rand_tensor(&mut rng, &[2])) };
    let single = aspp_forward(&x, &[2], std::slice::from_ref(&w1), AsppFusion::Sum, None).unwrap();
    let direct = conv3d(&x, &ConvSpec::new(3, 2).with_dilation(2), &w1.kernel, w1.bias.as_ref()).unwrap();
    assert_eq!(single, direct);

    let zero = ConvWeights { kernel: Tensor::zeros(&[2, 3, 3, 3, 3]).unwrap(), bias: None };
    let z = aspp_forward(&x, &[1, 2], &[zero.clone(), zero], AsppFusion::Sum, None).unwrap();
    assert!(z.data().iter().all(|&v| v == 0.0));

    let both = aspp_forward(&x, &[1, 3], &[w1.clone(), w2.clone()], AsppFusion::Sum, None).unwrap();
    let manual = conv3d(&x, &ConvSpec::new(3, 2).with_dilation(1), &w1.kernel, w1.bias.as_ref())
        .unwrap()
        .add(&conv3d(&x, &ConvSpec::new(3, 2).with_dilation(3), &w2.kernel, w2.bias.as_ref()).unwrap())
        .unwrap();
    assert_close(&both, &manual, 1e-12);

    let proj = ConvWeights { kernel: rand_tensor(&mut rng, &[2, 4, 1, 1, 1]), bias: None };
    let cat = aspp_forward(&x, &[1, 3], &[w1, w2], AsppFusion::Concat, Some(&proj)).unwrap();
    assert_eq!(cat.shape(), &[2, 6, 6, 6]);
}

#[test]
fn residual_alignment() {
    let a = Tensor::fill(&[2, 3, 3, 3], 1.0).unwrap();
    let b = Tensor::fill(&[2, 3, 3, 3], 2.0).unwrap();
    assert!(residual_add(&a, &b).unwrap().data().iter().all(|&v| v == 3.0));

    let out = Tensor::fill(&[40, 2, 2, 2], 1.0).unwrap();
    let inp = Tensor::fill(&[30, 2, 2, 2], 5.0).unwrap();
    let r = residual_add(&out, &inp).unwrap();
    for c in 0..40 {
        let v = r.get(&[c, 0, 0, 0]).unwrap();
        assert_eq!(v, if c < 30 { 6.0 } else { 1.0 });
    }

    let mut inp = Tensor::zeros(&[1, 75, 75, 75]).unwrap();
    inp.set(&[0, 2, 2, 2], 7.0).unwrap();
    inp.set(&[0, 1, 2, 2], 9.0).unwrap();
    let out = Tensor::zeros(&[1, 71, 71, 71]).unwrap();
    let r = residual_add(&out, &inp).unwrap();
    assert_eq!(r.get(&[0, 0, 0, 0]).unwrap(), 7.0);
    assert!((r.sum_all() - 7.0).abs() < 1e-12);

    assert!(residual_add(&inp, &out).is_err());
}

#[test]
fn batchnorm_modes() {
    let mut bn = BatchNorm::new(2).unwrap();
    bn.beta = Tensor::from_values(&[2], vec![0.3, -0.7]).unwrap();
    let x = Tensor::from_values(&[2, 1, 1, 3], vec![4.0, 4.0, 4.0, 1.0, 2.0, 6.0]).unwrap();
    assert!(bn.clone().forward(&x, BnMode::Eval).is_err());
    let y = bn.forward(&x, BnMode::Train).unwrap();
    for i in 0..3 {
        assert!((y.data()[i] - 0.3).abs() < 1e-12);
    }
    let ch1 = &y.data()[3..];
    let m: f64 = ch1.iter().sum::<f64>() / 3.0 + 0.7;
    let v: f64 = ch1.iter().map(|v| (v + 0.7 - m).powi(2)).sum::<f64>() / 3.0;
    assert!(m.abs() < 1e-5);
    assert!((v - 1.0).abs() < 1e-4);
    let e1 = bn.forward(&x, BnMode::Eval).unwrap();
    let e2 = bn.forward(&x, BnMode::Eval).unwrap();
    assert_eq!(e1, e2);
}

#[test]
fn running_stats_momentum() {
    let mut running = None;
    let b1 = BatchStats { mean: vec![1.0], var: vec![2.0] };
    update_running_stats(&mut running, &b1);
    assert_eq!(running.as_ref().unwrap(), &b1);
    let b2 = BatchStats { mean: vec![3.0], var: vec![4.0] };
    update_running_stats(&mut running, &b2);
    let r = running.unwrap();
    assert!((r.mean[0] - 1.2).abs() < 1e-12);
    assert!((r.var[0] - 2.2).abs() < 1e-12);
}

#[test]
fn attention_maps_reject_unnormalized() {
    let t = Tensor::fill(&[2, 1, 1, 1], 0.6).unwrap();
    assert!(AttentionMaps::new(t).is_err());
    assert!(AttentionMaps::one_hot(2, 2, [1, 1, 1]).is_err());
}
