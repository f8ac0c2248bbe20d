use autofocus::autodiff::Graph;
use autofocus::layers::{AutofocusConfig, Padding};
use autofocus::models::*;
use autofocus::{Error, Tensor};

fn opts() -> ArchOptions {
    ArchOptions::default()
}

fn small_opts() -> ArchOptions {
    ArchOptions {
        input_channels: 1,
        num_classes: 3,
        channels: vec![4, 4, 6, 6],
        rates: vec![1, 2],
        ..ArchOptions::default()
    }
}

fn head_count(cfg: &AutofocusConfig, mode: CountMode) -> usize {
    let mut n = cfg.attention_kernel_count();
    if mode == CountMode::All {
        n += cfg.attention_bias_count();
    }
    n
}

#[test]
fn basic_kernel_count() {
    let t = ArchSpec::basic(&opts()).unwrap().param_count(CountMode::Kernels);
    assert_eq!(t.total(), 311_290);
    assert_eq!(t.subtotal("model.layer4."), 43_200);
}

#[test]
fn afn_minus_basic_is_attention_heads() {
    let basic = ArchSpec::basic(&opts()).unwrap();
    for mode in [CountMode::Kernels, CountMode::All] {
        let base = basic.param_count(mode).total();
        for n in 1..=6 {
            let afn = ArchSpec::afn(n, &opts()).unwrap();
            let heads: usize = afn
                .layers
                .iter()
                .filter_map(|l| match &l.kind {
                    LayerKind::Autofocus { config } => Some(head_count(config, mode)),
                    _ => None,
                })
                .sum();
            assert_eq!(afn.param_count(mode).total() - base, heads, "n={n} {mode:?}");
        }
    }
    let afn1 = ArchSpec::afn(1, &opts()).unwrap();
    assert_eq!(afn1.param_count(CountMode::Kernels).total() - basic.param_count(CountMode::Kernels).total(), 33_850);
}

#[test]
fn kernel_count_depends_on_k_only_through_conv2() {
    let count = |rates: Vec<usize>, mode| {
        let o = ArchOptions { rates, ..opts() };
        ArchSpec::afn(3, &o).unwrap().param_count(mode).subtotal("model.layer8.")
    };
    assert_eq!(count(vec![2, 6, 10, 14], CountMode::Kernels) - count(vec![2, 6], CountMode::Kernels), 2 * 25);
    assert_eq!(count(vec![2, 6, 10, 14], CountMode::All) - count(vec![2, 6], CountMode::All), 2 * 25 + 2);
    let shared = |rates: Vec<usize>| {
        let o = ArchOptions { rates, ..opts() };
        ArchSpec::afn(1, &o).unwrap().param_count(CountMode::Kernels).subtotal("model.layer8.af.conv_shared")
    };
    assert_eq!(shared(vec![2]), shared(vec![2, 6, 10, 14]));
}

#[test]
fn afn1_parameters_extend_basic() {
    let basic = Model::build(ArchSpec::basic(&opts()).unwrap(), 1).unwrap();
    let afn = Model::build(ArchSpec::afn(1, &opts()).unwrap(), 1).unwrap();
    let rename = |n: &str| n.replace("model.layer8.conv.", "model.layer8.af.conv_shared.");
    let basic_names: Vec<String> = basic.params().iter().map(|p| rename(&p.name)).collect();
    let extra: Vec<&str> = afn
        .params()
        .iter()
        .map(|p| p.name.as_str())
        .filter(|n| !basic_names.iter().any(|b| b == n))
        .collect();
    assert_eq!(
        extra,
        [
            "model.layer8.af.attention.conv1.kernel",
            "model.layer8.af.attention.conv1.bias",
            "model.layer8.af.attention.conv2.kernel",
            "model.layer8.af.attention.conv2.bias",
        ]
    );
    assert_eq!(afn.params().len(), basic.params().len() + 4);
}

#[test]
fn build_is_deterministic() {
    let a = Model::build(ArchSpec::afn(2, &small_opts()).unwrap(), 9).unwrap();
    let b = Model::build(ArchSpec::afn(2, &small_opts()).unwrap(), 9).unwrap();
    let c = Model::build(ArchSpec::afn(2, &small_opts()).unwrap(), 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn fresh_attention_is_uniform() {
    let o = ArchOptions { norm: false, ..small_opts() };
    let model = Model::build(ArchSpec::afn(2, &o).unwrap(), 3).unwrap();
    let x = Tensor::from_values(&[1, 1, 6, 6, 6], (0..216).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let maps = model.attention_maps(&x).unwrap();
    assert_eq!(maps.len(), 2);
    for (_, m) in maps {
        assert!(m.tensor().data().iter().all(|&v| v == 0.5));
    }
}

#[test]
fn eval_needs_running_stats() {
    let mut model = Model::build(ArchSpec::basic(&small_opts()).unwrap(), 0).unwrap();
    let x = Tensor::fill(&[1, 1, 4, 4, 4], 0.5).unwrap();
    assert!(model.predict(&x).is_err());
    let mut g = Graph::new();
    let xn = g.input(x.clone());
    let out = model.forward(&mut g, xn, Mode::Train).unwrap();
    assert_eq!(out.batch_stats.len(), 4);
    model.update_running(&out.batch_stats);
    assert_eq!(model.predict(&x).unwrap().shape(), &[1, 3, 4, 4, 4]);
}

#[test]
fn channel_mismatch_is_rejected() {
    let mut arch = ArchSpec::basic(&small_opts()).unwrap();
    if let LayerKind::Conv { conv } = &mut arch.layers[2].kind {
        conv.in_channels = 5;
    }
    assert!(arch.validate().is_err());
    assert!(Model::build(arch, 0).is_err());
    assert!(ArchSpec::by_name("afn5", &small_opts()).is_err());
    assert!(ArchSpec::by_name("unet", &small_opts()).is_err());
    assert_eq!(ArchSpec::by_name("aspp-c", &small_opts()).unwrap().name, "aspp-c");
}

#[test]
fn receptive_field_recursion() {
    let rf = receptive_field(&ArchSpec::basic(&opts()).unwrap());
    assert_eq!(rf[0].phi_max, [1; 3]);
    assert_eq!(rf[1].phi_max, [3; 3]);
    assert_eq!(rf[2].phi_max, [5; 3]);
    assert_eq!(rf[8].layer, "layer8");
    assert_eq!(rf[8].phi_max, [29; 3]);
    assert_eq!(rf[9].phi_max, [29; 3]);

    let rf = receptive_field(&ArchSpec::afn(1, &opts()).unwrap());
    assert_eq!(rf[8].phi_max[0] - rf[7].phi_max[0], 28);
    assert_eq!(rf[8].phi_min[0] - rf[7].phi_min[0], 4);
}

#[test]
fn valid_padding_shape_flow() {
    let o = ArchOptions {
        input_channels: 1,
        num_classes: 2,
        channels: vec![1; 8],
        padding: Padding::Valid,
        norm: false,
        ..ArchOptions::default()
    };
    let arch = ArchSpec::basic(&o).unwrap();
    let phi = receptive_field(&arch).last().unwrap().phi_max[0];
    let model = Model::build(arch, 0).unwrap();
    let x = Tensor::fill(&[1, 1, 75, 75, 75], 0.1).unwrap();
    let y = model.predict(&x).unwrap();
    assert_eq!(y.shape(), &[1, 2, 47, 47, 47]);
    assert_eq!(75 - (phi - 1), 47);
}

#[test]
fn weights_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.afnw");
    let arch = ArchSpec::afn(2, &small_opts()).unwrap();
    let mut model = Model::build(arch.clone(), 5).unwrap();
    let x = Tensor::from_values(&[1, 1, 5, 5, 5], (0..125).map(|i| (i as f64).cos()).collect()).unwrap();
    let mut g = Graph::new();
    let xn = g.input(x.clone());
    let out = model.forward(&mut g, xn, Mode::Train).unwrap();
    model.update_running(&out.batch_stats);
    model.save_with_arch(&path).unwrap();

    let back = Model::load_weights(&path, &arch).unwrap();
    assert_eq!(back, model);
    let (a, b) = (model.predict(&x).unwrap(), back.predict(&x).unwrap());
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert_eq!(Model::load_with_arch(&path).unwrap(), model);

    let wrong = ArchSpec::afn(2, &ArchOptions { num_classes: 4, ..small_opts() }).unwrap();
    assert!(matches!(Model::load_weights(&path, &wrong), Err(Error::ArchMismatch)));

    let bytes = std::fs::read(&path).unwrap();
    assert!(matches!(Model::from_bytes(&bytes[..bytes.len() - 3], &arch), Err(Error::Truncated(_))));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(Model::from_bytes(&bad, &arch), Err(Error::Version { found: 9, .. })));
    bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Model::from_bytes(&bad, &arch), Err(Error::Format(_))));
}

#[test]
fn weight_file_size() {
    let arch = ArchSpec::afn(1, &small_opts()).unwrap();
    let model = Model::build(arch, 0).unwrap();
    let bytes = model.to_bytes().unwrap();
    let overhead: usize = model
        .params()
        .iter()
        .map(|p| 2 + p.name.len() + 1 + 4 * p.tensor.rank())
        .sum();
    let header = 4 + 4 + 32 + 8;
    assert_eq!(bytes.len(), header + overhead + 8 * model.param_count(CountMode::All).total());
}
