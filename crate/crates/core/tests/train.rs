use autofocus::autodiff::{Gradients, Graph, ParamStore};
use autofocus::data::VolumeRecord;
use autofocus::models::Model;
use autofocus::train::*;
use autofocus::{Error, Tensor};

fn linear_grads(store: &ParamStore, coeffs: &[f64]) -> Gradients {
    let mut g = Graph::new();
    let w = g.param("w", store.tensor("w").unwrap().clone()).unwrap();
    let c = g.input(Tensor::from_values(&[coeffs.len()], coeffs.to_vec()).unwrap());
    let prod = g.mul(w, c).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap()
}

#[test]
fn adam_matches_reference() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::from_values(&[2], vec![1.0, -2.0]).unwrap(), true).unwrap();
    let mut state = OptimizerState::new();
    let adam = AdamParams::default();
    for coeffs in [[0.5, -3.0], [-1.0, 0.25]] {
        let grads = linear_grads(&store, &coeffs);
        adam_step(&mut store, &grads, &mut state, 0.01, &adam).unwrap();
    }
    let w = store.tensor("w").unwrap().data();
    assert!((w[0] - 0.9936610354240566).abs() < 1e-12, "{}", w[0]);
    assert!((w[1] - -1.9839408650807149).abs() < 1e-12, "{}", w[1]);
    assert_eq!(state.step, 2);
}

#[test]
fn adam_first_step_and_zero_gradient() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::from_values(&[3], vec![0.5, 0.5, -4.0]).unwrap(), true).unwrap();
    let mut state = OptimizerState::new();
    let grads = linear_grads(&store, &[1.0, 1.0, 0.0]);
    adam_step(&mut store, &grads, &mut state, 0.001, &AdamParams::default()).unwrap();
    let w = store.tensor("w").unwrap().data();
    // m̂ = v̂ = 1 after one step with g = 1
    assert!((w[0] - 0.5 + 0.001 / (1.0 + 1e-8)).abs() < 1e-15);
    assert_eq!(w[0], w[1]);
    assert_eq!(w[2], -4.0);
    assert_eq!(state.m["w"].shape(), &[3]);
}

#[test]
fn adam_rejects_non_finite_gradient() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::from_values(&[2], vec![1.0, 2.0]).unwrap(), true).unwrap();
    let grads = linear_grads(&store, &[f64::NAN, 1.0]);
    let before = store.clone();
    let mut state = OptimizerState::new();
    let err = adam_step(&mut store, &grads, &mut state, 0.1, &AdamParams::default()).unwrap_err();
    assert!(err.to_string().contains("`w`"), "{err}");
    assert_eq!(store, before);
    assert_eq!(state.step, 0);
}

#[test]
fn schedule_steps_down() {
    let cfg = TrainConfig::paper();
    assert_eq!(cfg.lr_at(0), 0.001);
    assert_eq!(cfg.lr_at(199), 0.001);
    assert_eq!(cfg.lr_at(200), 0.0001);
    assert_eq!(cfg.lr_at(299), 0.0001);
    assert_eq!(cfg.train.epochs, 300);
    assert_eq!((cfg.train.batch, cfg.train.segment), (7, 75));
}

#[test]
fn config_profiles_and_overrides() {
    let cfg = TrainConfig::from_toml("profile = \"paper\"\n[train]\nepochs = 3\nbeta1 = 0.8\n").unwrap();
    assert_eq!(cfg.train.epochs, 3);
    assert_eq!(cfg.train.beta1, 0.8);
    assert_eq!(cfg.train.beta2, 0.999);
    assert_eq!(cfg.model.arch, "afn6");

    assert_eq!(TrainConfig::from_toml("").unwrap(), TrainConfig::desk());
    assert!(TrainConfig::from_toml("[train]\nepochz = 3\n").is_err());
    assert!(TrainConfig::from_toml("profile = \"huge\"\n").is_err());
    assert!(TrainConfig::from_toml("[train]\nlr = -1.0\n").is_err());
    assert!(TrainConfig::from_toml("[model]\narch = \"afn9\"\n").is_err());

    assert!(TrainConfig::from_toml("[train.adam]\nbeta1 = 0.8\n").is_err());

    let desk = TrainConfig::desk();
    assert_eq!(TrainConfig::from_toml(&desk.to_toml()).unwrap(), desk);
}

#[test]
fn tiles_cover_everything() {
    assert_eq!(tile_starts(40, 32, 8), vec![0, 8]);
    assert_eq!(tile_starts(24, 32, 8), vec![0]);
    assert_eq!(tile_starts(64, 32, 8), vec![0, 24, 32]);
    for extent in 1..80 {
        let starts = tile_starts(extent, 20, 8);
        let w = 20.min(extent);
        assert_eq!(starts[0], 0);
        assert_eq!(starts.last().unwrap() + w, extent);
        assert!(starts.windows(2).all(|p| p[1] > p[0] && p[1] - p[0] <= w));
    }
    let cov = coverage([10, 17, 30], 12, 4);
    assert!(cov.iter().all(|&c| c >= 1));
}

/// Untrained batch norm has no running statistics, so inference-only tests
/// build without it.
fn untrained_model(cfg: &TrainConfig, seed: u64) -> Model {
    let mut m = cfg.model.clone();
    m.norm = false;
    Model::build(m.arch().unwrap(), seed).unwrap()
}

fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig::desk();
    cfg.model.channels = vec![3, 3, 4, 4];
    cfg.train.segment = 12;
    cfg.train.steps_per_epoch = 2;
    cfg.train.epochs = 3;
    cfg.train.target_loss = None;
    cfg.data.phantom_count = 2;
    cfg
}

#[test]
fn sliding_window_matches_single_pass() {
    let cfg = tiny_config();
    let vols = cfg.load_volumes().unwrap();
    let model = untrained_model(&cfg, 3);
    let img = vols[0].image.slice_block(&[0, 4, 4, 4], &[1, 14, 14, 14]).unwrap();
    let whole = model.predict(&img.clone().reshape(&[1, 1, 14, 14, 14]).unwrap()).unwrap();
    let tiled = sliding_window_logits(&model, &img, 100, EVAL_OVERLAP).unwrap();
    assert_eq!(tiled.data(), whole.data());
    let overlapped = sliding_window_logits(&model, &img, 10, 4).unwrap();
    assert_eq!(overlapped.shape(), &[3, 14, 14, 14]);
    assert!(overlapped.all_finite());
}

#[test]
fn training_checkpoint_resume_is_exact() {
    let cfg = tiny_config();
    let vols = cfg.load_volumes().unwrap();
    let dir = tempfile::tempdir().unwrap();

    let mut straight = Trainer::new(cfg.clone(), vols.clone()).unwrap();
    let mut log = Vec::new();
    let summary = straight.run(&mut log, None, None).unwrap();
    assert_eq!(summary.steps, 6);
    let lines: Vec<LogEntry> = String::from_utf8(log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[2].step, 6);

    let mut first = Trainer::new(cfg.clone(), vols.clone()).unwrap();
    first.run(&mut std::io::sink(), Some(dir.path()), Some(4)).unwrap();
    assert_eq!(first.step_count(), 4);
    let mut resumed = Trainer::resume(cfg.clone(), vols.clone(), dir.path()).unwrap();
    assert_eq!(resumed.step_count(), 4);
    resumed.run(&mut std::io::sink(), None, None).unwrap();
    assert_eq!(resumed.model().params(), straight.model().params());
    assert_eq!(resumed.optimizer(), straight.optimizer());

    let mut other = cfg.clone();
    other.model.arch = "basic".into();
    assert!(matches!(
        Trainer::resume(other, vols, dir.path()),
        Err(Error::ArchMismatch)
    ));
}

#[test]
fn optimizer_state_round_trip() {
    let mut s = OptimizerState::new();
    s.step = 17;
    s.m.insert("a.kernel".into(), Tensor::from_values(&[2], vec![0.5, -1.0]).unwrap());
    s.v.insert("a.kernel".into(), Tensor::from_values(&[2], vec![0.25, 1.0]).unwrap());
    let hash = [7u8; 32];
    let bytes = s.to_bytes(&hash).unwrap();
    assert_eq!(OptimizerState::from_bytes(&bytes, &hash).unwrap(), s);
    assert!(matches!(OptimizerState::from_bytes(&bytes, &[0; 32]), Err(Error::ArchMismatch)));
    assert!(matches!(
        OptimizerState::from_bytes(&bytes[..bytes.len() - 3], &hash),
        Err(Error::Truncated(_))
    ));
}

#[test]
fn volume_validation() {
    let cfg = tiny_config();
    let mut vols = cfg.load_volumes().unwrap();
    vols[0] = vols[0].clone().with_num_classes(4).unwrap();
    let err = Trainer::new(cfg.clone(), vols).unwrap_err();
    assert!(err.to_string().contains("classes"), "{err}");
    assert!(Trainer::new(cfg, Vec::new()).is_err());
}

#[test]
fn attention_export_writes_one_file_per_rate() {
    let cfg = tiny_config();
    let vols = cfg.load_volumes().unwrap();
    let model = untrained_model(&cfg, 5);
    let mut small = vols[0].clone();
    small.image = small.image.slice_block(&[0, 0, 0, 0], &[1, 10, 10, 10]).unwrap();
    small.labels = small.labels.block([0; 3], [10; 3]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = export_attention(&model, &small, "4", dir.path()).unwrap();
    let names: Vec<_> = paths.iter().map(|p| p.file_name().unwrap().to_str().unwrap().to_string()).collect();
    assert_eq!(names, ["phantom_000_layer4_k1_r2.afnv", "phantom_000_layer4_k2_r6.afnv"]);
    let a = VolumeRecord::read(&paths[0]).unwrap();
    let b = VolumeRecord::read(&paths[1]).unwrap();
    for (x, y) in a.image.data().iter().zip(b.image.data()) {
        assert!((x + y - 1.0).abs() < 1e-6);
    }
    assert!(export_attention(&model, &small, "layer1", dir.path()).is_err());
    assert!(export_attention(&model, &small, "layer9", dir.path()).is_err());
}
