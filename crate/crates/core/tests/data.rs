use autofocus::data::*;
use autofocus::loss::LabelVolume;
use autofocus::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SPEC: &str = r#"
[phantom]
grid = [40, 40, 40]
background_mean = 0.1
background_noise = 0.05
seed = 11

[class1]
count = 2
radius_min = 4
radius_max = 6
intensity_mean = 1.0
intensity_sigma = 0.05
texture_frequency = 0.25
texture_amplitude = 0.2

[class2]
count = 1
radius_min = 7
radius_max = 9
intensity_mean = 0.6
texture_frequency = 0.05
texture_amplitude = 0.3
"#;

fn spec() -> PhantomSpec {
    PhantomSpec::from_toml(SPEC).unwrap()
}

fn toy_volume() -> VolumeRecord {
    let shape = [6, 5, 4];
    let n = 120;
    let image = Tensor::from_values(&[2, 6, 5, 4], (0..2 * n).map(|i| ((i * 7 % 13) as f64) * 0.25 - 1.0).collect()).unwrap();
    let labels = LabelVolume::new(shape, (0..n).map(|i| (i % 3) as u8).collect(), 3).unwrap();
    VolumeRecord::new("toy", image, labels, [1.0, 1.5, 2.0]).unwrap()
}

#[test]
fn afnv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.afnv");
    let v = toy_volume();
    v.write(&path).unwrap();
    let back = VolumeRecord::read(&path).unwrap();
    assert_eq!(back, v);
    assert_eq!(back.id, "toy");
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(bytes.len(), 4 + 4 + 16 + 24 + 1 + 240 * 4 + 120);
}

#[test]
fn afnv_errors() {
    let bytes = toy_volume().to_bytes().unwrap();
    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"NOPE");
    assert!(matches!(VolumeRecord::from_bytes("x", &bad), Err(Error::Format(_))));
    assert!(matches!(
        VolumeRecord::from_bytes("x", &bytes[..bytes.len() - 10]),
        Err(Error::Truncated(_))
    ));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(VolumeRecord::from_bytes("x", &extra), Err(Error::Format(_))));
    let mut huge = bytes.clone();
    for off in [8, 12, 16, 20] {
        huge[off..off + 4].copy_from_slice(&u32::MAX.to_le_bytes());
    }
    let err = VolumeRecord::from_bytes("x", &huge).unwrap_err();
    assert!(err.to_string().contains("overflow"), "{err}");
}

#[test]
fn normalize_properties() {
    let v = toy_volume();
    let n = normalize(&v, NormMask::Whole).unwrap();
    for ch in 0..2 {
        let vals = &n.image.data()[ch * 120..(ch + 1) * 120];
        let m: f64 = vals.iter().sum::<f64>() / 120.0;
        let var: f64 = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 120.0;
        assert!(m.abs() < 1e-6 && (var - 1.0).abs() < 1e-6);
    }
    let again = normalize(&n, NormMask::Whole).unwrap();
    assert!(again.image.data().iter().zip(n.image.data()).all(|(a, b)| (a - b).abs() < 1e-6));

    let mut affine = v.clone();
    affine.image = v.image.mul_scalar(3.5).add_scalar(-2.0);
    let na = normalize(&affine, NormMask::Whole).unwrap();
    assert!(na.image.data().iter().zip(n.image.data()).all(|(a, b)| (a - b).abs() < 1e-9));

    let mut flat = v.clone();
    flat.image = Tensor::fill(v.image.shape(), 4.0).unwrap();
    assert!(normalize(&flat, NormMask::Whole).is_err());
}

#[test]
fn masked_normalize_leaves_background() {
    let image = Tensor::from_values(&[1, 1, 1, 6], vec![0.0, 0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
    let v = VolumeRecord::new("m", image, LabelVolume::zeros([1, 1, 6], 1).unwrap(), [1.0; 3]).unwrap();
    let n = normalize(&v, NormMask::Nonzero).unwrap();
    assert_eq!(&n.image.data()[..2], &[0.0, 0.0]);
    let inner = &n.image.data()[2..];
    assert!(inner.iter().sum::<f64>().abs() < 1e-12);
    assert!((inner.iter().map(|x| x * x).sum::<f64>() / 4.0 - 1.0).abs() < 1e-12);
}

#[test]
fn phantom_is_deterministic_and_consistent() {
    let s = spec();
    let (a, inst) = generate_phantom(&s, 0).unwrap();
    let (b, _) = generate_phantom(&s, 0).unwrap();
    let (c, _) = generate_phantom(&s, 1).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.labels, c.labels);
    assert_eq!(inst.len(), 3);
    for i in &inst {
        assert_eq!(a.labels.get(i.center), i.class);
    }
    let hist = a.labels.histogram();
    assert!(hist.iter().all(|&n| n > 0));
    for class in 1..3u8 {
        let expect: f64 = inst.iter().filter(|i| i.class == class).map(PhantomInstance::volume).sum();
        let got = hist[class as usize] as f64;
        assert!((got - expect).abs() <= 0.1 * expect, "class {class}: {got} vs {expect}");
    }
    // f32-exact image survives the file format
    let back = VolumeRecord::from_bytes(a.id.clone(), &a.to_bytes().unwrap()).unwrap();
    assert_eq!(back, a);
}

#[test]
fn scale_probe_has_small_and_large_instances() {
    let text = SPEC.replace("grid = [40, 40, 40]", "grid = [64, 64, 64]\nscale_probe = 1");
    let s = PhantomSpec::from_toml(&text).unwrap();
    let (_, inst) = generate_phantom(&s, 3).unwrap();
    let probe: Vec<_> = inst.iter().filter(|i| i.class == 1).collect();
    assert!(probe.iter().any(|i| i.bounding_radius() <= 4.0));
    assert!(probe.iter().any(|i| i.radii.iter().all(|&r| r >= 12.0)));
}

#[test]
fn placement_failure_names_class() {
    let text = SPEC.replace("count = 1\n", "count = 60\n");
    let err = generate_phantom(&PhantomSpec::from_toml(&text).unwrap(), 0).unwrap_err();
    assert!(err.to_string().contains("class2"), "{err}");
}

#[test]
fn spec_validation() {
    assert!(PhantomSpec::from_toml(&SPEC.replace("[class2]", "[class3]")).is_err());
    assert!(PhantomSpec::from_toml(&SPEC.replace("radius_max = 9", "radius_max = 30")).is_err());
    assert!(PhantomSpec::from_toml(&SPEC.replace("seed = 11", "seed = 11\ncolour = 2")).is_err());
    let s = spec();
    assert_eq!(PhantomSpec::from_toml(&s.to_toml()).unwrap(), s);
}

#[test]
fn segments_match_source() {
    let v = toy_volume();
    let segs = sample_segments(&v, [3, 3, 2], 5, true, 4).unwrap();
    assert_eq!(segs, sample_segments(&v, [3, 3, 2], 5, true, 4).unwrap());
    for s in &segs {
        assert_eq!(s.image.shape(), &[2, 3, 3, 2]);
        for c in 0..2 {
            for z in 0..3 {
                for y in 0..3 {
                    for x in 0..2 {
                        let o = s.origin;
                        assert_eq!(
                            s.image.get(&[c, z, y, x]).unwrap(),
                            v.image.get(&[c, o[0] + z, o[1] + y, o[2] + x]).unwrap()
                        );
                    }
                }
            }
        }
        assert_eq!(s.labels.get([1, 1, 1]), s.center_class.unwrap());
    }
    assert!(sample_segments(&v, [7, 3, 2], 1, true, 0).is_err());
}

#[test]
fn paper_batch_shape() {
    let n = 128 * 128 * 128;
    let labels: Vec<u8> = (0..n).map(|i| (i % 97 == 0) as u8).collect();
    let v = VolumeRecord::new(
        "big",
        Tensor::zeros(&[1, 128, 128, 128]).unwrap(),
        LabelVolume::new([128; 3], labels, 2).unwrap(),
        [1.0; 3],
    )
    .unwrap();
    let segs = sample_segments(&v, [75; 3], 7, true, 1).unwrap();
    assert_eq!(segs.len(), 7);
    assert!(segs.iter().all(|s| s.image.shape() == [1, 75, 75, 75]));
}

#[test]
fn balanced_centers_are_uniform() {
    let (v, _) = generate_phantom(&spec(), 2).unwrap();
    let sampler = SegmentSampler::new(&v, [16; 3]).unwrap();
    let classes = sampler.classes();
    assert_eq!(classes.len(), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let draws = 7000;
    let mut counts = vec![0usize; 3];
    for _ in 0..draws {
        let (origin, class) = sampler.draw(&mut rng, true);
        let c = class.unwrap();
        let center: [usize; 3] = std::array::from_fn(|a| origin[a] + 8);
        assert_eq!(v.labels.get(center), c);
        counts[c as usize] += 1;
    }
    let p = 1.0 / 3.0;
    let mean = draws as f64 * p;
    let sd = (draws as f64 * p * (1.0 - p)).sqrt();
    for n in counts {
        assert!((n as f64 - mean).abs() <= 3.0 * sd, "{n} vs {mean}±{sd}");
    }
}

#[test]
fn manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("set.txt");
    let vols = vec![dir.path().join("a.afnv"), dir.path().join("sub/b.afnv")];
    write_manifest(&m, &vols).unwrap();
    assert_eq!(read_manifest(&m).unwrap(), vols);
    std::fs::write(&m, "# nothing\n\n").unwrap();
    assert!(read_manifest(&m).is_err());
}
