//! Registry of finite-difference gradient checks covering every graph op
//! and layer builder.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{grad_check, GradCheckOptions, GradCheckReport, Graph, NodeId};
use crate::error::Result;
use crate::layers::{graph as lg, AsppFusion, AutofocusConfig, ConvSpec};
use crate::loss::{self, DiceOptions, LabelVolume};
use crate::models::{ArchOptions, ArchSpec, Mode, Model};
use crate::tensor::Tensor;

/// Seeds per case used by the acceptance suite and the CLI.
pub const DEFAULT_SEEDS: u64 = 20;

type Inputs = Vec<(String, Tensor)>;
type Build = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>;

/// One registered check: builds random inputs and a scalar function of them.
pub struct GradCase {
    pub name: &'static str,
    setup: fn(&mut ChaCha8Rng) -> Result<(Inputs, Build)>,
}

impl GradCase {
    pub fn run(&self, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(fnv(self.name));
        let (inputs, build) = (self.setup)(&mut rng)?;
        let opts = GradCheckOptions { seed, ..opts.clone() };
        grad_check(&inputs, build, &opts)
    }
}

fn fnv(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Aggregate over all seeds of one case.
#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub seeds: u64,
    pub max_rel_error: f64,
    pub probed: usize,
    pub skipped: usize,
    pub passed: bool,
}

pub fn run_case(case: &GradCase, seeds: u64, opts: &GradCheckOptions) -> Result<CaseResult> {
    let mut out = CaseResult {
        name: case.name.to_string(),
        seeds,
        max_rel_error: 0.0,
        probed: 0,
        skipped: 0,
        passed: true,
    };
    for seed in 0..seeds {
        let r = case.run(seed, opts)?;
        out.max_rel_error = out.max_rel_error.max(r.max_rel_error());
        out.passed &= r.passed();
        for e in &r.entries {
            out.probed += e.probed;
            out.skipped += e.skipped;
        }
    }
    Ok(out)
}

/// Runs every case whose name contains `filter`.
pub fn run_all(filter: Option<&str>, seeds: u64, opts: &GradCheckOptions) -> Result<Vec<CaseResult>> {
    cases()
        .iter()
        .filter(|c| filter.is_none_or(|f| c.name.contains(f)))
        .map(|c| run_case(c, seeds, opts))
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor> {
    let d = Uniform::new(lo, hi).expect("valid range");
    let n = shape.iter().product();
    Tensor::from_values(shape, (0..n).map(|_| d.sample(rng)).collect())
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<Tensor> {
    uniform(rng, shape, -1.0, 1.0)
}

fn named(list: Vec<(&str, Tensor)>) -> Inputs {
    list.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

/// `Σ out ⊙ w` for a fixed random `w`, turning any node into a scalar with
/// non-uniform upstream gradients.
fn project(g: &mut Graph, out: NodeId, w: &Tensor) -> Result<NodeId> {
    let w = g.input(w.clone());
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

macro_rules! case {
    ($name:literal, |$rng:ident| $body:block) => {
        GradCase {
            name: $name,
            setup: |$rng: &mut ChaCha8Rng| -> Result<(Inputs, Build)> { $body },
        }
    };
}

fn conv_case(rng: &mut ChaCha8Rng, rate: usize) -> Result<(Inputs, Build)> {
    let spec = ConvSpec::new(2, 3).with_dilation(rate);
    let x = randn(rng, &[1, 2, 5, 6, 5])?;
    let k = uniform(rng, &spec.kernel_shape(), -0.5, 0.5)?;
    let b = randn(rng, &[3])?;
    let w = randn(rng, &[1, 3, 5, 6, 5])?;
    Ok((
        named(vec![("x", x), ("kernel", k), ("bias", b)]),
        Box::new(move |g, ids| {
            let y = lg::conv3d(g, ids[0], &spec, ids[1], Some(ids[2]))?;
            project(g, y, &w)
        }),
    ))
}

fn autofocus_case(rng: &mut ChaCha8Rng, rates: Vec<usize>) -> Result<(Inputs, Build)> {
    let cfg = AutofocusConfig::new(rates, 4, 3)?;
    let spatial = [1, 4, 5, 5, 4];
    let x = randn(rng, &spatial)?;
    let k = uniform(rng, &cfg.branch_spec(0).kernel_shape(), -0.4, 0.4)?;
    let b = randn(rng, &[3])?;
    let c1 = uniform(rng, &cfg.attention_conv1_spec().kernel_shape(), -0.4, 0.4)?;
    let c1b = randn(rng, &[cfg.attention_mid_channels()])?;
    let c2 = randn(rng, &cfg.attention_conv2_spec().kernel_shape())?;
    let c2b = randn(rng, &[cfg.k()])?;
    let w = randn(rng, &[1, 3, 5, 5, 4])?;
    Ok((
        named(vec![
            ("x", x),
            ("kernel", k),
            ("bias", b),
            ("attention.conv1.kernel", c1),
            ("attention.conv1.bias", c1b),
            ("attention.conv2.kernel", c2),
            ("attention.conv2.bias", c2b),
        ]),
        Box::new(move |g, ids| {
            let att = lg::AttentionNodes {
                conv1_kernel: ids[3],
                conv1_bias: Some(ids[4]),
                conv2_kernel: ids[5],
                conv2_bias: Some(ids[6]),
            };
            let (y, _) = lg::autofocus(g, ids[0], &cfg, ids[1], Some(ids[2]), &att)?;
            project(g, y, &w)
        }),
    ))
}

fn aspp_case(rng: &mut ChaCha8Rng, fusion: AsppFusion) -> Result<(Inputs, Build)> {
    let rates = vec![1, 2, 3];
    let x = randn(rng, &[1, 2, 5, 4, 5])?;
    let mut inputs = vec![("x".to_string(), x)];
    for (i, _) in rates.iter().enumerate() {
        inputs.push((format!("branch{i}.kernel"), uniform(rng, &[3, 2, 3, 3, 3], -0.5, 0.5)?));
        inputs.push((format!("branch{i}.bias"), randn(rng, &[3])?));
    }
    let concat = fusion == AsppFusion::Concat;
    if concat {
        inputs.push(("project.kernel".into(), randn(rng, &[2, 9, 1, 1, 1])?));
        inputs.push(("project.bias".into(), randn(rng, &[2])?));
    }
    let w = randn(rng, &[1, if concat { 2 } else { 3 }, 5, 4, 5])?;
    Ok((
        inputs,
        Box::new(move |g, ids| {
            let branches: Vec<_> = (0..rates.len()).map(|i| (ids[1 + 2 * i], Some(ids[2 + 2 * i]))).collect();
            let proj = concat.then(|| (ids[ids.len() - 2], Some(ids[ids.len() - 1])));
            let y = lg::aspp(g, ids[0], &rates, &branches, fusion, proj)?;
            project(g, y, &w)
        }),
    ))
}

fn tiny_model(rng: &mut ChaCha8Rng, arch: &str, seed: u64) -> Result<(Inputs, Build)> {
    let opts = ArchOptions {
        input_channels: 2,
        num_classes: 3,
        channels: vec![3, 3, 4, 4],
        rates: vec![1, 2],
        ..ArchOptions::default()
    };
    let model = Model::build(ArchSpec::by_name(arch, &opts)?, seed)?;
    let x = randn(rng, &[2, 2, 5, 5, 5])?;
    let labels: Vec<LabelVolume> = (0..2)
        .map(|i| LabelVolume::new([5; 3], (0..125).map(|v| ((v * 7 + i) % 3) as u8).collect(), 3))
        .collect::<Result<_>>()?;
    // biases feeding batch norm have an identically zero gradient, so they
    // are held constant rather than probed
    let normalized: Vec<String> = model
        .arch()
        .layers
        .iter()
        .filter(|l| l.norm)
        .map(|l| format!("model.{}.", l.name))
        .collect();
    let cancelled = |name: &str| {
        normalized.iter().any(|p| name.starts_with(p.as_str()))
            && (name.ends_with(".conv.bias") || name.ends_with(".conv_shared.bias"))
    };
    let mut inputs = vec![("x".to_string(), x)];
    let mut names = Vec::new();
    let mut frozen = Vec::new();
    for p in model.params().iter() {
        let perturbed = p.tensor.add(&uniform(rng, p.tensor.shape(), -0.1, 0.1)?)?;
        if cancelled(&p.name) {
            frozen.push((p.name.clone(), perturbed));
        } else {
            names.push(p.name.clone());
            inputs.push((p.name.clone(), perturbed));
        }
    }
    Ok((
        inputs,
        Box::new(move |g, ids| {
            let mut bound: std::collections::BTreeMap<String, NodeId> =
                names.iter().cloned().zip(ids[1..].iter().copied()).collect();
            for (name, t) in &frozen {
                bound.insert(name.clone(), g.input(t.clone()));
            }
            let out = model.forward_with(g, ids[0], Mode::Train, &bound)?;
            loss::soft_dice_loss(g, out.probs, &labels, &DiceOptions::default())
        }),
    ))
}

/// Every registered gradient check.
pub fn cases() -> Vec<GradCase> {
    vec![
        case!("add", |rng| {
            let (a, b) = (randn(rng, &[2, 3, 4])?, randn(rng, &[2, 3, 4])?);
            let w = randn(rng, &[2, 3, 4])?;
            Ok((named(vec![("a", a), ("b", b)]), Box::new(move |g, i| {
                let y = g.add(i[0], i[1])?;
                project(g, y, &w)
            })))
        }),
        case!("sub", |rng| {
            let (a, b) = (randn(rng, &[2, 3, 4])?, randn(rng, &[2, 3, 4])?);
            let w = randn(rng, &[2, 3, 4])?;
            Ok((named(vec![("a", a), ("b", b)]), Box::new(move |g, i| {
                let y = g.sub(i[0], i[1])?;
                project(g, y, &w)
            })))
        }),
        case!("mul", |rng| {
            let (a, b) = (randn(rng, &[2, 3, 4])?, randn(rng, &[2, 3, 4])?);
            let w = randn(rng, &[2, 3, 4])?;
            Ok((named(vec![("a", a), ("b", b)]), Box::new(move |g, i| {
                let y = g.mul(i[0], i[1])?;
                project(g, y, &w)
            })))
        }),
        case!("mul_broadcast", |rng| {
            let (a, b) = (randn(rng, &[2, 3, 2, 2, 2])?, randn(rng, &[2, 1, 2, 2, 2])?);
            let w = randn(rng, &[2, 3, 2, 2, 2])?;
            Ok((named(vec![("a", a), ("b", b)]), Box::new(move |g, i| {
                let y = g.mul(i[0], i[1])?;
                project(g, y, &w)
            })))
        }),
        case!("scale", |rng| {
            let a = randn(rng, &[3, 4])?;
            let w = randn(rng, &[3, 4])?;
            Ok((named(vec![("a", a)]), Box::new(move |g, i| {
                let y = g.scale(i[0], -1.7);
                project(g, y, &w)
            })))
        }),
        case!("bias_add", |rng| {
            let (x, b) = (randn(rng, &[2, 3, 2, 3, 2])?, randn(rng, &[3])?);
            let w = randn(rng, &[2, 3, 2, 3, 2])?;
            Ok((named(vec![("x", x), ("bias", b)]), Box::new(move |g, i| {
                let y = g.bias_add(i[0], i[1])?;
                project(g, y, &w)
            })))
        }),
        case!("relu", |rng| {
            let x = randn(rng, &[2, 3, 4, 2])?;
            let w = randn(rng, &[2, 3, 4, 2])?;
            Ok((named(vec![("x", x)]), Box::new(move |g, i| {
                let y = g.relu(i[0]);
                project(g, y, &w)
            })))
        }),
        case!("softmax", |rng| {
            let x = uniform(rng, &[2, 4, 3, 2, 2], -3.0, 3.0)?;
            let w = randn(rng, &[2, 4, 3, 2, 2])?;
            Ok((named(vec![("x", x)]), Box::new(move |g, i| {
                let y = g.softmax(i[0], 1)?;
                project(g, y, &w)
            })))
        }),
        case!("select_channel", |rng| {
            let x = randn(rng, &[2, 4, 3, 2, 2])?;
            let w = randn(rng, &[2, 1, 3, 2, 2])?;
            Ok((named(vec![("x", x)]), Box::new(move |g, i| {
                let y = g.select_channel(i[0], 2)?;
                project(g, y, &w)
            })))
        }),
        case!("concat", |rng| {
            let (a, b) = (randn(rng, &[2, 2, 3, 2, 2])?, randn(rng, &[2, 3, 3, 2, 2])?);
            let w = randn(rng, &[2, 5, 3, 2, 2])?;
            Ok((named(vec![("a", a), ("b", b)]), Box::new(move |g, i| {
                let y = g.concat(&[i[0], i[1]])?;
                project(g, y, &w)
            })))
        }),
        case!("pad", |rng| {
            let x = randn(rng, &[1, 2, 3, 2, 3])?;
            let w = randn(rng, &[1, 4, 5, 3, 3])?;
            Ok((named(vec![("x", x)]), Box::new(move |g, i| {
                let y = g.pad(i[0], &[(0, 0), (1, 1), (2, 0), (0, 1), (0, 0)])?;
                project(g, y, &w)
            })))
        }),
        case!("crop", |rng| {
            let x = randn(rng, &[1, 2, 5, 4, 5])?;
            let w = randn(rng, &[1, 2, 3, 3, 1])?;
            Ok((named(vec![("x", x)]), Box::new(move |g, i| {
                let y = g.crop(i[0], &[(0, 0), (0, 0), (1, 1), (0, 1), (2, 2)])?;
                project(g, y, &w)
            })))
        }),
        case!("sum", |rng| {
            let x = randn(rng, &[3, 5])?;
            Ok((named(vec![("x", x)]), Box::new(|g, i| {
                let y = g.mul(i[0], i[0])?;
                Ok(g.sum(y))
            })))
        }),
        case!("mean", |rng| {
            let x = randn(rng, &[3, 5])?;
            Ok((named(vec![("x", x)]), Box::new(|g, i| {
                let y = g.mul(i[0], i[0])?;
                Ok(g.mean(y))
            })))
        }),
        case!("conv3d_r1", |rng| { conv_case(rng, 1) }),
        case!("conv3d_r2", |rng| { conv_case(rng, 2) }),
        case!("conv3d_r6", |rng| { conv_case(rng, 6) }),
        case!("conv3d_valid_stride2", |rng| {
            let spec = ConvSpec::new(2, 2).with_padding(crate::layers::Padding::Valid).with_stride([2, 1, 2]);
            let x = randn(rng, &[2, 2, 7, 5, 6])?;
            let k = randn(rng, &spec.kernel_shape())?;
            let b = randn(rng, &[2])?;
            let out = spec.output_extent([7, 5, 6])?;
            let w = randn(rng, &[2, 2, out[0], out[1], out[2]])?;
            Ok((named(vec![("x", x), ("kernel", k), ("bias", b)]), Box::new(move |g, i| {
                let y = lg::conv3d(g, i[0], &spec, i[1], Some(i[2]))?;
                project(g, y, &w)
            })))
        }),
        case!("attention_net", |rng| {
            let cfg = AutofocusConfig::new(vec![1, 2, 3], 4, 4)?;
            let x = randn(rng, &[1, 4, 4, 5, 4])?;
            let c1 = uniform(rng, &cfg.attention_conv1_spec().kernel_shape(), -0.4, 0.4)?;
            let c1b = randn(rng, &[cfg.attention_mid_channels()])?;
            let c2 = randn(rng, &cfg.attention_conv2_spec().kernel_shape())?;
            let c2b = randn(rng, &[3])?;
            let w = randn(rng, &[1, 3, 4, 5, 4])?;
            Ok((
                named(vec![("x", x), ("conv1.kernel", c1), ("conv1.bias", c1b), ("conv2.kernel", c2), ("conv2.bias", c2b)]),
                Box::new(move |g, i| {
                    let p = lg::AttentionNodes {
                        conv1_kernel: i[1],
                        conv1_bias: Some(i[2]),
                        conv2_kernel: i[3],
                        conv2_bias: Some(i[4]),
                    };
                    let y = lg::attention_net(g, i[0], &cfg, &p)?;
                    project(g, y, &w)
                }),
            ))
        }),
        case!("autofocus_k1", |rng| { autofocus_case(rng, vec![2]) }),
        case!("autofocus_k2", |rng| { autofocus_case(rng, vec![1, 2]) }),
        case!("autofocus_k4", |rng| { autofocus_case(rng, vec![1, 2, 3, 4]) }),
        case!("aspp_sum", |rng| { aspp_case(rng, AsppFusion::Sum) }),
        case!("aspp_concat", |rng| { aspp_case(rng, AsppFusion::Concat) }),
        case!("batchnorm", |rng| {
            let x = uniform(rng, &[2, 3, 3, 2, 3], -2.0, 2.0)?;
            let gamma = uniform(rng, &[3], 0.5, 1.5)?;
            let beta = randn(rng, &[3])?;
            let w = randn(rng, &[2, 3, 3, 2, 3])?;
            Ok((named(vec![("x", x), ("gamma", gamma), ("beta", beta)]), Box::new(move |g, i| {
                let (y, _) = g.batchnorm(i[0], i[1], i[2], None)?;
                project(g, y, &w)
            })))
        }),
        case!("residual_add", |rng| {
            let (out, inp) = (randn(rng, &[1, 4, 3, 3, 3])?, randn(rng, &[1, 3, 5, 5, 5])?);
            let w = randn(rng, &[1, 4, 3, 3, 3])?;
            Ok((named(vec![("block_out", out), ("block_in", inp)]), Box::new(move |g, i| {
                let y = lg::residual_add(g, i[0], i[1])?;
                project(g, y, &w)
            })))
        }),
        case!("soft_dice", |rng| {
            let logits = uniform(rng, &[2, 3, 3, 3, 2], -2.0, 2.0)?;
            let labels: Vec<LabelVolume> = (0..2)
                .map(|n| {
                    let d = (0..18).map(|v| ((v + n) % 3) as u8).collect();
                    LabelVolume::new([3, 3, 2], d, 3)
                })
                .collect::<Result<_>>()?;
            Ok((named(vec![("logits", logits)]), Box::new(move |g, i| {
                let p = g.softmax(i[0], 1)?;
                loss::soft_dice_loss(g, p, &labels, &DiceOptions::default())
            })))
        }),
        case!("model_basic", |rng| { tiny_model(rng, "basic", 1) }),
        case!("model_afn2", |rng| { tiny_model(rng, "afn2", 2) }),
    ]
}
