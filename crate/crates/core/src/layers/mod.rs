//! Network building blocks: dilated convolution, attention over scales,
//! the autofocus layer, ASPP, residual shortcuts and batch norm.
//!
//! The graph-level builders in [`graph`] are the single implementation; the
//! tensor-level functions here run them on a throwaway tape for inference and
//! tests. Tensor-level inputs may be `C×D×H×W` or carry a leading batch axis.

pub mod graph;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Graph};
use crate::conv::ConvGeometry;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use crate::autodiff::BN_EPS;

/// Momentum of the running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.9;

/// Default autofocus / ASPP dilation rates.
pub const DEFAULT_RATES: [usize; 4] = [2, 6, 10, 14];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub dilation: usize,
    pub stride: [usize; 3],
    pub padding: Padding,
    pub bias: bool,
}

impl ConvSpec {
    /// 3³ kernel, rate 1, stride 1, same padding, with bias.
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: [3; 3],
            dilation: 1,
            stride: [1; 3],
            padding: Padding::Same,
            bias: true,
        }
    }

    /// 1³ kernel.
    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self {
            kernel: [1; 3],
            ..Self::new(in_channels, out_channels)
        }
    }

    pub fn with_dilation(mut self, rate: usize) -> Self {
        self.dilation = rate;
        self
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn with_stride(mut self, stride: [usize; 3]) -> Self {
        self.stride = stride;
        self
    }

    pub fn kernel_shape(&self) -> [usize; 5] {
        let [kd, kh, kw] = self.kernel;
        [self.out_channels, self.in_channels, kd, kh, kw]
    }

    pub fn kernel_count(&self) -> usize {
        self.kernel_shape().iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("convolution channel counts must be at least 1"));
        }
        if self.dilation == 0 || self.kernel.contains(&0) || self.stride.contains(&0) {
            return Err(Error::invalid("kernel extents, dilation and stride must be at least 1"));
        }
        Ok(())
    }

    pub fn geometry(&self) -> Result<ConvGeometry> {
        self.validate()?;
        let mut geom = match self.padding {
            Padding::Same => ConvGeometry::same(self.kernel, self.dilation)?,
            Padding::Valid => ConvGeometry::valid(self.kernel, self.dilation),
        };
        geom.stride = self.stride;
        Ok(geom)
    }

    pub fn output_extent(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        self.geometry()?.output_extent(input)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AutofocusConfig {
    pub rates: Vec<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl AutofocusConfig {
    pub fn new(rates: Vec<usize>, in_channels: usize, out_channels: usize) -> Result<Self> {
        let cfg = Self {
            rates,
            in_channels,
            out_channels,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rates.is_empty() {
            return Err(Error::invalid("autofocus rate list is empty"));
        }
        if self.rates[0] == 0 || self.rates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!(
                "autofocus rates must be ≥ 1 and strictly increasing, got {:?}",
                self.rates
            )));
        }
        if self.in_channels < 2 {
            return Err(Error::invalid(format!(
                "autofocus attention needs at least 2 input channels, got {}",
                self.in_channels
            )));
        }
        if self.out_channels == 0 {
            return Err(Error::invalid("autofocus output channels must be at least 1"));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.rates.len()
    }

    /// Width of the first attention convolution: half the input channels.
    pub fn attention_mid_channels(&self) -> usize {
        self.in_channels / 2
    }

    /// Branch convolution at scale `k`; the bias is applied once after fusion.
    pub fn branch_spec(&self, k: usize) -> ConvSpec {
        ConvSpec::new(self.in_channels, self.out_channels)
            .with_dilation(self.rates[k])
            .with_bias(false)
    }

    pub fn attention_conv1_spec(&self) -> ConvSpec {
        ConvSpec::new(self.in_channels, self.attention_mid_channels())
    }

    pub fn attention_conv2_spec(&self) -> ConvSpec {
        ConvSpec::pointwise(self.attention_mid_channels(), self.k())
    }

    /// Weights of the attention head (conv1 + conv2 kernels).
    pub fn attention_kernel_count(&self) -> usize {
        self.attention_conv1_spec().kernel_count() + self.attention_conv2_spec().kernel_count()
    }

    pub fn attention_bias_count(&self) -> usize {
        self.attention_mid_channels() + self.k()
    }
}

/// Per-voxel attention over scales, `K×D×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    maps: Tensor,
}

/// Tolerance on the per-voxel sum of attention weights.
pub const ATTENTION_SUM_TOL: f64 = 1e-6;

impl AttentionMaps {
    /// Wraps a `K×D×H×W` tensor, checking that every voxel's weights lie in
    /// `[0, 1]` and sum to one.
    pub fn new(maps: Tensor) -> Result<Self> {
        if maps.rank() != 4 {
            return Err(Error::shape(format!(
                "attention maps must be K×D×H×W, got {:?}",
                maps.shape()
            )));
        }
        let out = Self { maps };
        let err = out.max_normalization_error();
        if err > ATTENTION_SUM_TOL || out.maps.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid(format!(
                "attention weights are not normalized (max error {err:e})"
            )));
        }
        Ok(out)
    }

    /// One-hot attention selecting scale `k` everywhere.
    pub fn one_hot(k_total: usize, k: usize, spatial: [usize; 3]) -> Result<Self> {
        if k >= k_total {
            return Err(Error::invalid(format!("scale {k} out of range for K={k_total}")));
        }
        let [d, h, w] = spatial;
        let mut t = Tensor::zeros(&[k_total, d, h, w])?;
        let vol = d * h * w;
        t.data_mut()[k * vol..(k + 1) * vol].fill(1.0);
        Self::new(t)
    }

    pub fn k(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn spatial(&self) -> [usize; 3] {
        let s = self.maps.shape();
        [s[1], s[2], s[3]]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.maps
    }

    pub fn into_tensor(self) -> Tensor {
        self.maps
    }

    /// Attention map of scale `k` as `D×H×W`.
    pub fn map(&self, k: usize) -> Result<Tensor> {
        let [d, h, w] = self.spatial();
        self.maps.slice_block(&[k, 0, 0, 0], &[1, d, h, w])?.reshape(&[d, h, w])
    }

    /// Largest deviation of a voxel's weight sum from one.
    pub fn max_normalization_error(&self) -> f64 {
        let k = self.k();
        let vol: usize = self.maps.shape()[1..].iter().product();
        let data = self.maps.data();
        (0..vol)
            .map(|v| ((0..k).map(|j| data[j * vol + v]).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Weights of the attention head.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub conv1_kernel: Tensor,
    pub conv1_bias: Option<Tensor>,
    pub conv2_kernel: Tensor,
    pub conv2_bias: Option<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AsppFusion {
    Sum,
    Concat,
}

/// One independently weighted ASPP branch.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights {
    pub kernel: Tensor,
    pub bias: Option<Tensor>,
}

pub(crate) fn batched(x: &Tensor) -> Result<(Tensor, bool)> {
    match x.rank() {
        4 => {
            let mut s = vec![1];
            s.extend_from_slice(x.shape());
            Ok((x.clone().reshape(&s)?, true))
        }
        5 => Ok((x.clone(), false)),
        _ => Err(Error::shape(format!(
            "expected C×D×H×W or N×C×D×H×W, got {:?}",
            x.shape()
        ))),
    }
}

fn unbatched(t: Tensor, squeeze: bool) -> Result<Tensor> {
    if squeeze {
        let s = t.shape()[1..].to_vec();
        t.reshape(&s)
    } else {
        Ok(t)
    }
}

pub(crate) fn attention_from_node(t: &Tensor) -> Result<AttentionMaps> {
    let s = t.shape();
    if s[0] != 1 {
        return Err(Error::shape("attention maps are returned for a single volume"));
    }
    AttentionMaps::new(t.clone().reshape(&s[1..])?)
}

pub fn conv3d(input: &Tensor, spec: &ConvSpec, kernel: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (x, squeeze) = batched(input)?;
    let mut g = Graph::new();
    let xn = g.input(x);
    let kn = g.input(kernel.clone());
    let bn = bias.map(|b| g.input(b.clone()));
    let out = graph::conv3d(&mut g, xn, spec, kn, bn)?;
    unbatched(g.value(out).clone(), squeeze)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.relu()
}

pub fn channel_softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    crate::autodiff::softmax(x, axis)
}

pub fn attention_net(f_prev: &Tensor, cfg: &AutofocusConfig, params: &AttentionParams) -> Result<AttentionMaps> {
    let (x, _) = batched(f_prev)?;
    let mut g = Graph::new();
    let xn = g.input(x);
    let nodes = graph::AttentionNodes::inputs(&mut g, params);
    let lambda = graph::attention_net(&mut g, xn, cfg, &nodes)?;
    attention_from_node(g.value(lambda))
}

/// Autofocus layer forward: fused output and the attention maps used.
pub fn autofocus_forward(
    f_prev: &Tensor,
    cfg: &AutofocusConfig,
    shared_kernel: &Tensor,
    bias: Option<&Tensor>,
    attention: &AttentionParams,
) -> Result<(Tensor, AttentionMaps)> {
    let (x, squeeze) = batched(f_prev)?;
    let mut g = Graph::new();
    let xn = g.input(x);
    let kn = g.input(shared_kernel.clone());
    let bn = bias.map(|b| g.input(b.clone()));
    let nodes = graph::AttentionNodes::inputs(&mut g, attention);
    let (out, lambda) = graph::autofocus(&mut g, xn, cfg, kn, bn, &nodes)?;
    let maps = attention_from_node(g.value(lambda))?;
    Ok((unbatched(g.value(out).clone(), squeeze)?, maps))
}

/// Autofocus fusion with caller-supplied attention maps in place of the
/// attention head.
pub fn autofocus_with_maps(
    f_prev: &Tensor,
    cfg: &AutofocusConfig,
    shared_kernel: &Tensor,
    bias: Option<&Tensor>,
    maps: &AttentionMaps,
) -> Result<Tensor> {
    let (x, squeeze) = batched(f_prev)?;
    let mut g = Graph::new();
    let xn = g.input(x);
    let kn = g.input(shared_kernel.clone());
    let bn = bias.map(|b| g.input(b.clone()));
    let mut ls = vec![1];
    ls.extend_from_slice(maps.tensor().shape());
    let lambda = g.input(maps.tensor().clone().reshape(&ls)?);
    let out = graph::fuse_scales(&mut g, xn, cfg, kn, bn, lambda)?;
    unbatched(g.value(out).clone(), squeeze)
}

pub fn aspp_forward(
    f_prev: &Tensor,
    rates: &[usize],
    branches: &[ConvWeights],
    fusion: AsppFusion,
    projection: Option<&ConvWeights>,
) -> Result<Tensor> {
    let (x, squeeze) = batched(f_prev)?;
    let mut g = Graph::new();
    let xn = g.input(x);
    let mut nodes = Vec::with_capacity(branches.len());
    for b in branches {
        let k = g.input(b.kernel.clone());
        let bias = b.bias.as_ref().map(|t| g.input(t.clone()));
        nodes.push((k, bias));
    }
    let proj = projection.map(|p| {
        let k = g.input(p.kernel.clone());
        let bias = p.bias.as_ref().map(|t| g.input(t.clone()));
        (k, bias)
    });
    let out = graph::aspp(&mut g, xn, rates, &nodes, fusion, proj)?;
    unbatched(g.value(out).clone(), squeeze)
}

pub fn residual_add(block_out: &Tensor, block_in: &Tensor) -> Result<Tensor> {
    let (o, squeeze) = batched(block_out)?;
    let (i, _) = batched(block_in)?;
    let mut g = Graph::new();
    let on = g.input(o);
    let inn = g.input(i);
    let out = graph::residual_add(&mut g, on, inn)?;
    unbatched(g.value(out).clone(), squeeze)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Folds a batch's statistics into the running averages. The first update
/// adopts the batch statistics directly.
pub fn update_running_stats(running: &mut Option<BatchStats>, batch: &BatchStats) {
    match running {
        None => *running = Some(batch.clone()),
        Some(r) => {
            for (rm, bm) in r.mean.iter_mut().zip(&batch.mean) {
                *rm = BN_MOMENTUM * *rm + (1.0 - BN_MOMENTUM) * bm;
            }
            for (rv, bv) in r.var.iter_mut().zip(&batch.var) {
                *rv = BN_MOMENTUM * *rv + (1.0 - BN_MOMENTUM) * bv;
            }
        }
    }
}

/// Per-channel batch normalization with learnable scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running: Option<BatchStats>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: Tensor::fill(&[channels], 1.0)?,
            beta: Tensor::zeros(&[channels])?,
            running: None,
        })
    }

    pub fn forward(&mut self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        let (xb, squeeze) = batched(x)?;
        let running = match mode {
            BnMode::Train => None,
            BnMode::Eval => Some(self.running.clone().ok_or_else(|| {
                Error::invalid("batch norm evaluated before any training step")
            })?),
        };
        let mut g = Graph::new();
        let xn = g.input(xb);
        let gn = g.input(self.gamma.clone());
        let bn = g.input(self.beta.clone());
        let (out, stats) = g.batchnorm(xn, gn, bn, running.as_ref())?;
        if let Some(stats) = stats {
            update_running_stats(&mut self.running, &stats);
        }
        unbatched(g.value(out).clone(), squeeze)
    }
}
