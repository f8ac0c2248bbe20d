//! Architecture descriptions for Basic, AFN-n and the ASPP baselines, model
//! construction and forward pass, receptive-field and parameter accounting,
//! and the `AFNW` weight file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{BatchStats, Graph, NodeId, ParamStore};
use crate::codec::{self, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::layers::{self, graph, update_running_stats, AsppFusion, AutofocusConfig, ConvSpec, Padding, DEFAULT_RATES};
use crate::tensor::Tensor;

/// Hidden-layer channel plan of the full-size models.
pub const DEFAULT_CHANNELS: [usize; 8] = [30, 30, 40, 40, 40, 40, 50, 50];

const WEIGHTS_MAGIC: &[u8; 4] = b"AFNW";
const WEIGHTS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerKind {
    Conv {
        conv: ConvSpec,
    },
    Autofocus {
        config: AutofocusConfig,
    },
    Aspp {
        rates: Vec<usize>,
        in_channels: usize,
        out_channels: usize,
        fusion: AsppFusion,
    },
    Classifier {
        conv: ConvSpec,
    },
}

impl LayerKind {
    fn channels(&self) -> (usize, usize) {
        match self {
            LayerKind::Conv { conv } | LayerKind::Classifier { conv } => (conv.in_channels, conv.out_channels),
            LayerKind::Autofocus { config } => (config.in_channels, config.out_channels),
            LayerKind::Aspp {
                in_channels,
                out_channels,
                ..
            } => (*in_channels, *out_channels),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::Autofocus { .. } => "autofocus",
            LayerKind::Aspp { .. } => "aspp",
            LayerKind::Classifier { .. } => "classifier",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    /// Consecutive layers sharing a group id form one residual block; the
    /// block input is added to the last member's output before its ReLU.
    pub residual_group: Option<usize>,
    pub norm: bool,
}

/// Knobs shared by every named architecture.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchOptions {
    pub input_channels: usize,
    pub num_classes: usize,
    pub channels: Vec<usize>,
    pub rates: Vec<usize>,
    /// Padding of the plain hidden convolutions. Autofocus and ASPP branches
    /// always use same padding.
    pub padding: Padding,
    pub norm: bool,
    pub residual: bool,
}

impl Default for ArchOptions {
    fn default() -> Self {
        Self {
            input_channels: 4,
            num_classes: 5,
            channels: DEFAULT_CHANNELS.to_vec(),
            rates: DEFAULT_RATES.to_vec(),
            padding: Padding::Same,
            norm: true,
            residual: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub input_channels: usize,
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl ArchSpec {
    fn hidden(opts: &ArchOptions, autofocus_from: usize) -> Result<Vec<LayerSpec>> {
        if opts.channels.is_empty() {
            return Err(Error::invalid("channel plan is empty"));
        }
        let h = opts.channels.len();
        let mut layers = Vec::with_capacity(h + 2);
        let mut prev = opts.input_channels;
        for (idx, &out) in opts.channels.iter().enumerate() {
            let i = idx + 1;
            let kind = if i >= autofocus_from {
                LayerKind::Autofocus {
                    config: AutofocusConfig::new(opts.rates.clone(), prev, out)?,
                }
            } else {
                let rate = if i <= 2 { 1 } else { 2 };
                LayerKind::Conv {
                    conv: ConvSpec::new(prev, out).with_dilation(rate).with_padding(opts.padding),
                }
            };
            let group = (i >= 3 && opts.residual)
                .then(|| (i - 3) / 2)
                .filter(|g| 4 + 2 * g <= h);
            layers.push(LayerSpec {
                name: format!("layer{i}"),
                kind,
                residual_group: group,
                norm: opts.norm,
            });
            prev = out;
        }
        Ok(layers)
    }

    fn finish(name: String, opts: &ArchOptions, mut layers: Vec<LayerSpec>) -> Result<Self> {
        let last = layers.last().map(|l| l.kind.channels().1).unwrap_or(opts.input_channels);
        layers.push(LayerSpec {
            name: "classifier".into(),
            kind: LayerKind::Classifier {
                conv: ConvSpec::pointwise(last, opts.num_classes),
            },
            residual_group: None,
            norm: false,
        });
        let spec = Self {
            name,
            input_channels: opts.input_channels,
            num_classes: opts.num_classes,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Plain dilated network: layers 1–2 at rate 1, the rest at rate 2.
    pub fn basic(opts: &ArchOptions) -> Result<Self> {
        let layers = Self::hidden(opts, usize::MAX)?;
        Self::finish("basic".into(), opts, layers)
    }

    /// Basic with its last `n` hidden layers converted to autofocus layers.
    pub fn afn(n: usize, opts: &ArchOptions) -> Result<Self> {
        let h = opts.channels.len();
        if n == 0 || n > h {
            return Err(Error::invalid(format!("AFN-{n} needs 1 ≤ n ≤ {h} hidden layers")));
        }
        let layers = Self::hidden(opts, h - n + 1)?;
        Self::finish(format!("afn{n}"), opts, layers)
    }

    /// Basic followed by an ASPP module over the last hidden layer.
    pub fn aspp(fusion: AsppFusion, opts: &ArchOptions) -> Result<Self> {
        let mut layers = Self::hidden(opts, usize::MAX)?;
        let c = *opts.channels.last().expect("non-empty plan");
        layers.push(LayerSpec {
            name: "aspp".into(),
            kind: LayerKind::Aspp {
                rates: opts.rates.clone(),
                in_channels: c,
                out_channels: c,
                fusion,
            },
            residual_group: None,
            norm: opts.norm,
        });
        let name = match fusion {
            AsppFusion::Sum => "aspp-s",
            AsppFusion::Concat => "aspp-c",
        };
        Self::finish(name.into(), opts, layers)
    }

    /// `basic`, `afn1`…`afnN`, `aspp-c` or `aspp-s`.
    pub fn by_name(name: &str, opts: &ArchOptions) -> Result<Self> {
        match name {
            "basic" => Self::basic(opts),
            "aspp-c" => Self::aspp(AsppFusion::Concat, opts),
            "aspp-s" => Self::aspp(AsppFusion::Sum, opts),
            _ => match name.strip_prefix("afn").and_then(|n| n.parse().ok()) {
                Some(n) => Self::afn(n, opts),
                None => Err(Error::invalid(format!(
                    "unknown architecture `{name}` (expected basic, afn1..afn{}, aspp-c, aspp-s)",
                    opts.channels.len()
                ))),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let classifiers = self
            .layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Classifier { .. }))
            .count();
        match self.layers.last() {
            Some(LayerSpec {
                kind: LayerKind::Classifier { conv },
                norm,
                residual_group,
                ..
            }) if classifiers == 1 => {
                if conv.kernel != [1; 3] {
                    return Err(Error::invalid("classifier must use a 1³ kernel"));
                }
                if conv.out_channels != self.num_classes {
                    return Err(Error::invalid(format!(
                        "classifier emits {} channels for {} classes",
                        conv.out_channels, self.num_classes
                    )));
                }
                if *norm || residual_group.is_some() {
                    return Err(Error::invalid("classifier takes no normalization or residual"));
                }
            }
            _ => return Err(Error::invalid("architecture needs exactly one classifier, placed last")),
        }
        let mut prev = self.input_channels;
        let mut seen_groups = Vec::new();
        let mut names = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if names.contains(&&layer.name) {
                return Err(Error::invalid(format!("duplicate layer name `{}`", layer.name)));
            }
            names.push(&layer.name);
            let (cin, cout) = layer.kind.channels();
            if cin != prev {
                return Err(Error::invalid(format!(
                    "layer `{}` expects {cin} input channels but receives {prev}",
                    layer.name
                )));
            }
            match &layer.kind {
                LayerKind::Conv { conv } | LayerKind::Classifier { conv } => conv.validate()?,
                LayerKind::Autofocus { config } => config.validate()?,
                LayerKind::Aspp { rates, .. } => {
                    if rates.is_empty() || rates.contains(&0) {
                        return Err(Error::invalid(format!("layer `{}` has an invalid rate list", layer.name)));
                    }
                }
            }
            if let Some(gid) = layer.residual_group {
                let prev_group = i.checked_sub(1).and_then(|p| self.layers[p].residual_group);
                if prev_group != Some(gid) {
                    if seen_groups.contains(&gid) {
                        return Err(Error::invalid(format!("residual group {gid} is not contiguous")));
                    }
                    seen_groups.push(gid);
                }
            }
            prev = cout;
        }
        Ok(())
    }

    /// Number of hidden layers (everything except the classifier).
    pub fn hidden_count(&self) -> usize {
        self.layers.len() - 1
    }

    /// SHA-256 over the compact JSON encoding.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("arch spec serializes");
        Sha256::digest(&json).into()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("arch spec serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s).map_err(|e| Error::Format(format!("architecture JSON: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Every parameter as (name, shape, initializer) in registration order.
    fn param_layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        let mut out = Vec::new();
        let conv = |out: &mut Vec<_>, prefix: String, spec: &ConvSpec, init: Init| {
            let fan_in = spec.in_channels * spec.kernel.iter().product::<usize>();
            let init = match init {
                Init::HeUniform { .. } => Init::HeUniform { fan_in },
                other => other,
            };
            out.push((format!("{prefix}.kernel"), spec.kernel_shape().to_vec(), init));
            if spec.bias {
                out.push((format!("{prefix}.bias"), vec![spec.out_channels], Init::Zeros));
            }
        };
        let he = Init::HeUniform { fan_in: 0 };
        for layer in &self.layers {
            let p = format!("model.{}", layer.name);
            match &layer.kind {
                LayerKind::Conv { conv: spec } | LayerKind::Classifier { conv: spec } => {
                    conv(&mut out, format!("{p}.conv"), spec, he)
                }
                LayerKind::Autofocus { config } => {
                    let shared = ConvSpec::new(config.in_channels, config.out_channels);
                    conv(&mut out, format!("{p}.af.conv_shared"), &shared, he);
                    conv(&mut out, format!("{p}.af.attention.conv1"), &config.attention_conv1_spec(), he);
                    conv(&mut out, format!("{p}.af.attention.conv2"), &config.attention_conv2_spec(), Init::Zeros);
                }
                LayerKind::Aspp {
                    rates,
                    in_channels,
                    out_channels,
                    fusion,
                } => {
                    for (k, &r) in rates.iter().enumerate() {
                        let spec = ConvSpec::new(*in_channels, *out_channels).with_dilation(r);
                        conv(&mut out, format!("{p}.aspp.branch{k}"), &spec, he);
                    }
                    if *fusion == AsppFusion::Concat {
                        let spec = ConvSpec::pointwise(rates.len() * out_channels, *out_channels);
                        conv(&mut out, format!("{p}.aspp.project"), &spec, he);
                    }
                }
            }
            if layer.norm {
                let c = layer.kind.channels().1;
                out.push((format!("{p}.bn.gamma"), vec![c], Init::Ones));
                out.push((format!("{p}.bn.beta"), vec![c], Init::Zeros));
            }
        }
        out
    }

    /// Trainable parameter counts per name; shared kernels appear once.
    pub fn param_count(&self, mode: CountMode) -> ParamTable {
        let entries = self
            .param_layout()
            .into_iter()
            .filter(|(name, ..)| mode == CountMode::All || name.ends_with(".kernel"))
            .map(|(name, shape, _)| (name, shape.iter().product()))
            .collect();
        ParamTable { entries }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    HeUniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountMode {
    /// Convolution kernels only.
    Kernels,
    /// Kernels, biases and normalization scale/shift.
    All,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamTable {
    pub entries: Vec<(String, usize)>,
}

impl ParamTable {
    pub fn total(&self) -> usize {
        self.entries.iter().map(|(_, n)| n).sum()
    }

    /// Sum over parameters whose name starts with `prefix`.
    pub fn subtotal(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, c)| c)
            .sum()
    }
}

/// Receptive field after one layer. Autofocus and ASPP layers widen the
/// smallest and largest scale chains separately.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ReceptiveFieldState {
    pub layer: String,
    pub phi_min: [usize; 3],
    pub phi_max: [usize; 3],
    pub eta: [usize; 3],
}

/// `φ_l = φ_{l−1} + r_l(θ_l − 1)η_l` per axis, starting from `φ = η = 1`.
/// The first row describes the input.
pub fn receptive_field(arch: &ArchSpec) -> Vec<ReceptiveFieldState> {
    let mut state = ReceptiveFieldState {
        layer: "input".into(),
        phi_min: [1; 3],
        phi_max: [1; 3],
        eta: [1; 3],
    };
    let mut rows = vec![state.clone()];
    for layer in &arch.layers {
        let (kernel, stride, r_min, r_max) = match &layer.kind {
            LayerKind::Conv { conv } | LayerKind::Classifier { conv } => {
                (conv.kernel, conv.stride, conv.dilation, conv.dilation)
            }
            LayerKind::Autofocus { config } => (
                [3; 3],
                [1; 3],
                *config.rates.first().expect("validated"),
                *config.rates.last().expect("validated"),
            ),
            LayerKind::Aspp { rates, .. } => (
                [3; 3],
                [1; 3],
                *rates.iter().min().expect("validated"),
                *rates.iter().max().expect("validated"),
            ),
        };
        for ax in 0..3 {
            state.phi_min[ax] += r_min * (kernel[ax] - 1) * state.eta[ax];
            state.phi_max[ax] += r_max * (kernel[ax] - 1) * state.eta[ax];
            state.eta[ax] *= stride[ax];
        }
        state.layer = layer.name.clone();
        rows.push(state.clone());
    }
    rows
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch-norm layers use and report batch statistics.
    Train,
    /// Batch-norm layers use running statistics.
    Eval,
}

/// Nodes produced by [`Model::forward`].
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: NodeId,
    pub probs: NodeId,
    /// Attention node (`N×K×D×H×W`) of each autofocus layer, by layer name.
    pub attention: Vec<(String, NodeId)>,
    /// Batch statistics of each normalization layer in train mode.
    pub batch_stats: Vec<(String, BatchStats)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    arch: ArchSpec,
    params: ParamStore,
    running: BTreeMap<String, BatchStats>,
}

impl Model {
    /// Builds with He-uniform kernels, zero biases, unit BN scale and a
    /// zero attention output conv so initial attention is uniform.
    pub fn build(arch: ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, init) in arch.param_layout() {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::HeUniform { fan_in } => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
            };
            params.insert(name, Tensor::from_values(&shape, data)?, true)?;
        }
        Ok(Self {
            arch,
            params,
            running: BTreeMap::new(),
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn running_stats(&self) -> &BTreeMap<String, BatchStats> {
        &self.running
    }

    pub fn param_count(&self, mode: CountMode) -> ParamTable {
        self.arch.param_count(mode)
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn update_running(&mut self, stats: &[(String, BatchStats)]) {
        for (name, batch) in stats {
            let mut slot = self.running.remove(name);
            update_running_stats(&mut slot, batch);
            self.running.insert(name.clone(), slot.expect("just updated"));
        }
    }

    fn bind(&self, g: &mut Graph) -> Result<BTreeMap<String, NodeId>> {
        let mut ids = BTreeMap::new();
        for p in self.params.iter() {
            ids.insert(p.name.clone(), g.param(&p.name, p.tensor.clone())?);
        }
        Ok(ids)
    }

    /// Runs the network on an `N×C×D×H×W` node, registering every parameter
    /// on `g` under its model name.
    pub fn forward(&self, g: &mut Graph, x: NodeId, mode: Mode) -> Result<ForwardOutput> {
        let ids = self.bind(g)?;
        self.forward_with(g, x, mode, &ids)
    }

    /// [`Model::forward`] with caller-supplied parameter nodes, keyed by
    /// parameter name. Values in the store are ignored.
    pub fn forward_with(
        &self,
        g: &mut Graph,
        x: NodeId,
        mode: Mode,
        ids: &BTreeMap<String, NodeId>,
    ) -> Result<ForwardOutput> {
        let xs = g.shape(x);
        if xs.len() != 5 || xs[1] != self.arch.input_channels {
            return Err(Error::shape(format!(
                "model expects N×{}×D×H×W input, got {xs:?}",
                self.arch.input_channels
            )));
        }
        let p = |name: String| -> Result<NodeId> {
            ids.get(&name)
                .copied()
                .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
        };
        let opt = |name: String| ids.get(&name).copied();

        let mut attention = Vec::new();
        let mut batch_stats = Vec::new();
        let mut h = x;
        let mut block_input: Option<(usize, NodeId)> = None;
        let layers = &self.arch.layers;
        for (i, layer) in layers.iter().enumerate() {
            let pre = format!("model.{}", layer.name);
            if let Some(gid) = layer.residual_group {
                if block_input.map(|(g, _)| g) != Some(gid) {
                    block_input = Some((gid, h));
                }
            }
            let mut y = match &layer.kind {
                LayerKind::Conv { conv } | LayerKind::Classifier { conv } => graph::conv3d(
                    g,
                    h,
                    conv,
                    p(format!("{pre}.conv.kernel"))?,
                    opt(format!("{pre}.conv.bias")),
                )?,
                LayerKind::Autofocus { config } => {
                    let att = graph::AttentionNodes {
                        conv1_kernel: p(format!("{pre}.af.attention.conv1.kernel"))?,
                        conv1_bias: opt(format!("{pre}.af.attention.conv1.bias")),
                        conv2_kernel: p(format!("{pre}.af.attention.conv2.kernel"))?,
                        conv2_bias: opt(format!("{pre}.af.attention.conv2.bias")),
                    };
                    let (out, lambda) = graph::autofocus(
                        g,
                        h,
                        config,
                        p(format!("{pre}.af.conv_shared.kernel"))?,
                        opt(format!("{pre}.af.conv_shared.bias")),
                        &att,
                    )?;
                    attention.push((layer.name.clone(), lambda));
                    out
                }
                LayerKind::Aspp { rates, fusion, .. } => {
                    let mut branches = Vec::with_capacity(rates.len());
                    for k in 0..rates.len() {
                        branches.push((
                            p(format!("{pre}.aspp.branch{k}.kernel"))?,
                            opt(format!("{pre}.aspp.branch{k}.bias")),
                        ));
                    }
                    let proj = match fusion {
                        AsppFusion::Concat => Some((
                            p(format!("{pre}.aspp.project.kernel"))?,
                            opt(format!("{pre}.aspp.project.bias")),
                        )),
                        AsppFusion::Sum => None,
                    };
                    graph::aspp(g, h, rates, &branches, *fusion, proj)?
                }
            };
            if layer.norm {
                let bn = format!("{pre}.bn");
                let running = match mode {
                    Mode::Train => None,
                    Mode::Eval => Some(self.running.get(&bn).ok_or_else(|| {
                        Error::invalid(format!("`{bn}` evaluated before any training step"))
                    })?),
                };
                let (out, stats) = g.batchnorm(y, p(format!("{bn}.gamma"))?, p(format!("{bn}.beta"))?, running)?;
                if let Some(s) = stats {
                    batch_stats.push((bn, s));
                }
                y = out;
            }
            let closes_block = layer.residual_group.is_some()
                && layers.get(i + 1).and_then(|n| n.residual_group) != layer.residual_group;
            if closes_block {
                let (_, shortcut) = block_input.take().expect("block opened");
                y = graph::residual_add(g, y, shortcut)?;
            }
            if matches!(layer.kind, LayerKind::Classifier { .. }) {
                let probs = g.softmax(y, 1)?;
                return Ok(ForwardOutput {
                    logits: y,
                    probs,
                    attention,
                    batch_stats,
                });
            }
            h = g.relu(y);
        }
        unreachable!("validated architectures end with a classifier")
    }

    /// Eval-mode logits for an `N×C×D×H×W` tensor.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xn = g.input(x.clone());
        let out = self.forward(&mut g, xn, Mode::Eval)?;
        Ok(g.value(out.logits).clone())
    }

    /// Eval-mode attention maps of every autofocus layer for one volume.
    pub fn attention_maps(&self, x: &Tensor) -> Result<Vec<(String, layers::AttentionMaps)>> {
        let (xb, _) = layers::batched(x)?;
        if xb.shape()[0] != 1 {
            return Err(Error::shape("attention maps are computed for a single volume"));
        }
        let mut g = Graph::new();
        let xn = g.input(xb);
        let out = self.forward(&mut g, xn, Mode::Eval)?;
        out.attention
            .into_iter()
            .map(|(name, id)| Ok((name, layers::attention_from_node(g.value(id))?)))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::new();
        w.bytes(WEIGHTS_MAGIC);
        w.u32(WEIGHTS_VERSION);
        w.bytes(&self.arch.hash());
        let count = self.params.len() + 2 * self.running.len();
        w.u64(count as u64);
        for p in self.params.iter() {
            w.tensor_record(&p.name, &p.tensor)?;
        }
        for (name, stats) in &self.running {
            let c = stats.mean.len();
            w.tensor_record(&format!("{name}.running_mean"), &Tensor::from_values(&[c], stats.mean.clone())?)?;
            w.tensor_record(&format!("{name}.running_var"), &Tensor::from_values(&[c], stats.var.clone())?)?;
        }
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8], arch: &ArchSpec) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(WEIGHTS_MAGIC)?;
        r.expect_version(WEIGHTS_VERSION)?;
        if r.take(32, "architecture hash")? != arch.hash() {
            return Err(Error::ArchMismatch);
        }
        let count = r.u64("record count")?;
        let mut model = Self::build(arch.clone(), 0)?;
        let mut loaded = vec![false; model.params.len()];
        let mut means = BTreeMap::new();
        let mut vars = BTreeMap::new();
        for _ in 0..count {
            let (name, t) = r.tensor_record()?;
            if let Some(bn) = name.strip_suffix(".running_mean") {
                means.insert(bn.to_string(), t.into_data());
            } else if let Some(bn) = name.strip_suffix(".running_var") {
                vars.insert(bn.to_string(), t.into_data());
            } else {
                let idx = model
                    .params
                    .iter()
                    .position(|p| p.name == name)
                    .ok_or_else(|| Error::Format(format!("unknown parameter `{name}`")))?;
                let slot = model.params.iter_mut().nth(idx).expect("index from position");
                if slot.tensor.shape() != t.shape() {
                    return Err(Error::Format(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        t.shape(),
                        slot.tensor.shape()
                    )));
                }
                slot.tensor = t;
                loaded[idx] = true;
            }
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes after weights", r.remaining())));
        }
        if let Some(i) = loaded.iter().position(|l| !l) {
            let name = &model.params.iter().nth(i).expect("in range").name;
            return Err(Error::Format(format!("missing parameter `{name}`")));
        }
        for (bn, mean) in means {
            let var = vars
                .remove(&bn)
                .ok_or_else(|| Error::Format(format!("`{bn}` has a running mean but no variance")))?;
            model.running.insert(bn, BatchStats { mean, var });
        }
        if let Some(bn) = vars.keys().next() {
            return Err(Error::Format(format!("`{bn}` has a running variance but no mean")));
        }
        Ok(model)
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_bytes()?)
    }

    pub fn load_weights(path: &Path, arch: &ArchSpec) -> Result<Self> {
        Self::from_bytes(&codec::read_file(path)?, arch)
    }

    /// Writes the weights plus an architecture sidecar next to them.
    pub fn save_with_arch(&self, path: &Path) -> Result<()> {
        self.save_weights(path)?;
        codec::write_file(&arch_sidecar(path), self.arch.to_json().as_bytes())
    }

    /// Loads weights whose architecture is described by the sidecar file.
    pub fn load_with_arch(path: &Path) -> Result<Self> {
        let side = arch_sidecar(path);
        let json = String::from_utf8(codec::read_file(&side)?)
            .map_err(|_| Error::Format(format!("{} is not UTF-8", side.display())))?;
        Self::load_weights(path, &ArchSpec::from_json(&json)?)
    }
}

/// `<weights>.arch.json`.
pub fn arch_sidecar(weights: &Path) -> PathBuf {
    let mut s = weights.as_os_str().to_owned();
    s.push(".arch.json");
    PathBuf::from(s)
}

/// Renders a parameter table as `name,count` CSV with a total row.
pub fn param_table_csv(table: &ParamTable) -> String {
    let mut s = String::from("name,count\n");
    for (name, n) in &table.entries {
        let _ = writeln!(s, "{name},{n}");
    }
    let _ = writeln!(s, "total,{}", table.total());
    s
}
