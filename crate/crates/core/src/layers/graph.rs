//! Layer builders on an autodiff [`Graph`]. All activations are
//! `N×C×D×H×W` nodes.

use super::{AsppFusion, AttentionParams, AutofocusConfig, ConvSpec};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};

/// Parameter nodes of an attention head.
#[derive(Clone, Copy, Debug)]
pub struct AttentionNodes {
    pub conv1_kernel: NodeId,
    pub conv1_bias: Option<NodeId>,
    pub conv2_kernel: NodeId,
    pub conv2_bias: Option<NodeId>,
}

impl AttentionNodes {
    /// Registers the weights as constant inputs.
    pub fn inputs(g: &mut Graph, p: &AttentionParams) -> Self {
        Self {
            conv1_kernel: g.input(p.conv1_kernel.clone()),
            conv1_bias: p.conv1_bias.as_ref().map(|b| g.input(b.clone())),
            conv2_kernel: g.input(p.conv2_kernel.clone()),
            conv2_bias: p.conv2_bias.as_ref().map(|b| g.input(b.clone())),
        }
    }
}

pub fn conv3d(g: &mut Graph, x: NodeId, spec: &ConvSpec, kernel: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
    if g.shape(kernel) != spec.kernel_shape() {
        return Err(Error::shape(format!(
            "kernel shape {:?} does not match spec {:?}",
            g.shape(kernel),
            spec.kernel_shape()
        )));
    }
    if bias.is_some() != spec.bias {
        return Err(Error::invalid("bias presence does not match the conv spec"));
    }
    let xs = g.shape(x);
    if xs.len() != 5 || xs[1] != spec.in_channels {
        return Err(Error::shape(format!(
            "conv expects N×{}×D×H×W input, got {xs:?}",
            spec.in_channels
        )));
    }
    g.conv3d(x, kernel, bias, spec.geometry()?)
}

/// `softmax(conv2(relu(conv1(x))))` over the K scale channels.
pub fn attention_net(g: &mut Graph, x: NodeId, cfg: &AutofocusConfig, p: &AttentionNodes) -> Result<NodeId> {
    cfg.validate()?;
    let h = conv3d(g, x, &cfg.attention_conv1_spec().with_bias(p.conv1_bias.is_some()), p.conv1_kernel, p.conv1_bias)?;
    let h = g.relu(h);
    let logits = conv3d(g, h, &cfg.attention_conv2_spec().with_bias(p.conv2_bias.is_some()), p.conv2_kernel, p.conv2_bias)?;
    g.softmax(logits, 1)
}

/// `Σ_k Λ_k · conv_{r_k}(x; shared kernel) + bias`, with `Λ` of shape
/// `N×K×D×H×W` broadcast over channels.
pub fn fuse_scales(
    g: &mut Graph,
    x: NodeId,
    cfg: &AutofocusConfig,
    kernel: NodeId,
    bias: Option<NodeId>,
    lambda: NodeId,
) -> Result<NodeId> {
    cfg.validate()?;
    let ls = g.shape(lambda).to_vec();
    if ls.len() != 5 || ls[1] != cfg.k() {
        return Err(Error::shape(format!(
            "attention must be N×{}×D×H×W, got {ls:?}",
            cfg.k()
        )));
    }
    let mut acc: Option<NodeId> = None;
    for k in 0..cfg.k() {
        let branch = conv3d(g, x, &cfg.branch_spec(k), kernel, None)?;
        let weight = g.select_channel(lambda, k)?;
        let weighted = g.mul(branch, weight)?;
        acc = Some(match acc {
            None => weighted,
            Some(a) => g.add(a, weighted)?,
        });
    }
    let fused = acc.expect("K ≥ 1");
    match bias {
        Some(b) => add_channel_bias(g, fused, b),
        None => Ok(fused),
    }
}

/// Adds a per-channel bias vector to an `N×C×…` node.
pub fn add_channel_bias(g: &mut Graph, x: NodeId, bias: NodeId) -> Result<NodeId> {
    g.bias_add(x, bias)
}

/// Autofocus layer: attention head plus scale fusion. Returns the fused
/// output and the attention node.
pub fn autofocus(
    g: &mut Graph,
    x: NodeId,
    cfg: &AutofocusConfig,
    kernel: NodeId,
    bias: Option<NodeId>,
    attention: &AttentionNodes,
) -> Result<(NodeId, NodeId)> {
    let lambda = attention_net(g, x, cfg, attention)?;
    let out = fuse_scales(g, x, cfg, kernel, bias, lambda)?;
    Ok((out, lambda))
}

/// ASPP: independent dilated branches fused by sum, or by channel
/// concatenation followed by a 1³ projection.
pub fn aspp(
    g: &mut Graph,
    x: NodeId,
    rates: &[usize],
    branches: &[(NodeId, Option<NodeId>)],
    fusion: AsppFusion,
    projection: Option<(NodeId, Option<NodeId>)>,
) -> Result<NodeId> {
    if rates.is_empty() || rates.len() != branches.len() {
        return Err(Error::invalid("ASPP needs one kernel per rate and at least one rate"));
    }
    let mut outs = Vec::with_capacity(rates.len());
    for (&r, &(k, b)) in rates.iter().zip(branches) {
        let ks = g.shape(k).to_vec();
        if ks.len() != 5 {
            return Err(Error::shape(format!("ASPP kernel must be rank 5, got {ks:?}")));
        }
        let spec = ConvSpec::new(ks[1], ks[0]).with_dilation(r).with_bias(b.is_some());
        outs.push(conv3d(g, x, &spec, k, b)?);
    }
    match fusion {
        AsppFusion::Sum => {
            let mut acc = outs[0];
            for &o in &outs[1..] {
                acc = g.add(acc, o)?;
            }
            Ok(acc)
        }
        AsppFusion::Concat => {
            let (pk, pb) = projection.ok_or_else(|| Error::invalid("concat fusion needs a projection"))?;
            let cat = g.concat(&outs)?;
            let ps = g.shape(pk).to_vec();
            let spec = ConvSpec::pointwise(g.shape(cat)[1], ps[0]).with_bias(pb.is_some());
            conv3d(g, cat, &spec, pk, pb)
        }
    }
}

/// `block_out + align(block_in)`: the shortcut is center-cropped to the
/// output's spatial extents and zero-padded in the channel axis.
pub fn residual_add(g: &mut Graph, block_out: NodeId, block_in: NodeId) -> Result<NodeId> {
    let os = g.shape(block_out).to_vec();
    let is = g.shape(block_in).to_vec();
    if os.len() != 5 || is.len() != 5 || os[0] != is[0] {
        return Err(Error::shape(format!(
            "residual needs matching N×C×D×H×W tensors, got {os:?} and {is:?}"
        )));
    }
    if is[1] > os[1] {
        return Err(Error::shape(format!(
            "shortcut has {} channels, more than the block output's {}",
            is[1], os[1]
        )));
    }
    let mut crop = vec![(0, 0); 5];
    for ax in 2..5 {
        if is[ax] < os[ax] {
            return Err(Error::shape(format!(
                "shortcut {is:?} is spatially smaller than block output {os:?}"
            )));
        }
        let diff = is[ax] - os[ax];
        crop[ax] = (diff / 2, diff - diff / 2);
    }
    let mut shortcut = block_in;
    if crop.iter().any(|&(l, h)| l + h > 0) {
        shortcut = g.crop(shortcut, &crop)?;
    }
    if is[1] < os[1] {
        let mut pad = vec![(0, 0); 5];
        pad[1] = (0, os[1] - is[1]);
        shortcut = g.pad(shortcut, &pad)?;
    }
    g.add(block_out, shortcut)
}
