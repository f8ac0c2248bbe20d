//! Central finite-difference gradient checks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Finite-difference step for double-precision checks.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    pub step: f64,
    /// Elements probed per input; larger tensors are subsampled.
    pub max_probes: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            step: FD_STEP,
            max_probes: 96,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    /// `max|a−n| / max(1e-8, max(|a|+|n|))` over the probed elements.
    pub max_rel_error: f64,
    pub probed: usize,
    /// Probes skipped because `±step` crossed a ReLU kink.
    pub skipped: usize,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.max_rel_error))
    }
}

/// Compares analytic gradients of a scalar function against central
/// differences. Probes whose `±step` evaluations change the sign of any ReLU
/// input are skipped, since the function is not differentiable there.
/// `build` receives one parameter node per entry of `inputs`
/// (registered under the given names) and returns the loss node.
pub fn grad_check<F>(inputs: &[(String, Tensor)], build: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Tensor]| -> Result<(Graph, NodeId, Vec<NodeId>)> {
        let mut g = Graph::new();
        let mut ids = Vec::with_capacity(values.len());
        for ((name, _), v) in inputs.iter().zip(values) {
            ids.push(g.param(name, v.clone())?);
        }
        let loss = build(&mut g, &ids)?;
        Ok((g, loss, ids))
    };

    let mut values: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let (graph, loss, ids) = eval(&values)?;
    let pattern = graph.relu_pattern();
    let grads = graph.backward(loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut entries = Vec::with_capacity(inputs.len());

    for (slot, (name, _)) in inputs.iter().enumerate() {
        let analytic = grads
            .of(ids[slot])
            .ok_or_else(|| Error::invalid(format!("no gradient for `{name}`")))?
            .clone();
        let n = values[slot].len();
        let probes: Vec<usize> = if n <= opts.max_probes {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, opts.max_probes).into_vec();
            v.sort_unstable();
            v
        };
        let mut worst_diff: f64 = 0.0;
        let mut scale: f64 = 0.0;
        let mut skipped = 0;
        for &i in &probes {
            let orig = values[slot].data()[i];
            values[slot].data_mut()[i] = orig + opts.step;
            let (gp, lp, _) = eval(&values)?;
            let fp = gp.value(lp).item()?;
            values[slot].data_mut()[i] = orig - opts.step;
            let (gm, lm, _) = eval(&values)?;
            let fm = gm.value(lm).item()?;
            values[slot].data_mut()[i] = orig;
            if gp.relu_pattern() != pattern || gm.relu_pattern() != pattern {
                skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.step);
            let a = analytic.data()[i];
            worst_diff = worst_diff.max((a - numeric).abs());
            scale = scale.max(a.abs() + numeric.abs());
        }
        let max_rel_error = worst_diff / scale.max(1e-8);
        entries.push(GradCheckEntry {
            name: name.clone(),
            max_rel_error,
            probed: probes.len() - skipped,
            skipped,
            passed: max_rel_error < opts.tolerance,
        });
    }
    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        entries,
    })
}
