//! Soft dice loss, hard dice scores and the per-volume metrics report.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Denominator smoothing of the soft dice loss.
pub const DICE_EPS: f64 = 1e-5;

/// Probability maps must sum to one per voxel within this tolerance.
pub const PROB_SUM_TOL: f64 = 1e-4;

/// Integer class map over a `D×H×W` grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    shape: [usize; 3],
    data: Vec<u8>,
    num_classes: usize,
}

impl LabelVolume {
    pub fn new(shape: [usize; 3], data: Vec<u8>, num_classes: usize) -> Result<Self> {
        if shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!(
                "label shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        if num_classes == 0 || num_classes > 256 {
            return Err(Error::invalid(format!("num_classes {num_classes} outside 1..=256")));
        }
        if let Some(&bad) = data.iter().find(|&&v| v as usize >= num_classes) {
            return Err(Error::invalid(format!("label {bad} ≥ num_classes {num_classes}")));
        }
        Ok(Self {
            shape,
            data,
            num_classes,
        })
    }

    pub fn zeros(shape: [usize; 3], num_classes: usize) -> Result<Self> {
        Self::new(shape, vec![0; shape.iter().product()], num_classes)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, [z, y, x]: [usize; 3]) -> u8 {
        self.data[(z * self.shape[1] + y) * self.shape[2] + x]
    }

    /// Voxel count per class.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &v in &self.data {
            h[v as usize] += 1;
        }
        h
    }

    /// Copies the block at `origin` with extents `size`.
    pub fn block(&self, origin: [usize; 3], size: [usize; 3]) -> Result<Self> {
        for ax in 0..3 {
            if size[ax] == 0 || origin[ax] + size[ax] > self.shape[ax] {
                return Err(Error::shape(format!(
                    "block at {origin:?} of size {size:?} exceeds labels {:?}",
                    self.shape
                )));
            }
        }
        let mut data = Vec::with_capacity(size.iter().product());
        for z in 0..size[0] {
            for y in 0..size[1] {
                let start = ((origin[0] + z) * self.shape[1] + origin[1] + y) * self.shape[2] + origin[2];
                data.extend_from_slice(&self.data[start..start + size[2]]);
            }
        }
        Self::new(size, data, self.num_classes)
    }

    /// Central block of extents `size`.
    pub fn center_crop(&self, size: [usize; 3]) -> Result<Self> {
        let mut origin = [0; 3];
        for ax in 0..3 {
            if size[ax] > self.shape[ax] {
                return Err(Error::shape(format!("cannot crop {:?} to {size:?}", self.shape)));
            }
            origin[ax] = (self.shape[ax] - size[ax]) / 2;
        }
        self.block(origin, size)
    }

    /// `C×D×H×W` one-hot encoding.
    pub fn one_hot(&self) -> Tensor {
        let vol = self.data.len();
        let mut t = Tensor::zeros(&[self.num_classes, self.shape[0], self.shape[1], self.shape[2]])
            .expect("valid label shape");
        let d = t.data_mut();
        for (i, &c) in self.data.iter().enumerate() {
            d[c as usize * vol + i] = 1.0;
        }
        t
    }

    /// Per-voxel argmax over the leading axis of a `C×D×H×W` score tensor;
    /// ties resolve to the lowest class.
    pub fn argmax(scores: &Tensor) -> Result<Self> {
        let s = scores.shape();
        if s.len() != 4 {
            return Err(Error::shape(format!("argmax expects C×D×H×W, got {s:?}")));
        }
        let labels = scores.reduce(crate::tensor::ReduceOp::Argmax, 0, false)?;
        let data = labels.data().iter().map(|&v| v as u8).collect();
        Self::new([s[1], s[2], s[3]], data, s[0])
    }
}

/// Stacks one-hot encodings into `N×C×D×H×W`.
pub fn one_hot_batch(labels: &[LabelVolume]) -> Result<Tensor> {
    let first = labels.first().ok_or_else(|| Error::invalid("empty label batch"))?;
    let mut data = Vec::new();
    for l in labels {
        if l.shape != first.shape || l.num_classes != first.num_classes {
            return Err(Error::shape("label volumes in a batch must share shape and class count"));
        }
        data.extend_from_slice(l.one_hot().data());
    }
    let [d, h, w] = first.shape;
    Tensor::from_values(&[labels.len(), first.num_classes, d, h, w], data)
}

/// Classes present anywhere in the batch.
pub fn present_classes(labels: &[LabelVolume]) -> Vec<bool> {
    let c = labels.first().map_or(0, |l| l.num_classes);
    let mut active = vec![false; c];
    for l in labels {
        for &v in &l.data {
            active[v as usize] = true;
        }
    }
    active
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceOptions {
    pub eps: f64,
    /// Average the per-class terms (`true`) or sum them.
    pub average: bool,
    pub include_background: bool,
}

impl Default for DiceOptions {
    fn default() -> Self {
        Self {
            eps: DICE_EPS,
            average: true,
            include_background: true,
        }
    }
}

fn check_normalized(p: &Tensor) -> Result<()> {
    let s = p.shape();
    if s.len() != 5 {
        return Err(Error::shape(format!("probabilities must be N×C×D×H×W, got {s:?}")));
    }
    let (c, vol) = (s[1], s[2] * s[3] * s[4]);
    for n in 0..s[0] {
        let base = n * c * vol;
        for v in 0..vol {
            let sum: f64 = (0..c).map(|k| p.data()[base + k * vol + v]).sum();
            if (sum - 1.0).abs() > PROB_SUM_TOL {
                return Err(Error::invalid(format!(
                    "probabilities at batch {n}, voxel {v} sum to {sum}"
                )));
            }
        }
    }
    Ok(())
}

/// Soft dice loss node over the classes present in the target batch.
pub fn soft_dice_loss(g: &mut Graph, probs: NodeId, targets: &[LabelVolume], opts: &DiceOptions) -> Result<NodeId> {
    check_normalized(g.value(probs))?;
    let onehot = one_hot_batch(targets)?;
    if onehot.shape() != g.shape(probs) {
        return Err(Error::shape(format!(
            "probabilities {:?} vs targets {:?}",
            g.shape(probs),
            onehot.shape()
        )));
    }
    let mut active = present_classes(targets);
    if !opts.include_background && !active.is_empty() {
        active[0] = false;
    }
    let k = active.iter().filter(|&&a| a).count();
    if k == 0 {
        return Err(Error::invalid("no class contributes to the dice loss"));
    }
    let loss = g.soft_dice(probs, onehot, active, opts.eps)?;
    Ok(if opts.average { loss } else { g.scale(loss, k as f64) })
}

/// Soft dice loss of a probability tensor without building a tape.
pub fn soft_dice_value(probs: &Tensor, targets: &[LabelVolume], opts: &DiceOptions) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.input(probs.clone());
    let l = soft_dice_loss(&mut g, p, targets, opts)?;
    g.value(l).item()
}

fn dice_masks(pred: &LabelVolume, target: &LabelVolume, classes: &[u8]) -> Result<f64> {
    if pred.shape != target.shape {
        return Err(Error::shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape, target.shape
        )));
    }
    let n = pred.num_classes.max(target.num_classes);
    if let Some(&c) = classes.iter().find(|&&c| c as usize >= n) {
        return Err(Error::invalid(format!("class {c} ≥ num_classes {n}")));
    }
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.data.iter().zip(&target.data) {
        let (ip, it) = (classes.contains(&p), classes.contains(&t));
        a += ip as usize;
        b += it as usize;
        both += (ip && it) as usize;
    }
    Ok(if a + b == 0 { 1.0 } else { 2.0 * both as f64 / (a + b) as f64 })
}

/// `2|A∩B| / (|A|+|B|)` for one class; 1 when both masks are empty.
pub fn dice_score(pred: &LabelVolume, target: &LabelVolume, class: u8) -> Result<f64> {
    dice_masks(pred, target, &[class])
}

/// Names of the label values plus optional reporting groups (unions of
/// labels scored as one structure).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMap {
    pub names: Vec<String>,
    #[serde(default)]
    pub groups: Vec<(String, Vec<u8>)>,
}

impl ClassMap {
    /// `background, class1, class2, …`.
    pub fn numbered(num_classes: usize) -> Self {
        let names = (0..num_classes)
            .map(|c| if c == 0 { "background".to_string() } else { format!("class{c}") })
            .collect();
        Self { names, groups: vec![] }
    }

    /// Parses `name = label[,label…]` lines; a single label per line names a
    /// class, several define a group.
    pub fn parse(text: &str, num_classes: usize) -> Result<Self> {
        let mut map = Self::numbered(num_classes);
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (name, labels) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("class map line {}: expected `name = labels`", lineno + 1)))?;
            let labels: Vec<u8> = labels
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<u8>()
                        .ok()
                        .filter(|&c| (c as usize) < num_classes)
                        .ok_or_else(|| Error::Config(format!("class map line {}: bad label `{}`", lineno + 1, v.trim())))
                })
                .collect::<Result<_>>()?;
            match labels.as_slice() {
                [single] => map.names[*single as usize] = name.trim().to_string(),
                _ => map.groups.push((name.trim().to_string(), labels)),
            }
        }
        Ok(map)
    }

    /// Scored structures: every foreground class, then the groups.
    fn structures(&self) -> Vec<(String, Vec<u8>)> {
        let mut out: Vec<(String, Vec<u8>)> = self
            .names
            .iter()
            .enumerate()
            .skip(1)
            .map(|(c, n)| (n.clone(), vec![c as u8]))
            .collect();
        out.extend(self.groups.iter().cloned());
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiceRow {
    pub volume_id: String,
    pub class_name: String,
    pub dice: f64,
}

/// Per-volume scores with per-structure mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub rows: Vec<DiceRow>,
    /// `(structure, mean, std)` in class-map order.
    pub summary: Vec<(String, f64, f64)>,
    /// Mean over all per-volume foreground rows.
    pub overall_mean: f64,
}

impl MetricsReport {
    pub fn new(volumes: &[(String, LabelVolume, LabelVolume)], map: &ClassMap) -> Result<Self> {
        if volumes.is_empty() {
            return Err(Error::invalid("no volumes to score"));
        }
        let structures = map.structures();
        let mut rows = Vec::new();
        for (id, pred, target) in volumes {
            for (name, classes) in &structures {
                rows.push(DiceRow {
                    volume_id: id.clone(),
                    class_name: name.clone(),
                    dice: dice_masks(pred, target, classes)?,
                });
            }
        }
        let summary = structures
            .iter()
            .map(|(name, _)| {
                let v: Vec<f64> = rows.iter().filter(|r| &r.class_name == name).map(|r| r.dice).collect();
                let (m, s) = mean_std(&v);
                (name.clone(), m, s)
            })
            .collect();
        let fg: Vec<f64> = rows
            .iter()
            .filter(|r| map.names.iter().skip(1).any(|n| n == &r.class_name))
            .map(|r| r.dice)
            .collect();
        Ok(Self {
            rows,
            summary,
            overall_mean: mean_std(&fg).0,
        })
    }

    /// `volume_id,class_name,dice` rows, then `mean`/`std` rows per
    /// structure and a final `mean,overall` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("volume_id,class_name,dice\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:.6}", r.volume_id, r.class_name, r.dice);
        }
        for (name, m, sd) in &self.summary {
            let _ = writeln!(s, "mean,{name},{m:.6}");
            let _ = writeln!(s, "std,{name},{sd:.6}");
        }
        let _ = writeln!(s, "mean,overall,{:.6}", self.overall_mean);
        s
    }
}

/// Mean and population standard deviation; `(NaN, NaN)` when empty.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}
