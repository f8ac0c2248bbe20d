//! Adam, the step-decay learning-rate schedule, training configuration
//! profiles, the trainer with checkpoint/resume, sliding-window evaluation
//! and attention export.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, ParamStore};
use crate::codec::{self, ByteReader, ByteWriter};
use crate::data::{self, NormMask, PhantomSpec, SegmentSampler, VolumeRecord};
use crate::error::{Error, Result};
use crate::layers::{AttentionMaps, Padding};
use crate::loss::{self, ClassMap, DiceOptions, LabelVolume, MetricsReport};
use crate::models::{ArchOptions, ArchSpec, LayerKind, Model, Mode};
use crate::tensor::Tensor;

const STATE_MAGIC: &[u8; 4] = b"AFNS";
const STATE_VERSION: u32 = 1;

/// Sliding-window overlap used by [`evaluate`].
pub const EVAL_OVERLAP: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter plus the update counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    /// `AFNS` file: magic, version, arch hash, step, record count, then
    /// `<name>.m` / `<name>.v` tensor records.
    pub fn to_bytes(&self, arch_hash: &[u8; 32]) -> Result<Vec<u8>> {
        let mut w = ByteWriter::new();
        w.bytes(STATE_MAGIC);
        w.u32(STATE_VERSION);
        w.bytes(arch_hash);
        w.u64(self.step);
        w.u64((self.m.len() + self.v.len()) as u64);
        for (name, t) in &self.m {
            w.tensor_record(&format!("{name}.m"), t)?;
        }
        for (name, t) in &self.v {
            w.tensor_record(&format!("{name}.v"), t)?;
        }
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8], arch_hash: &[u8; 32]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(STATE_MAGIC)?;
        r.expect_version(STATE_VERSION)?;
        if r.take(32, "architecture hash")? != arch_hash {
            return Err(Error::ArchMismatch);
        }
        let mut s = Self {
            step: r.u64("step")?,
            ..Self::default()
        };
        let count = r.u64("record count")?;
        for _ in 0..count {
            let (name, t) = r.tensor_record()?;
            if let Some(p) = name.strip_suffix(".m") {
                s.m.insert(p.to_string(), t);
            } else if let Some(p) = name.strip_suffix(".v") {
                s.v.insert(p.to_string(), t);
            } else {
                return Err(Error::Format(format!("optimizer record `{name}` lacks a .m/.v suffix")));
            }
        }
        if r.remaining() != 0 {
            return Err(Error::Format("trailing bytes after optimizer state".into()));
        }
        Ok(s)
    }
}

/// One bias-corrected Adam update of every trainable parameter. Gradients
/// are checked for finiteness before anything is modified.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &Gradients,
    state: &mut OptimizerState,
    lr: f64,
    adam: &AdamParams,
) -> Result<()> {
    let mut pairs = Vec::new();
    for p in params.trainable() {
        let g = grads
            .param(&p.name)
            .ok_or_else(|| Error::invalid(format!("no gradient for `{}`", p.name)))?;
        if g.shape() != p.tensor.shape() {
            return Err(Error::shape(format!("gradient of `{}` has shape {:?}", p.name, g.shape())));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of `{}`", p.name)));
        }
        pairs.push((p.name.clone(), g.clone()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - adam.beta1.powi(t);
    let c2 = 1.0 - adam.beta2.powi(t);
    for (name, g) in pairs {
        let p = params.get_mut(&name).expect("collected from the store");
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros_like(&g));
        let v = state.v.entry(name).or_insert_with(|| Tensor::zeros_like(&g));
        let (md, vd, pd) = (m.data_mut(), v.data_mut(), p.tensor.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            md[i] = adam.beta1 * md[i] + (1.0 - adam.beta1) * gi;
            vd[i] = adam.beta2 * vd[i] + (1.0 - adam.beta2) * gi * gi;
            let mh = md[i] / c1;
            let vh = vd[i] / c2;
            pd[i] -= lr * mh / (vh.sqrt() + adam.eps);
        }
    }
    Ok(())
}

/// `lr` for epochs before `decay_epoch`, `lr_decayed` from then on
/// (epochs count from 0).
pub fn learning_rate(epoch: u64, lr: f64, lr_decayed: f64, decay_epoch: u64) -> f64 {
    if epoch < decay_epoch {
        lr
    } else {
        lr_decayed
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub arch: String,
    pub input_channels: usize,
    pub num_classes: usize,
    pub channels: Vec<usize>,
    pub rates: Vec<usize>,
    pub padding: Padding,
    pub norm: bool,
    pub residual: bool,
}

impl ModelSection {
    pub fn options(&self) -> ArchOptions {
        ArchOptions {
            input_channels: self.input_channels,
            num_classes: self.num_classes,
            channels: self.channels.clone(),
            rates: self.rates.clone(),
            padding: self.padding,
            norm: self.norm,
            residual: self.residual,
        }
    }

    pub fn arch(&self) -> Result<ArchSpec> {
        ArchSpec::by_name(&self.arch, &self.options())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: u64,
    pub steps_per_epoch: u64,
    pub batch: usize,
    pub segment: usize,
    pub lr: f64,
    pub lr_decayed: f64,
    pub decay_epoch: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Epochs between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Epoch-mean loss whose first crossing is reported in the summary.
    pub target_loss: Option<f64>,
    /// End training at that first crossing.
    pub stop_at_target: bool,
    pub class_balance: bool,
    pub dice_eps: f64,
    /// Average per-class dice terms (`true`) or sum them.
    pub dice_average: bool,
    pub dice_include_background: bool,
}

impl TrainSection {
    pub fn adam(&self) -> AdamParams {
        AdamParams {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn dice(&self) -> DiceOptions {
        DiceOptions {
            eps: self.dice_eps,
            average: self.dice_average,
            include_background: self.dice_include_background,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Newline-separated list of `AFNV` volumes.
    pub manifest: Option<PathBuf>,
    /// Phantom spec generated on the fly when no manifest is given; the
    /// built-in desk set is used when both are absent.
    pub phantoms: Option<PathBuf>,
    pub phantom_count: u64,
    pub normalize: NormMask,
    pub out_dir: PathBuf,
}

/// Training configuration. Files are flat `key = value` TOML under
/// `[model]`, `[train]` and `[data]` headers; an optional
/// top-level `profile = "desk" | "paper"` supplies the defaults that the
/// file then overrides key by key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub data: DataSection,
}

impl TrainConfig {
    /// Scaled-down AFN-2 on 32³ segments of the five built-in phantoms:
    /// 200 steps of one segment each.
    pub fn desk() -> Self {
        Self {
            model: ModelSection {
                arch: "afn2".into(),
                input_channels: 1,
                num_classes: 3,
                channels: vec![8, 8, 12, 12],
                rates: vec![2, 6],
                padding: Padding::Same,
                norm: true,
                residual: true,
            },
            train: TrainSection {
                epochs: 20,
                steps_per_epoch: 10,
                batch: 1,
                segment: 32,
                lr: 0.01,
                lr_decayed: 0.001,
                decay_epoch: 15,
                beta1: 0.9,
                beta2: 0.999,
                adam_eps: 1e-8,
                seed: 1,
                checkpoint_every: 0,
                target_loss: Some(0.05),
                stop_at_target: false,
                class_balance: true,
                dice_eps: loss::DICE_EPS,
                dice_average: true,
                dice_include_background: true,
            },
            data: DataSection {
                manifest: None,
                phantoms: None,
                phantom_count: 5,
                normalize: NormMask::Whole,
                out_dir: PathBuf::from("runs/desk"),
            },
        }
    }

    /// Full-size configuration: 300 epochs, batches of 7 segments of 75³,
    /// learning rate 0.001 dropping to 0.0001 at epoch 200.
    pub fn paper() -> Self {
        Self {
            model: ModelSection {
                arch: "afn6".into(),
                input_channels: 4,
                num_classes: 5,
                channels: crate::models::DEFAULT_CHANNELS.to_vec(),
                rates: crate::layers::DEFAULT_RATES.to_vec(),
                padding: Padding::Same,
                norm: true,
                residual: true,
            },
            train: TrainSection {
                epochs: 300,
                steps_per_epoch: 20,
                batch: 7,
                segment: 75,
                lr: 0.001,
                lr_decayed: 0.0001,
                decay_epoch: 200,
                beta1: 0.9,
                beta2: 0.999,
                adam_eps: 1e-8,
                seed: 1,
                checkpoint_every: 10,
                target_loss: None,
                stop_at_target: false,
                class_balance: true,
                dice_eps: loss::DICE_EPS,
                dice_average: true,
                dice_include_background: true,
            },
            data: DataSection {
                manifest: None,
                phantoms: None,
                phantom_count: 20,
                normalize: NormMask::Nonzero,
                out_dir: PathBuf::from("runs/paper"),
            },
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            _ => Err(Error::Config(format!("unknown profile `{name}` (expected desk or paper)"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg_err = |e: &dyn std::fmt::Display| Error::Config(e.to_string());
        let mut user: toml::Table = text.parse().map_err(|e| cfg_err(&e))?;
        let profile = match user.remove("profile") {
            None => "desk".to_string(),
            Some(toml::Value::String(s)) => s,
            Some(_) => return Err(Error::Config("`profile` must be a string".into())),
        };
        let base = toml::Table::try_from(Self::profile(&profile)?).map_err(|e| cfg_err(&e))?;
        let merged = merge(base, user);
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| cfg_err(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative data paths resolve against its
    /// directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = String::from_utf8(codec::read_file(path)?)
            .map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.manifest, &mut cfg.data.phantoms].into_iter().flatten() {
            *p = base.join(&*p);
        }
        cfg.data.out_dir = base.join(&cfg.data.out_dir);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.epochs == 0 || t.steps_per_epoch == 0 || t.batch == 0 || t.segment == 0 {
            return Err(Error::Config("epochs, steps_per_epoch, batch and segment must be ≥ 1".into()));
        }
        if !(t.lr > 0.0 && t.lr_decayed > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !((0.0..1.0).contains(&t.beta1) && (0.0..1.0).contains(&t.beta2) && t.adam_eps > 0.0 && t.dice_eps > 0.0) {
            return Err(Error::Config("Adam needs 0 ≤ β < 1, and both ε values must be positive".into()));
        }
        self.model.arch().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn lr_at(&self, epoch: u64) -> f64 {
        learning_rate(epoch, self.train.lr, self.train.lr_decayed, self.train.decay_epoch)
    }

    /// Loads (or generates) and normalizes the training volumes.
    pub fn load_volumes(&self) -> Result<Vec<VolumeRecord>> {
        let raw = if let Some(m) = &self.data.manifest {
            data::read_manifest(m)?
                .iter()
                .map(|p| VolumeRecord::read(p))
                .collect::<Result<Vec<_>>>()?
        } else {
            let spec = match &self.data.phantoms {
                Some(p) => PhantomSpec::from_toml(
                    &String::from_utf8(codec::read_file(p)?)
                        .map_err(|_| Error::Config(format!("{} is not UTF-8", p.display())))?,
                )?,
                None => PhantomSpec::desk(),
            };
            (0..self.data.phantom_count)
                .map(|i| data::generate_phantom(&spec, i).map(|(v, _)| v))
                .collect::<Result<Vec<_>>>()?
        };
        prepare_volumes(raw, self.model.num_classes, self.data.normalize)
    }
}

/// Normalizes intensities and widens label class counts to the model's.
pub fn prepare_volumes(raw: Vec<VolumeRecord>, num_classes: usize, mask: NormMask) -> Result<Vec<VolumeRecord>> {
    raw.into_iter()
        .map(|v| data::normalize(&v, mask)?.with_num_classes(num_classes))
        .collect()
}

fn merge(mut base: toml::Table, user: toml::Table) -> toml::Table {
    for (k, v) in user {
        match (base.remove(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => {
                base.insert(k, toml::Value::Table(merge(b, u)));
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    base
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub epoch: u64,
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub epochs: u64,
    pub final_loss: f64,
    /// Step at which an epoch mean first fell below the target loss.
    pub reached_target_at: Option<u64>,
}

/// Owns the model, optimizer state and training volumes.
#[derive(Debug)]
pub struct Trainer {
    config: TrainConfig,
    model: Model,
    opt: OptimizerState,
    volumes: Vec<VolumeRecord>,
    samplers: Vec<SegmentSampler>,
    losses: Vec<f64>,
}

pub const CHECKPOINT_WEIGHTS: &str = "model.afnw";
pub const CHECKPOINT_STATE: &str = "optimizer.afns";

impl Trainer {
    pub fn new(config: TrainConfig, volumes: Vec<VolumeRecord>) -> Result<Self> {
        let model = Model::build(config.model.arch()?, config.train.seed)?;
        Self::with_state(config, volumes, model, OptimizerState::new())
    }

    fn with_state(config: TrainConfig, volumes: Vec<VolumeRecord>, model: Model, opt: OptimizerState) -> Result<Self> {
        config.validate()?;
        if volumes.is_empty() {
            return Err(Error::invalid("no training volumes"));
        }
        let seg = [config.train.segment; 3];
        let mut samplers = Vec::with_capacity(volumes.len());
        for v in &volumes {
            if v.channels() != config.model.input_channels {
                return Err(Error::invalid(format!(
                    "volume `{}` has {} channels, model expects {}",
                    v.id,
                    v.channels(),
                    config.model.input_channels
                )));
            }
            if v.labels.num_classes() != config.model.num_classes {
                return Err(Error::invalid(format!(
                    "volume `{}` labels use {} classes, model has {}",
                    v.id,
                    v.labels.num_classes(),
                    config.model.num_classes
                )));
            }
            samplers.push(SegmentSampler::new(v, seg)?);
        }
        Ok(Self {
            config,
            model,
            opt,
            volumes,
            samplers,
            losses: Vec::new(),
        })
    }

    /// Restores the model and optimizer written by [`Trainer::save_checkpoint`].
    pub fn resume(config: TrainConfig, volumes: Vec<VolumeRecord>, dir: &Path) -> Result<Self> {
        let arch = config.model.arch()?;
        let model = Model::load_weights(&dir.join(CHECKPOINT_WEIGHTS), &arch)?;
        let opt = OptimizerState::from_bytes(&codec::read_file(&dir.join(CHECKPOINT_STATE))?, &arch.hash())?;
        Self::with_state(config, volumes, model, opt)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.opt
    }

    pub fn volumes(&self) -> &[VolumeRecord] {
        &self.volumes
    }

    pub fn step_count(&self) -> u64 {
        self.opt.step
    }

    pub fn epoch(&self) -> u64 {
        self.opt.step / self.config.train.steps_per_epoch
    }

    /// Losses of the steps run by this trainer instance.
    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    /// Draws the batch for the next step. The generator is keyed by
    /// `(seed, step)`, so resumed runs see the same batches.
    fn batch(&self) -> Result<(Tensor, Vec<LabelVolume>)> {
        let t = &self.config.train;
        let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
        rng.set_stream(self.opt.step);
        let mut images = Vec::new();
        let mut labels = Vec::with_capacity(t.batch);
        for _ in 0..t.batch {
            let vi = rand::Rng::random_range(&mut rng, 0..self.volumes.len());
            let (origin, class) = self.samplers[vi].draw(&mut rng, t.class_balance);
            let seg = self.samplers[vi].extract(&self.volumes[vi], origin, class)?;
            images.extend_from_slice(seg.image.data());
            labels.push(seg.labels);
        }
        let s = t.segment;
        let x = Tensor::from_values(&[t.batch, self.config.model.input_channels, s, s, s], images)?;
        Ok((x, labels))
    }

    /// One optimization step; returns the batch loss.
    pub fn step(&mut self) -> Result<f64> {
        let (x, labels) = self.batch()?;
        let mut g = Graph::new();
        let xn = g.input(x);
        let out = self.model.forward(&mut g, xn, Mode::Train)?;
        let ps = g.shape(out.probs).to_vec();
        let out_size = [ps[2], ps[3], ps[4]];
        let labels = if labels[0].shape() == out_size {
            labels
        } else {
            labels.iter().map(|l| l.center_crop(out_size)).collect::<Result<_>>()?
        };
        let loss_node = loss::soft_dice_loss(&mut g, out.probs, &labels, &self.config.train.dice())?;
        let loss = g.value(loss_node).item()?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {}", self.opt.step)));
        }
        let grads = g.backward(loss_node)?;
        let lr = self.config.lr_at(self.epoch());
        adam_step(self.model.params_mut(), &grads, &mut self.opt, lr, &self.config.train.adam())?;
        self.model.update_running(&out.batch_stats);
        self.losses.push(loss);
        Ok(loss)
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        self.model.save_with_arch(&dir.join(CHECKPOINT_WEIGHTS))?;
        codec::write_file(
            &dir.join(CHECKPOINT_STATE),
            &self.opt.to_bytes(&self.model.arch().hash())?,
        )
    }

    /// Trains until the configured epoch count or `max_steps` total steps,
    /// or the target loss when `stop_at_target` is set. Writes one JSON line
    /// per epoch to `log` and checkpoints into `checkpoint_dir` when given.
    pub fn run(&mut self, log: &mut dyn Write, checkpoint_dir: Option<&Path>, max_steps: Option<u64>) -> Result<TrainSummary> {
        let t = self.config.train.clone();
        let started = Instant::now();
        let mut reached = None;
        let mut last = f64::NAN;
        'epochs: while self.epoch() < t.epochs {
            let epoch = self.epoch();
            let lr = self.config.lr_at(epoch);
            let mut sum = 0.0;
            let mut n = 0;
            while self.epoch() == epoch {
                if max_steps.is_some_and(|m| self.opt.step >= m) {
                    break;
                }
                sum += self.step()?;
                n += 1;
            }
            if n == 0 {
                break;
            }
            last = sum / n as f64;
            let entry = LogEntry {
                epoch,
                step: self.opt.step,
                loss: last,
                lr,
                seconds: started.elapsed().as_secs_f64(),
            };
            writeln!(log, "{}", serde_json::to_string(&entry).expect("log entry serializes"))
                .map_err(|e| Error::io("training log", e))?;
            if let Some(dir) = checkpoint_dir {
                if t.checkpoint_every > 0 && (epoch + 1).is_multiple_of(t.checkpoint_every) {
                    self.save_checkpoint(dir)?;
                }
            }
            let full_epoch = n as u64 == t.steps_per_epoch;
            if reached.is_none() && full_epoch && t.target_loss.is_some_and(|target| last < target) {
                reached = Some(self.opt.step);
                if t.stop_at_target {
                    break 'epochs;
                }
            }
            if max_steps.is_some_and(|m| self.opt.step >= m) {
                break;
            }
        }
        if let Some(dir) = checkpoint_dir {
            self.save_checkpoint(dir)?;
        }
        Ok(TrainSummary {
            steps: self.opt.step,
            epochs: self.epoch(),
            final_loss: last,
            reached_target_at: reached,
        })
    }
}

/// Window origins along one axis: stride `window − overlap`, with the last
/// window aligned to the end. Windows never exceed the extent.
pub fn tile_starts(extent: usize, window: usize, overlap: usize) -> Vec<usize> {
    let window = window.min(extent);
    let stride = window.saturating_sub(overlap).max(1);
    let mut starts: Vec<usize> = (0..=extent - window).step_by(stride).collect();
    if *starts.last().expect("non-empty range") != extent - window {
        starts.push(extent - window);
    }
    starts
}

/// Number of windows covering each voxel.
pub fn coverage(spatial: [usize; 3], window: usize, overlap: usize) -> Vec<u32> {
    let [d, h, w] = spatial;
    let mut cov = vec![0u32; d * h * w];
    let ws: [usize; 3] = std::array::from_fn(|a| window.min(spatial[a]));
    for &z0 in &tile_starts(d, window, overlap) {
        for &y0 in &tile_starts(h, window, overlap) {
            for &x0 in &tile_starts(w, window, overlap) {
                for z in z0..z0 + ws[0] {
                    for y in y0..y0 + ws[1] {
                        for x in x0..x0 + ws[2] {
                            cov[(z * h + y) * w + x] += 1;
                        }
                    }
                }
            }
        }
    }
    cov
}

/// Eval-mode logits over a whole `C×D×H×W` volume, averaging overlapping
/// windows. The model must preserve spatial extents.
pub fn sliding_window_logits(model: &Model, image: &Tensor, window: usize, overlap: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("expected C×D×H×W image, got {s:?}")));
    }
    let spatial = [s[1], s[2], s[3]];
    let ws: [usize; 3] = std::array::from_fn(|a| window.min(spatial[a]));
    let k = model.arch().num_classes;
    let vox: usize = spatial.iter().product();
    let mut acc = vec![0.0; k * vox];
    let mut count = vec![0u32; vox];
    let [_, h, w] = spatial;
    for &z0 in &tile_starts(spatial[0], window, overlap) {
        for &y0 in &tile_starts(spatial[1], window, overlap) {
            for &x0 in &tile_starts(spatial[2], window, overlap) {
                let block = image.slice_block(&[0, z0, y0, x0], &[s[0], ws[0], ws[1], ws[2]])?;
                let mut bs = vec![1];
                bs.extend_from_slice(block.shape());
                let logits = model.predict(&block.reshape(&bs)?)?;
                if logits.shape()[2..] != ws {
                    return Err(Error::invalid(
                        "sliding-window evaluation needs a model that preserves spatial size (same padding)",
                    ));
                }
                let wv = ws.iter().product::<usize>();
                for z in 0..ws[0] {
                    for y in 0..ws[1] {
                        for x in 0..ws[2] {
                            let dst = ((z0 + z) * h + y0 + y) * w + x0 + x;
                            let src = (z * ws[1] + y) * ws[2] + x;
                            count[dst] += 1;
                            for c in 0..k {
                                acc[c * vox + dst] += logits.data()[c * wv + src];
                            }
                        }
                    }
                }
            }
        }
    }
    for c in 0..k {
        for v in 0..vox {
            acc[c * vox + v] /= count[v] as f64;
        }
    }
    Tensor::from_values(&[k, s[1], s[2], s[3]], acc)
}

/// Full-volume predictions of `model` scored against each volume's labels.
pub fn evaluate(
    model: &Model,
    volumes: &[VolumeRecord],
    window: usize,
    overlap: usize,
    class_map: Option<&ClassMap>,
) -> Result<MetricsReport> {
    if volumes.is_empty() {
        return Err(Error::invalid("evaluation manifest is empty"));
    }
    let default_map = ClassMap::numbered(model.arch().num_classes);
    let map = class_map.unwrap_or(&default_map);
    let mut scored = Vec::with_capacity(volumes.len());
    for v in volumes {
        let logits = sliding_window_logits(model, &v.image, window, overlap)?;
        scored.push((v.id.clone(), LabelVolume::argmax(&logits)?, v.labels.clone()));
    }
    MetricsReport::new(&scored, map)
}

/// Resolves `layer8`-style names or 1-based hidden-layer indices.
pub fn resolve_layer(arch: &ArchSpec, layer: &str) -> Result<String> {
    let name = match layer.parse::<usize>() {
        Ok(i) => format!("layer{i}"),
        Err(_) => layer.to_string(),
    };
    match arch.layers.iter().find(|l| l.name == name) {
        Some(l) if matches!(l.kind, LayerKind::Autofocus { .. }) => Ok(name),
        Some(l) => Err(Error::invalid(format!("layer `{name}` is a {} layer, not autofocus", l.kind.tag()))),
        None => Err(Error::invalid(format!("architecture has no layer `{name}`"))),
    }
}

/// Attention maps of one autofocus layer for a whole volume.
pub fn layer_attention(model: &Model, volume: &VolumeRecord, layer: &str) -> Result<AttentionMaps> {
    let name = resolve_layer(model.arch(), layer)?;
    model
        .attention_maps(&volume.image)?
        .into_iter()
        .find(|(n, _)| *n == name)
        .map(|(_, m)| m)
        .ok_or_else(|| Error::invalid(format!("no attention produced for `{name}`")))
}

/// Writes `Λ¹…Λᴷ` of one autofocus layer as single-channel `AFNV` volumes
/// named `<volume>_<layer>_k<k>_r<rate>.afnv`.
pub fn export_attention(model: &Model, volume: &VolumeRecord, layer: &str, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let name = resolve_layer(model.arch(), layer)?;
    let maps = layer_attention(model, volume, &name)?;
    let rates = match &model.arch().layers.iter().find(|l| l.name == name).expect("resolved").kind {
        LayerKind::Autofocus { config } => config.rates.clone(),
        _ => unreachable!("resolve_layer checks the kind"),
    };
    let spatial = maps.spatial();
    let mut paths = Vec::with_capacity(maps.k());
    for (k, rate) in rates.iter().enumerate() {
        let map = maps.map(k)?;
        let image = map.reshape(&[1, spatial[0], spatial[1], spatial[2]])?;
        let rec = VolumeRecord::new(
            format!("{}_{name}_k{}_r{rate}", volume.id, k + 1),
            image,
            LabelVolume::zeros(spatial, 1)?,
            volume.spacing,
        )?;
        let path = out_dir.join(format!("{}.afnv", rec.id));
        rec.write(&path)?;
        paths.push(path);
    }
    Ok(paths)
}
