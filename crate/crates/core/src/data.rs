//! Volume records and the `AFNV` file format, intensity normalization,
//! synthetic ellipsoid phantoms and class-balanced segment sampling.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::{self, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::loss::LabelVolume;
use crate::tensor::Tensor;

const VOLUME_MAGIC: &[u8; 4] = b"AFNV";
const VOLUME_VERSION: u32 = 1;
/// Payload tag: `f32` image followed by `u8` labels.
const DTYPE_F32_U8: u8 = 1;

/// Attempts per instance before phantom placement gives up.
pub const PLACEMENT_RETRIES: usize = 2000;

/// Image, labels and voxel spacing of one scan.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeRecord {
    pub id: String,
    /// `C×D×H×W`.
    pub image: Tensor,
    pub labels: LabelVolume,
    /// Millimetres per voxel along D, H, W.
    pub spacing: [f64; 3],
}

impl VolumeRecord {
    pub fn new(id: impl Into<String>, image: Tensor, labels: LabelVolume, spacing: [f64; 3]) -> Result<Self> {
        let s = image.shape();
        if s.len() != 4 || s[1..] != labels.shape() {
            return Err(Error::shape(format!(
                "image {s:?} does not match labels {:?}",
                labels.shape()
            )));
        }
        if spacing.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::invalid(format!("spacing {spacing:?} must be positive")));
        }
        Ok(Self {
            id: id.into(),
            image,
            labels,
            spacing,
        })
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn spatial(&self) -> [usize; 3] {
        self.labels.shape()
    }

    /// Relabels with a larger class count.
    pub fn with_num_classes(mut self, num_classes: usize) -> Result<Self> {
        self.labels = LabelVolume::new(self.labels.shape(), self.labels.data().to_vec(), num_classes)?;
        Ok(self)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::new();
        w.bytes(VOLUME_MAGIC);
        w.u32(VOLUME_VERSION);
        for &e in self.image.shape() {
            w.u32(u32::try_from(e).map_err(|_| Error::invalid("volume extent exceeds u32"))?);
        }
        for &s in &self.spacing {
            w.f64(s);
        }
        w.u8(DTYPE_F32_U8);
        for &v in self.image.data() {
            w.f32(v as f32);
        }
        w.bytes(self.labels.data());
        Ok(w.into_inner())
    }

    /// Parses an `AFNV` buffer. The class count is one past the largest
    /// label present.
    pub fn from_bytes(id: impl Into<String>, bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(VOLUME_MAGIC)?;
        r.expect_version(VOLUME_VERSION)?;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32("dimensions")? as usize;
        }
        if dims.contains(&0) {
            return Err(Error::Format(format!("zero extent in dimensions {dims:?}")));
        }
        let mut spacing = [0.0; 3];
        for s in &mut spacing {
            *s = r.f64("spacing")?;
        }
        let tag = r.u8("dtype tag")?;
        if tag != DTYPE_F32_U8 {
            return Err(Error::Format(format!("unknown dtype tag {tag}")));
        }
        let voxels = dims[1..].iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let (voxels, values, payload) = voxels
            .and_then(|v| v.checked_mul(dims[0]).map(|n| (v, n)))
            .and_then(|(v, n)| n.checked_mul(4).and_then(|b| b.checked_add(v)).map(|p| (v, n, p)))
            .ok_or_else(|| Error::Format(format!("dimensions {dims:?} overflow")))?;
        if r.remaining() < payload {
            return Err(Error::Truncated(format!(
                "header declares {payload} payload bytes, file has {}",
                r.remaining()
            )));
        }
        if r.remaining() > payload {
            return Err(Error::Format(format!(
                "{} bytes after the declared payload",
                r.remaining() - payload
            )));
        }
        let raw = r.take(values * 4, "image")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
            .collect();
        let labels = r.take(voxels, "labels")?.to_vec();
        let classes = labels.iter().copied().max().unwrap_or(0) as usize + 1;
        let image = Tensor::from_values(&dims, data)?;
        let labels = LabelVolume::new([dims[1], dims[2], dims[3]], labels, classes)?;
        Self::new(id, image, labels, spacing)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_bytes()?)
    }

    /// Reads an `AFNV` file; the id is the file stem.
    pub fn read(path: &Path) -> Result<Self> {
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::from_bytes(id, &codec::read_file(path)?)
    }
}

/// Newline-separated volume paths; relative entries resolve against the
/// manifest's directory. Blank lines and `#` comments are ignored.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = String::from_utf8(codec::read_file(path)?)
        .map_err(|_| Error::Format(format!("{} is not UTF-8", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let paths: Vec<PathBuf> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| base.join(l))
        .collect();
    if paths.is_empty() {
        return Err(Error::invalid(format!("manifest {} lists no volumes", path.display())));
    }
    Ok(paths)
}

pub fn write_manifest(path: &Path, volumes: &[PathBuf]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut text = String::new();
    for v in volumes {
        let rel = v.strip_prefix(base).unwrap_or(v);
        text.push_str(&rel.to_string_lossy());
        text.push('\n');
    }
    codec::write_file(path, text.as_bytes())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMask {
    /// Statistics over every voxel.
    Whole,
    /// Statistics over voxels where any channel is nonzero; others stay 0.
    Nonzero,
}

/// Zero mean, unit variance per channel over the mask.
pub fn normalize(volume: &VolumeRecord, mask: NormMask) -> Result<VolumeRecord> {
    let c = volume.channels();
    let vox = volume.labels.len();
    let data = volume.image.data();
    let inside: Vec<bool> = match mask {
        NormMask::Whole => vec![true; vox],
        NormMask::Nonzero => (0..vox).map(|v| (0..c).any(|ch| data[ch * vox + v] != 0.0)).collect(),
    };
    let count = inside.iter().filter(|&&b| b).count();
    if count == 0 {
        return Err(Error::invalid(format!("volume `{}` has an empty foreground mask", volume.id)));
    }
    let mut out = Tensor::zeros(volume.image.shape())?;
    for ch in 0..c {
        let src = &data[ch * vox..(ch + 1) * vox];
        let vals = || src.iter().zip(&inside).filter(|(_, &m)| m).map(|(v, _)| *v);
        let mean = vals().sum::<f64>() / count as f64;
        let var = vals().map(|v| (v - mean).powi(2)).sum::<f64>() / count as f64;
        if var.is_nan() || var <= 0.0 {
            return Err(Error::invalid(format!(
                "volume `{}` channel {ch} is constant over the mask",
                volume.id
            )));
        }
        let inv = 1.0 / var.sqrt();
        let dst = &mut out.data_mut()[ch * vox..(ch + 1) * vox];
        for ((d, &s), &m) in dst.iter_mut().zip(src).zip(&inside) {
            if m {
                *d = (s - mean) * inv;
            }
        }
    }
    VolumeRecord::new(volume.id.clone(), out, volume.labels.clone(), volume.spacing)
}

/// Appearance and size range of one foreground class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub count: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub intensity_mean: f64,
    #[serde(default)]
    pub intensity_sigma: f64,
    /// Cycles per voxel of the sinusoidal texture.
    #[serde(default)]
    pub texture_frequency: f64,
    #[serde(default)]
    pub texture_amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomGlobals {
    pub grid: [usize; 3],
    #[serde(default = "one")]
    pub channels: usize,
    #[serde(default)]
    pub background_mean: f64,
    #[serde(default)]
    pub background_noise: f64,
    #[serde(default)]
    pub seed: u64,
    /// Foreground class rendered at both small and large radii on grids of
    /// at least 64 voxels per axis.
    #[serde(default)]
    pub scale_probe: Option<u8>,
}

fn one() -> usize {
    1
}

/// Phantom generator settings: a `[phantom]` section plus one `[classN]`
/// section per foreground class, N = 1, 2, ….
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub phantom: PhantomGlobals,
    #[serde(flatten)]
    pub classes: BTreeMap<String, ClassSpec>,
}

/// Radius ranges of the small and large scale-probe instances.
pub const PROBE_SMALL: (f64, f64) = (2.0, 4.0);
pub const PROBE_LARGE: (f64, f64) = (12.0, 14.0);
pub const PROBE_MIN_GRID: usize = 64;

/// Built-in phantom set for desk-scale training: two foreground classes of
/// different size, contrast and texture on a 40³ grid.
pub const DESK_PHANTOMS: &str = r#"
[phantom]
grid = [40, 40, 40]
background_mean = 0.0
background_noise = 0.1
seed = 2024

[class1]
count = 2
radius_min = 3
radius_max = 5
intensity_mean = 1.0
intensity_sigma = 0.05
texture_frequency = 0.25
texture_amplitude = 0.15

[class2]
count = 1
radius_min = 7
radius_max = 10
intensity_mean = -0.8
intensity_sigma = 0.05
texture_frequency = 0.06
texture_amplitude = 0.3
"#;

/// Built-in phantom set whose class 1 appears at small and large radii.
pub const SCALE_PROBE_PHANTOMS: &str = r#"
[phantom]
grid = [64, 64, 64]
background_mean = 0.0
background_noise = 0.1
seed = 77
scale_probe = 1

[class1]
count = 4
radius_min = 3
radius_max = 14
intensity_mean = 1.0
intensity_sigma = 0.05
texture_frequency = 0.2
texture_amplitude = 0.15

[class2]
count = 2
radius_min = 4
radius_max = 6
intensity_mean = -0.8
intensity_sigma = 0.05
texture_frequency = 0.08
texture_amplitude = 0.3
"#;

impl PhantomSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn desk() -> Self {
        Self::from_toml(DESK_PHANTOMS).expect("built-in spec is valid")
    }

    pub fn scale_probe() -> Self {
        Self::from_toml(SCALE_PROBE_PHANTOMS).expect("built-in spec is valid")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("phantom spec serializes")
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len() + 1
    }

    /// Class specs ordered by label.
    pub fn class(&self, label: usize) -> Option<&ClassSpec> {
        self.classes.get(&format!("class{label}"))
    }

    fn probe_active(&self) -> bool {
        self.phantom.scale_probe.is_some() && self.phantom.grid.iter().all(|&g| g >= PROBE_MIN_GRID)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.phantom;
        if g.grid.contains(&0) || g.channels == 0 {
            return Err(Error::Config("grid extents and channels must be at least 1".into()));
        }
        if self.classes.is_empty() || self.classes.len() > 255 {
            return Err(Error::Config("need between 1 and 255 [classN] sections".into()));
        }
        for label in 1..self.num_classes() {
            let c = self
                .class(label)
                .ok_or_else(|| Error::Config(format!("missing section [class{label}]")))?;
            if c.count == 0 || !(c.radius_min >= 1.0 && c.radius_max >= c.radius_min) {
                return Err(Error::Config(format!(
                    "class{label}: need count ≥ 1 and 1 ≤ radius_min ≤ radius_max"
                )));
            }
            let fits = g.grid.iter().all(|&e| 2.0 * c.radius_max + 1.0 <= e as f64);
            if !fits {
                return Err(Error::Config(format!("class{label}: radius_max does not fit the grid")));
            }
        }
        if let Some(p) = g.scale_probe {
            if p == 0 || p as usize >= self.num_classes() {
                return Err(Error::Config(format!("scale_probe {p} is not a foreground class")));
            }
        }
        Ok(())
    }

    /// Instance count and radius range per instance of class `label`.
    fn instance_plan(&self, label: usize) -> Vec<(f64, f64)> {
        let c = self.class(label).expect("validated");
        if self.probe_active() && self.phantom.scale_probe == Some(label as u8) {
            (0..c.count.max(2))
                .map(|i| if i % 2 == 0 { PROBE_LARGE } else { PROBE_SMALL })
                .collect()
        } else {
            vec![(c.radius_min, c.radius_max); c.count]
        }
    }
}

/// One rendered ellipsoid.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PhantomInstance {
    pub class: u8,
    pub center: [usize; 3],
    pub radii: [f64; 3],
}

impl PhantomInstance {
    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] as f64 - self.center[a] as f64) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    pub fn bounding_radius(&self) -> f64 {
        self.radii.iter().cloned().fold(0.0, f64::max)
    }

    pub fn volume(&self) -> f64 {
        4.0 / 3.0 * PI * self.radii.iter().product::<f64>()
    }
}

/// Renders phantom number `index` of a spec. Non-overlapping ellipsoids are
/// placed class by class with textured intensities over a noisy background;
/// image values are rounded to `f32` so the volume survives an `AFNV`
/// round trip unchanged.
pub fn generate_phantom(spec: &PhantomSpec, index: u64) -> Result<(VolumeRecord, Vec<PhantomInstance>)> {
    spec.validate()?;
    let g = &spec.phantom;
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
    rng.set_stream(index);
    let [d, h, w] = g.grid;

    let mut instances: Vec<PhantomInstance> = Vec::new();
    for label in 1..spec.num_classes() {
        for (rmin, rmax) in spec.instance_plan(label) {
            let mut placed = false;
            for _ in 0..PLACEMENT_RETRIES {
                let radii = [0; 3].map(|_: usize| rng.random_range(rmin..=rmax));
                let mut center = [0; 3];
                let mut fits = true;
                for ax in 0..3 {
                    let lo = radii[ax].ceil() as usize;
                    let hi = g.grid[ax] as isize - 1 - radii[ax].ceil() as isize;
                    if hi < lo as isize {
                        fits = false;
                        break;
                    }
                    center[ax] = rng.random_range(lo..=hi as usize);
                }
                let cand = PhantomInstance {
                    class: label as u8,
                    center,
                    radii,
                };
                let clear = fits
                    && instances.iter().all(|o| {
                        let dist = (0..3)
                            .map(|a| (o.center[a] as f64 - center[a] as f64).powi(2))
                            .sum::<f64>()
                            .sqrt();
                        dist > o.bounding_radius() + cand.bounding_radius() + 1.0
                    });
                if clear {
                    instances.push(cand);
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::invalid(format!(
                    "could not place an instance of class{label} within {PLACEMENT_RETRIES} attempts"
                )));
            }
        }
    }

    let vox = d * h * w;
    let mut labels = vec![0u8; vox];
    for inst in &instances {
        let r = inst.radii.map(|v| v.ceil() as usize);
        for z in inst.center[0] - r[0]..=inst.center[0] + r[0] {
            for y in inst.center[1] - r[1]..=inst.center[1] + r[1] {
                for x in inst.center[2] - r[2]..=inst.center[2] + r[2] {
                    if inst.contains([z, y, x]) {
                        labels[(z * h + y) * w + x] = inst.class;
                    }
                }
            }
        }
    }

    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut image = vec![0.0; g.channels * vox];
    for ch in 0..g.channels {
        let contrast = 1.0 / (1.0 + 0.5 * ch as f64);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let i = (z * h + y) * w + x;
                    let n: f64 = unit.sample(&mut rng);
                    let v = match labels[i] {
                        0 => g.background_mean + g.background_noise * n,
                        c => {
                            let cs = spec.class(c as usize).expect("validated");
                            let phase = 2.0 * PI * cs.texture_frequency * (x + y + z) as f64;
                            contrast * (cs.intensity_mean + cs.texture_amplitude * phase.sin())
                                + cs.intensity_sigma * n
                        }
                    };
                    image[ch * vox + i] = v as f32 as f64;
                }
            }
        }
    }
    let image = Tensor::from_values(&[g.channels, d, h, w], image)?;
    let labels = LabelVolume::new(g.grid, labels, spec.num_classes())?;
    let rec = VolumeRecord::new(format!("phantom_{index:03}"), image, labels, [1.0; 3])?;
    Ok((rec, instances))
}

/// A training patch copied out of a volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub origin: [usize; 3],
    /// Class drawn for the center voxel under class balancing.
    pub center_class: Option<u8>,
    pub image: Tensor,
    pub labels: LabelVolume,
}

/// Per-volume index of admissible segment centers by class.
#[derive(Clone, Debug)]
pub struct SegmentSampler {
    size: [usize; 3],
    spatial: [usize; 3],
    by_class: Vec<Vec<u32>>,
}

impl SegmentSampler {
    pub fn new(volume: &VolumeRecord, size: [usize; 3]) -> Result<Self> {
        let spatial = volume.spatial();
        if (0..3).any(|a| size[a] == 0 || size[a] > spatial[a]) {
            return Err(Error::shape(format!(
                "segment {size:?} larger than volume `{}` {spatial:?}",
                volume.id
            )));
        }
        let mut by_class = vec![Vec::new(); volume.labels.num_classes()];
        let [_, h, w] = spatial;
        for z in size[0] / 2..=spatial[0] - size[0] + size[0] / 2 {
            for y in size[1] / 2..=spatial[1] - size[1] + size[1] / 2 {
                for x in size[2] / 2..=spatial[2] - size[2] + size[2] / 2 {
                    let i = (z * h + y) * w + x;
                    by_class[volume.labels.data()[i] as usize].push(i as u32);
                }
            }
        }
        Ok(Self { size, spatial, by_class })
    }

    /// Classes with at least one admissible center voxel.
    pub fn classes(&self) -> Vec<u8> {
        (0..self.by_class.len())
            .filter(|&c| !self.by_class[c].is_empty())
            .map(|c| c as u8)
            .collect()
    }

    /// Draws one segment origin. With balancing the center class is uniform
    /// over [`Self::classes`], then the center voxel uniform within it.
    pub fn draw<R: Rng>(&self, rng: &mut R, balance: bool) -> ([usize; 3], Option<u8>) {
        if balance {
            let classes = self.classes();
            let c = classes[rng.random_range(0..classes.len())];
            let list = &self.by_class[c as usize];
            let i = list[rng.random_range(0..list.len())] as usize;
            let [_, h, w] = self.spatial;
            let center = [i / (h * w), (i / w) % h, i % w];
            (std::array::from_fn(|a| center[a] - self.size[a] / 2), Some(c))
        } else {
            (std::array::from_fn(|a| rng.random_range(0..=self.spatial[a] - self.size[a])), None)
        }
    }

    pub fn extract(&self, volume: &VolumeRecord, origin: [usize; 3], center_class: Option<u8>) -> Result<Segment> {
        let c = volume.channels();
        let image = volume.image.slice_block(
            &[0, origin[0], origin[1], origin[2]],
            &[c, self.size[0], self.size[1], self.size[2]],
        )?;
        Ok(Segment {
            origin,
            center_class,
            image,
            labels: volume.labels.block(origin, self.size)?,
        })
    }
}

/// `batch` segments of extents `size` from one volume, deterministic in
/// `seed`.
pub fn sample_segments(
    volume: &VolumeRecord,
    size: [usize; 3],
    batch: usize,
    balance: bool,
    seed: u64,
) -> Result<Vec<Segment>> {
    let sampler = SegmentSampler::new(volume, size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batch)
        .map(|_| {
            let (origin, class) = sampler.draw(&mut rng, balance);
            sampler.extract(volume, origin, class)
        })
        .collect()
}
