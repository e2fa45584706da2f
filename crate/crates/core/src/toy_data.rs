//! Procedural multi-domain "toy ocular" datasets.
//!
//! Every image is a dark pupil disc inside a radially textured iris annulus on
//! a bright surround. Presentation-attack domains are the same rendering with
//! an overlay: a halftone dot grid with contrast compression ("print") or a
//! concentric ring texture over the iris ("lens").

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::rng::{stream_rng, Rng};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DomainLabel {
    pub index: usize,
    pub name: String,
}

impl DomainLabel {
    pub fn new(index: usize, name: impl Into<String>) -> Self {
        Self {
            index,
            name: name.into(),
        }
    }
}

/// Checks that labels are non-empty, unique, contiguous from 0 and at least two.
pub fn validate_domains(domains: &[DomainLabel]) -> Result<()> {
    ensure(domains.len() >= 2, || {
        format!("need at least 2 domains, got {}", domains.len())
    })?;
    for (i, d) in domains.iter().enumerate() {
        ensure(d.index == i, || {
            format!("domain `{}` has index {}, expected {i}", d.name, d.index)
        })?;
        ensure(!d.name.is_empty(), || format!("domain {i} has an empty name"))?;
        ensure(
            !d.name.contains(['/', '\\']) && d.name != "." && d.name != "..",
            || format!("domain name `{}` is not a plain directory name", d.name),
        )?;
    }
    for (i, a) in domains.iter().enumerate() {
        for b in &domains[i + 1..] {
            ensure(a.name != b.name, || format!("duplicate domain name `{}`", a.name))?;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainEffect {
    None,
    HalftoneOverlay,
    RingOverlay,
}

impl DomainEffect {
    /// The effect conventionally used for a domain name; unknown names render plain.
    pub fn for_name(name: &str) -> Self {
        match name {
            "print" | "printed" | "printed_eye" => DomainEffect::HalftoneOverlay,
            "lens" | "contact_lens" | "cosmetic_lens" => DomainEffect::RingOverlay,
            _ => DomainEffect::None,
        }
    }
}

/// A domain of a toy dataset: its label and the overlay that defines it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyDomain {
    pub label: DomainLabel,
    pub effect: DomainEffect,
}

impl ToyDomain {
    /// bonafide / print / lens.
    pub fn standard() -> Vec<ToyDomain> {
        ["bonafide", "print", "lens"]
            .iter()
            .enumerate()
            .map(|(i, n)| ToyDomain {
                label: DomainLabel::new(i, *n),
                effect: DomainEffect::for_name(n),
            })
            .collect()
    }

    pub fn from_labels(labels: &[DomainLabel]) -> Vec<ToyDomain> {
        labels
            .iter()
            .map(|l| ToyDomain {
                label: l.clone(),
                effect: DomainEffect::for_name(&l.name),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyDomainSpec {
    pub image_size: usize,
    pub channels: usize,
    /// Pupil radius as a fraction of the image width.
    pub pupil_radius_range: (f64, f64),
    /// Outer iris radius as a fraction of the image width.
    pub iris_radius_range: (f64, f64),
    /// Angular texture cycles around the iris.
    pub iris_texture_frequency_range: (f64, f64),
    /// Effect used by [`render_sample`]; datasets take the effect per domain.
    pub domain_effect: DomainEffect,
    pub effect_strength: f64,
    pub seed: u64,
}

impl Default for ToyDomainSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 1,
            pupil_radius_range: (0.08, 0.14),
            iris_radius_range: (0.28, 0.38),
            iris_texture_frequency_range: (6.0, 12.0),
            domain_effect: DomainEffect::None,
            effect_strength: 0.8,
            seed: 0,
        }
    }
}

impl ToyDomainSpec {
    pub fn validate(&self) -> Result<()> {
        ensure(self.image_size >= 8, || {
            format!("image_size must be at least 8, got {}", self.image_size)
        })?;
        ensure(matches!(self.channels, 1 | 3), || {
            format!("channels must be 1 or 3, got {}", self.channels)
        })?;
        for (name, (lo, hi)) in [
            ("pupil_radius_range", self.pupil_radius_range),
            ("iris_radius_range", self.iris_radius_range),
        ] {
            ensure(lo > 0.0 && lo <= hi && hi < 0.5, || {
                format!("{name} must satisfy 0 < lo <= hi < 0.5, got ({lo}, {hi})")
            })?;
        }
        ensure(self.pupil_radius_range.1 < self.iris_radius_range.0, || {
            "pupil radii must stay below iris radii".to_string()
        })?;
        let (flo, fhi) = self.iris_texture_frequency_range;
        ensure(flo > 0.0 && flo <= fhi, || {
            format!("iris_texture_frequency_range must be positive and ordered, got ({flo}, {fhi})")
        })?;
        ensure((0.0..=1.0).contains(&self.effect_strength), || {
            format!("effect_strength must lie in [0, 1], got {}", self.effect_strength)
        })?;
        Ok(())
    }
}

/// Per-sample geometry drawn from the spec's ranges.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    cx: f64,
    cy: f64,
    pupil: f64,
    iris: f64,
    freq: f64,
    rotation: f64,
    iris_level: f64,
    sclera_level: f64,
    twist: f64,
}

impl Geometry {
    fn sample(spec: &ToyDomainSpec, rng: &mut Rng) -> Self {
        let mut u = |lo: f64, hi: f64| if hi > lo { rng.random_range(lo..hi) } else { lo };
        Self {
            cx: 0.5 + u(-0.04, 0.04),
            cy: 0.5 + u(-0.04, 0.04),
            pupil: u(spec.pupil_radius_range.0, spec.pupil_radius_range.1),
            iris: u(spec.iris_radius_range.0, spec.iris_radius_range.1),
            freq: u(spec.iris_texture_frequency_range.0, spec.iris_texture_frequency_range.1)
                .round(),
            rotation: u(0.0, std::f64::consts::TAU),
            iris_level: u(0.32, 0.5),
            sclera_level: u(0.78, 0.92),
            twist: u(-1.5, 1.5),
        }
    }
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn render_with(
    spec: &ToyDomainSpec,
    geo: &Geometry,
    effect: DomainEffect,
    strength: f64,
) -> Vec<f64> {
    let n = spec.image_size;
    let px = 1.0 / n as f64;
    let edge = 1.5 * px;
    let mut out = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let fx = (x as f64 + 0.5) * px - geo.cx;
            let fy = (y as f64 + 0.5) * px - geo.cy;
            let r = (fx * fx + fy * fy).sqrt();
            let theta = fy.atan2(fx);
            let radial = ((r - geo.pupil) / (geo.iris - geo.pupil)).clamp(0.0, 1.0);
            let texture = 0.14
                * (geo.freq * theta + geo.rotation + geo.twist * radial * std::f64::consts::PI)
                    .sin()
                * (0.6 + 0.4 * (radial * std::f64::consts::PI).sin());
            let iris_val = geo.iris_level + texture;
            let in_iris = 1.0 - smoothstep(geo.iris - edge, geo.iris + edge, r);
            let in_pupil = 1.0 - smoothstep(geo.pupil - edge, geo.pupil + edge, r);
            let mut v = geo.sclera_level * (1.0 - in_iris) + iris_val * in_iris;
            v = v * (1.0 - in_pupil) + 0.06 * in_pupil;
            match effect {
                DomainEffect::None => {}
                DomainEffect::HalftoneOverlay => {
                    let period = 4.0;
                    let dx = 0.5 * (1.0 + (std::f64::consts::TAU * x as f64 / period).cos());
                    let dy = 0.5 * (1.0 + (std::f64::consts::TAU * y as f64 / period).cos());
                    let compressed = 0.5 + (v - 0.5) * (1.0 - 0.4 * strength);
                    v = compressed * (1.0 - 0.6 * strength * dx * dy) + 0.08 * strength;
                }
                DomainEffect::RingOverlay => {
                    let in_annulus = (1.0 - smoothstep(geo.iris - edge, geo.iris + edge, r))
                        * smoothstep(geo.pupil, geo.pupil + 2.0 * edge, r);
                    let ring_period_px = 6.0;
                    let rings = (std::f64::consts::TAU * r * n as f64 / ring_period_px).cos();
                    v += in_annulus * strength * 0.25 * rings;
                }
            }
            out.push(v.clamp(0.0, 1.0));
        }
    }
    out
}

fn to_bytes(spec: &ToyDomainSpec, plane: &[f64]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(plane.len() * spec.channels);
    for &v in plane {
        let b = (v * 255.0).round() as u8;
        for _ in 0..spec.channels {
            bytes.push(b);
        }
    }
    bytes
}

/// Renders sample `index` of `spec` with `spec.domain_effect`, as interleaved
/// 8-bit pixels (`H × W × C`). Geometry depends only on `(spec.seed, index)`,
/// so renderings with different effects share the same eye.
pub fn render_sample(spec: &ToyDomainSpec, index: u64) -> Result<Vec<u8>> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, index);
    let geo = Geometry::sample(spec, &mut rng);
    Ok(to_bytes(
        spec,
        &render_with(spec, &geo, spec.domain_effect, spec.effect_strength),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub image_size: usize,
    pub channels: usize,
    pub count: usize,
    pub domains: Vec<ToyDomain>,
    pub effect_strength: f64,
    pub spec: ToyDomainSpec,
}

fn stream_for(domain: usize, i: usize) -> u64 {
    ((domain as u64) << 32) | i as u64
}

pub(crate) fn write_png(path: &Path, bytes: &[u8], size: usize, channels: usize) -> Result<()> {
    let color = if channels == 3 {
        image::ExtendedColorType::Rgb8
    } else {
        image::ExtendedColorType::L8
    };
    image::save_buffer_with_format(
        path,
        bytes,
        size as u32,
        size as u32,
        color,
        image::ImageFormat::Png,
    )
    .map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Decode {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable manifest");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Writes `per_domain_count` images per domain under `root/<domain>/<i>.png`
/// plus `root/manifest.json`. Output is byte-identical for a fixed spec.
pub fn generate_toy_dataset(
    spec: &ToyDomainSpec,
    per_domain_count: usize,
    domains: &[ToyDomain],
    root: &Path,
) -> Result<DatasetManifest> {
    spec.validate()?;
    ensure(per_domain_count >= 1, || "per_domain_count must be at least 1".into())?;
    let labels: Vec<DomainLabel> = domains.iter().map(|d| d.label.clone()).collect();
    validate_domains(&labels)?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for d in domains {
        let dir = root.join(&d.label.name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        (0..per_domain_count).into_par_iter().try_for_each(|i| {
            let mut rng = stream_rng(spec.seed, stream_for(d.label.index, i));
            let geo = Geometry::sample(spec, &mut rng);
            let plane = render_with(spec, &geo, d.effect, spec.effect_strength);
            let path = dir.join(format!("{i}.png"));
            write_png(&path, &to_bytes(spec, &plane), spec.image_size, spec.channels)
        })?;
    }
    let manifest = DatasetManifest {
        seed: spec.seed,
        image_size: spec.image_size,
        channels: spec.channels,
        count: per_domain_count,
        domains: domains.to_vec(),
        effect_strength: spec.effect_strength,
        spec: spec.clone(),
    };
    write_json(&root.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("invalid manifest {}: {e}", path.display())))
}

/// Domain labels of a dataset directory: from its manifest when present,
/// otherwise its subdirectories in name order.
pub fn discover_domains(root: &Path) -> Result<Vec<DomainLabel>> {
    if root.join(MANIFEST_FILE).exists() {
        return Ok(read_manifest(root)?
            .domains
            .into_iter()
            .map(|d| d.label)
            .collect());
    }
    let mut names = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().is_dir() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    ensure(!names.is_empty(), || {
        format!("{} contains no domain directories", root.display())
    })?;
    Ok(names
        .into_iter()
        .enumerate()
        .map(|(i, n)| DomainLabel::new(i, n))
        .collect())
}

/// PNG files of a directory, ordered by numeric stem and then by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            files.push(path);
        }
    }
    files.sort_by_key(|p| {
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("").to_string();
        (stem.parse::<u64>().unwrap_or(u64::MAX), stem)
    });
    Ok(files)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub domains: Vec<DomainLabel>,
    pub train: Vec<(PathBuf, DomainLabel)>,
    pub test: Vec<(PathBuf, DomainLabel)>,
    pub split_fraction: f64,
}

/// Number of training samples out of `n`: `floor(n · fraction)`, kept inside
/// `[1, n − 1]` so both sides are non-empty.
pub fn train_count(n: usize, fraction: f64) -> usize {
    let raw = (n as f64 * fraction + 1e-9).floor() as usize;
    raw.clamp(1, n - 1)
}

/// Per-domain stratified split, shuffled deterministically from `seed`.
pub fn split_dataset(root: &Path, fraction: f64, seed: u64) -> Result<DatasetSplit> {
    ensure(fraction > 0.0 && fraction < 1.0, || {
        format!("split fraction must lie in (0, 1), got {fraction}")
    })?;
    let domains = discover_domains(root)?;
    let mut split = DatasetSplit {
        domains: domains.clone(),
        train: Vec::new(),
        test: Vec::new(),
        split_fraction: fraction,
    };
    for d in &domains {
        let dir = root.join(&d.name);
        let mut files = list_images(&dir)?;
        ensure(files.len() >= 2, || {
            format!(
                "domain directory {} has {} images; at least 2 required",
                dir.display(),
                files.len()
            )
        })?;
        let mut rng = stream_rng(seed, d.index as u64);
        files.shuffle(&mut rng);
        let n_train = train_count(files.len(), fraction);
        for (i, f) in files.into_iter().enumerate() {
            if i < n_train {
                split.train.push((f, d.clone()));
            } else {
                split.test.push((f, d.clone()));
            }
        }
    }
    Ok(split)
}

/// A batch of images in `[-1, 1]` with one domain index per image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub data: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl ImageBatch {
    pub fn new(data: Tensor<f32>, labels: Vec<usize>) -> Result<Self> {
        ensure(data.rank() == 4, || format!("image batch must be rank 4, got {:?}", data.shape()))?;
        ensure(data.dim(0) >= 1, || "image batch is empty".into())?;
        ensure(matches!(data.dim(1), 1 | 3), || {
            format!("image batch must have 1 or 3 channels, got {}", data.dim(1))
        })?;
        ensure(labels.len() == data.dim(0), || {
            format!("{} labels for {} images", labels.len(), data.dim(0))
        })?;
        ensure(
            data.data().iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)),
            || "image batch has values outside [-1, 1] or non-finite".into(),
        )?;
        Ok(Self { data, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.data.dim(1), self.data.dim(2), self.data.dim(3)]
    }

    pub fn select(&self, idx: &[usize]) -> ImageBatch {
        ImageBatch {
            data: self.data.select_outer(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn concat(parts: &[&ImageBatch]) -> ImageBatch {
        let tensors: Vec<&Tensor<f32>> = parts.iter().map(|p| &p.data).collect();
        ImageBatch {
            data: Tensor::concat_outer(&tensors),
            labels: parts.iter().flat_map(|p| p.labels.iter().copied()).collect(),
        }
    }
}

/// Maps an 8-bit pixel to `[-1, 1]`.
pub fn byte_to_unit(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

/// Maps `[-1, 1]` back to an 8-bit pixel, clamping.
pub fn unit_to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Decodes a PNG into a `C × H × W` plane in `[-1, 1]`.
pub fn load_image(path: &Path, channels: usize) -> Result<(Vec<f32>, usize, usize)> {
    let img = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Vec::with_capacity(channels * w * h);
    if channels == 1 {
        out.extend(img.to_luma8().as_raw().iter().map(|&b| byte_to_unit(b)));
    } else {
        let rgb = img.to_rgb8();
        for c in 0..3 {
            out.extend(rgb.as_raw().iter().skip(c).step_by(3).map(|&b| byte_to_unit(b)));
        }
    }
    Ok((out, h, w))
}

/// Writes a `C × H × W` plane in `[-1, 1]` as an 8-bit PNG.
pub fn save_image(path: &Path, plane: &[f32], channels: usize, size: usize) -> Result<()> {
    let hw = size * size;
    let mut bytes = Vec::with_capacity(plane.len());
    for p in 0..hw {
        for c in 0..channels {
            bytes.push(unit_to_byte(plane[c * hw + p]));
        }
    }
    write_png(path, &bytes, size, channels)
}

/// Decoded images kept in memory, in list order.
#[derive(Clone, Debug)]
pub struct ImageSet {
    pub channels: usize,
    pub size: usize,
    pixels: Vec<f32>,
    pub labels: Vec<usize>,
    pub paths: Vec<PathBuf>,
}

impl ImageSet {
    pub fn load(items: &[(PathBuf, DomainLabel)], channels: usize) -> Result<Self> {
        ensure(!items.is_empty(), || "no images to load".into())?;
        let mut pixels = Vec::new();
        let mut size = 0;
        for (path, _) in items {
            let (plane, h, w) = load_image(path, channels)?;
            if h != w || (size != 0 && h != size) {
                return Err(Error::Decode {
                    path: path.clone(),
                    message: format!("expected {size}x{size} image, got {w}x{h}"),
                });
            }
            size = h;
            pixels.extend(plane);
        }
        Ok(Self {
            channels,
            size,
            pixels,
            labels: items.iter().map(|(_, l)| l.index).collect(),
            paths: items.iter().map(|(p, _)| p.clone()).collect(),
        })
    }

    pub fn from_batch(batch: &ImageBatch) -> Self {
        Self {
            channels: batch.data.dim(1),
            size: batch.data.dim(2),
            pixels: batch.data.data().to_vec(),
            labels: batch.labels.clone(),
            paths: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_len(&self) -> usize {
        self.channels * self.size * self.size
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn batch(&self, idx: &[usize]) -> ImageBatch {
        let n = self.image_len();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(self.image(i));
        }
        ImageBatch {
            data: Tensor::from_vec(&[idx.len(), self.channels, self.size, self.size], data),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn all(&self) -> ImageBatch {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }

    /// Indices of images with domain `label`.
    pub fn indices_of(&self, label: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == label).collect()
    }

    /// Consecutive batches of at most `batch_size`, in order.
    pub fn chunks(&self, batch_size: usize) -> impl Iterator<Item = ImageBatch> + '_ {
        let n = self.len();
        (0..n.div_ceil(batch_size)).map(move |c| {
            let idx: Vec<usize> = (c * batch_size..((c + 1) * batch_size).min(n)).collect();
            self.batch(&idx)
        })
    }
}

/// Epoch-shuffled sampling without replacement. The permutation of each
/// epoch is derived from `(seed, epoch)`, so `(epoch, cursor)` is the whole state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSampler {
    pub seed: u64,
    pub len: usize,
    pub epoch: u64,
    pub cursor: usize,
    #[serde(skip)]
    order: Vec<usize>,
}

impl BatchSampler {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut s = Self {
            seed,
            len,
            epoch: 0,
            cursor: 0,
            order: Vec::new(),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.len).collect();
        let mut rng = stream_rng(self.seed, self.epoch);
        self.order.shuffle(&mut rng);
    }

    /// Recomputes the permutation after deserialization.
    pub fn restore(mut self) -> Self {
        self.reshuffle();
        self
    }

    /// Next indices; the final batch of an epoch may be shorter.
    pub fn next_indices(&mut self, batch_size: usize) -> Vec<usize> {
        if self.order.len() != self.len {
            self.reshuffle();
        }
        if self.cursor >= self.len {
            self.epoch += 1;
            self.cursor = 0;
            self.reshuffle();
        }
        let end = (self.cursor + batch_size).min(self.len);
        let idx = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        idx
    }
}

/// Draws the next training batch from an in-memory image set.
pub fn next_batch(
    images: &ImageSet,
    batch_size: usize,
    sampler: &mut BatchSampler,
) -> Result<ImageBatch> {
    ensure(batch_size >= 1 && batch_size <= images.len(), || {
        format!(
            "batch_size {batch_size} must lie in [1, {}] (training set size)",
            images.len()
        )
    })?;
    ensure(sampler.len == images.len(), || "sampler does not match image set".into())?;
    Ok(images.batch(&sampler.next_indices(batch_size)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane(spec: &ToyDomainSpec, effect: DomainEffect, strength: f64, index: u64) -> Vec<f64> {
        let mut s = spec.clone();
        s.domain_effect = effect;
        s.effect_strength = strength;
        render_sample(&s, index)
            .unwrap()
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect()
    }

    fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
    }

    #[test]
    fn overlays_change_the_image() {
        let spec = ToyDomainSpec {
            seed: 7,
            ..Default::default()
        };
        for index in 0..10 {
            let base = plane(&spec, DomainEffect::HalftoneOverlay, 0.0, index);
            let printed = plane(&spec, DomainEffect::HalftoneOverlay, 0.8, index);
            assert!(mean_abs_diff(&base, &printed) > 0.05);
            let lens = plane(&spec, DomainEffect::RingOverlay, 0.8, index);
            assert!(mean_abs_diff(&base, &lens) > 0.01);
        }
    }

    #[test]
    fn zero_strength_matches_plain_rendering() {
        let spec = ToyDomainSpec::default();
        let plain = plane(&spec, DomainEffect::None, 0.8, 3);
        let halftone0 = plane(&spec, DomainEffect::HalftoneOverlay, 0.0, 3);
        assert_eq!(plain, halftone0);
    }

    #[test]
    fn spec_validation() {
        let bad = ToyDomainSpec {
            pupil_radius_range: (0.2, 0.1),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ToyDomainSpec {
            iris_radius_range: (0.3, 0.6),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ToyDomainSpec {
            channels: 2,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(ToyDomainSpec::default().validate().is_ok());
    }

    #[test]
    fn train_count_rule() {
        assert_eq!(train_count(10, 0.7), 7);
        assert_eq!(train_count(3, 0.7), 2);
        assert_eq!(train_count(2, 0.7), 1);
        assert_eq!(train_count(500, 0.7), 350);
        assert_eq!(train_count(2, 0.99), 1);
    }

    #[test]
    fn affine_pixel_map_endpoints() {
        assert_eq!(byte_to_unit(255), 1.0);
        assert_eq!(byte_to_unit(0), -1.0);
        assert_eq!(unit_to_byte(1.0), 255);
        assert_eq!(unit_to_byte(-1.0), 0);
        for b in 0..=255u8 {
            assert_eq!(unit_to_byte(byte_to_unit(b)), b);
        }
    }

    #[test]
    fn sampler_covers_epoch_exactly_once() {
        let mut s = BatchSampler::new(21, 4);
        let mut seen = Vec::new();
        let sizes: Vec<usize> = (0..21usize.div_ceil(8))
            .map(|_| {
                let idx = s.next_indices(8);
                seen.extend(idx.iter().copied());
                idx.len()
            })
            .collect();
        assert_eq!(sizes, vec![8, 8, 5]);
        seen.sort();
        assert_eq!(seen, (0..21).collect::<Vec<_>>());
        assert_eq!(s.next_indices(8).len(), 8);
        assert_eq!(s.epoch, 1);
    }

    #[test]
    fn domain_validation() {
        assert!(validate_domains(&[DomainLabel::new(0, "a")]).is_err());
        assert!(validate_domains(&[DomainLabel::new(0, "a"), DomainLabel::new(1, "a")]).is_err());
        assert!(validate_domains(&[DomainLabel::new(0, "a"), DomainLabel::new(2, "b")]).is_err());
        assert!(validate_domains(&[DomainLabel::new(0, "a"), DomainLabel::new(1, "")]).is_err());
        assert!(validate_domains(&[DomainLabel::new(0, "a"), DomainLabel::new(1, "b")]).is_ok());
    }
}
