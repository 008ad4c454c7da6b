//! Deterministic synthetic scenes: colored geometric shapes on a value-noise
//! background, with image-level multi-hot labels and pixel masks.
//!
//! Every sample draws from its own ChaCha stream keyed by `(seed, id)`, so
//! generation order and thread scheduling never affect the output.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::imageio::quantize_u8;
use crate::parallel;

pub const DATASET_MAGIC: &[u8; 4] = b"MXDS";
pub const DATASET_VERSION: u32 = 1;

const MAX_PLACEMENT_TRIES: usize = 200;
/// Minimum fraction of a shape's own pixels that must stay visible.
pub const MIN_VISIBLE_FRACTION: f64 = 0.3;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid dataset config: {0}")]
    Config(String),
    #[error("sample {id}: could not place shapes after {tries} attempts")]
    Infeasible { id: u64, tries: usize },
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported dataset version {0}")]
    UnsupportedVersion(u32),
    #[error("dataset truncated while reading {0}")]
    Truncated(&'static str),
    #[error("malformed dataset: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Ring,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Ring,
        ShapeKind::Cross,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Ring => "ring",
            ShapeKind::Cross => "cross",
        }
    }

    fn mean_color(self) -> [f64; 3] {
        match self {
            ShapeKind::Circle => [0.82, 0.26, 0.22],
            ShapeKind::Square => [0.24, 0.72, 0.30],
            ShapeKind::Triangle => [0.22, 0.36, 0.84],
            ShapeKind::Ring => [0.84, 0.76, 0.22],
            ShapeKind::Cross => [0.72, 0.28, 0.74],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub classes: usize,
    pub extent: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    /// Shape diameter range as a fraction of the image extent.
    pub size_min: f64,
    pub size_max: f64,
    pub texture_amplitude: f64,
    pub train_size: usize,
    pub val_size: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            extent: 64,
            shapes_min: 1,
            shapes_max: 3,
            size_min: 0.25,
            size_max: 0.45,
            texture_amplitude: 0.12,
            train_size: 2000,
            val_size: 500,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let fail = |m: String| Err(DatasetError::Config(m));
        if !(2..=ShapeKind::ALL.len()).contains(&self.classes) {
            return fail(format!("class count must be in 2..=5, got {}", self.classes));
        }
        if self.extent < 8 || self.extent > u32::MAX as usize {
            return fail(format!("extent {} too small", self.extent));
        }
        if self.shapes_min == 0 || self.shapes_min > self.shapes_max {
            return fail(format!(
                "shapes per image range {}..={} is empty",
                self.shapes_min, self.shapes_max
            ));
        }
        if !(self.size_min > 0.0 && self.size_min <= self.size_max && self.size_max < 1.0) {
            return fail(format!(
                "size range [{}, {}] must lie within (0, 1)",
                self.size_min, self.size_max
            ));
        }
        if !(0.0..=0.5).contains(&self.texture_amplitude) {
            return fail(format!("texture amplitude {} outside [0, 0.5]", self.texture_amplitude));
        }
        Ok(())
    }
}

/// One synthetic image with its labels. `image` is planar `[3, H, W]` in
/// `[0, 1]`, quantized to multiples of 1/255; `mask` holds `0` for
/// background and `c + 1` for class `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub id: u64,
    pub image: Vec<f64>,
    pub label: Vec<f64>,
    pub mask: Vec<u8>,
}

impl SceneSample {
    pub fn valid_classes(&self) -> Vec<usize> {
        crate::classnet::ResponseMap::valid_from_label(&self.label)
    }
}

/// The training-side view of a sample: image and label only.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub id: u64,
    pub image: Vec<f64>,
    pub label: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<SceneSample>,
}

impl Dataset {
    pub fn empty(classes: usize, height: usize, width: usize) -> Self {
        Self {
            classes,
            height,
            width,
            samples: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn find(&self, id: u64) -> Option<&SceneSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Drops the masks; this is all the trainer ever receives.
    pub fn training_view(&self) -> Vec<LabeledImage> {
        self.samples
            .iter()
            .map(|s| LabeledImage {
                id: s.id,
                image: s.image.clone(),
                label: s.label.clone(),
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.height * self.width;
        let mut out = Vec::with_capacity(28 + self.samples.len() * (8 + 4 * n + self.classes));
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.classes as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.samples.len() as u64).to_le_bytes());
        for s in &self.samples {
            out.extend_from_slice(&s.id.to_le_bytes());
            out.extend_from_slice(&crate::imageio::planar_to_rgb8(&s.image, self.width, self.height));
            out.extend_from_slice(&s.mask);
            out.extend(s.label.iter().map(|&y| if y > 0.5 { 1u8 } else { 0u8 }));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DatasetError> {
        let mut pos = 0usize;
        let mut take = |n: usize, what: &'static str| -> Result<&[u8], DatasetError> {
            let end = pos.checked_add(n).ok_or(DatasetError::Truncated(what))?;
            let s = bytes.get(pos..end).ok_or(DatasetError::Truncated(what))?;
            pos = end;
            Ok(s)
        };
        let magic: [u8; 4] = take(4, "magic")?.try_into().expect("4 bytes");
        if &magic != DATASET_MAGIC {
            return Err(DatasetError::BadMagic(magic));
        }
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
        let version = u32_at(take(4, "version")?);
        if version != DATASET_VERSION {
            return Err(DatasetError::UnsupportedVersion(version));
        }
        let classes = u32_at(take(4, "class count")?) as usize;
        let height = u32_at(take(4, "height")?) as usize;
        let width = u32_at(take(4, "width")?) as usize;
        let count = u64::from_le_bytes(take(8, "sample count")?.try_into().expect("8 bytes"));
        let n = height
            .checked_mul(width)
            .ok_or_else(|| DatasetError::Malformed("extent overflow".into()))?;
        let mut samples = Vec::new();
        for _ in 0..count {
            let id = u64::from_le_bytes(take(8, "sample id")?.try_into().expect("8 bytes"));
            let rgb = take(3 * n, "image")?;
            let mut image = vec![0.0; 3 * n];
            for p in 0..n {
                for c in 0..3 {
                    image[c * n + p] = rgb[3 * p + c] as f64 / 255.0;
                }
            }
            let mask = take(n, "mask")?.to_vec();
            if let Some(&bad) = mask.iter().find(|&&m| m as usize > classes) {
                return Err(DatasetError::Malformed(format!("sample {id}: mask index {bad}")));
            }
            let label_bytes = take(classes, "label")?;
            if label_bytes.iter().any(|&b| b > 1) {
                return Err(DatasetError::Malformed(format!("sample {id}: label byte not 0/1")));
            }
            let label = label_bytes.iter().map(|&b| b as f64).collect();
            samples.push(SceneSample { id, image, label, mask });
        }
        if pos != bytes.len() {
            return Err(DatasetError::Malformed(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Self {
            classes,
            height,
            width,
            samples,
        })
    }
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    std::fs::write(path, dataset.to_bytes())?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    Dataset::from_bytes(&std::fs::read(path)?)
}

/// A shape's class and geometry, in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlacedShape {
    pub class: usize,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub angle: f64,
}

impl PlacedShape {
    pub fn kind(&self) -> ShapeKind {
        ShapeKind::ALL[self.class]
    }

    /// Point-in-shape test, evaluated at pixel centers for both rendering and masks.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        let r = self.radius;
        let d2 = dx * dx + dy * dy;
        match self.kind() {
            ShapeKind::Circle => d2 <= r * r,
            ShapeKind::Square => u.abs() <= 0.8 * r && v.abs() <= 0.8 * r,
            ShapeKind::Triangle => (0..3).all(|k| {
                let a = std::f64::consts::FRAC_PI_2 + k as f64 * 2.0 * std::f64::consts::FRAC_PI_3;
                u * a.cos() + v * a.sin() <= 0.5 * r
            }),
            ShapeKind::Ring => d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r),
            ShapeKind::Cross => (u.abs() <= r && v.abs() <= 0.3 * r) || (v.abs() <= r && u.abs() <= 0.3 * r),
        }
    }

    fn footprint(&self, extent: usize) -> Vec<usize> {
        let lo_y = ((self.cy - self.radius).floor().max(0.0)) as usize;
        let hi_y = ((self.cy + self.radius).ceil() as usize).min(extent);
        let lo_x = ((self.cx - self.radius).floor().max(0.0)) as usize;
        let hi_x = ((self.cx + self.radius).ceil() as usize).min(extent);
        let mut px = Vec::new();
        for y in lo_y..hi_y {
            for x in lo_x..hi_x {
                if self.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    px.push(y * extent + x);
                }
            }
        }
        px
    }
}

fn sample_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Shape placement for one sample, drawn so every shape keeps at least
/// [`MIN_VISIBLE_FRACTION`] of its pixels once later shapes are painted on top.
pub fn scene_layout(cfg: &DatasetConfig, id: u64) -> Result<Vec<PlacedShape>, DatasetError> {
    cfg.validate()?;
    let mut rng = sample_rng(cfg.seed, id);
    layout_with(cfg, id, &mut rng)
}

fn layout_with(cfg: &DatasetConfig, id: u64, rng: &mut ChaCha8Rng) -> Result<Vec<PlacedShape>, DatasetError> {
    let e = cfg.extent;
    let count = rng.random_range(cfg.shapes_min..=cfg.shapes_max);
    let mut shapes: Vec<PlacedShape> = Vec::with_capacity(count);
    let mut owner = vec![usize::MAX; e * e];
    let mut footprints: Vec<Vec<usize>> = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.random_range(0..cfg.classes);
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let diameter = rng.random_range(cfg.size_min..=cfg.size_max) * e as f64;
            let radius = diameter / 2.0;
            let shape = PlacedShape {
                class,
                cx: rng.random_range(radius..=e as f64 - radius),
                cy: rng.random_range(radius..=e as f64 - radius),
                radius,
                angle: rng.random_range(0.0..std::f64::consts::TAU),
            };
            let fp = shape.footprint(e);
            if fp.is_empty() {
                continue;
            }
            let mut covered = vec![0usize; shapes.len()];
            for &p in &fp {
                if owner[p] != usize::MAX {
                    covered[owner[p]] += 1;
                }
            }
            let ok = footprints.iter().enumerate().all(|(i, prev)| {
                let visible_before = prev.iter().filter(|&&p| owner[p] == i).count();
                (visible_before - covered[i]) as f64 >= MIN_VISIBLE_FRACTION * prev.len() as f64
            });
            if ok {
                let index = shapes.len();
                for &p in &fp {
                    owner[p] = index;
                }
                shapes.push(shape);
                footprints.push(fp);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(DatasetError::Infeasible {
                id,
                tries: MAX_PLACEMENT_TRIES,
            });
        }
    }
    Ok(shapes)
}

/// Smooth value noise in `[0, 1]`: a coarse random lattice with smoothstep
/// interpolation.
fn value_noise(rng: &mut ChaCha8Rng, extent: usize, cells: usize) -> Vec<f64> {
    let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.random::<f64>()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(extent * extent);
    for y in 0..extent {
        let fy = (y as f64 + 0.5) / extent as f64 * cells as f64;
        let iy = (fy as usize).min(cells - 1);
        let ty = smooth(fy - iy as f64);
        for x in 0..extent {
            let fx = (x as f64 + 0.5) / extent as f64 * cells as f64;
            let ix = (fx as usize).min(cells - 1);
            let tx = smooth(fx - ix as f64);
            let at = |yy: usize, xx: usize| lattice[yy * (cells + 1) + xx];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

pub fn generate_sample(cfg: &DatasetConfig, id: u64) -> Result<SceneSample, DatasetError> {
    cfg.validate()?;
    let mut rng = sample_rng(cfg.seed, id);
    let shapes = layout_with(cfg, id, &mut rng)?;
    let e = cfg.extent;
    let n = e * e;

    let base = rng.random_range(0.35..0.6);
    let mut image = vec![0.0; 3 * n];
    for c in 0..3 {
        let tint = rng.random_range(-0.05..0.05);
        let noise = value_noise(&mut rng, e, 6);
        for p in 0..n {
            image[c * n + p] = base + tint + cfg.texture_amplitude * (2.0 * noise[p] - 1.0);
        }
    }

    let mut mask = vec![0u8; n];
    let mut label = vec![0.0; cfg.classes];
    for shape in &shapes {
        let mean = shape.kind().mean_color();
        let color: Vec<f64> = mean.iter().map(|m| m + rng.random_range(-0.06..0.06)).collect();
        for p in shape.footprint(e) {
            mask[p] = (shape.class + 1) as u8;
            for c in 0..3 {
                image[c * n + p] = color[c] + rng.random_range(-0.08..0.08);
            }
        }
    }
    for &m in &mask {
        if m > 0 {
            label[m as usize - 1] = 1.0;
        }
    }
    for v in &mut image {
        *v = quantize_u8(*v) as f64 / 255.0;
    }
    Ok(SceneSample { id, image, label, mask })
}

/// Samples with ids `first_id..first_id + count`, in id order.
pub fn generate_split(cfg: &DatasetConfig, first_id: u64, count: usize) -> Result<Dataset, DatasetError> {
    cfg.validate()?;
    let samples = parallel::map_indexed(count, |i| generate_sample(cfg, first_id + i as u64));
    Ok(Dataset {
        classes: cfg.classes,
        height: cfg.extent,
        width: cfg.extent,
        samples: samples.into_iter().collect::<Result<_, _>>()?,
    })
}

/// Train split with ids `0..train_size`, validation split after it.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<(Dataset, Dataset), DatasetError> {
    let train = generate_split(cfg, 0, cfg.train_size)?;
    let val = generate_split(cfg, cfg.train_size as u64, cfg.val_size)?;
    Ok((train, val))
}
