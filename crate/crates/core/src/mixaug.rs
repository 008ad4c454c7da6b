//! Mixup and label-preserving geometric/photometric augmentation.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use thiserror::Error;

use crate::synthdata::{LabeledImage, SceneSample};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugmentError {
    #[error("Beta shape must be positive, got {0}")]
    InvalidAlpha(f64),
    #[error("mixing coefficient {0} outside [0, 1]")]
    InvalidLambda(f64),
    #[error("cannot mix samples of different shapes ({0} vs {1} values)")]
    ShapeMismatch(usize, usize),
    #[error("invalid augmentation config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Shape of the symmetric Beta distribution for the mixing coefficient.
    pub alpha: f64,
    pub flip_prob: f64,
    /// Crop side as a fraction of the image side, sampled uniformly.
    pub crop_min: f64,
    pub crop_max: f64,
    /// Zoom factor about the crop window, sampled uniformly.
    pub scale_min: f64,
    pub scale_max: f64,
    /// Per-channel gain in `1 ± jitter`, offset in `±jitter/2`.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            flip_prob: 0.5,
            crop_min: 0.85,
            crop_max: 1.0,
            scale_min: 0.9,
            scale_max: 1.1,
            jitter: 0.1,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// No-op augmentation.
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            crop_min: 1.0,
            crop_max: 1.0,
            scale_min: 1.0,
            scale_max: 1.0,
            jitter: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let fail = |m: String| Err(AugmentError::Config(m));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(AugmentError::InvalidAlpha(self.alpha));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return fail(format!("flip probability {} outside [0, 1]", self.flip_prob));
        }
        if self.crop_max > 1.0 {
            return fail(format!("crop fraction {} larger than the image", self.crop_max));
        }
        if !(self.crop_min > 0.0 && self.crop_min <= self.crop_max) {
            return fail(format!("crop range [{}, {}] invalid", self.crop_min, self.crop_max));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max.is_finite()) {
            return fail(format!("scale range [{}, {}] invalid", self.scale_min, self.scale_max));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return fail(format!("jitter amplitude {} outside [0, 1)", self.jitter));
        }
        Ok(())
    }
}

/// Draws `λ ~ Beta(α, α)` as `X / (X + Y)` with `X, Y ~ Gamma(α, 1)`.
pub fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64, AugmentError> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(AugmentError::InvalidAlpha(alpha));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|_| AugmentError::InvalidAlpha(alpha))?;
    let x = gamma.sample(rng);
    let y = gamma.sample(rng);
    let sum = x + y;
    // Both draws can underflow to zero for tiny α; the two outcomes are symmetric.
    if sum > 0.0 {
        Ok((x / sum).clamp(0.0, 1.0))
    } else {
        Ok(0.5)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixupSample {
    pub image: Vec<f64>,
    pub label: Vec<f64>,
    pub lambda: f64,
    pub sources: (u64, u64),
}

impl MixupSample {
    /// Classes with a positive mixed label entry.
    pub fn valid_classes(&self) -> Vec<usize> {
        crate::classnet::ResponseMap::valid_from_label(&self.label)
    }
}

/// `λ·first + (1 − λ)·second` on images and labels.
pub fn mixup(first: &LabeledImage, second: &LabeledImage, lambda: f64) -> Result<MixupSample, AugmentError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(AugmentError::InvalidLambda(lambda));
    }
    if first.image.len() != second.image.len() {
        return Err(AugmentError::ShapeMismatch(first.image.len(), second.image.len()));
    }
    if first.label.len() != second.label.len() {
        return Err(AugmentError::ShapeMismatch(first.label.len(), second.label.len()));
    }
    let blend = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| (lambda * x + (1.0 - lambda) * y).clamp(0.0, 1.0))
            .collect()
    };
    Ok(MixupSample {
        image: blend(&first.image, &second.image),
        label: blend(&first.label, &second.label),
        lambda,
        sources: (first.id, second.id),
    })
}

/// [`mixup`] on full scene samples (the masks are ignored).
pub fn mixup_scenes(first: &SceneSample, second: &SceneSample, lambda: f64) -> Result<MixupSample, AugmentError> {
    let view = |s: &SceneSample| LabeledImage {
        id: s.id,
        image: s.image.clone(),
        label: s.label.clone(),
    };
    mixup(&view(first), &view(second), lambda)
}

/// One draw of augmentation parameters, applied identically to an image
/// and its mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentPlan {
    pub flip: bool,
    pub crop: f64,
    pub offset: (f64, f64),
    pub scale: f64,
    pub gain: [f64; 3],
    pub bias: [f64; 3],
}

impl AugmentPlan {
    pub fn identity() -> Self {
        Self {
            flip: false,
            crop: 1.0,
            offset: (0.0, 0.0),
            scale: 1.0,
            gain: [1.0; 3],
            bias: [0.0; 3],
        }
    }

    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Result<Self, AugmentError> {
        cfg.validate()?;
        let flip = rng.random::<f64>() < cfg.flip_prob;
        let crop = rng.random_range(cfg.crop_min..=cfg.crop_max);
        let offset = (rng.random::<f64>(), rng.random::<f64>());
        let scale = rng.random_range(cfg.scale_min..=cfg.scale_max);
        let mut gain = [1.0; 3];
        let mut bias = [0.0; 3];
        for c in 0..3 {
            gain[c] = 1.0 + cfg.jitter * (2.0 * rng.random::<f64>() - 1.0);
            bias[c] = 0.5 * cfg.jitter * (2.0 * rng.random::<f64>() - 1.0);
        }
        Ok(Self {
            flip,
            crop,
            offset,
            scale,
            gain,
            bias,
        })
    }

    fn is_geometric_identity(&self) -> bool {
        self.crop == 1.0 && self.scale == 1.0
    }

    /// Source coordinate (continuous, pixel units) for destination `(x, y)` centers.
    fn source(&self, x: usize, y: usize, extent: usize) -> (f64, f64) {
        let e = extent as f64;
        let window = e * self.crop / self.scale;
        let origin = |frac: f64| {
            if window <= e {
                frac * (e - window)
            } else {
                (e - window) / 2.0
            }
        };
        let (ox, oy) = (origin(self.offset.0), origin(self.offset.1));
        let mut dx = x as f64 + 0.5;
        if self.flip {
            dx = e - dx;
        }
        let dy = y as f64 + 0.5;
        (ox + dx * window / e, oy + dy * window / e)
    }

    /// Planar `[3, H, W]` image, bilinear resampling with edge replication.
    pub fn apply_image(&self, image: &[f64], extent: usize) -> Vec<f64> {
        let n = extent * extent;
        assert_eq!(image.len(), 3 * n, "image size");
        let mut out = vec![0.0; 3 * n];
        let last = (extent - 1) as f64;
        for y in 0..extent {
            for x in 0..extent {
                let p = y * extent + x;
                if self.is_geometric_identity() {
                    let sx = if self.flip { extent - 1 - x } else { x };
                    for c in 0..3 {
                        out[c * n + p] = image[c * n + y * extent + sx];
                    }
                    continue;
                }
                let (sx, sy) = self.source(x, y, extent);
                let fx = (sx - 0.5).clamp(0.0, last);
                let fy = (sy - 0.5).clamp(0.0, last);
                let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(extent - 1), (y0 + 1).min(extent - 1));
                let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
                for c in 0..3 {
                    let at = |yy: usize, xx: usize| image[c * n + yy * extent + xx];
                    let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                    let bottom = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                    out[c * n + p] = top * (1.0 - ty) + bottom * ty;
                }
            }
        }
        for c in 0..3 {
            for v in &mut out[c * n..(c + 1) * n] {
                *v = (*v * self.gain[c] + self.bias[c]).clamp(0.0, 1.0);
            }
        }
        out
    }

    /// `[H, W]` class mask, nearest-neighbour resampling with the same geometry.
    pub fn apply_mask(&self, mask: &[u8], extent: usize) -> Vec<u8> {
        assert_eq!(mask.len(), extent * extent, "mask size");
        let mut out = vec![0u8; extent * extent];
        for y in 0..extent {
            for x in 0..extent {
                let (sx, sy) = self.source(x, y, extent);
                let ix = (sx.floor().max(0.0) as usize).min(extent - 1);
                let iy = (sy.floor().max(0.0) as usize).min(extent - 1);
                out[y * extent + x] = mask[iy * extent + ix];
            }
        }
        out
    }
}

fn extent_of(image: &[f64]) -> usize {
    let e = ((image.len() / 3) as f64).sqrt().round() as usize;
    assert_eq!(3 * e * e, image.len(), "square 3-channel image expected");
    e
}

/// Random flip/crop/scale/jitter. The label is unchanged; the mask follows
/// the image geometry exactly.
pub fn label_preserving_augment<R: Rng + ?Sized>(
    sample: &SceneSample,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<SceneSample, AugmentError> {
    let plan = AugmentPlan::sample(cfg, rng)?;
    let extent = extent_of(&sample.image);
    Ok(SceneSample {
        id: sample.id,
        image: plan.apply_image(&sample.image, extent),
        label: sample.label.clone(),
        mask: plan.apply_mask(&sample.mask, extent),
    })
}

/// Training-path variant operating on an image/label view.
pub fn augment_view<R: Rng + ?Sized>(
    sample: &LabeledImage,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<LabeledImage, AugmentError> {
    let plan = AugmentPlan::sample(cfg, rng)?;
    let extent = extent_of(&sample.image);
    Ok(LabeledImage {
        id: sample.id,
        image: plan.apply_image(&sample.image, extent),
        label: sample.label.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn view(id: u64, pixel: f64, label: &[f64]) -> LabeledImage {
        LabeledImage {
            id,
            image: vec![pixel; 3 * 4 * 4],
            label: label.to_vec(),
        }
    }

    fn scene(seed: u64) -> SceneSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = 16;
        SceneSample {
            id: seed,
            image: (0..3 * e * e).map(|_| rng.random::<f64>()).collect(),
            label: vec![1.0, 0.0, 1.0],
            mask: (0..e * e).map(|_| rng.random_range(0..4u8)).collect(),
        }
    }

    #[test]
    fn mixup_arithmetic() {
        let a = view(1, 1.0, &[1.0, 0.0]);
        let b = view(2, 0.0, &[0.0, 1.0]);
        let m = mixup(&a, &b, 0.6).unwrap();
        assert!(m.image.iter().all(|&v| (v - 0.6).abs() < 1e-15));
        assert!((m.label[0] - 0.6).abs() < 1e-15 && (m.label[1] - 0.4).abs() < 1e-15);
        assert_eq!(m.sources, (1, 2));
        let one = mixup(&a, &b, 1.0).unwrap();
        assert_eq!((one.image, one.label), (a.image.clone(), a.label.clone()));
        let m = mixup(&view(1, 0.2, &[1.0, 1.0, 0.0]), &view(2, 0.2, &[0.0, 1.0, 0.0]), 0.3).unwrap();
        assert_eq!(m.label, vec![0.3, 1.0, 0.0]);
        assert_eq!(m.valid_classes(), vec![0, 1]);
    }

    #[test]
    fn mixup_errors() {
        let a = view(1, 1.0, &[1.0, 0.0]);
        assert!(matches!(mixup(&a, &a, 1.5), Err(AugmentError::InvalidLambda(_))));
        let mut b = a.clone();
        b.image.pop();
        assert!(matches!(mixup(&a, &b, 0.5), Err(AugmentError::ShapeMismatch(..))));
    }

    #[test]
    fn lambda_rejects_bad_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_lambda(0.0, &mut rng).is_err());
        assert!(sample_lambda(-1.0, &mut rng).is_err());
        for _ in 0..1000 {
            let l = sample_lambda(0.2, &mut rng).unwrap();
            assert!((0.0..=1.0).contains(&l));
        }
    }

    #[test]
    fn double_flip_is_identity() {
        let s = scene(3);
        let cfg = AugmentConfig {
            flip_prob: 1.0,
            ..AugmentConfig::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let once = label_preserving_augment(&s, &cfg, &mut rng).unwrap();
        assert_ne!(once.image, s.image);
        let twice = label_preserving_augment(&once, &cfg, &mut rng).unwrap();
        assert_eq!(twice, s);
    }

    #[test]
    fn identity_config_is_noop() {
        let s = scene(4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(
            label_preserving_augment(&s, &AugmentConfig::identity(), &mut rng).unwrap(),
            s
        );
    }

    #[test]
    fn oversized_crop_is_rejected() {
        let cfg = AugmentConfig {
            crop_max: 1.2,
            ..AugmentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(
            label_preserving_augment(&scene(1), &cfg, &mut rng),
            Err(AugmentError::Config(_))
        ));
    }

    #[test]
    fn augmentation_keeps_range_and_label() {
        let s = scene(5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let a = label_preserving_augment(&s, &AugmentConfig::default(), &mut rng).unwrap();
            assert_eq!(a.label, s.label);
            assert!(a.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(a.mask.iter().all(|&m| m < 4));
        }
    }
}
