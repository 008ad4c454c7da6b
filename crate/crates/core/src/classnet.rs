//! Plain CNN feature extractor, global average pooling and a single linear
//! classifier, plus class activation maps derived from the same weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::diffcore::{DiffError, ParamSet, Tape, Tensor, Var};

/// Threshold below which a maximum or a sum counts as zero.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClassNetError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("parameter `{0}` missing or misshapen")]
    Param(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassNetConfig {
    pub input_extent: usize,
    pub input_channels: usize,
    /// Output channels of each conv block; the last entry is the feature width K.
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
    pub classes: usize,
}

impl Default for ClassNetConfig {
    fn default() -> Self {
        Self {
            input_extent: 64,
            input_channels: 3,
            channels: vec![16, 32, 64, 64],
            strides: vec![2, 2, 2, 1],
            kernel: 3,
            classes: 5,
        }
    }
}

impl ClassNetConfig {
    pub fn feature_channels(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    pub fn downsample(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn feature_extent(&self) -> usize {
        self.input_extent / self.downsample().max(1)
    }

    pub fn validate(&self) -> Result<(), ClassNetError> {
        let fail = |m: String| Err(ClassNetError::Config(m));
        if self.classes < 2 {
            return fail(format!("class count must be >= 2, got {}", self.classes));
        }
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return fail(format!(
                "{} channel entries but {} strides",
                self.channels.len(),
                self.strides.len()
            ));
        }
        if self.channels.contains(&0) || self.strides.contains(&0) || self.input_channels == 0 {
            return fail("channel counts and strides must be positive".into());
        }
        if self.kernel.is_multiple_of(2) {
            return fail(format!("kernel extent must be odd, got {}", self.kernel));
        }
        // Same-padded stride-s convs map extent n to ceil(n/s); require exact halving.
        let mut extent = self.input_extent;
        for &s in &self.strides {
            if extent == 0 || !extent.is_multiple_of(s) {
                return fail(format!(
                    "input extent {} not divisible by downsample factor {}",
                    self.input_extent,
                    self.downsample()
                ));
            }
            extent /= s;
        }
        if extent == 0 {
            return fail("feature map would be empty".into());
        }
        Ok(())
    }
}

/// Per-class spatial scores `M^c`, row-major `[C, H, W]`, with the valid class set.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMap {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub scores: Vec<f64>,
    /// Classes present in the image label, ascending.
    pub valid: Vec<usize>,
}

impl ResponseMap {
    pub fn new(classes: usize, height: usize, width: usize, scores: Vec<f64>, valid: Vec<usize>) -> Self {
        assert_eq!(scores.len(), classes * height * width, "response map size");
        Self {
            classes,
            height,
            width,
            scores,
            valid,
        }
    }

    pub fn plane(&self, class: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.scores[class * n..(class + 1) * n]
    }

    /// Valid classes given a (possibly soft) label: every class with a positive entry.
    pub fn valid_from_label(label: &[f64]) -> Vec<usize> {
        label
            .iter()
            .enumerate()
            .filter(|(_, &y)| y > 0.0)
            .map(|(c, _)| c)
            .collect()
    }

    /// Raw dump: `MXRM`, then `C`, `H`, `W` as little-endian `u32`, then the
    /// scores as little-endian `f64`. The valid set is not stored.
    pub fn to_raw_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.scores.len());
        out.extend_from_slice(RAW_MAP_MAGIC);
        for d in [self.classes, self.height, self.width] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.scores {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_raw_bytes(bytes: &[u8]) -> Result<Self, String> {
        if bytes.len() < 16 || &bytes[..4] != RAW_MAP_MAGIC {
            return Err("not an MXRM response map".into());
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
        let (c, h, w) = (dim(0), dim(1), dim(2));
        let n = c * h * w;
        if bytes.len() != 16 + 8 * n {
            return Err(format!(
                "payload is {} bytes, header implies {}",
                bytes.len() - 16,
                8 * n
            ));
        }
        let scores = bytes[16..]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        Ok(Self::new(c, h, w, scores, Vec::new()))
    }
}

pub const RAW_MAP_MAGIC: &[u8; 4] = b"MXRM";

/// Clamps negatives to zero and divides each class map by its maximum.
/// Class maps whose maximum is not above [`NORM_EPS`] become all zeros.
pub fn cam_normalized(map: &ResponseMap) -> ResponseMap {
    let n = map.height * map.width;
    let mut scores = Vec::with_capacity(map.scores.len());
    for c in 0..map.classes {
        let plane = &map.scores[c * n..(c + 1) * n];
        let max = plane.iter().fold(0.0f64, |m, &v| m.max(v));
        if max > NORM_EPS {
            scores.extend(plane.iter().map(|&v| v.max(0.0) / max));
        } else {
            scores.extend(std::iter::repeat_n(0.0, n));
        }
    }
    ResponseMap { scores, ..map.clone() }
}

/// Tape handles for the network parameters, in [`ParamSet`] order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

/// Outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub features: Var,
    pub logits: Var,
    /// Raw CAM, `[C, H_f, W_f]`.
    pub cam: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassNet {
    config: ClassNetConfig,
    params: ParamSet,
}

impl ClassNet {
    /// He-normal conv kernels, zero biases, `N(0, 1/K)` classifier weights.
    pub fn new(config: ClassNetConfig, seed: u64) -> Result<Self, ClassNetError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut cin = config.input_channels;
        let k = config.kernel;
        for (i, &cout) in config.channels.iter().enumerate() {
            let std = (2.0 / (cin * k * k) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            params.push(
                format!("block{i}.weight"),
                Tensor::from_fn(&[cout, cin, k, k], |_| normal.sample(&mut rng)),
            );
            params.push(format!("block{i}.bias"), Tensor::zeros(&[cout]));
            cin = cout;
        }
        let feat = config.feature_channels();
        let normal = Normal::new(0.0, (1.0 / feat as f64).sqrt()).expect("finite std");
        params.push(
            "classifier.weight",
            Tensor::from_fn(&[config.classes, feat], |_| normal.sample(&mut rng)),
        );
        params.push("classifier.bias", Tensor::zeros(&[config.classes]));
        Ok(Self { config, params })
    }

    /// Rebuilds a network from stored parameters, checking names and shapes.
    pub fn from_params(config: ClassNetConfig, params: ParamSet) -> Result<Self, ClassNetError> {
        let reference = Self::new(config.clone(), 0)?;
        if reference.params.len() != params.len() {
            return Err(ClassNetError::Param(format!(
                "expected {} tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for ((want_name, want), (name, got)) in reference.params.iter().zip(params.iter()) {
            if want_name != name || want.shape() != got.shape() {
                return Err(ClassNetError::Param(want_name.to_owned()));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ClassNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self.params.tensors().map(|t| tape.leaf(t)).collect(),
        }
    }

    fn classifier(&self, bound: &BoundParams) -> (Var, Var) {
        let n = bound.vars.len();
        (bound.vars[n - 2], bound.vars[n - 1])
    }

    pub fn input_shape(&self) -> [usize; 3] {
        let e = self.config.input_extent;
        [self.config.input_channels, e, e]
    }

    /// `E(I)`: the conv/ReLU stack, `[3, H, W] -> [K, H_f, W_f]`.
    pub fn extract_features(&self, tape: &mut Tape, bound: &BoundParams, image: Var) -> Result<Var, ClassNetError> {
        if tape.shape(image) != self.input_shape() {
            return Err(DiffError::ShapeMismatch {
                op: "extract_features",
                shapes: vec![tape.shape(image).to_vec(), self.input_shape().to_vec()],
            }
            .into());
        }
        let pad = self.config.kernel / 2;
        let mut x = image;
        for (i, &stride) in self.config.strides.iter().enumerate() {
            let conv = tape.conv2d(x, bound.vars[2 * i], Some(bound.vars[2 * i + 1]), stride, pad)?;
            x = tape.relu(conv);
        }
        Ok(x)
    }

    /// `G(GAP(f))`: pre-sigmoid logits `[C]`.
    pub fn classify(&self, tape: &mut Tape, bound: &BoundParams, features: Var) -> Result<Var, ClassNetError> {
        let (weight, bias) = self.classifier(bound);
        let k = self.config.feature_channels();
        if tape.shape(features).len() != 3 || tape.shape(features)[0] != k {
            return Err(DiffError::ShapeMismatch {
                op: "classify",
                shapes: vec![tape.shape(features).to_vec()],
            }
            .into());
        }
        let pooled = tape.global_avg_pool(features)?;
        let column = tape.reshape(pooled, &[k, 1])?;
        let scores = tape.matmul(weight, column)?;
        let flat = tape.reshape(scores, &[self.config.classes])?;
        Ok(tape.add(flat, bias)?)
    }

    /// `M^c = θ_G^c · f` at every position, without the classifier bias.
    pub fn cam(&self, tape: &mut Tape, bound: &BoundParams, features: Var) -> Result<Var, ClassNetError> {
        let (weight, _) = self.classifier(bound);
        let shape = tape.shape(features).to_vec();
        if shape.len() != 3 || shape[0] != self.config.feature_channels() {
            return Err(DiffError::ShapeMismatch {
                op: "cam",
                shapes: vec![shape],
            }
            .into());
        }
        let flat = tape.reshape(features, &[shape[0], shape[1] * shape[2]])?;
        let m = tape.matmul(weight, flat)?;
        Ok(tape.reshape(m, &[self.config.classes, shape[1], shape[2]])?)
    }

    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, image: Var) -> Result<ForwardVars, ClassNetError> {
        let features = self.extract_features(tape, bound, image)?;
        let logits = self.classify(tape, bound, features)?;
        let cam = self.cam(tape, bound, features)?;
        Ok(ForwardVars { features, logits, cam })
    }

    /// Inference-only pass returning logits and the raw response map.
    pub fn infer(&self, image: &Tensor, valid: Vec<usize>) -> Result<(Vec<f64>, ResponseMap), ClassNetError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.leaf(image);
        let out = self.forward(&mut tape, &bound, x)?;
        let e = self.config.feature_extent();
        let map = ResponseMap::new(self.config.classes, e, e, tape.value(out.cam).to_vec(), valid);
        Ok((tape.value(out.logits).to_vec(), map))
    }

    pub fn cam_raw(&self, image: &Tensor, valid: Vec<usize>) -> Result<ResponseMap, ClassNetError> {
        Ok(self.infer(image, valid)?.1)
    }
}

/// Per-pixel class distribution from a raw CAM volume on the tape.
///
/// The whole `[C, H, W]` volume is divided by its largest absolute score
/// (skipped when that is not above [`NORM_EPS`]), then a softmax runs over
/// the class axis at every position.
pub fn spatial_class_probability(tape: &mut Tape, cam: Var) -> Result<Var, DiffError> {
    let shape = tape.shape(cam).to_vec();
    if shape.len() != 3 {
        return Err(DiffError::ShapeMismatch {
            op: "spatial_class_probability",
            shapes: vec![shape],
        });
    }
    let n: usize = shape.iter().product();
    let flat = tape.reshape(cam, &[n])?;
    let neg = tape.scale(flat, -1.0);
    let hi = tape.max(flat, 0)?;
    let lo = tape.max(neg, 0)?;
    let hi = tape.reshape(hi, &[1])?;
    let lo = tape.reshape(lo, &[1])?;
    let both = tape.concat(&[hi, lo], 0)?;
    let peak = tape.max(both, 0)?;
    let scaled = if tape.item(peak) > NORM_EPS {
        let inv = tape.pow(peak, -1.0);
        let inv = tape.broadcast(inv, &shape)?;
        tape.mul(cam, inv)?
    } else {
        cam
    };
    tape.softmax(scaled, 0)
}
