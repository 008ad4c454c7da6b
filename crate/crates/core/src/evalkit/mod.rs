//! Response-map scoring: pseudo labels, IoU, coverage/uniformity
//! diagnostics and the loss-configuration ablation harness.

mod ablation;
mod report;

use thiserror::Error;

use crate::classnet::{cam_normalized, ClassNet, ClassNetError, ResponseMap};
use crate::diffcore::{sigmoid, Tensor};
use crate::parallel;
use crate::synthdata::Dataset;

pub use ablation::{run_ablation, AblationCell, AblationRow, AblationTable, MeanStd, SeedResult, SweepParam};
pub use report::{csv_string, format_aligned, iou_rows, write_csv, IOU_HEADERS};

/// Response level counted as "covered" by [`response_diagnostics`].
pub const COVERAGE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("mask extents differ: {0} vs {1} pixels")]
    ExtentMismatch(usize, usize),
    #[error("background threshold {0} outside (0, 1)")]
    InvalidThreshold(f64),
    #[error("model has {model} classes, dataset has {data}")]
    ClassCount { model: usize, data: usize },
    #[error(transparent)]
    Model(#[from] ClassNetError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Upsample {
    Nearest,
    #[default]
    Bilinear,
}

impl std::str::FromStr for Upsample {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nearest" => Ok(Self::Nearest),
            "bilinear" => Ok(Self::Bilinear),
            other => Err(format!("unknown upsampling mode `{other}`")),
        }
    }
}

impl std::fmt::Display for Upsample {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Nearest => "nearest",
            Self::Bilinear => "bilinear",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLabelConfig {
    pub tau_bg: f64,
    pub upsample: Upsample,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self {
            tau_bg: 0.25,
            upsample: Upsample::Bilinear,
        }
    }
}

impl PseudoLabelConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.tau_bg > 0.0 && self.tau_bg < 1.0 {
            Ok(())
        } else {
            Err(EvalError::InvalidThreshold(self.tau_bg))
        }
    }
}

/// Resamples an `h×w` plane to `out_h×out_w` using pixel-center alignment.
pub fn upsample_plane(plane: &[f64], h: usize, w: usize, out_h: usize, out_w: usize, mode: Upsample) -> Vec<f64> {
    assert_eq!(plane.len(), h * w, "plane size");
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = (y as f64 + 0.5) * h as f64 / out_h as f64 - 0.5;
        for x in 0..out_w {
            let sx = (x as f64 + 0.5) * w as f64 / out_w as f64 - 0.5;
            let v = match mode {
                Upsample::Nearest => {
                    let iy = ((sy + 0.5).floor().max(0.0) as usize).min(h - 1);
                    let ix = ((sx + 0.5).floor().max(0.0) as usize).min(w - 1);
                    plane[iy * w + ix]
                }
                Upsample::Bilinear => {
                    let fy = sy.clamp(0.0, (h - 1) as f64);
                    let fx = sx.clamp(0.0, (w - 1) as f64);
                    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                    let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
                    let top = plane[y0 * w + x0] * (1.0 - tx) + plane[y0 * w + x1] * tx;
                    let bottom = plane[y1 * w + x0] * (1.0 - tx) + plane[y1 * w + x1] * tx;
                    top * (1.0 - ty) + bottom * ty
                }
            };
            out.push(v);
        }
    }
    out
}

/// Normalized response of every class, upsampled to `extent×extent`.
fn upsampled_normalized(map: &ResponseMap, extent: usize, mode: Upsample) -> Vec<Vec<f64>> {
    let norm = cam_normalized(map);
    (0..map.classes)
        .map(|c| upsample_plane(norm.plane(c), map.height, map.width, extent, extent, mode))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    /// `0` background, `c + 1` for class `c`.
    pub mask: Vec<u8>,
    /// Set when the valid class set was empty and everything became background.
    pub empty_valid: bool,
}

/// Per pixel: the valid class with the highest upsampled normalized
/// response, if that response reaches `tau_bg`; background otherwise.
pub fn pseudo_labels(map: &ResponseMap, extent: usize, cfg: &PseudoLabelConfig) -> PseudoLabels {
    let n = extent * extent;
    if map.valid.is_empty() {
        log::warn!("pseudo labels requested with no valid classes; emitting background");
        return PseudoLabels {
            mask: vec![0; n],
            empty_valid: true,
        };
    }
    let planes = upsampled_normalized(map, extent, cfg.upsample);
    let mut mask = vec![0u8; n];
    for (p, m) in mask.iter_mut().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for &c in &map.valid {
            let v = planes[c][p];
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((c, v));
            }
        }
        if let Some((c, v)) = best {
            if v >= cfg.tau_bg {
                *m = (c + 1) as u8;
            }
        }
    }
    PseudoLabels {
        mask,
        empty_valid: false,
    }
}

/// Per-label pixel counts; merging is plain addition, so totals do not
/// depend on evaluation order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IoUCounts {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
    pub predicted: Vec<u64>,
    pub truth: Vec<u64>,
}

impl IoUCounts {
    pub fn new(labels: usize) -> Self {
        Self {
            intersection: vec![0; labels],
            union: vec![0; labels],
            predicted: vec![0; labels],
            truth: vec![0; labels],
        }
    }

    pub fn labels(&self) -> usize {
        self.intersection.len()
    }

    pub fn add_masks(&mut self, pred: &[u8], truth: &[u8]) -> Result<(), EvalError> {
        if pred.len() != truth.len() {
            return Err(EvalError::ExtentMismatch(pred.len(), truth.len()));
        }
        let labels = self.labels();
        for (&p, &t) in pred.iter().zip(truth) {
            let (p, t) = (p as usize, t as usize);
            assert!(p < labels && t < labels, "mask label out of range");
            self.predicted[p] += 1;
            self.truth[t] += 1;
            if p == t {
                self.intersection[p] += 1;
            }
        }
        for c in 0..labels {
            self.union[c] = self.predicted[c] + self.truth[c] - self.intersection[c];
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &IoUCounts) {
        for c in 0..self.labels() {
            self.intersection[c] += other.intersection[c];
            self.predicted[c] += other.predicted[c];
            self.truth[c] += other.truth[c];
            self.union[c] = self.predicted[c] + self.truth[c] - self.intersection[c];
        }
    }

    pub fn report(&self) -> IoUReport {
        let per_class: Vec<Option<f64>> = (0..self.labels())
            .map(|c| (self.union[c] > 0).then(|| self.intersection[c] as f64 / self.union[c] as f64))
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        IoUReport {
            per_class,
            miou,
            counts: self.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IoUReport {
    /// Index 0 is background; `None` where the union is empty.
    pub per_class: Vec<Option<f64>>,
    /// Mean over labels with a non-empty union.
    pub miou: f64,
    pub counts: IoUCounts,
}

/// IoU over `labels` mask values (background plus classes).
pub fn iou(pred: &[u8], truth: &[u8], labels: usize) -> Result<IoUReport, EvalError> {
    let mut counts = IoUCounts::new(labels);
    counts.add_masks(pred, truth)?;
    Ok(counts.report())
}

/// Coverage and uniformity of the responses on one object's pixels.
///
/// Coverage is the fraction at or above [`COVERAGE_THRESHOLD`]; uniformity is
/// `1 − σ/μ` (population standard deviation) clamped to `[0, 1]`, and zero
/// when the mean response is zero.
pub fn object_diagnostics(responses: &[f64]) -> Option<(f64, f64)> {
    if responses.is_empty() {
        return None;
    }
    let n = responses.len() as f64;
    let coverage = responses.iter().filter(|&&r| r >= COVERAGE_THRESHOLD).count() as f64 / n;
    let mean = responses.iter().sum::<f64>() / n;
    let uniformity = if mean > 0.0 {
        let var = responses.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        (1.0 - var.sqrt() / mean).clamp(0.0, 1.0)
    } else {
        0.0
    };
    Some((coverage, uniformity))
}

/// Mean coverage and uniformity over the valid classes that have
/// ground-truth pixels; `None` if no class qualifies.
pub fn response_diagnostics(map: &ResponseMap, truth: &[u8], extent: usize, mode: Upsample) -> Option<(f64, f64)> {
    assert_eq!(truth.len(), extent * extent, "truth mask size");
    let planes = upsampled_normalized(map, extent, mode);
    let per_class: Vec<(f64, f64)> = map
        .valid
        .iter()
        .filter_map(|&c| {
            let responses: Vec<f64> = truth
                .iter()
                .zip(&planes[c])
                .filter(|(&t, _)| t as usize == c + 1)
                .map(|(_, &r)| r)
                .collect();
            object_diagnostics(&responses)
        })
        .collect();
    if per_class.is_empty() {
        return None;
    }
    let k = per_class.len() as f64;
    Some((
        per_class.iter().map(|d| d.0).sum::<f64>() / k,
        per_class.iter().map(|d| d.1).sum::<f64>() / k,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub iou: IoUReport,
    pub coverage: f64,
    pub uniformity: f64,
    /// Exact-match multi-label accuracy after thresholding sigmoid outputs at 0.5.
    pub accuracy: f64,
    pub background_pixels: u64,
    pub samples: usize,
}

struct SampleEval {
    counts: IoUCounts,
    diagnostics: Option<(f64, f64)>,
    exact: bool,
}

/// Scores a network on a labelled split: CAM → normalize → pseudo labels →
/// IoU against the masks, plus diagnostics and classification accuracy.
/// Pseudo labels are restricted to each image's ground-truth classes.
pub fn evaluate(net: &ClassNet, data: &Dataset, cfg: &PseudoLabelConfig) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    if net.config().classes != data.classes {
        return Err(EvalError::ClassCount {
            model: net.config().classes,
            data: data.classes,
        });
    }
    let extent = data.height;
    let labels = data.classes + 1;
    let per_sample = parallel::map_indexed(data.samples.len(), |i| -> Result<SampleEval, EvalError> {
        let s = &data.samples[i];
        let image = Tensor::new(&[3, extent, extent], s.image.clone()).expect("dataset image shape");
        let (logits, map) = net.infer(&image, s.valid_classes())?;
        let pred = pseudo_labels(&map, extent, cfg);
        let mut counts = IoUCounts::new(labels);
        counts.add_masks(&pred.mask, &s.mask)?;
        let exact = logits
            .iter()
            .zip(&s.label)
            .all(|(&z, &y)| (sigmoid(z) > 0.5) == (y > 0.5));
        Ok(SampleEval {
            counts,
            diagnostics: response_diagnostics(&map, &s.mask, extent, cfg.upsample),
            exact,
        })
    });
    let mut counts = IoUCounts::new(labels);
    let (mut cov, mut uni, mut diag_n, mut exact) = (0.0, 0.0, 0usize, 0usize);
    for r in per_sample {
        let r = r?;
        counts.merge(&r.counts);
        if let Some((c, u)) = r.diagnostics {
            cov += c;
            uni += u;
            diag_n += 1;
        }
        exact += r.exact as usize;
    }
    let samples = data.samples.len();
    let div = |v: f64, n: usize| if n > 0 { v / n as f64 } else { 0.0 };
    Ok(EvalReport {
        background_pixels: counts.predicted[0],
        iou: counts.report(),
        coverage: div(cov, diag_n),
        uniformity: div(uni, diag_n),
        accuracy: div(exact as f64, samples),
        samples,
    })
}

/// Exact-match multi-label accuracy alone, without CAM scoring.
pub fn multilabel_accuracy(net: &ClassNet, data: &Dataset) -> Result<f64, EvalError> {
    let extent = data.height;
    let hits = parallel::map_indexed(data.samples.len(), |i| -> Result<bool, EvalError> {
        let s = &data.samples[i];
        let image = Tensor::new(&[3, extent, extent], s.image.clone()).expect("dataset image shape");
        let (logits, _) = net.infer(&image, Vec::new())?;
        Ok(logits
            .iter()
            .zip(&s.label)
            .all(|(&z, &y)| (sigmoid(z) > 0.5) == (y > 0.5)))
    });
    let mut n = 0usize;
    for h in hits {
        n += h? as usize;
    }
    Ok(if data.samples.is_empty() {
        0.0
    } else {
        n as f64 / data.samples.len() as f64
    })
}
