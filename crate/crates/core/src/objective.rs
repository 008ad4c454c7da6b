//! Classification, entropy and concentration losses and their weighted sum.

use thiserror::Error;

use crate::classnet::NORM_EPS;
use crate::diffcore::{DiffError, Tape, Var};

/// Floor applied to probabilities inside the entropy logarithm.
pub const PROB_FLOOR: f64 = 1e-12;
/// Tolerance for a pixel distribution to count as normalized.
pub const NORMALIZATION_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("label entry {index} = {value} outside [0, 1]")]
    LabelOutOfRange { index: usize, value: f64 },
    #[error("label has {found} entries, logits have {expected}")]
    LabelLength { expected: usize, found: usize },
    #[error("class distribution at position {position} sums to {sum}")]
    NotNormalized { position: usize, sum: f64 },
    #[error("concentration loss needs at least one valid class")]
    EmptyValidSet,
    #[error("valid class {class} out of range for {classes} classes")]
    InvalidClass { class: usize, classes: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub entropy: f64,
    pub concentration: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            entropy: 0.02,
            concentration: 2e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub cls: f64,
    pub ent: f64,
    pub con: f64,
    pub total: f64,
}

/// Mean binary cross-entropy between `sigmoid(logits)` and soft targets.
///
/// Evaluated as `softplus(x) - y·x` with `softplus(x) = relu(x) + ln(1 + e^{-|x|})`,
/// which stays finite for large logits.
pub fn classification_loss(tape: &mut Tape, logits: Var, soft_label: &[f64]) -> Result<Var, ObjectiveError> {
    let n = tape.value(logits).len();
    if soft_label.len() != n {
        return Err(ObjectiveError::LabelLength {
            expected: n,
            found: soft_label.len(),
        });
    }
    if let Some((index, &value)) = soft_label.iter().enumerate().find(|(_, y)| !(0.0..=1.0).contains(*y)) {
        return Err(ObjectiveError::LabelOutOfRange { index, value });
    }
    let shape = tape.shape(logits).to_vec();
    let target = tape.constant(&shape, soft_label.to_vec())?;
    let pos = tape.relu(logits);
    let neg_x = tape.scale(logits, -1.0);
    let neg = tape.relu(neg_x);
    let abs = tape.add(pos, neg)?;
    let neg_abs = tape.scale(abs, -1.0);
    let e = tape.exp(neg_abs);
    let one_plus = tape.add_scalar(e, 1.0);
    let log_term = tape.ln(one_plus);
    let softplus = tape.add(pos, log_term)?;
    let yx = tape.mul(target, logits)?;
    let per_class = tape.sub(softplus, yx)?;
    Ok(tape.mean_all(per_class))
}

/// Mean over positions of the Shannon entropy (nats) of the class
/// distribution `P[:, h, w]`. `P` has shape `[C, H, W]`.
pub fn entropy_loss(tape: &mut Tape, probs: Var) -> Result<Var, ObjectiveError> {
    let shape = tape.shape(probs).to_vec();
    if shape.len() != 3 {
        return Err(DiffError::ShapeMismatch {
            op: "entropy_loss",
            shapes: vec![shape],
        }
        .into());
    }
    let positions = shape[1] * shape[2];
    let values = tape.value(probs);
    for position in 0..positions {
        let sum: f64 = (0..shape[0]).map(|c| values[c * positions + position]).sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOL {
            return Err(ObjectiveError::NotNormalized { position, sum });
        }
    }
    let clamped = tape.clamp_min(probs, PROB_FLOOR);
    let logp = tape.ln(clamped);
    let plogp = tape.mul(probs, logp)?;
    let per_pixel = tape.sum(plogp, &[0])?;
    let mean = tape.mean_all(per_pixel);
    Ok(tape.scale(mean, -1.0))
}

/// Response-weighted squared distance to the response centroid, summed over `valid`.
///
/// Each valid class map is rectified and divided by its spatial sum, so it
/// is a probability map over positions; coordinates are scaled to `[0, 1]`.
/// Classes whose rectified sum is not above [`NORM_EPS`] contribute zero.
pub fn concentration_loss(tape: &mut Tape, cam: Var, valid: &[usize]) -> Result<Var, ObjectiveError> {
    let shape = tape.shape(cam).to_vec();
    if shape.len() != 3 {
        return Err(DiffError::ShapeMismatch {
            op: "concentration_loss",
            shapes: vec![shape],
        }
        .into());
    }
    if valid.is_empty() {
        return Err(ObjectiveError::EmptyValidSet);
    }
    let (classes, height, width) = (shape[0], shape[1], shape[2]);
    if let Some(&class) = valid.iter().find(|&&c| c >= classes) {
        return Err(ObjectiveError::InvalidClass { class, classes });
    }

    let rect = tape.relu(cam);
    let mass = tape.sum(rect, &[1, 2])?;
    let mut active = vec![0.0; classes];
    let mut offset = vec![0.0; classes];
    for c in 0..classes {
        if tape.value(mass)[c] > NORM_EPS {
            active[c] = if valid.contains(&c) { 1.0 } else { 0.0 };
        } else {
            offset[c] = 1.0;
        }
    }
    let offset = tape.constant(&[classes], offset)?;
    let safe_mass = tape.add(mass, offset)?;
    let inv = tape.pow(safe_mass, -1.0);
    let inv = tape.reshape(inv, &[classes, 1, 1])?;
    let inv = tape.broadcast(inv, &shape)?;
    let prob = tape.mul(rect, inv)?;

    let coord = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
    let rows: Vec<f64> = (0..height * width).map(|i| coord(i / width, height)).collect();
    let cols: Vec<f64> = (0..height * width).map(|i| coord(i % width, width)).collect();
    let mut spread = Vec::with_capacity(2);
    for grid in [rows, cols] {
        let grid = tape.constant(&[height, width], grid)?;
        let grid = tape.broadcast(grid, &shape)?;
        let weighted = tape.mul(grid, prob)?;
        let center = tape.sum(weighted, &[1, 2])?;
        let center = tape.reshape(center, &[classes, 1, 1])?;
        let center = tape.broadcast(center, &shape)?;
        let d = tape.sub(grid, center)?;
        let d2 = tape.mul(d, d)?;
        let w = tape.mul(d2, prob)?;
        spread.push(tape.sum(w, &[1, 2])?);
    }
    let per_class = tape.add(spread[0], spread[1])?;
    let mask = tape.constant(&[classes], active)?;
    let masked = tape.mul(per_class, mask)?;
    Ok(tape.sum_all(masked))
}

/// `cls + λ_ent·ent + λ_con·con`.
pub fn total_loss(cls: f64, ent: f64, con: f64, weights: LossWeights) -> LossBreakdown {
    LossBreakdown {
        cls,
        ent,
        con,
        total: cls + weights.entropy * ent + weights.concentration * con,
    }
}

/// The same weighted sum recorded on the tape, for back-propagation.
pub fn total_loss_on_tape(
    tape: &mut Tape,
    cls: Var,
    ent: Var,
    con: Var,
    weights: LossWeights,
) -> Result<Var, DiffError> {
    let ent = tape.scale(ent, weights.entropy);
    let con = tape.scale(con, weights.concentration);
    let partial = tape.add(cls, ent)?;
    tape.add(partial, con)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss_value(f: impl FnOnce(&mut Tape) -> Var) -> f64 {
        let mut tape = Tape::new();
        let v = f(&mut tape);
        tape.item(v)
    }

    #[test]
    fn bce_at_symmetric_point_and_limit() {
        let v = loss_value(|t| {
            let x = t.constant(&[3], vec![0.0; 3]).unwrap();
            classification_loss(t, x, &[0.5; 3]).unwrap()
        });
        assert!((v - 2f64.ln()).abs() < 1e-15);
        let v = loss_value(|t| {
            let x = t.constant(&[1], vec![800.0]).unwrap();
            classification_loss(t, x, &[1.0]).unwrap()
        });
        assert_eq!(v, 0.0);
    }

    #[test]
    fn bce_is_stationary_at_matching_target() {
        let logits = [0.3, -1.2, 2.0];
        let targets: Vec<f64> = logits.iter().map(|&x| crate::diffcore::sigmoid(x)).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(&crate::diffcore::Tensor::new(&[3], logits.to_vec()).unwrap().with_grad());
        let l = classification_loss(&mut tape, x, &targets).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn bce_rejects_bad_labels() {
        let mut tape = Tape::new();
        let x = tape.constant(&[2], vec![0.0; 2]).unwrap();
        assert!(matches!(
            classification_loss(&mut tape, x, &[0.5, 1.5]),
            Err(ObjectiveError::LabelOutOfRange { index: 1, .. })
        ));
        assert!(matches!(
            classification_loss(&mut tape, x, &[0.5]),
            Err(ObjectiveError::LabelLength { .. })
        ));
    }

    #[test]
    fn entropy_examples() {
        let uniform = loss_value(|t| {
            let p = t.constant(&[2, 3, 3], vec![0.5; 18]).unwrap();
            entropy_loss(t, p).unwrap()
        });
        assert!((uniform - 2f64.ln()).abs() < 1e-15);
        let onehot = loss_value(|t| {
            let mut d = vec![0.0; 18];
            d[..9].fill(1.0);
            let p = t.constant(&[2, 3, 3], d).unwrap();
            entropy_loss(t, p).unwrap()
        });
        assert_eq!(onehot, 0.0);
        let skewed = loss_value(|t| {
            let mut d = vec![0.25; 12];
            d[..4].fill(0.5);
            let p = t.constant(&[3, 2, 2], d).unwrap();
            entropy_loss(t, p).unwrap()
        });
        assert!((skewed - 1.5 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn entropy_rejects_unnormalized() {
        let mut tape = Tape::new();
        let p = tape.constant(&[2, 1, 1], vec![0.5, 0.6]).unwrap();
        assert!(matches!(
            entropy_loss(&mut tape, p),
            Err(ObjectiveError::NotNormalized { position: 0, .. })
        ));
    }

    #[test]
    fn concentration_examples() {
        let single = loss_value(|t| {
            let mut d = vec![0.0; 25];
            d[7] = 3.0;
            let m = t.constant(&[1, 5, 5], d).unwrap();
            concentration_loss(t, m, &[0]).unwrap()
        });
        assert_eq!(single, 0.0);
        let uniform = loss_value(|t| {
            let m = t.constant(&[1, 5, 5], vec![1.0; 25]).unwrap();
            concentration_loss(t, m, &[0]).unwrap()
        });
        assert!((uniform - 0.25).abs() < 1e-15);
        let corners = loss_value(|t| {
            let mut d = vec![0.0; 4];
            d[0] = 1.0;
            d[3] = 1.0;
            let m = t.constant(&[1, 2, 2], d).unwrap();
            concentration_loss(t, m, &[0]).unwrap()
        });
        assert!((corners - 0.5).abs() < 1e-15);
    }

    #[test]
    fn concentration_ignores_invalid_and_empty_classes() {
        let v = loss_value(|t| {
            let mut d = vec![1.0; 8];
            d[4..].fill(-1.0);
            let m = t.constant(&[2, 2, 2], d).unwrap();
            concentration_loss(t, m, &[1]).unwrap()
        });
        assert_eq!(v, 0.0);
        let mut tape = Tape::new();
        let m = tape.constant(&[2, 2, 2], vec![1.0; 8]).unwrap();
        assert!(matches!(
            concentration_loss(&mut tape, m, &[]),
            Err(ObjectiveError::EmptyValidSet)
        ));
        assert!(matches!(
            concentration_loss(&mut tape, m, &[2]),
            Err(ObjectiveError::InvalidClass { class: 2, .. })
        ));
    }

    #[test]
    fn weighted_total() {
        let b = total_loss(1.0, 0.5, 10.0, LossWeights::default());
        assert!((b.total - 1.012).abs() < 1e-15);
        let none = LossWeights {
            entropy: 0.0,
            concentration: 0.0,
        };
        assert_eq!(total_loss(0.8, 0.3, 7.0, none).total, 0.8);
        let doubled = LossWeights {
            concentration: 4e-4,
            ..LossWeights::default()
        };
        assert_eq!(
            total_loss(1.0, 0.5, 0.0, doubled).total,
            total_loss(1.0, 0.5, 0.0, LossWeights::default()).total
        );
    }
}
