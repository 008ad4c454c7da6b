//! Shared oracles for the integration and acceptance suites.

#![allow(dead_code)]

use mixcam::classnet::{spatial_class_probability, ClassNet, ClassNetConfig};
use mixcam::diffcore::{Tape, Tensor, Var};
use mixcam::objective::{classification_loss, concentration_loss, entropy_loss, LossWeights};
use mixcam::train::sample_gradients;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_FLOOR: f64 = 1e-7;
pub const INSTANCES: usize = 20;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= FD_ABS_FLOOR.max(FD_REL_TOL * analytic.abs().max(numeric.abs()))
}

/// Uniform in `±[lo, hi]`, keeping values clear of kinks at zero.
pub fn away_from_zero(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let m = rng.random_range(lo..hi);
    if rng.random_bool(0.5) {
        m
    } else {
        -m
    }
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Compares tape gradients of `build` against central differences.
///
/// Non-scalar outputs are projected onto fixed random weights so every
/// output element contributes to the checked scalar.
pub fn fd_check<F>(inputs: &[Tensor], build: F, seed: u64) -> Result<(), String>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |tensors: &[Tensor], grads: bool| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.set_requires_grad(grads);
                tape.leaf(&t)
            })
            .collect();
        let out = build(&mut tape, &vars);
        let shape = tape.shape(out).to_vec();
        let mut wr = rng(seed ^ 0x5eed);
        let n = tape.value(out).len();
        let w = tape
            .constant(&shape, (0..n).map(|_| wr.random_range(0.5..1.5)).collect())
            .expect("projection shape");
        let prod = tape.mul(out, w).expect("same shape");
        let root = tape.sum_all(prod);
        let value = tape.item(root);
        if !grads {
            return (value, Vec::new());
        }
        tape.backward(root).expect("scalar root");
        let g = vars
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
            })
            .collect();
        (value, g)
    };
    let (_, analytic) = eval(inputs, true);
    for (ti, t) in inputs.iter().enumerate() {
        for (i, &a) in analytic[ti].iter().enumerate().take(t.numel()) {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * FD_STEP);
            if !close(a, numeric) {
                return Err(format!("input {ti} element {i}: analytic {a:e} vs numeric {numeric:e}"));
            }
        }
    }
    Ok(())
}

type Case = fn(&mut ChaCha8Rng, u64) -> Result<(), String>;

fn binary(r: &mut ChaCha8Rng, seed: u64, op: fn(&mut Tape, Var, Var) -> Var) -> Result<(), String> {
    let shape = [r.random_range(1..4), r.random_range(1..5)];
    let a = random_tensor(r, &shape, -2.0, 2.0);
    let b = random_tensor(r, &shape, -2.0, 2.0);
    fd_check(&[a, b], |t, v| op(t, v[0], v[1]), seed)
}

fn unary(
    r: &mut ChaCha8Rng,
    seed: u64,
    lo: f64,
    hi: f64,
    signed: bool,
    op: fn(&mut Tape, Var) -> Var,
) -> Result<(), String> {
    let shape = [r.random_range(1..4), r.random_range(1..5)];
    let x = if signed {
        Tensor::from_fn(&shape, |_| away_from_zero(r, lo, hi))
    } else {
        random_tensor(r, &shape, lo, hi)
    };
    fd_check(&[x], |t, v| op(t, v[0]), seed)
}

fn softmax_case(r: &mut ChaCha8Rng, seed: u64) -> Result<(), String> {
    let shape = [r.random_range(1..4), r.random_range(2..5), r.random_range(1..3)];
    let axis = r.random_range(0..3);
    let x = random_tensor(r, &shape, -3.0, 3.0);
    fd_check(&[x], |t, v| t.softmax(v[0], axis).unwrap(), seed)
}

fn matmul_case(r: &mut ChaCha8Rng, seed: u64) -> Result<(), String> {
    let (m, k, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
    let a = random_tensor(r, &[m, k], -1.0, 1.0);
    let b = random_tensor(r, &[k, n], -1.0, 1.0);
    fd_check(&[a, b], |t, v| t.matmul(v[0], v[1]).unwrap(), seed)
}

fn conv_case(r: &mut ChaCha8Rng, seed: u64) -> Result<(), String> {
    let cin = r.random_range(1..3);
    let cout = r.random_range(1..3);
    let k = [1, 3][r.random_range(0..2)];
    let stride = r.random_range(1..3);
    let pad = r.random_range(0..=k / 2);
    let h = r.random_range(k.max(2)..6);
    let w = r.random_range(k.max(2)..6);
    let x = random_tensor(r, &[cin, h, w], -1.0, 1.0);
    let wt = random_tensor(r, &[cout, cin, k, k], -1.0, 1.0);
    let b = random_tensor(r, &[cout], -0.5, 0.5);
    fd_check(
        &[x, wt, b],
        |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap(),
        seed,
    )
}

fn reduce_case(r: &mut ChaCha8Rng, seed: u64, mean: bool) -> Result<(), String> {
    let shape = [r.random_range(1..4), r.random_range(1..4), r.random_range(1..4)];
    let axes: Vec<usize> = (0..3).filter(|_| r.random_bool(0.5)).collect();
    let x = random_tensor(r, &shape, -2.0, 2.0);
    fd_check(
        &[x],
        |t, v| {
            if mean {
                t.mean(v[0], &axes).unwrap()
            } else {
                t.sum(v[0], &axes).unwrap()
            }
        },
        seed,
    )
}

fn max_case(r: &mut ChaCha8Rng, seed: u64) -> Result<(), String> {
    let shape = [r.random_range(1..4), r.random_range(2..5)];
    let axis = r.random_range(0..2);
    // Distinct values on a coarse grid keep the argmax stable under the FD step.
    let n = shape[0] * shape[1];
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
    for i in (1..n).rev() {
        vals.swap(i, r.random_range(0..=i));
    }
    let x = Tensor::new(&shape, vals).unwrap();
    fd_check(&[x], |t, v| t.max(v[0], axis).unwrap(), seed)
}

fn shape_ops_case(r: &mut ChaCha8Rng, seed: u64) -> Result<(), String> {
    let (a, b, c) = (r.random_range(1..4), r.random_range(1..4), r.random_range(1..4));
    let x = random_tensor(r, &[a, b, c], -1.0, 1.0);
    let y = random_tensor(r, &[1, b, c], -1.0, 1.0);
    let s = random_tensor(r, &[c], -1.0, 1.0);
    fd_check(
        &[x, y, s],
        |t, v| {
            let cat = t.concat(&[v[0], v[1]], 0).unwrap();
            let flat = t.reshape(cat, &[(a + 1) * b, c]).unwrap();
            let wide = t.broadcast(v[2], &[(a + 1) * b, c]).unwrap();
            t.mul(flat, wide).unwrap()
        },
        seed,
    )
}

fn gap_case(r: &mut ChaCha8Rng, seed: u64) -> Result<(), String> {
    let shape = [r.random_range(1..4), r.random_range(1..5), r.random_range(1..5)];
    let x = random_tensor(r, &shape, -1.0, 1.0);
    fd_check(&[x], |t, v| t.global_avg_pool(v[0]).unwrap(), seed)
}

fn cls_case(r: &mut ChaCha8Rng, seed: u64) -> Result<(), String> {
    let c = r.random_range(2..7);
    let logits = random_tensor(r, &[c], -6.0, 6.0);
    let label: Vec<f64> = (0..c).map(|_| r.random_range(0.0..1.0)).collect();
    fd_check(&[logits], |t, v| classification_loss(t, v[0], &label).unwrap(), seed)
}

fn ent_case(r: &mut ChaCha8Rng, seed: u64) -> Result<(), String> {
    let shape = [r.random_range(2..5), r.random_range(1..4), r.random_range(1..4)];
    let x = random_tensor(r, &shape, -3.0, 3.0);
    fd_check(
        &[x],
        |t, v| {
            let p = spatial_class_probability(t, v[0]).unwrap();
            entropy_loss(t, p).unwrap()
        },
        seed,
    )
}

fn con_case(r: &mut ChaCha8Rng, seed: u64) -> Result<(), String> {
    let c = r.random_range(2..5);
    let shape = [c, r.random_range(2..5), r.random_range(2..5)];
    let x = Tensor::from_fn(&shape, |_| away_from_zero(r, 0.05, 2.0));
    let mut valid: Vec<usize> = (0..c).filter(|_| r.random_bool(0.6)).collect();
    if valid.is_empty() {
        valid.push(r.random_range(0..c));
    }
    // A class whose rectified map is entirely zero is piecewise constant; nudge one entry positive.
    let mut x = x;
    let n = shape[1] * shape[2];
    for &cl in &valid {
        x.data_mut()[cl * n] = x.data()[cl * n].abs();
    }
    fd_check(&[x], |t, v| concentration_loss(t, v[0], &valid).unwrap(), seed)
}

/// Every primitive and loss term with its case generator.
pub const GRADIENT_CASES: &[(&str, Case)] = &[
    ("add", |r, s| binary(r, s, |t, a, b| t.add(a, b).unwrap())),
    ("sub", |r, s| binary(r, s, |t, a, b| t.sub(a, b).unwrap())),
    ("mul", |r, s| binary(r, s, |t, a, b| t.mul(a, b).unwrap())),
    ("scale", |r, s| unary(r, s, -2.0, 2.0, false, |t, x| t.scale(x, -1.7))),
    ("add_scalar", |r, s| {
        unary(r, s, -2.0, 2.0, false, |t, x| t.add_scalar(x, 0.3))
    }),
    ("relu", |r, s| unary(r, s, 0.05, 2.0, true, |t, x| t.relu(x))),
    ("sigmoid", |r, s| unary(r, s, -4.0, 4.0, false, |t, x| t.sigmoid(x))),
    ("ln", |r, s| unary(r, s, 0.1, 3.0, false, |t, x| t.ln(x))),
    ("exp", |r, s| unary(r, s, -2.0, 2.0, false, |t, x| t.exp(x))),
    ("pow", |r, s| unary(r, s, 0.2, 2.0, false, |t, x| t.pow(x, -1.3))),
    ("clamp_min", |r, s| {
        unary(r, s, 0.05, 2.0, true, |t, x| t.clamp_min(x, 0.0))
    }),
    ("matmul", matmul_case),
    ("conv2d", conv_case),
    ("softmax", softmax_case),
    ("sum", |r, s| reduce_case(r, s, false)),
    ("mean", |r, s| reduce_case(r, s, true)),
    ("max", max_case),
    ("global_avg_pool", gap_case),
    ("concat/reshape/broadcast", shape_ops_case),
    ("classification_loss", cls_case),
    ("entropy_loss", ent_case),
    ("concentration_loss", con_case),
];

/// Runs `INSTANCES` random instances of one case.
pub fn run_gradient_case(name: &str, case: Case) -> Result<(), String> {
    let mut r = rng(0xfd ^ name.len() as u64 ^ (name.as_bytes()[0] as u64) << 8);
    for i in 0..INSTANCES {
        case(&mut r, i as u64).map_err(|e| format!("{name} instance {i}: {e}"))?;
    }
    Ok(())
}

pub fn tiny_net_config() -> ClassNetConfig {
    ClassNetConfig {
        input_extent: 8,
        channels: vec![3, 4],
        strides: vec![2, 1],
        classes: 3,
        ..ClassNetConfig::default()
    }
}

/// Central differences of the full weighted objective with respect to a
/// random subset of network parameters, against the trainer's gradients.
pub fn network_gradient_check(instances: usize, coords: usize) -> Result<(), String> {
    let mut r = rng(77);
    let weights = LossWeights {
        entropy: 0.5,
        concentration: 0.5,
    };
    for inst in 0..instances {
        let mut net = ClassNet::new(tiny_net_config(), inst as u64).map_err(|e| e.to_string())?;
        // Zero biases put dead units exactly on the ReLU kink, where one-sided slopes differ.
        for (name, t) in net.params_mut().iter_mut() {
            if name.ends_with(".bias") {
                t.data_mut()
                    .iter_mut()
                    .for_each(|b| *b = away_from_zero(&mut r, 0.01, 0.1));
            }
        }
        let image: Vec<f64> = (0..3 * 64).map(|_| r.random_range(0.0..1.0)).collect();
        let label: Vec<f64> = (0..3)
            .map(|_| {
                if r.random_bool(0.5) {
                    r.random_range(0.2..1.0)
                } else {
                    0.0
                }
            })
            .collect();
        let (_, grads) = sample_gradients(&net, &image, &label, weights).map_err(|e| e.to_string())?;
        let total = |n: &ClassNet| sample_gradients(n, &image, &label, weights).unwrap().0.total;
        for _ in 0..coords {
            let p = r.random_range(0..grads.len());
            let i = r.random_range(0..grads[p].len());
            let mut plus = net.clone();
            plus.params_mut().iter_mut().nth(p).unwrap().1.data_mut()[i] += FD_STEP;
            let mut minus = net.clone();
            minus.params_mut().iter_mut().nth(p).unwrap().1.data_mut()[i] -= FD_STEP;
            let numeric = (total(&plus) - total(&minus)) / (2.0 * FD_STEP);
            if !close(grads[p][i], numeric) {
                return Err(format!(
                    "instance {inst} param {p}[{i}]: analytic {:e} vs numeric {numeric:e}",
                    grads[p][i]
                ));
            }
        }
    }
    Ok(())
}
