//! Randomized invariants across the engine, model, augmentation, losses
//! and scoring.

mod common;

use mixcam::classnet::{cam_normalized, ClassNet, ResponseMap};
use mixcam::diffcore::{Tape, Tensor};
use mixcam::evalkit::{iou, pseudo_labels, PseudoLabelConfig, Upsample};
use mixcam::mixaug::{augment_view, mixup, AugmentConfig, AugmentPlan};
use mixcam::objective::{concentration_loss, entropy_loss, total_loss, LossWeights};
use mixcam::synthdata::LabeledImage;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn values(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, n)
}

fn con_value(h: usize, w: usize, scores: Vec<f64>) -> f64 {
    let mut tape = Tape::new();
    let v = tape.constant(&[1, h, w], scores).unwrap();
    let l = concentration_loss(&mut tape, v, &[0]).unwrap();
    tape.item(l)
}

/// Brute-force per-label counts: (intersection, union).
fn brute_iou(pred: &[u8], truth: &[u8], labels: usize) -> Vec<(u64, u64)> {
    (0..labels as u8)
        .map(|c| {
            let i = pred.iter().zip(truth).filter(|(&p, &t)| p == c && t == c).count() as u64;
            let u = pred.iter().zip(truth).filter(|(&p, &t)| p == c || t == c).count() as u64;
            (i, u)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution(data in values(24, -30.0, 30.0), axis in 0usize..3) {
        let mut tape = Tape::new();
        let x = tape.constant(&[2, 3, 4], data).unwrap();
        let s = tape.softmax(x, axis).unwrap();
        let sums = tape.sum(s, &[axis]).unwrap();
        prop_assert!(tape.value(s).iter().all(|&p| p >= 0.0));
        for &t in tape.value(sums) {
            prop_assert!((t - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn reused_variable_accumulates_both_paths(data in values(6, -3.0, 3.0)) {
        // x·x through one leaf must match a·b through two leaves holding the same values.
        let x = Tensor::new(&[6], data.clone()).unwrap().with_grad();
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let sq = tape.mul(v, v).unwrap();
        let r = tape.sum_all(sq);
        tape.backward(r).unwrap();
        let shared = tape.grad(v).unwrap().to_vec();

        let mut tape = Tape::new();
        let a = tape.leaf(&x);
        let b = tape.leaf(&x);
        let p = tape.mul(a, b).unwrap();
        let r = tape.sum_all(p);
        tape.backward(r).unwrap();
        let split: Vec<f64> = tape.grad(a).unwrap().iter().zip(tape.grad(b).unwrap()).map(|(g, h)| g + h).collect();
        prop_assert_eq!(shared, split);
    }

    #[test]
    fn forward_and_backward_are_bit_reproducible(seed in 0u64..1000) {
        let net = ClassNet::new(common::tiny_net_config(), seed).unwrap();
        let image: Vec<f64> = (0..192).map(|i| ((i as u64 * 7919 + seed) % 101) as f64 / 100.0).collect();
        let label = [1.0, 0.0, 0.5];
        let a = mixcam::train::sample_gradients(&net, &image, &label, LossWeights::default()).unwrap();
        let b = mixcam::train::sample_gradients(&net, &image, &label, LossWeights::default()).unwrap();
        prop_assert_eq!(a.0.total.to_bits(), b.0.total.to_bits());
        prop_assert_eq!(a.1, b.1);
    }

    #[test]
    fn cam_is_linear_in_features(seed in 0u64..1000, k in -3i32..4, data in values(4 * 16, -1.0, 1.0)) {
        let net = ClassNet::new(common::tiny_net_config(), seed).unwrap();
        let s = 2f64.powi(k);
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let f = tape.constant(&[4, 4, 4], data).unwrap();
        let fs = tape.scale(f, s);
        let m = net.cam(&mut tape, &bound, f).unwrap();
        let ms = net.cam(&mut tape, &bound, fs).unwrap();
        for (&a, &b) in tape.value(m).iter().zip(tape.value(ms)) {
            prop_assert_eq!(a * s, b);
        }
    }

    #[test]
    fn normalization_keeps_the_argmax(data in values(2 * 25, -1.0, 1.0)) {
        let map = ResponseMap::new(2, 5, 5, data, vec![0, 1]);
        let norm = cam_normalized(&map);
        for c in 0..2 {
            let argmax = |p: &[f64]| p.iter().enumerate().fold(0, |b, (i, &v)| if v > p[b] { i } else { b });
            if map.plane(c).iter().any(|&v| v > 0.0) {
                prop_assert_eq!(argmax(map.plane(c)), argmax(norm.plane(c)));
                prop_assert!(norm.plane(c).iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn mixup_stays_in_range_and_unions_labels(
        a in values(12, 0.0, 1.0),
        b in values(12, 0.0, 1.0),
        la in prop::collection::vec(prop::bool::ANY, 4),
        lb in prop::collection::vec(prop::bool::ANY, 4),
        lambda in 0.0f64..=1.0,
    ) {
        let label = |bits: &[bool]| bits.iter().map(|&x| x as u8 as f64).collect::<Vec<_>>();
        let x = LabeledImage { id: 0, image: a, label: label(&la) };
        let y = LabeledImage { id: 1, image: b, label: label(&lb) };
        let m = mixup(&x, &y, lambda).unwrap();
        prop_assert!(m.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
        for c in 0..4 {
            let positive = m.label[c] > 0.0;
            prop_assert!(!positive || la[c] || lb[c]);
            if lambda > 0.0 && lambda < 1.0 {
                prop_assert_eq!(positive, la[c] || lb[c]);
            }
        }
    }

    #[test]
    fn augmentation_replays_under_a_seed(seed in 0u64..10_000) {
        let img = LabeledImage { id: 0, image: (0..3 * 64).map(|i| (i % 17) as f64 / 16.0).collect(), label: vec![1.0, 0.0] };
        let cfg = AugmentConfig::default();
        let a = augment_view(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = augment_view(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn entropy_within_bounds(data in values(3 * 4, 0.0, 1.0)) {
        let mut p = data;
        for pos in 0..4 {
            let s: f64 = (0..3).map(|c| p[c * 4 + pos]).sum::<f64>().max(1e-9);
            for c in 0..3 {
                p[c * 4 + pos] /= s;
            }
        }
        let mut tape = Tape::new();
        let v = tape.constant(&[3, 2, 2], p).unwrap();
        let e = entropy_loss(&mut tape, v);
        if let Ok(e) = e {
            let e = tape.item(e);
            prop_assert!(e >= -1e-12 && e <= 3f64.ln() + 1e-12);
        }
    }

    #[test]
    fn concentration_ignores_positive_scale(data in values(36, 0.01, 1.0), k in 0.01f64..100.0) {
        let base = con_value(6, 6, data.clone());
        let scaled = con_value(6, 6, data.iter().map(|v| v * k).collect());
        prop_assert!((base - scaled).abs() <= 1e-12 * base.max(1.0));
    }

    #[test]
    fn concentration_is_translation_covariant(
        patch in values(9, 0.01, 1.0),
        (x0, y0, x1, y1) in (0usize..6, 0usize..6, 0usize..6, 0usize..6),
    ) {
        let place = |ox: usize, oy: usize| {
            let mut g = vec![0.0; 64];
            for dy in 0..3 {
                for dx in 0..3 {
                    g[(oy + dy) * 8 + ox + dx] = patch[dy * 3 + dx];
                }
            }
            g
        };
        let a = con_value(8, 8, place(x0, y0));
        let b = con_value(8, 8, place(x1, y1));
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn total_is_exactly_linear(c in -5.0f64..5.0, e in 0.0f64..2.0, n in 0.0f64..2.0, we in 0.0f64..1.0, wn in 0.0f64..1.0) {
        let w = LossWeights { entropy: we, concentration: wn };
        let t = total_loss(c, e, n, w);
        prop_assert_eq!(t.total, c + we * e + wn * n);
        prop_assert_eq!(total_loss(2.0 * c, 2.0 * e, 2.0 * n, w).total, 2.0 * t.total);
        prop_assert_eq!(total_loss(0.0, e, 0.0, w).total, we * e);
    }

    #[test]
    fn iou_matches_brute_force_and_bounds(
        pred in prop::collection::vec(0u8..4, 64),
        truth in prop::collection::vec(0u8..4, 64),
    ) {
        let r = iou(&pred, &truth, 4).unwrap();
        let oracle = brute_iou(&pred, &truth, 4);
        let mut present = Vec::new();
        for c in 0..4u8 {
            let (i, u) = oracle[c as usize];
            let np = pred.iter().filter(|&&p| p == c).count() as u64;
            let nt = truth.iter().filter(|&&t| t == c).count() as u64;
            prop_assert_eq!(r.counts.intersection[c as usize], i);
            prop_assert_eq!(r.counts.union[c as usize], u);
            prop_assert!(i <= np.min(nt) && u >= np.max(nt));
            if u > 0 {
                prop_assert_eq!(r.per_class[c as usize], Some(i as f64 / u as f64));
                present.push(i as f64 / u as f64);
            }
        }
        let mean = present.iter().sum::<f64>() / present.len() as f64;
        prop_assert!((r.miou - mean).abs() < 1e-15);
    }

    #[test]
    fn background_grows_with_threshold(data in values(2 * 16, -0.5, 1.0), bilinear in prop::bool::ANY) {
        let map = ResponseMap::new(2, 4, 4, data, vec![0, 1]);
        let upsample = if bilinear { Upsample::Bilinear } else { Upsample::Nearest };
        let mut last = 0usize;
        for i in 1..=9 {
            let cfg = PseudoLabelConfig { tau_bg: i as f64 / 10.0, upsample };
            let bg = pseudo_labels(&map, 16, &cfg).mask.iter().filter(|&&m| m == 0).count();
            prop_assert!(bg >= last);
            last = bg;
        }
    }
}

#[test]
fn flip_rate_within_five_sigma() {
    let cfg = AugmentConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 20_000;
    let flips = (0..n)
        .filter(|_| AugmentPlan::sample(&cfg, &mut rng).unwrap().flip)
        .count() as f64;
    let p = cfg.flip_prob;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    assert!((flips - n as f64 * p).abs() < 5.0 * sigma, "{flips} flips of {n}");
}
