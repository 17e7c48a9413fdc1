use ifsl::ifsl::{
    kshot_foreground, loss_classification, loss_segmentation, merge_background, one_hot, predict,
    predict_occurrence, predict_segmentation, ClassLossForm, InferenceConfig,
};
use ifsl::mask::LabelMap;
use ifsl::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LN2: f64 = std::f64::consts::LN_2;

fn kshot(logits: &[Tensor<f64>]) -> Tensor<f64> {
    let tape = Tape::new();
    let vars: Vec<_> = logits.iter().map(|l| tape.constant(l.clone())).collect();
    kshot_foreground(&tape, &vars).unwrap().value().as_ref().clone()
}

fn merge(maps: &[Tensor<f64>]) -> Tensor<f64> {
    let tape = Tape::new();
    let vars: Vec<_> = maps.iter().map(|l| tape.constant(l.clone())).collect();
    merge_background(&tape, &vars).unwrap().value().as_ref().clone()
}

fn cls_loss(maps: &[Tensor<f64>], y: &[u8], form: ClassLossForm) -> f64 {
    let tape = Tape::new();
    let vars: Vec<_> = maps.iter().map(|l| tape.constant(l.clone())).collect();
    loss_classification(&tape, &vars, y, form).unwrap().value().item()
}

fn seg_loss(seg: &Tensor<f64>, gt: &Tensor<f64>) -> f64 {
    let tape = Tape::new();
    loss_segmentation(tape.constant(seg.clone()), gt).unwrap().value().item()
}

fn rand_maps(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Vec<Tensor<f64>> {
    (0..n).map(|_| Tensor::from_fn(&[h, w], |_| rng.gen_range(0.0..1.0))).collect()
}

#[test]
fn kshot_examples() {
    let fg = kshot(&[Tensor::zeros(&[2, 3, 4])]);
    assert!(fg.data().iter().all(|&v| v == 0.5));
    let a = Tensor::from_fn(&[2, 2, 2], |i| if i < 4 { 1.0 } else { 0.0 });
    let b = Tensor::from_fn(&[2, 2, 2], |i| if i < 4 { -1.0 } else { 0.0 });
    assert!(kshot(&[a, b]).data().iter().all(|&v| v == 0.5));
}

#[test]
fn kshot_matches_softmax_of_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logits: Vec<_> = (0..3).map(|_| Tensor::from_fn(&[2, 4, 5], |_| rng.gen_range(-4.0..4.0))).collect();
    let fg = kshot(&logits);
    for p in 0..20 {
        let f: f64 = logits.iter().map(|l| l.data()[p]).sum::<f64>() / 3.0;
        let b: f64 = logits.iter().map(|l| l.data()[20 + p]).sum::<f64>() / 3.0;
        let want = f.exp() / (f.exp() + b.exp());
        assert!((fg.data()[p] - want).abs() <= 1e-12);
    }
}

#[test]
fn kshot_shape_mismatch() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::<f64>::zeros(&[2, 3, 3]));
    let b = tape.constant(Tensor::<f64>::zeros(&[2, 3, 4]));
    assert!(kshot_foreground(&tape, &[a, b]).is_err());
    assert!(kshot_foreground(&tape, &[tape.constant(Tensor::<f64>::zeros(&[3, 3, 3]))]).is_err());
    assert!(kshot_foreground::<f64>(&tape, &[]).is_err());
}

#[test]
fn occurrence_examples() {
    let cfg = InferenceConfig::default();
    let mut m = Tensor::zeros(&[3, 3]);
    m.data_mut()[4] = 0.5;
    assert_eq!(predict_occurrence(&[m], &cfg), vec![1]);
    assert_eq!(predict_occurrence(&[Tensor::<f64>::zeros(&[3, 3])], &cfg), vec![0]);
    let a = Tensor::from_fn(&[2, 2], |i| if i == 1 { 0.6 } else { 0.1 });
    let b = Tensor::from_fn(&[2, 2], |i| if i == 3 { 0.2 } else { 0.0 });
    assert_eq!(predict_occurrence(&[a, b], &cfg), vec![1, 0]);
    assert!(InferenceConfig { delta: 1.0 }.validate().is_err());
    assert!(InferenceConfig { delta: 0.0 }.validate().is_err());
}

#[test]
fn occurrence_is_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = InferenceConfig::default();
    for _ in 0..200 {
        let mut maps = rand_maps(&mut rng, 3, 3, 3);
        let before = predict_occurrence(&maps, &cfg);
        let (n, p) = (rng.gen_range(0..3), rng.gen_range(0..9));
        let v = maps[n].data()[p];
        maps[n].data_mut()[p] = rng.gen_range(v..=1.0);
        let after = predict_occurrence(&maps, &cfg);
        assert!(before[n] == 0 || after[n] == 1);
    }
}

#[test]
fn background_examples() {
    let y = merge(&[Tensor::full(&[2, 2], 0.7)]);
    assert!(y.data().chunks(2).all(|px| px[0] == 0.7 && (px[1] - 0.3).abs() < 1e-15));
    let y = merge(&[Tensor::full(&[2, 2], 0.8), Tensor::full(&[2, 2], 0.4)]);
    assert!(y.data().chunks(3).all(|px| (px[2] - 0.4).abs() < 1e-15));
}

#[test]
fn background_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in 1..5 {
        let maps = rand_maps(&mut rng, n, 3, 4);
        let y = merge(&maps);
        for p in 0..12 {
            for (c, m) in maps.iter().enumerate() {
                assert_eq!(y.data()[p * (n + 1) + c], m.data()[p]);
            }
            let bg = maps.iter().map(|m| 1.0 - m.data()[p]).sum::<f64>() / n as f64;
            assert!((y.data()[p * (n + 1) + n] - bg).abs() <= 1e-12);
            if n == 1 {
                assert!((y.data()[p * 2 + 1] - (1.0 - maps[0].data()[p])).abs() <= 1e-15);
            }
        }
    }
}

#[test]
fn segmentation_examples() {
    let labels = predict_segmentation(&merge(&[Tensor::full(&[2, 3], 0.9)])).unwrap();
    assert!(labels.data().iter().all(|&l| l == 1));
    let y = merge(&[Tensor::full(&[1, 1], 0.2), Tensor::full(&[1, 1], 0.3)]);
    assert_eq!(predict_segmentation(&y).unwrap().data(), &[3]);
    let y = merge(&[Tensor::full(&[1, 1], 0.6), Tensor::full(&[1, 1], 0.6)]);
    assert_eq!(predict_segmentation(&y).unwrap().data(), &[1]);
}

#[test]
fn class_permutation_is_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = InferenceConfig::default();
    for _ in 0..20 {
        let maps = rand_maps(&mut rng, 3, 4, 4);
        let perm = [2, 0, 1];
        let permuted: Vec<_> = perm.iter().map(|&i| maps[i].clone()).collect();
        let a = predict(&maps, &cfg).unwrap();
        let b = predict(&permuted, &cfg).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(b.occurrence[dst], a.occurrence[src]);
        }
        for (la, lb) in a.segmentation.data().iter().zip(b.segmentation.data()) {
            let expect = if *la == 4 { 4 } else { perm.iter().position(|&s| s + 1 == *la as usize).unwrap() as u8 + 1 };
            assert_eq!(*lb, expect);
        }
        let (ya, yb) = (merge(&maps), merge(&permuted));
        for p in 0..16 {
            assert!((ya.data()[p * 4 + 3] - yb.data()[p * 4 + 3]).abs() <= 1e-15);
        }
    }
}

#[test]
fn classification_loss_examples() {
    let half = Tensor::full(&[4, 4], 0.5);
    assert!((cls_loss(std::slice::from_ref(&half), &[1], ClassLossForm::Bce) - LN2).abs() < 1e-6);
    assert!((cls_loss(&[half.clone(), half.clone()], &[1, 0], ClassLossForm::Bce) - LN2).abs() < 1e-6);
    assert!(cls_loss(&[Tensor::full(&[4, 4], 1.0)], &[1], ClassLossForm::Bce) <= 1e-6);
    assert!(cls_loss(&[Tensor::full(&[4, 4], 0.0)], &[0], ClassLossForm::Bce) <= 1e-6);
    // the single-term form ignores negatives entirely
    assert_eq!(cls_loss(&[Tensor::full(&[4, 4], 0.9)], &[0], ClassLossForm::PositiveOnly), 0.0);
    assert!((cls_loss(&[half.clone(), half], &[1, 0], ClassLossForm::PositiveOnly) - LN2 / 2.0).abs() < 1e-6);
}

#[test]
fn classification_loss_rejects_bad_labels() {
    let tape = Tape::new();
    let m = tape.constant(Tensor::<f64>::full(&[2, 2], 0.5));
    assert!(loss_classification(&tape, &[m], &[2], ClassLossForm::Bce).is_err());
    assert!(loss_classification(&tape, &[m], &[1, 0], ClassLossForm::Bce).is_err());
}

#[test]
fn segmentation_loss_examples() {
    let seg = merge(&[Tensor::full(&[3, 3], 0.5)]);
    let gt = one_hot(&LabelMap::filled(3, 3, 1), 2).unwrap();
    assert!((seg_loss(&seg, &gt) - LN2 / 2.0).abs() < 1e-6);
    let labels = LabelMap::new(1, 2, vec![1, 2]).unwrap();
    let perfect = merge(&[Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap()]);
    assert!(seg_loss(&perfect, &one_hot(&labels, 2).unwrap()) <= 1e-6);
}

#[test]
fn segmentation_loss_matches_double_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in 1..4 {
        let seg = merge(&rand_maps(&mut rng, n, 3, 5));
        let labels = LabelMap::new(3, 5, (0..15).map(|_| rng.gen_range(1..=n as u8 + 1)).collect()).unwrap();
        let gt = one_hot(&labels, n + 1).unwrap();
        let mut want = 0.0;
        for p in 0..15 {
            for c in 0..=n {
                want += gt.data()[p * (n + 1) + c] * seg.data()[p * (n + 1) + c].clamp(1e-7, 1.0).ln();
            }
        }
        want *= -1.0 / ((n + 1) * 15) as f64;
        assert!((seg_loss(&seg, &gt) - want).abs() <= 1e-12);
    }
}

#[test]
fn losses_are_non_negative() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let maps = rand_maps(&mut rng, 2, 3, 3);
        let y: Vec<u8> = (0..2).map(|_| rng.gen_range(0..=1)).collect();
        assert!(cls_loss(&maps, &y, ClassLossForm::Bce) >= 0.0);
        let labels = LabelMap::new(3, 3, (0..9).map(|_| rng.gen_range(1..=3)).collect()).unwrap();
        assert!(seg_loss(&merge(&maps), &one_hot(&labels, 3).unwrap()) >= 0.0);
    }
}

#[test]
fn segmentation_loss_rejects_non_one_hot() {
    let seg = merge(&[Tensor::full(&[1, 2], 0.5)]);
    let bad = Tensor::new(&[1, 2, 2], vec![1.0, 1.0, 0.0, 1.0]).unwrap();
    let tape = Tape::new();
    assert!(loss_segmentation(tape.constant(seg.clone()), &bad).is_err());
    let zero = Tensor::new(&[1, 2, 2], vec![0.0, 0.0, 0.0, 1.0]).unwrap();
    assert!(loss_segmentation(tape.constant(seg), &zero).is_err());
    assert!(one_hot::<f64>(&LabelMap::filled(1, 1, 3), 2).is_err());
}
