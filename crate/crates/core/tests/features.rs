use ifsl::backbone::{build_backbone, BackboneConfig, FeaturePyramid};
use ifsl::hypercorrelation::{build_hypercorrelation, cosine_correlation};
use ifsl::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn rand_pyramid(rng: &mut ChaCha8Rng, sizes: &[(usize, usize)], layers: &[usize], c: usize) -> FeaturePyramid<f64> {
    FeaturePyramid {
        groups: sizes
            .iter()
            .zip(layers)
            .map(|(&(h, w), &n)| (0..n).map(|_| rand_tensor(rng, &[c, h, w])).collect())
            .collect(),
    }
}

/// Cosine-then-ReLU computed position by position.
fn cosine_oracle(q: &Tensor<f64>, s: &Tensor<f64>) -> Tensor<f64> {
    let (c, hq, wq) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let (hs, ws) = (s.shape()[1], s.shape()[2]);
    Tensor::from_fn(&[hq, wq, hs, ws], |flat| {
        let (a, b, i, j) = (flat / (wq * hs * ws), flat / (hs * ws) % wq, flat / ws % hs, flat % ws);
        let (mut dot, mut nq, mut ns) = (0.0, 0.0, 0.0);
        for ch in 0..c {
            let (x, y) = (q.at(&[ch, a, b]), s.at(&[ch, i, j]));
            dot += x * y;
            nq += x * x;
            ns += y * y;
        }
        (dot / (nq.sqrt() * ns.sqrt() + 1e-8)).max(0.0)
    })
}

fn cosine(q: &Tensor<f64>, s: &Tensor<f64>) -> Tensor<f64> {
    let tape = Tape::new();
    cosine_correlation(tape.constant(q.clone()), tape.constant(s.clone()))
        .unwrap()
        .value()
        .as_ref()
        .clone()
}

#[test]
fn same_seed_gives_identical_parameters() {
    let a = build_backbone::<f32>(&BackboneConfig::default()).unwrap();
    let b = build_backbone::<f32>(&BackboneConfig::default()).unwrap();
    assert_eq!(a.params().to_bytes(), b.params().to_bytes());
    let other = BackboneConfig { seed: 1, ..Default::default() };
    let c = build_backbone::<f32>(&other).unwrap();
    assert_ne!(a.params().to_bytes(), c.params().to_bytes());
}

#[test]
fn frozen_backbone_has_no_trainable_parameters() {
    let frozen = build_backbone::<f32>(&BackboneConfig::default()).unwrap();
    assert_eq!(frozen.params().trainable_count(), 0);
    let cfg = BackboneConfig { frozen: false, ..Default::default() };
    let open = build_backbone::<f32>(&cfg).unwrap();
    let total: usize = open.params().iter().map(|p| p.value.len()).sum();
    assert_eq!(open.params().trainable_count(), total);
}

#[test]
fn pyramid_shapes_at_128() {
    let bb = build_backbone::<f32>(&BackboneConfig::default()).unwrap();
    let img = Tensor::from_fn(&[3, 128, 128], |i| (i % 17) as f32 / 17.0);
    let pyr = bb.extract_pyramid(&img).unwrap();
    assert_eq!(pyr.layer_counts(), vec![2, 2, 1]);
    let sizes: Vec<_> = (0..3).map(|p| pyr.spatial(p)).collect();
    assert_eq!(sizes, vec![(16, 16), (8, 8), (4, 4)]);
    for g in &pyr.groups {
        for t in g {
            assert!(t.all_finite());
            assert_eq!(&t.shape()[1..], g[0].shape().get(1..).unwrap());
        }
    }
}

#[test]
fn pyramid_shapes_at_400() {
    let bb = build_backbone::<f32>(&BackboneConfig::default()).unwrap();
    let pyr = bb.extract_pyramid(&Tensor::zeros(&[3, 400, 400])).unwrap();
    let sizes: Vec<_> = (0..3).map(|p| pyr.spatial(p).0).collect();
    assert_eq!(sizes, vec![50, 25, 12]);
}

#[test]
fn zero_image_gives_finite_features() {
    let bb = build_backbone::<f32>(&BackboneConfig::default()).unwrap();
    let pyr = bb.extract_pyramid(&Tensor::zeros(&[3, 64, 64])).unwrap();
    assert!(pyr.groups.iter().flatten().all(|t| t.all_finite()));
}

#[test]
fn extraction_is_bitwise_deterministic() {
    let bb = build_backbone::<f32>(&BackboneConfig::default()).unwrap();
    let img = Tensor::from_fn(&[3, 64, 64], |i| ((i * 7919) % 101) as f32 / 101.0);
    let a = bb.extract_pyramid(&img).unwrap();
    let b = bb.extract_pyramid(&img).unwrap();
    for (x, y) in a.groups.iter().flatten().zip(b.groups.iter().flatten()) {
        assert_eq!(x.data(), y.data());
    }
}

#[test]
fn cosine_self_similarity_diagonal_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = rand_tensor(&mut rng, &[5, 3, 4]);
    let out = cosine(&f, &f);
    for i in 0..3 {
        for j in 0..4 {
            assert!((out.at(&[i, j, i, j]) - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn cosine_orthogonal_and_antiparallel_are_zero() {
    let q = Tensor::new(&[2, 1, 1], vec![1.0, 0.0]).unwrap();
    let s = Tensor::new(&[2, 1, 2], vec![0.0, -1.0, 1.0, 0.0]).unwrap();
    let out = cosine(&q, &s);
    assert_eq!(out.data(), &[0.0, 0.0]);
}

#[test]
fn cosine_channel_mismatch_is_an_error() {
    let tape = Tape::new();
    let q = tape.constant(Tensor::<f64>::ones(&[2, 2, 2]));
    let s = tape.constant(Tensor::<f64>::ones(&[3, 2, 2]));
    assert!(cosine_correlation(q, s).is_err());
}

#[test]
fn cosine_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..5 {
        let q = rand_tensor(&mut rng, &[6, 3, 2]);
        let s = rand_tensor(&mut rng, &[6, 4, 3]);
        assert!(cosine(&q, &s).max_abs_diff(&cosine_oracle(&q, &s)) < 1e-12);
    }
}

#[test]
fn hypercorrelation_shapes_and_layer_oracle() {
    let bb = build_backbone::<f64>(&BackboneConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let qi = Tensor::from_fn(&[3, 128, 128], |_| rng.gen_range(0.0..1.0));
    let si = Tensor::from_fn(&[3, 128, 128], |_| rng.gen_range(0.0..1.0));
    let (qp, sp) = (bb.extract_pyramid(&qi).unwrap(), bb.extract_pyramid(&si).unwrap());
    let hc = build_hypercorrelation(&qp, &sp).unwrap();
    let shapes: Vec<_> = hc.levels.iter().map(|l| l.shape().to_vec()).collect();
    assert_eq!(shapes, vec![vec![16, 16, 16, 16, 2], vec![8, 8, 8, 8, 2], vec![4, 4, 4, 4, 1]]);
    for (p, level) in hc.levels.iter().enumerate() {
        let c = level.shape()[4];
        for l in 0..c {
            let oracle = cosine_oracle(&qp.groups[p][l], &sp.groups[p][l]);
            for (i, &v) in oracle.data().iter().enumerate() {
                assert!((level.data()[i * c + l] - v).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn hypercorrelation_identity_range_symmetry_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let sizes = [(4, 4), (2, 2), (1, 1)];
    let a = rand_pyramid(&mut rng, &sizes, &[2, 3, 1], 7);
    let b = rand_pyramid(&mut rng, &sizes, &[2, 3, 1], 7);

    let self_hc = build_hypercorrelation(&a, &a).unwrap();
    for level in &self_hc.levels {
        let s = level.shape().to_vec();
        for i in 0..s[0] {
            for j in 0..s[1] {
                for c in 0..s[4] {
                    assert!((level.at(&[i, j, i, j, c]) - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    let ab = build_hypercorrelation(&a, &b).unwrap();
    let ba = build_hypercorrelation(&b, &a).unwrap();
    for (x, y) in ab.levels.iter().zip(&ba.levels) {
        assert!(x.data().iter().all(|&v| (0.0..=1.0 + 1e-6).contains(&v)));
        let s = x.shape().to_vec();
        for flat in 0..x.len() {
            let idx = [
                flat / (s[1] * s[2] * s[3] * s[4]),
                flat / (s[2] * s[3] * s[4]) % s[1],
                flat / (s[3] * s[4]) % s[2],
                flat / s[4] % s[3],
                flat % s[4],
            ];
            let swapped = y.at(&[idx[2], idx[3], idx[0], idx[1], idx[4]]);
            assert!((x.data()[flat] - swapped).abs() < 1e-10);
        }
    }

    let mut scaled = a.clone();
    scaled.groups[1][2] = scaled.groups[1][2].map(|v| v * 37.5);
    scaled.groups[0][0] = scaled.groups[0][0].map(|v| v * 0.02);
    let sc = build_hypercorrelation(&scaled, &b).unwrap();
    for (x, y) in ab.levels.iter().zip(&sc.levels) {
        assert!(x.max_abs_diff(y) < 1e-6);
    }
}

#[test]
fn hypercorrelation_rejects_group_mismatch() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = rand_pyramid(&mut rng, &[(2, 2), (1, 1)], &[1, 1], 3);
    let b = rand_pyramid(&mut rng, &[(2, 2), (1, 1), (1, 1)], &[1, 1, 1], 3);
    assert!(build_hypercorrelation(&a, &b).is_err());
    let c = rand_pyramid(&mut rng, &[(2, 2), (1, 1)], &[2, 1], 3);
    assert!(build_hypercorrelation(&a, &c).is_err());
}
