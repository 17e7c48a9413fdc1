use ifsl::asnet::{asnet_forward_var, asnet_trace, build_asnet, AsnetConfig};
use ifsl::backbone::{build_backbone, BackboneConfig};
use ifsl::hypercorrelation::{build_hypercorrelation, build_hypercorrelation_on, Hypercorrelation};
use ifsl::ifsl::{kshot_foreground, loss_segmentation, merge_background, one_hot};
use ifsl::mask::{LabelMap, Mask};
use ifsl::tensor::{grad_check, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config(level_channels: Vec<usize>) -> AsnetConfig {
    AsnetConfig {
        level_channels,
        squeeze_channels: [8, 16],
        decoder_channels: 8,
        heads: 2,
        norm_groups: 2,
        ..Default::default()
    }
}

fn hyper_for(size: usize) -> Hypercorrelation<f64> {
    let bb = build_backbone::<f64>(&BackboneConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(size as u64);
    let q = Tensor::from_fn(&[3, size, size], |_| rng.gen_range(0.0..1.0));
    let s = Tensor::from_fn(&[3, size, size], |_| rng.gen_range(0.0..1.0));
    build_hypercorrelation(&bb.extract_pyramid(&q).unwrap(), &bb.extract_pyramid(&s).unwrap()).unwrap()
}

fn support_dims(shape: &[usize]) -> (usize, usize) {
    (shape[2], shape[3])
}

#[test]
fn stage_shapes_at_128() {
    let net = build_asnet::<f64>(&small_config(vec![2, 2, 1])).unwrap();
    let hyper = hyper_for(128);
    let mask = Mask::from_fn(128, 128, |i, j| i > 40 && j < 90);
    let (out, shapes) = asnet_trace(&hyper, Some(&mask), &net, 128, 128).unwrap();
    assert_eq!(out.shape(), &[2, 128, 128]);
    assert!(out.all_finite());
    let get = |name: &str| shapes.iter().find(|(n, _)| n == name).unwrap().1.shape().to_vec();
    assert_eq!(get("level0.pool"), vec![256, 2, 8, 8]);
    assert_eq!(get("level0.as0"), vec![256, 8, 2, 2]);
    assert_eq!(get("level0.as1"), vec![256, 16, 1, 1]);
    assert_eq!(get("level1.as0"), vec![64, 8, 2, 2]);
    assert_eq!(get("level1.as1"), vec![64, 16, 1, 1]);
    assert_eq!(get("level2.as0"), vec![16, 8, 1, 1]);
    assert_eq!(get("level2.as1"), vec![16, 16, 1, 1]);
    assert_eq!(get("fuse1.as1"), vec![64, 16, 1, 1]);
    assert_eq!(get("fuse0.as1"), vec![256, 16, 1, 1]);
    assert_eq!(get("squeezed"), vec![256, 16, 1, 1]);
}

#[test]
fn support_extent_never_grows_and_reaches_a_point() {
    for size in [64, 128, 256] {
        let net = build_asnet::<f64>(&small_config(vec![2, 2, 1])).unwrap();
        let (_, shapes) = asnet_trace(&hyper_for(size), None, &net, size, size).unwrap();
        for p in 0..3 {
            let stack: Vec<_> = shapes
                .iter()
                .filter(|(n, _)| n.starts_with(&format!("level{p}.as")))
                .map(|(_, s)| support_dims(s.shape()))
                .collect();
            let input = hyper_for(size).levels[p].shape()[2];
            let mut prev = if p == 0 { input.div_ceil(2) } else { input };
            for &(h, w) in &stack {
                assert!(h <= prev && w == h, "size {size} level {p}: {stack:?}");
                prev = h;
            }
        }
        let last = shapes.iter().find(|(n, _)| n == "squeezed").unwrap();
        assert_eq!(support_dims(last.1.shape()), (1, 1));
    }
}

#[test]
fn support_extent_strictly_shrinks_at_400() {
    // at 400x400 every level stack ends at 2x2 and each fusion pair halves it
    let cfg = AsnetConfig::default();
    for p in 0..3 {
        let mut n = [50usize.div_ceil(2), 25, 12][p];
        for l in cfg.level_plan(p) {
            let next = l.config.out_extent(n);
            assert!(next < n);
            n = next;
        }
        assert_eq!(n, 2);
    }
    let fuse = cfg.fusion_plan(0);
    assert_eq!(fuse[1].config.out_extent(fuse[0].config.out_extent(2)), 1);
}

#[test]
fn constant_hypercorrelation_gives_query_constant_features() {
    let net = build_asnet::<f64>(&small_config(vec![2, 2, 1])).unwrap();
    let hyper = Hypercorrelation {
        levels: vec![
            Tensor::full(&[8, 8, 8, 8, 2], 0.3),
            Tensor::full(&[4, 4, 4, 4, 2], 0.3),
            Tensor::full(&[2, 2, 2, 2, 1], 0.3),
        ],
    };
    let (out, trace) = asnet_trace(&hyper, None, &net, 64, 64).unwrap();
    assert!(out.all_finite());
    // every query position sees the same input, so the squeezed features agree;
    // the zero-padded decoder convolutions then only perturb the image border
    let squeezed = &trace.iter().find(|(n, _)| n == "squeezed").unwrap().1;
    let width = squeezed.shape()[1];
    for row in squeezed.data().chunks(width) {
        assert!(row.iter().zip(&squeezed.data()[..width]).all(|(a, b)| (a - b).abs() < 1e-10));
    }
    for ch in 0..2 {
        let at = |i: usize, j: usize| out.at(&[ch, i, j]);
        // the region whose receptive field never touches the padding
        for i in 30..34 {
            for j in 30..34 {
                assert!((at(i, j) - at(32, 32)).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn rejects_nonconforming_levels() {
    let net = build_asnet::<f64>(&small_config(vec![2, 2, 1])).unwrap();
    let mut hyper = hyper_for(64);
    hyper.levels[1] = Tensor::full(&[4, 4, 4, 4, 3], 0.1);
    assert!(asnet_trace(&hyper, None, &net, 64, 64).is_err());
    hyper.levels.pop();
    assert!(asnet_trace(&hyper, None, &net, 64, 64).is_err());
}

#[test]
fn parameter_count_with_resnet50_channels() {
    let cfg = AsnetConfig {
        level_channels: vec![4, 6, 3],
        ..Default::default()
    };
    let net = build_asnet::<f32>(&cfg).unwrap();
    let count = net.param_count();
    assert!((1_040_000..=1_560_000).contains(&count), "{count}");
    let planned: usize = (0..3)
        .flat_map(|p| cfg.level_plan(p).into_iter().chain(if p < 2 { cfg.fusion_plan(p) } else { vec![] }))
        .map(|l| l.config.param_count())
        .sum::<usize>()
        + cfg.decoder_plan().iter().map(|(_, a, b)| a * b * 9 + b).sum::<usize>();
    assert_eq!(planned, count);
}

#[test]
fn end_to_end_gradient_check() {
    // tiny 16x16 episode: features at 2x2, 1x1, 1x1 feed correlation, network
    // and segmentation loss; every input and parameter is checked
    let cfg = AsnetConfig {
        squeeze_channels: [4, 8],
        decoder_channels: 4,
        ..small_config(vec![1, 2, 1])
    };
    let net = build_asnet::<f64>(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let layout = [(1, 2), (2, 1), (1, 1)];
    let mut feats = Vec::new();
    for _ in 0..2 {
        for (p, &(n, _)) in layout.iter().enumerate() {
            let e = layout[p].1;
            for _ in 0..n {
                feats.push(Tensor::from_fn(&[4, e, e], |_| rng.gen_range(-1.0..1.0)));
            }
        }
    }
    let n_feats = feats.len();
    let labels = LabelMap::new(16, 16, (0..256).map(|i| if i % 16 < 7 { 1 } else { 2 }).collect()).unwrap();
    let gt = one_hot::<f64>(&labels, 2).unwrap();
    let mask = Mask::from_fn(16, 16, |_, j| j < 7);
    let mut inputs = feats;
    inputs.extend(net.params.values());
    let err = grad_check(
        |tape, vars| {
            let (fv, pv) = vars.split_at(n_feats);
            let params = net.params.bind_vars(pv)?;
            let mut it = fv.iter().copied();
            let mut take = || -> Vec<Vec<_>> {
                layout.iter().map(|&(n, _)| (0..n).map(|_| it.next().unwrap()).collect()).collect()
            };
            let (q, s) = (take(), take());
            let hyper = build_hypercorrelation_on(tape, &q, &s)?;
            let logits = asnet_forward_var(&cfg, &params, &hyper, Some(&mask), 16, 16, None)?;
            let fg = kshot_foreground(tape, &[logits])?;
            loss_segmentation(merge_background(tape, &[fg])?, &gt)
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "max relative error {err}");
}
