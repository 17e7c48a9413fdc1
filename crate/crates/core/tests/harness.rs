use std::fs;
use std::path::Path;

use ifsl::harness::io::{read_label_map, write_label_map};
use ifsl::harness::metrics::{compute_metrics_from, episode_csv};
use ifsl::harness::sampler::relabel;
use ifsl::harness::{compute_metrics, generate_dataset, Dataset, EpisodeOutcome, EpisodeSampler, ShapeWorldSpec};
use ifsl::mask::LabelMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn multi_object_spec() -> ShapeWorldSpec {
    ShapeWorldSpec {
        objects_per_image: (1, 3),
        object_scale: (0.25, 0.45),
        images_per_class: 6,
        ..Default::default()
    }
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn same_seed_gives_identical_files() {
    let spec = multi_object_spec();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_dataset(&spec).unwrap().save(a.path()).unwrap();
    generate_dataset(&spec).unwrap().save(b.path()).unwrap();
    let (fa, fb) = (dir_contents(a.path()), dir_contents(b.path()));
    assert_eq!(fa.len(), 1 + 8 * 6 + fa.iter().filter(|(n, _)| n.ends_with(".pgm")).count());
    assert_eq!(fa, fb);
    let other = generate_dataset(&ShapeWorldSpec { seed: 1, ..spec }).unwrap();
    assert_ne!(other.samples, generate_dataset(&multi_object_spec()).unwrap().samples);
}

#[test]
fn disk_round_trip() {
    let data = generate_dataset(&multi_object_spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    data.save(dir.path()).unwrap();
    assert_eq!(Dataset::load(dir.path()).unwrap(), data);
    // one directory per class
    let dirs = fs::read_dir(dir.path()).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert_eq!(dirs, 8);
}

#[test]
fn corrupt_files_are_reported() {
    let data = generate_dataset(&ShapeWorldSpec { images_per_class: 2, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    data.save(dir.path()).unwrap();
    let img = dir.path().join(data.spec.class_name(0)).join("img_00_0000.ppm");
    let bytes = fs::read(&img).unwrap();
    fs::write(&img, &bytes[..bytes.len() - 5]).unwrap();
    assert!(Dataset::load(dir.path()).is_err());
    fs::write(dir.path().join("manifest.txt"), "nonsense").unwrap();
    assert!(Dataset::load(dir.path()).is_err());
}

#[test]
fn folds_partition_classes() {
    let data = generate_dataset(&ShapeWorldSpec { images_per_class: 1, ..Default::default() }).unwrap();
    let mut seen = Vec::new();
    for f in 0..4 {
        let c = data.fold_classes(f);
        assert_eq!(c.len(), 2);
        assert!(data.train_classes(f).iter().all(|x| !c.contains(x)));
        seen.extend(c);
    }
    seen.sort();
    assert_eq!(seen, (0..8).collect::<Vec<_>>());
    assert!(generate_dataset(&ShapeWorldSpec { folds: 3, ..Default::default() }).is_err());
}

#[test]
fn object_masks_partition_each_image() {
    let data = generate_dataset(&multi_object_spec()).unwrap();
    let mut multi = 0;
    for s in &data.samples {
        multi += usize::from(s.objects.len() > 1);
        let mut cover = vec![0u8; 64 * 64];
        for o in &s.objects {
            assert!(o.mask.any(), "{} has a fully hidden object", s.name);
            for (c, &b) in cover.iter_mut().zip(o.mask.data()) {
                *c += u8::from(b);
            }
        }
        // objects never share a pixel; the rest is background
        assert!(cover.iter().all(|&c| c <= 1));
    }
    assert!(multi > 0);
}

#[test]
fn unsatisfiable_placement_is_an_error() {
    let spec = ShapeWorldSpec {
        objects_per_image: (6, 6),
        object_scale: (0.9, 1.0),
        max_overlap: 0.01,
        images_per_class: 1,
        ..Default::default()
    };
    assert!(generate_dataset(&spec).is_err());
}

#[test]
fn one_way_one_shot_contract() {
    let data = generate_dataset(&multi_object_spec()).unwrap();
    let sampler = EpisodeSampler::new(&data, &data.all_classes(), 1, 1, 0.01).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..50 {
        let e = sampler.sample(&mut rng).unwrap();
        assert_eq!((e.n_way(), e.k_shot()), (1, 1));
        assert!(e.y_gt == [0] || e.y_gt == [1]);
        e.validate(&data).unwrap();
    }
}

#[test]
fn relabel_keeps_only_support_classes() {
    let data = generate_dataset(&multi_object_spec()).unwrap();
    let (idx, s) = data.samples.iter().enumerate().find(|(_, s)| s.classes().len() >= 2).unwrap();
    let present = s.classes();
    let (a, b) = (present[0], present[1]);
    let c = (0..8).find(|x| !present.contains(x)).unwrap();
    let (labels, y) = relabel(&data, idx, &[b, c]);
    assert_eq!(y, vec![1, 0]);
    let a_mask = s.class_mask(a);
    for (i, &l) in labels.data().iter().enumerate() {
        if a_mask.data()[i] {
            assert_eq!(l, 3);
        }
        assert_eq!(l == 1, s.class_mask(b).data()[i]);
    }
}

#[test]
fn insufficient_data_is_reported() {
    let data = generate_dataset(&ShapeWorldSpec { images_per_class: 2, ..Default::default() }).unwrap();
    assert!(EpisodeSampler::new(&data, &data.fold_classes(0), 3, 1, 0.01).is_err());
    assert!(EpisodeSampler::new(&data, &data.all_classes(), 1, 2, 0.01).is_err());
    assert!(EpisodeSampler::new(&data, &data.all_classes(), 1, 1, 0.01).is_ok());
}

#[test]
fn episodes_satisfy_invariants_over_many_samples() {
    let data = generate_dataset(&multi_object_spec()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (n, k) in [(1, 1), (2, 1), (3, 2)] {
        let sampler = EpisodeSampler::new(&data, &data.all_classes(), n, k, 0.01).unwrap();
        for _ in 0..3400 {
            sampler.sample(&mut rng).unwrap().validate(&data).unwrap();
        }
    }
}

#[test]
fn positive_rate_matches_analytic_value() {
    let data = generate_dataset(&multi_object_spec()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for n in [1, 2] {
        let sampler = EpisodeSampler::new(&data, &data.all_classes(), n, 1, 0.01).unwrap();
        let trials = 10_000;
        let hits = (0..trials)
            .filter(|_| sampler.sample(&mut rng).unwrap().y_gt.contains(&1))
            .count();
        let rate = hits as f64 / trials as f64;
        let expected = sampler.analytic_positive_rate();
        assert!((rate - expected).abs() <= 0.02, "N={n}: {rate} vs {expected}");
    }
}

fn outcome(classes: Vec<usize>, y_gt: Vec<u8>, y_pred: Vec<u8>, gt: &[u8], pred: &[u8], w: usize) -> EpisodeOutcome {
    let h = gt.len() / w;
    EpisodeOutcome {
        classes,
        y_gt,
        y_pred,
        seg_gt: LabelMap::new(h, w, gt.to_vec()).unwrap(),
        seg_pred: LabelMap::new(h, w, pred.to_vec()).unwrap(),
    }
}

#[test]
fn perfect_predictions_score_one() {
    let o = outcome(vec![3, 5], vec![1, 1], vec![1, 1], &[1, 2, 3, 3], &[1, 2, 3, 3], 2);
    let r = compute_metrics(&[o]).unwrap();
    assert_eq!((r.exact_ratio, r.class_accuracy, r.miou, r.fbiou), (1.0, 1.0, 1.0, 1.0));
}

#[test]
fn partial_occurrence_scores() {
    let o = outcome(vec![0, 1], vec![1, 1], vec![1, 0], &[1, 2, 3, 3], &[1, 3, 3, 3], 2);
    let r = compute_metrics(&[o]).unwrap();
    assert_eq!((r.exact_ratio, r.class_accuracy), (0.0, 0.5));
    assert!(r.exact_ratio <= r.class_accuracy);
}

/// Recounts every pixel into a per-class confusion table.
fn confusion_oracle(outcomes: &[EpisodeOutcome]) -> (f64, f64) {
    let mut table: std::collections::BTreeMap<usize, [u64; 3]> = Default::default();
    let mut fb = [[0u64; 2]; 2];
    for o in outcomes {
        let n = o.classes.len();
        for p in 0..o.seg_gt.data().len() {
            let (g, q) = (o.seg_gt.data()[p] as usize, o.seg_pred.data()[p] as usize);
            for (slot, &c) in o.classes.iter().enumerate() {
                let e = table.entry(c).or_default();
                let (gi, qi) = (g == slot + 1, q == slot + 1);
                if gi && qi {
                    e[0] += 1;
                } else if gi {
                    e[1] += 1;
                } else if qi {
                    e[2] += 1;
                }
            }
            fb[usize::from(g <= n)][usize::from(q <= n)] += 1;
        }
    }
    let ious: Vec<f64> = table
        .values()
        .filter(|e| e.iter().sum::<u64>() > 0)
        .map(|e| e[0] as f64 / (e[0] + e[1] + e[2]) as f64)
        .collect();
    let miou = ious.iter().sum::<f64>() / ious.len() as f64;
    let iou = |k: usize| fb[k][k] as f64 / (fb[k][k] + fb[k][1 - k] + fb[1 - k][k]) as f64;
    (miou, (iou(0) + iou(1)) / 2.0)
}

#[test]
fn metrics_match_confusion_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let outcomes: Vec<_> = (0..6)
            .map(|_| {
                let n = rng.gen_range(1..=3usize);
                let mut classes: Vec<usize> = (0..6).collect();
                rand::seq::SliceRandom::shuffle(classes.as_mut_slice(), &mut rng);
                classes.truncate(n);
                let gt: Vec<u8> = (0..12).map(|_| rng.gen_range(1..=n as u8 + 1)).collect();
                let pred: Vec<u8> = (0..12).map(|_| rng.gen_range(1..=n as u8 + 1)).collect();
                let y = |m: &[u8]| (1..=n as u8).map(|l| u8::from(m.contains(&l))).collect::<Vec<_>>();
                outcome(classes, y(&gt), y(&pred), &gt, &pred, 4)
            })
            .collect();
        let r = compute_metrics(&outcomes).unwrap();
        let (miou, fbiou) = confusion_oracle(&outcomes);
        assert!((r.miou - miou).abs() <= 1e-12);
        assert!((r.fbiou - fbiou).abs() <= 1e-12);
        assert!(r.exact_ratio <= r.class_accuracy);
        let mut reversed = outcomes.clone();
        reversed.reverse();
        assert_eq!(compute_metrics(&reversed).unwrap().miou, r.miou);
    }
}

#[test]
fn metric_inputs_must_align() {
    let o = outcome(vec![0], vec![1], vec![1], &[1, 2], &[1, 2], 2);
    let truths = vec![(o.classes.clone(), o.y_gt.clone(), o.seg_gt.clone())];
    assert!(compute_metrics_from(&[], &truths).is_err());
    let preds = vec![(o.y_pred.clone(), o.seg_pred.clone())];
    assert_eq!(compute_metrics_from(&preds, &truths).unwrap().miou, 1.0);
    let bad = outcome(vec![0, 1], vec![1], vec![1], &[1, 2], &[1, 2], 2);
    assert!(compute_metrics(&[bad]).is_err());
}

#[test]
fn label_maps_and_csv_serialize() {
    let dir = tempfile::tempdir().unwrap();
    let labels = LabelMap::new(2, 3, vec![1, 2, 3, 3, 2, 1]).unwrap();
    let path = dir.path().join("pred.pgm");
    write_label_map(&path, &labels).unwrap();
    assert_eq!(read_label_map(&path).unwrap(), labels);
    let o = outcome(vec![4, 2], vec![1, 0], vec![1, 1], &[1, 3], &[1, 2], 2);
    let csv = episode_csv(&[(7, o)]);
    assert_eq!(csv, "episode,query,classes,y_gt,y_pred,exact\n0,7,4 2,1 0,1 1,0\n");
    let report = compute_metrics(&[]).unwrap();
    assert!(report.to_csv().starts_with("metric,value\nepisodes,0\n"));
}
