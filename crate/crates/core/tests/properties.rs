use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use udalm::adaptation::{curriculum_ratio, num_rounds, select, PseudoLabelRecord, SelectionMode};
use udalm::checkpoint::Checkpoint;
use udalm::data::{
    augment, epoch_batches, load_dataset, oversample_source, resize_with_labels, save_dataset, AugmentConfig, Domain,
    ImageSample, PoolEntry,
};
use udalm::evaluation::{aggregate, radial_errors, MreMode};
use udalm::model::{Model, ModelConfig};
use udalm::objectives::{encode_targets, LandmarkMask};
use udalm::tensor::Tensor;

fn records(conf: &[Vec<f64>]) -> Vec<PseudoLabelRecord> {
    conf.iter()
        .enumerate()
        .map(|(i, row)| PseudoLabelRecord {
            image_id: format!("img{i:04}"),
            round: 1,
            coords: vec![[0.0, 0.0]; row.len()],
            confidences: row.clone(),
            mask: LandmarkMask::zeros(row.len()),
        })
        .collect()
}

fn table() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..6).prop_flat_map(|l| prop::collection::vec(prop::collection::vec(0.0f64..1.0, l), 1..40))
}

fn blob(h: usize, w: usize, c: [f64; 2], sigma: f64) -> Tensor<f32> {
    let data = (0..h * w)
        .map(|i| {
            let (x, y) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
            (-((x - c[0]).powi(2) + (y - c[1]).powi(2)) / (2.0 * sigma * sigma)).exp() as f32
        })
        .collect();
    Tensor::from_vec(&[h, w], data)
}

fn centroid(img: &Tensor<f32>) -> [f64; 2] {
    let w = img.shape()[1];
    let (mut sx, mut sy, mut s) = (0.0, 0.0, 0.0);
    for (i, &v) in img.data().iter().enumerate() {
        let v = v as f64;
        sx += v * ((i % w) as f64 + 0.5);
        sy += v * ((i / w) as f64 + 0.5);
        s += v;
    }
    [sx / s, sy / s]
}

fn sample(id: &str, w: usize, h: usize, seed: u64, landmarks: Option<Vec<[f64; 2]>>) -> ImageSample {
    let data = (0..w * h).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f32 / 999.0).collect();
    ImageSample {
        id: id.into(),
        pixels: Tensor::from_vec(&[h, w], data),
        original_size: [w, h],
        spacing_mm: [0.1, 0.12],
        landmarks,
        domain: Domain::Source,
        subdomain: Some("a".into()),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_supported_cell_decodes_to_the_landmark(
        x in 0.0f64..63.99, y in 0.0f64..47.99, stride in prop::sample::select(vec![1usize, 2, 4, 8]), sigma in 0.3f64..2.5,
    ) {
        let (h, w) = (48 / stride, 64 / stride);
        let (score, offset) = encode_targets::<f64>(&[[x, y]], h, w, stride, sigma);
        let (s, o) = (score.values.data(), offset.values.data());
        let hw = h * w;
        let peak = (y / stride as f64).floor() as usize * w + (x / stride as f64).floor() as usize;
        prop_assert_eq!(s[peak], 1.0);
        for cell in 0..hw {
            prop_assert!(s[cell] <= 1.0 && s[cell] >= 0.0);
            prop_assert_eq!(score.support[cell], s[cell] > 0.0);
            if score.support[cell] {
                let (gx, gy) = ((cell % w) as f64, (cell / w) as f64);
                let px = (gx + o[cell] + 0.5) * stride as f64;
                let py = (gy + o[hw + cell] + 0.5) * stride as f64;
                prop_assert!((px - x).abs() < 1e-9 && (py - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn dynamic_selection_takes_top_k_per_landmark(conf in table(), r in 0.01f64..=1.0) {
        let mut recs = records(&conf);
        let t = select(&mut recs, r, SelectionMode::Dynamic).unwrap();
        let m = conf.len();
        let k = ((r * m as f64 + 1e-9).floor() as usize).max(1);
        for (l, &tl) in t.iter().enumerate() {
            let chosen: Vec<&PseudoLabelRecord> = recs.iter().filter(|rec| rec.mask.get(l)).collect();
            prop_assert_eq!(chosen.len(), k);
            prop_assert!(chosen.iter().all(|rec| rec.confidences[l] >= tl));
            prop_assert!(recs.iter().filter(|rec| !rec.mask.get(l)).all(|rec| rec.confidences[l] <= tl));
        }
    }

    #[test]
    fn fixed_selection_is_a_strict_threshold(conf in table(), tau in 0.0f64..1.0) {
        let mut recs = records(&conf);
        select(&mut recs, 1.0, SelectionMode::Fixed { tau }).unwrap();
        for rec in &recs {
            for (l, &c) in rec.confidences.iter().enumerate() {
                prop_assert_eq!(rec.mask.get(l), c > tau);
            }
        }
    }

    #[test]
    fn image_level_selection_keeps_whole_images(conf in table(), r in 0.01f64..=1.0) {
        let mut recs = records(&conf);
        select(&mut recs, r, SelectionMode::ImageLevel).unwrap();
        let k = ((r * conf.len() as f64 + 1e-9).floor() as usize).max(1);
        prop_assert_eq!(recs.iter().filter(|rec| rec.mask.count() > 0).count(), k);
        prop_assert!(recs.iter().all(|rec| rec.mask.count() == 0 || rec.mask.count() == rec.mask.len()));
    }

    #[test]
    fn curriculum_reaches_full_ratio(delta in 0.05f64..=1.0) {
        let n = num_rounds(delta);
        prop_assert!((curriculum_ratio(n, delta) - 1.0).abs() < 1e-12);
        prop_assert!(n == 1 || curriculum_ratio(n - 1, delta) < 1.0);
        for t in 1..n {
            prop_assert!(curriculum_ratio(t, delta) < curriculum_ratio(t + 1, delta));
        }
    }

    #[test]
    fn aggregate_is_bounded_and_monotone(
        errors in prop::collection::vec(prop::collection::vec(0.0f64..10.0, 3), 1..20),
        mut radii in prop::collection::vec(0.1f64..10.0, 1..6),
    ) {
        radii.sort_by(f64::total_cmp);
        let pooled = aggregate(&errors, &radii, MreMode::Pooled).unwrap();
        let per_image = aggregate(&errors, &radii, MreMode::PerImage).unwrap();
        let flat: Vec<f64> = errors.iter().flatten().cloned().collect();
        let (lo, hi) = flat.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &e| (a.min(e), b.max(e)));
        prop_assert!(pooled.mre_mm >= lo - 1e-12 && pooled.mre_mm <= hi + 1e-12);
        // Every image has the same number of landmarks, so both means agree.
        prop_assert!((pooled.mre_mm - per_image.mre_mm).abs() < 1e-9);
        for pair in pooled.sdr.windows(2) {
            prop_assert!(pair[0].rate <= pair[1].rate);
        }
    }

    #[test]
    fn radial_error_is_a_scaled_distance(
        p in prop::array::uniform2(-50.0f64..50.0), q in prop::array::uniform2(-50.0f64..50.0), s in 0.01f64..2.0,
    ) {
        let e = radial_errors(&[p], &[q], [s, s])[0];
        let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
        prop_assert!((e - s * d).abs() < 1e-9);
        prop_assert_eq!(e, radial_errors(&[q], &[p], [s, s])[0]);
    }

    #[test]
    fn oversampling_is_balanced(n_source in 1usize..50, n_target in 0usize..200, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seq = oversample_source(n_source, n_target, &mut rng).unwrap();
        prop_assert_eq!(seq.len(), n_target.max(n_source));
        let mut counts = vec![0usize; n_source];
        for i in seq {
            counts[i] += 1;
        }
        prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn epoch_batches_cover_the_target_once(n_source in 1usize..20, n_target in 0usize..60, bs in 1usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batches = epoch_batches(n_source, n_target, bs, &mut rng).unwrap();
        prop_assert!(batches.iter().all(|b| !b.is_empty() && b.len() <= bs));
        let mut targets: Vec<usize> = batches.iter().flatten().filter_map(|e| match e {
            PoolEntry::Target(i) => Some(*i),
            PoolEntry::Source(_) => None,
        }).collect();
        targets.sort_unstable();
        prop_assert_eq!(targets, (0..n_target).collect::<Vec<_>>());
        let sources = batches.iter().flatten().filter(|e| matches!(e, PoolEntry::Source(_))).count();
        prop_assert_eq!(sources, n_target.max(n_source));
    }

    #[test]
    fn resize_maps_landmarks_with_the_image(
        w in 8usize..80, h in 8usize..80, nw in 8usize..80, nh in 8usize..80, fx in 0.0f64..1.0, fy in 0.0f64..1.0,
    ) {
        let p = [fx * w as f64, fy * h as f64];
        let s = sample("r", w, h, 1, Some(vec![p]));
        let (r, t) = resize_with_labels(&s, [nw, nh]);
        prop_assert_eq!(r.size(), [nw, nh]);
        let q = r.landmarks.unwrap()[0];
        prop_assert!((q[0] - p[0] * nw as f64 / w as f64).abs() < 1e-9);
        let back = t.inverse(q);
        prop_assert!((back[0] - p[0]).abs() < 1e-9 && (back[1] - p[1]).abs() < 1e-9);
    }

    #[test]
    fn augmentation_moves_landmarks_with_pixels(cx in 24.0f64..40.0, cy in 24.0f64..40.0, seed in any::<u64>()) {
        let cfg = AugmentConfig { occlusion_count: 0, blur_prob: 0.0, ..AugmentConfig::default() };
        let img = blob(64, 64, [cx, cy], 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = augment(&img, &[[cx, cy]], &cfg, &mut rng);
        prop_assert!(out.inside[0]);
        let c = centroid(&out.pixels);
        let p = out.landmarks[0];
        prop_assert!((c[0] - p[0]).abs() < 0.5 && (c[1] - p[1]).abs() < 0.5, "centroid {:?} landmark {:?}", c, p);
    }
}

#[test]
fn identity_augmentation_changes_nothing() {
    let img = blob(32, 40, [10.0, 12.0], 3.0);
    let lms = [[10.0, 12.0], [39.5, 0.0]];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = augment(&img, &lms, &AugmentConfig::identity(), &mut rng);
    assert_eq!(out.pixels, img);
    assert_eq!(out.landmarks, lms);
    assert_eq!(out.inside, vec![true, true]);
}

#[test]
fn dataset_round_trips_through_manifest_and_png() {
    let dir = tempfile::tempdir().unwrap();
    let samples =
        vec![sample("a", 20, 16, 1, Some(vec![[1.5, 2.25], [19.0, 15.5]])), sample("b", 12, 30, 2, Some(vec![[0.0, 0.0], [11.9, 29.9]]))];
    let manifest = dir.path().join("manifests/m.json");
    save_dataset(&samples, &dir.path().join("img"), &manifest).unwrap();
    let loaded = load_dataset(&manifest, Some(2)).unwrap();
    assert_eq!(loaded.len(), 2);
    for (a, b) in samples.iter().zip(&loaded) {
        assert_eq!((&a.id, a.original_size, a.spacing_mm, &a.landmarks), (&b.id, b.original_size, b.spacing_mm, &b.landmarks));
        assert_eq!(a.subdomain, b.subdomain);
        let worst = a.pixels.data().iter().zip(b.pixels.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert!(worst <= 1.0 / 65535.0, "{worst}");
    }
    assert!(matches!(load_dataset(&manifest, Some(3)), Err(udalm::Error::Load { .. })));
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::<f32>::new(ModelConfig::new(4, 16, 1, 4, [32, 32]), 3).unwrap();
    let path = dir.path().join("m.ckpt");
    Checkpoint { model: model.clone(), experiment: serde_json::json!({"k": 1}), round: 2, rng: None, optimizer: None }
        .save(&path)
        .unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.round, 2);
    assert_eq!(ck.experiment["k"], 1);
    let img = blob(32, 32, [8.0, 20.0], 4.0);
    assert_eq!(ck.model.predict(&img).unwrap(), model.predict(&img).unwrap());

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    assert!(Checkpoint::from_bytes(&bytes).is_err());
}
