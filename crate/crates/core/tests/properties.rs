//! Property tests for the transform, band layout, metrics and data helpers.

use lmfd_core::data::{balance_classes, sample_frames, Label, SampleManifest, SampleRecord, Split};
use lmfd_core::eval::{
    acer, apcer_per_pai, apcer_pooled, apcer_wc, auc, bpcer, eer_threshold, metric_report,
    ScoreRecord,
};
use lmfd_core::freq::{band_map, dct2, decompose, idct2, Band, BandGeometry, FilterBank, MaskInit};
use lmfd_core::losses::{bce_loss, focal_loss};
use ndarray::{Array2, Array3};
use proptest::prelude::*;

fn grid(max: usize) -> impl Strategy<Value = Array2<f64>> {
    (1..=max, 1..=max).prop_flat_map(|(h, w)| {
        prop::collection::vec(-10.0..10.0f64, h * w)
            .prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap())
    })
}

/// Scores on a small integer grid so that ties are common.
fn records() -> impl Strategy<Value = Vec<ScoreRecord>> {
    prop::collection::vec((0u8..12, any::<bool>(), 0u8..3), 2..200).prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(i, (s, bona, pai))| {
                // The first two rows pin one record of each class.
                let bona = match i {
                    0 => true,
                    1 => false,
                    _ => bona,
                };
                ScoreRecord {
                    video_id: format!("v{i}"),
                    score: f64::from(s),
                    label: if bona { Label::BonaFide } else { Label::Attack },
                    pai: if bona { "none".into() } else { format!("pai{pai}") },
                    dataset_id: "d".into(),
                }
            })
            .collect()
    })
}

fn brute_auc(records: &[ScoreRecord]) -> f64 {
    let bona: Vec<f64> = records.iter().filter(|r| r.label == Label::BonaFide).map(|r| r.score).collect();
    let attack: Vec<f64> = records.iter().filter(|r| r.label == Label::Attack).map(|r| r.score).collect();
    let mut half_units = 0u128;
    for &b in &bona {
        for &a in &attack {
            half_units += match b.partial_cmp(&a).unwrap() {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    half_units as f64 / (2 * bona.len() as u128 * attack.len() as u128) as f64
}

fn rate(records: &[ScoreRecord], keep: impl Fn(&ScoreRecord) -> bool, wrong: impl Fn(&ScoreRecord) -> bool) -> f64 {
    let pool: Vec<_> = records.iter().filter(|r| keep(r)).collect();
    pool.iter().filter(|r| wrong(r)).count() as f64 / pool.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn dct_round_trip_and_energy(x in grid(12)) {
        let y = dct2(&x).unwrap();
        let back = idct2(&y).unwrap();
        let scale = x.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (a, b) in x.iter().zip(back.iter()) {
            prop_assert!((a - b).abs() <= 1e-10 * scale);
        }
        let ex: f64 = x.iter().map(|v| v * v).sum();
        let ey: f64 = y.iter().map(|v| v * v).sum();
        prop_assert!((ex - ey).abs() <= 1e-10 * ex.max(1.0));
    }

    #[test]
    fn dct_is_linear(x in grid(8), a in -3.0..3.0f64) {
        let y = dct2(&x.mapv(|v| a * v)).unwrap();
        let ya = dct2(&x).unwrap().mapv(|v| a * v);
        for (p, q) in y.iter().zip(ya.iter()) {
            prop_assert!((p - q).abs() <= 1e-9);
        }
    }

    #[test]
    fn bands_partition_the_plane(h in 1usize..40, w in 1usize..40, area in any::<bool>()) {
        let geometry = if area { BandGeometry::AreaFraction } else { BandGeometry::AntiDiagonal };
        let map = band_map(h, w, geometry).unwrap();
        prop_assert_eq!(map.len(), h * w);
        prop_assert_eq!(map[0], Band::Low);
        // Bands never step back as the anti-diagonal depth grows.
        let order = |b: Band| match b {
            Band::Low => 0,
            Band::Mid => 1,
            Band::High => 2,
            Band::Residual => 3,
        };
        for i in 0..h * w {
            for j in 0..h * w {
                if i / w + i % w < j / w + j % w {
                    prop_assert!(order(map[i]) <= order(map[j]));
                }
            }
        }
    }

    #[test]
    fn base_components_recompose_the_image(
        h in 2usize..12,
        w in 2usize..12,
        seed in any::<u64>(),
    ) {
        let bank = FilterBank::<f64>::new(h, w, BandGeometry::AntiDiagonal, MaskInit::Zeros, 0).unwrap();
        let mut state = seed;
        let image = Array3::from_shape_fn((3, h, w), |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        });
        let stack = decompose(&image, &bank).unwrap();
        let bands = band_map(h, w, BandGeometry::AntiDiagonal).unwrap();
        for c in 0..3 {
            let plane = image.index_axis(ndarray::Axis(0), c).to_owned();
            // The full-spectrum component is the image itself.
            for (a, b) in stack.component(3, c).iter().zip(plane.iter()) {
                prop_assert!((a - b).abs() < 1e-10);
            }
            // Low + mid + high + the residual band's content is the image again.
            let mut coeffs = dct2(&plane).unwrap();
            for (k, v) in coeffs.iter_mut().enumerate() {
                if bands[k] != Band::Residual {
                    *v = 0.0;
                }
            }
            let residual = idct2(&coeffs).unwrap();
            let sum = &stack.component(0, c) + &stack.component(1, c) + stack.component(2, c) + &residual;
            for (a, b) in sum.iter().zip(plane.iter()) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn auc_matches_pair_counting(rs in records()) {
        prop_assert_eq!(auc(&rs).unwrap(), brute_auc(&rs));
    }

    #[test]
    fn metrics_ignore_monotone_rescaling(rs in records()) {
        let moved: Vec<ScoreRecord> = rs
            .iter()
            .map(|r| ScoreRecord { score: (r.score / 3.0).exp() - 7.0, ..r.clone() })
            .collect();
        prop_assert_eq!(auc(&rs).unwrap(), auc(&moved).unwrap());
        let a = metric_report(&rs, eer_threshold(&rs).unwrap()).unwrap();
        let b = metric_report(&moved, eer_threshold(&moved).unwrap()).unwrap();
        prop_assert_eq!(a.acer, b.acer);
        prop_assert_eq!(a.hter, b.hter);
        prop_assert_eq!(a.apcer_per_pai, b.apcer_per_pai);
    }

    #[test]
    fn error_rates_match_counting(rs in records(), t in -1.0..13.0f64) {
        let bona = |r: &ScoreRecord| r.label == Label::BonaFide;
        let attack = |r: &ScoreRecord| r.label == Label::Attack;
        let expected_bpcer = rate(&rs, bona, |r| r.score < t);
        let expected_apcer = rate(&rs, attack, |r| r.score >= t);
        prop_assert_eq!(bpcer(&rs, t).unwrap(), expected_bpcer);
        prop_assert_eq!(apcer_pooled(&rs, t).unwrap(), expected_apcer);

        let per = apcer_per_pai(&rs, t).unwrap();
        let wc = apcer_wc(&rs, t).unwrap();
        for (pai, v) in &per {
            prop_assert_eq!(*v, rate(&rs, |r| r.label == Label::Attack && &r.pai == pai, |r| r.score >= t));
            prop_assert!(wc >= *v);
        }
        prop_assert!(per.values().any(|&v| v == wc));
        prop_assert_eq!(acer(wc, expected_bpcer), (wc + expected_bpcer) / 2.0);
    }

    #[test]
    fn threshold_sweep_is_monotone(rs in records()) {
        let mut last: Option<(f64, f64)> = None;
        for step in 0..=28 {
            let t = -1.0 + step as f64 * 0.5;
            let (a, b) = (apcer_pooled(&rs, t).unwrap(), bpcer(&rs, t).unwrap());
            if let Some((pa, pb)) = last {
                prop_assert!(a <= pa);
                prop_assert!(b >= pb);
            }
            last = Some((a, b));
        }
    }

    #[test]
    fn sampled_frames_are_ordered_and_in_range(total in 1usize..500, k in 1usize..40) {
        let idx = sample_frames(total, k).unwrap();
        prop_assert_eq!(idx.len(), k);
        prop_assert!(idx.iter().all(|&i| i < total));
        prop_assert!(idx.windows(2).all(|p| p[0] <= p[1]));
        if total >= k {
            prop_assert!(idx.windows(2).all(|p| p[0] < p[1]));
        }
    }

    #[test]
    fn balancing_only_appends(
        rows in prop::collection::vec((any::<bool>(), 0u8..3), 2..60),
    ) {
        let records: Vec<SampleRecord> = rows
            .iter()
            .enumerate()
            .map(|(i, &(bona, split))| {
                let bona = match i { 0 => true, 1 => false, _ => bona };
                let split = if i < 2 { Split::Train } else { Split::ALL[split as usize] };
                SampleRecord {
                    dataset_id: "d".into(),
                    video_id: format!("v{i}"),
                    frame_path: format!("f{i}.png").into(),
                    label: if bona { Label::BonaFide } else { Label::Attack },
                    pai: if bona { "none".into() } else { "print".into() },
                    split,
                    crop: None,
                }
            })
            .collect();
        let manifest = SampleManifest::new(records.clone(), "");
        let balanced = balance_classes(&manifest).unwrap();
        prop_assert_eq!(&balanced.records[..records.len()], &records[..]);
        let count = |l: Label| balanced.records.iter().filter(|r| r.split == Split::Train && r.label == l).count();
        prop_assert_eq!(count(Label::BonaFide), count(Label::Attack));
        prop_assert!(balanced.records[records.len()..].iter().all(|r| r.split == Split::Train));
    }

    #[test]
    fn focal_without_focusing_is_cross_entropy(p in 1e-6..(1.0 - 1e-6f64), bona in any::<bool>()) {
        let y = if bona { 1.0 } else { 0.0 };
        let f = focal_loss(p, y, 0.0).unwrap();
        let b = bce_loss(p, y).unwrap();
        prop_assert!((f - b).abs() <= 1e-12 * b.max(1.0));
    }
}
