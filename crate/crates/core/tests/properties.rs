mod common;

use mvcons::analysis::{calinski_harabasz, davies_bouldin, silhouette, EmbeddingSet};
use mvcons::augment::{make_views, AugmentSpec};
use mvcons::image::{ImageSample, RgbImage};
use mvcons::train::{combined_loss, consistency_loss};
use mvcons::{checkpoint, gradcheck, Conv2dSpec, Graph, ModelParams, Tensor};
use proptest::prelude::*;

use common::{naive_consistency, random_clusters};

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

fn sample(size: usize, pixels: Vec<f32>, id: u32) -> ImageSample {
    ImageSample {
        image: RgbImage::new(size, size, pixels).unwrap(),
        label: Some(0),
        domain: "target".into(),
        id: format!("c/{id}.png"),
    }
}

fn consistency(a: &[f64], b: &[f64], n: usize, l: usize) -> f64 {
    let mut g = Graph::<f64>::new();
    let av = g.constant(Tensor::new(vec![n, l], a.to_vec()).unwrap());
    let bv = g.constant(Tensor::new(vec![n, l], b.to_vec()).unwrap());
    let loss = consistency_loss(&mut g, av, bv).unwrap();
    g.value(loss).item().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn views_stay_in_unit_range_and_keep_size(
        pixels in prop::collection::vec(0.0f32..=1.0, 12 * 12 * 3),
        seed in any::<u64>(),
        epoch in 0u64..50,
    ) {
        let s = sample(12, pixels, 0);
        let (a, b) = make_views(&s, &AugmentSpec::default(), seed, epoch);
        for v in [&a, &b] {
            prop_assert_eq!((v.image.width, v.image.height), (12, 12));
            prop_assert!(v.image.data.iter().all(|p| (0.0..=1.0).contains(p)));
            prop_assert_eq!(&v.id, &s.id);
        }
    }

    #[test]
    fn views_do_not_depend_on_batch_order(seed in any::<u64>(), rot in 1usize..5) {
        let batch: Vec<ImageSample> = (0..5u32)
            .map(|k| sample(8, (0..8 * 8 * 3).map(|i| ((i as u32 * 7 + k * 13) % 17) as f32 / 16.0).collect(), k))
            .collect();
        let spec = AugmentSpec::default();
        let forward: Vec<_> = batch.iter().map(|s| make_views(s, &spec, seed, 1)).collect();
        let mut rotated: Vec<_> = batch.iter().cycle().skip(rot).take(5).map(|s| make_views(s, &spec, seed, 1)).collect();
        rotated.rotate_right(rot);
        prop_assert_eq!(forward, rotated);
    }

    #[test]
    fn consistency_is_symmetric_nonnegative_and_matches_loop(a in values(12), b in values(12)) {
        let (ab, ba) = (consistency(&a, &b, 3, 4), consistency(&b, &a, 3, 4));
        prop_assert_eq!(ab.to_bits(), ba.to_bits());
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - naive_consistency(&a, &b, 3, 4)).abs() <= 1e-12);
        prop_assert_eq!(consistency(&a, &a, 3, 4), 0.0);
        prop_assert_eq!(ab == 0.0, a == b);
    }

    #[test]
    fn combined_loss_is_monotone_in_lambda(
        l_class in 0.0f64..5.0,
        a in values(8),
        b in values(8),
        l1 in 0.0f64..4.0,
        dl in 0.0f64..4.0,
    ) {
        let eval = |lambda: f64| {
            let mut g = Graph::<f64>::new();
            let av = g.constant(Tensor::new(vec![2, 4], a.clone()).unwrap());
            let bv = g.constant(Tensor::new(vec![2, 4], b.clone()).unwrap());
            let cons = consistency_loss(&mut g, av, bv).unwrap();
            let cls = g.constant(Tensor::scalar(l_class));
            let total = combined_loss(&mut g, cls, cons, lambda).unwrap();
            g.value(total).item().unwrap()
        };
        prop_assert!(eval(l1) <= eval(l1 + dl));
    }

    #[test]
    fn softmax_rows_normalize_and_match_log_softmax(x in values(15)) {
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::new(vec![3, 5], x).unwrap());
        let p = g.softmax(v);
        let lp = g.log_softmax(v);
        let (p, lp) = (g.value(p).data().to_vec(), g.value(lp).data().to_vec());
        for row in p.chunks(5) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        for (pi, li) in p.iter().zip(&lp) {
            prop_assert!((pi.ln() - li).abs() < 1e-6);
        }
    }

    #[test]
    fn depthwise_conv_equals_per_channel_convs(x in values(2 * 3 * 5 * 5), w in values(3 * 3 * 3), bias in values(3)) {
        let spec = Conv2dSpec { stride: 1, padding: 1, groups: 3 };
        let mut g = Graph::<f64>::new();
        let xv = g.constant(Tensor::new(vec![2, 3, 5, 5], x.clone()).unwrap());
        let wv = g.constant(Tensor::new(vec![3, 1, 3, 3], w.clone()).unwrap());
        let bv = g.constant(Tensor::new(vec![3], bias.clone()).unwrap());
        let out = g.conv2d(xv, wv, Some(bv), spec).unwrap();
        let full = g.value(out).data().to_vec();
        for c in 0..3 {
            let mut g1 = Graph::<f64>::new();
            let xc: Vec<f64> = (0..2).flat_map(|n| x[(n * 3 + c) * 25..(n * 3 + c + 1) * 25].to_vec()).collect();
            let xv = g1.constant(Tensor::new(vec![2, 1, 5, 5], xc).unwrap());
            let wv = g1.constant(Tensor::new(vec![1, 1, 3, 3], w[c * 9..(c + 1) * 9].to_vec()).unwrap());
            let bv = g1.constant(Tensor::new(vec![1], vec![bias[c]]).unwrap());
            let single = g1.conv2d(xv, wv, Some(bv), Conv2dSpec { stride: 1, padding: 1, groups: 1 }).unwrap();
            let single = g1.value(single).data();
            for n in 0..2 {
                for k in 0..25 {
                    prop_assert!((full[(n * 3 + c) * 25 + k] - single[n * 25 + k]).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn metrics_stay_in_range_and_ignore_rigid_motion(
        seed in 0u64..10_000,
        shift in values(3),
        angle in 0.0f64..std::f64::consts::TAU,
    ) {
        let (x, labels) = random_clusters(seed, 24, 3, 3);
        let scores = |x: Vec<Vec<f64>>| {
            let emb = EmbeddingSet::from_labeled(x, labels.clone()).unwrap();
            (silhouette(&emb).unwrap(), davies_bouldin(&emb).unwrap(), calinski_harabasz(&emb).unwrap())
        };
        let (s, d, c) = scores(x.clone());
        prop_assert!((-1.0..=1.0).contains(&s) && d >= 0.0 && c >= 0.0);

        let moved: Vec<Vec<f64>> = x.iter().map(|p| p.iter().zip(&shift).map(|(a, b)| a + b * 50.0).collect()).collect();
        let (s2, d2, c2) = scores(moved);
        prop_assert!((s - s2).abs() <= 1e-9 && (d - d2).abs() <= 1e-9);
        prop_assert!((c - c2).abs() <= 1e-9 * c.max(1.0));

        let (sin, cos) = angle.sin_cos();
        let rotated: Vec<Vec<f64>> = x.iter().map(|p| vec![cos * p[0] - sin * p[1], sin * p[0] + cos * p[1], -p[2]]).collect();
        let (s3, d3, _) = scores(rotated);
        prop_assert!((s - s3).abs() <= 1e-9 && (d - d3).abs() <= 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoints_round_trip_bit_exactly(seed in any::<u64>(), classes in 2usize..6) {
        let model = ModelParams::<f32>::init(gradcheck::tiny_model_config(classes), seed).unwrap();
        let bytes = checkpoint::to_bytes(&model);
        let back = checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back.config, &model.config);
        prop_assert_eq!(checkpoint::to_bytes(&back), bytes);
    }
}
