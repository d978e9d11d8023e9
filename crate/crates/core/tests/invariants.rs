use std::collections::BTreeSet;

use aspectfsl_core::episodes::{
    build_episode_set, make_split, max_shared_count, EpisodeSetConfig, PoolIndex, SplitFractions, SplitMode, SplitTag,
};
use aspectfsl_core::evaluation::{distance_ratio, distance_ratio_interval, episode_distances, mean_ci95};
use aspectfsl_core::manifest::{DatasetManifest, ManifestRecord};
use aspectfsl_core::model::{BackboneConfig, DstmConfig, Model, ModelConfig};
use aspectfsl_core::tensor::Tensor;
use aspectfsl_core::training::{epoch_schedule, tuplet_loss};
use aspectfsl_core::{aspect_oracle, validate_episode_semantics, PropertyDef, PropertySchema};
use proptest::prelude::*;

fn vectors(dim: usize, count: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    proptest::collection::vec(proptest::collection::vec(-3.0..3.0f64, dim), count)
}

fn loss_of(v: &[Vec<f64>]) -> f64 {
    let negs: Vec<&[f64]> = v[2..].iter().map(Vec::as_slice).collect();
    tuplet_loss(&v[0], &v[1], &negs).unwrap()
}

proptest! {
    #[test]
    fn tuplet_loss_is_positive_and_translation_invariant(
        (v, shift) in (1usize..6, 3usize..7).prop_flat_map(|(d, n)| (vectors(d, n), proptest::collection::vec(-5.0..5.0f64, d)))
    ) {
        let base = loss_of(&v);
        prop_assert!(base > 0.0);
        let moved: Vec<Vec<f64>> = v.iter().map(|x| x.iter().zip(&shift).map(|(a, b)| a + b).collect()).collect();
        prop_assert!((loss_of(&moved) - base).abs() <= 1e-9 * base.max(1.0));
    }

    #[test]
    fn tuplet_loss_ignores_negative_order(v in (1usize..6, 4usize..7).prop_flat_map(|(d, n)| vectors(d, n))) {
        let mut rev = v.clone();
        rev[2..].reverse();
        prop_assert!((loss_of(&v) - loss_of(&rev)).abs() <= 1e-12 * loss_of(&v).max(1.0));
    }

    #[test]
    fn closer_positive_lowers_the_loss(v in (2usize..6, 3usize..6).prop_flat_map(|(d, n)| vectors(d, n)), t in 0.05..0.95f64) {
        let mut pulled = v.clone();
        pulled[1] = v[0].iter().zip(&v[1]).map(|(q, p)| q + t * (p - q)).collect();
        prop_assert!(loss_of(&pulled) <= loss_of(&v) + 1e-12);
    }

    #[test]
    fn ratio_interval_brackets_the_point_ratio(pos in 1.0..50.0f64, gap in 0.0..20.0f64, pci in 0.0..0.5f64, nci in 0.0..0.5f64) {
        let neg = pos + gap;
        let (lo, hi) = distance_ratio_interval(pos, pci, neg, nci).unwrap();
        let r = distance_ratio(pos, neg).unwrap();
        if gap > pci + nci {
            prop_assert!(lo <= r + 1e-12 && r <= hi + 1e-12, "{lo} {r} {hi}");
        }
        prop_assert!(hi >= 0.0 && lo >= 0.0);
    }

    #[test]
    fn ratio_vanishes_as_negatives_approach_positives(pos in 0.5..50.0f64, eps in 0.0..1e-6f64) {
        prop_assert!(distance_ratio(pos, pos + eps).unwrap() <= eps / pos + 1e-15);
    }

    #[test]
    fn ci_is_shift_invariant(values in proptest::collection::vec(-10.0..10.0f64, 2..40), c in -100.0..100.0f64) {
        let (m, h) = mean_ci95(&values);
        let shifted: Vec<f64> = values.iter().map(|v| v + c).collect();
        let (m2, h2) = mean_ci95(&shifted);
        prop_assert!((m2 - m - c).abs() < 1e-9);
        prop_assert!((h2 - h).abs() < 1e-9);
        prop_assert!(h >= 0.0);
    }

    #[test]
    fn epoch_schedule_covers_the_file_evenly(len in 1usize..60, per in 1usize..200, seed in 0u64..100, epoch in 1usize..20) {
        let s = epoch_schedule(len, Some(per), seed, epoch);
        prop_assert_eq!(s.len(), per);
        let mut counts = vec![0usize; len];
        for i in &s {
            counts[*i] += 1;
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
        prop_assert_eq!(&s, &epoch_schedule(len, Some(per), seed, epoch));
    }
}

fn schema_from(domains: &[usize]) -> PropertySchema {
    let props = domains
        .iter()
        .enumerate()
        .map(|(p, &n)| PropertyDef { name: format!("p{p}"), domain: (0..n).map(|v| format!("v{v}")).collect() })
        .collect();
    PropertySchema::new("arb", "p0", props).unwrap()
}

fn full_manifest(schema: PropertySchema) -> DatasetManifest {
    let records = schema
        .all_vectors()
        .into_iter()
        .enumerate()
        .map(|(i, properties)| ManifestRecord { sample_id: format!("s{i:04}"), image_path: format!("i/{i}.png"), properties })
        .collect();
    DatasetManifest::new(schema, 112, records, serde_json::Value::Null).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn episode_sets_are_valid_stratified_and_split_clean(
        domains in proptest::collection::vec(3usize..6, 4..5),
        n in 2usize..4,
        seed in 0u64..1000,
    ) {
        let m = full_manifest(schema_from(&domains));
        let plan = make_split(&m, SplitMode::Query, SplitFractions { train: 0.6, val: 0.0, test: 0.4 }, seed).unwrap();
        let cfg = EpisodeSetConfig { support_size: n, ..EpisodeSetConfig::with_count(40) };
        let train = build_episode_set(&m, &plan, SplitTag::Train, &cfg, seed).unwrap();
        let test = build_episode_set(&m, &plan, SplitTag::Test, &cfg, seed + 1).unwrap();

        let index = PoolIndex::new(&m);
        for e in train.episodes.iter().chain(&test.episodes) {
            let q = index.vector(&e.query_id).unwrap();
            let s: Vec<_> = e.support_ids.iter().map(|id| index.vector(id).unwrap().clone()).collect();
            prop_assert!(validate_episode_semantics(&m.schema, q, &s).passed());
            prop_assert_eq!(aspect_oracle(q, &s).unwrap().matched_index, Some(e.positive_index));
        }
        let hist = test.shared_count_histogram();
        prop_assert_eq!(hist.len(), max_shared_count(&m.schema) + 1);
        let (lo, hi) = (hist.values().min().unwrap(), hist.values().max().unwrap());
        prop_assert!(hi - lo <= 1);
        let train_queries: BTreeSet<&str> = train.episodes.iter().map(|e| e.query_id.as_str()).collect();
        prop_assert!(test.episodes.iter().all(|e| !train_queries.contains(e.query_id.as_str())));
    }
}

fn tiny_model(seed: u64) -> Model<f64> {
    let config = ModelConfig {
        backbone: BackboneConfig::shallow(3),
        dstm: Some(DstmConfig::single_layer(4, 3, 3)),
        input_size: 24,
        bn_eps: 1e-5,
        bn_momentum: 0.1,
        init_seed: seed,
    };
    Model::new(config).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn distances_follow_a_support_shuffle(
        pixels in proptest::collection::vec(0.0..1.0f64, 5 * 3 * 24 * 24),
        rot in 1usize..4,
        seed in 0u64..50,
    ) {
        let model = tiny_model(seed);
        let query = Tensor::new(vec![3, 24, 24], pixels[..3 * 24 * 24].to_vec()).unwrap();
        let support_px = &pixels[3 * 24 * 24..];
        let row = 3 * 24 * 24;
        let order: Vec<usize> = (0..4).map(|i| (i + rot) % 4).collect();
        let shuffled: Vec<f64> = order.iter().flat_map(|&i| support_px[i * row..(i + 1) * row].to_vec()).collect();
        let support = Tensor::new(vec![4, 3, 24, 24], support_px.to_vec()).unwrap();
        let support_shuffled = Tensor::new(vec![4, 3, 24, 24], shuffled).unwrap();

        let (q, s) = model.embed_episode(&query, &support).unwrap();
        let (q2, s2) = model.embed_episode(&query, &support_shuffled).unwrap();
        let (pos, negs) = episode_distances(&q, &s, 0).unwrap();
        let k = order.iter().position(|&i| i == 0).unwrap();
        let (pos2, negs2) = episode_distances(&q2, &s2, k).unwrap();
        prop_assert!((pos - pos2).abs() <= 1e-6);
        let sorted = |mut v: Vec<f64>| { v.sort_by(f64::total_cmp); v };
        for (a, b) in sorted(negs).iter().zip(sorted(negs2)) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }
}
