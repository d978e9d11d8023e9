use std::hint::black_box;

use aspectfsl_core::episodes::{episode_rng, sample_episode, EpisodeRequest, PoolIndex, SamplerConfig, SplitTag};
use aspectfsl_core::manifest::{DatasetManifest, ManifestRecord};
use aspectfsl_core::{aspect_oracle, PropertySchema};
use criterion::{criterion_group, criterion_main, Criterion};

fn manifest() -> DatasetManifest {
    let schema = PropertySchema::geometric_shapes();
    let records = schema
        .all_vectors()
        .into_iter()
        .enumerate()
        .map(|(i, properties)| ManifestRecord {
            sample_id: format!("s{i:04}"),
            image_path: format!("images/s{i:04}.png"),
            properties,
        })
        .collect();
    DatasetManifest::new(schema, 112, records, serde_json::Value::Null).unwrap()
}

fn sampler(c: &mut Criterion) {
    let m = manifest();
    let index = PoolIndex::new(&m);
    let ids: Vec<String> = m.records.iter().map(|r| r.sample_id.clone()).collect();
    let pool: Vec<&str> = ids.iter().map(String::as_str).collect();
    let config = SamplerConfig::default();
    c.bench_function("sample 100 episodes (240 shapes, N=4)", |b| {
        b.iter(|| {
            for i in 0..100 {
                let request = EpisodeRequest { shared_count: Some(i % 3), support_size: 4, ..Default::default() };
                let mut rng = episode_rng(7, i);
                black_box(sample_episode(&index, &ids, &pool, &request, SplitTag::Test, &config, &mut rng).unwrap());
            }
        })
    });

    let episodes: Vec<_> = (0..100)
        .map(|i| {
            let request = EpisodeRequest { support_size: 4, ..Default::default() };
            sample_episode(&index, &ids, &pool, &request, SplitTag::Test, &config, &mut episode_rng(9, i)).unwrap()
        })
        .collect();
    c.bench_function("aspect oracle on 100 episodes", |b| {
        b.iter(|| {
            for e in &episodes {
                let q = index.vector(&e.query_id).unwrap();
                let s: Vec<_> = e.support_ids.iter().map(|id| index.vector(id).unwrap().clone()).collect();
                black_box(aspect_oracle(q, &s).unwrap());
            }
        })
    });
}

criterion_group!(benches, sampler);
criterion_main!(benches);
