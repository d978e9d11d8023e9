use aspectfsl_core::checkpoint::Checkpoint;
use aspectfsl_core::episodes::{build_episode_set, make_split, EpisodeFile, EpisodeSetConfig, SplitFractions, SplitMode, SplitTag};
use aspectfsl_core::manifest::{DatasetManifest, ManifestRecord};
use aspectfsl_core::model::{BackboneConfig, DstmConfig, ModelConfig};
use aspectfsl_core::training::{read_log, train, ImageBank, TrainConfig, TrainData, TrainPaths};
use aspectfsl_core::PropertySchema;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIZE: usize = 32;

fn model_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig::shallow(8),
        dstm: Some(DstmConfig::single_layer(8, 8, 4)),
        input_size: SIZE,
        bn_eps: 1e-5,
        bn_momentum: 0.1,
        init_seed: 1,
    }
}

struct Fixture {
    bank: ImageBank,
    train: EpisodeFile,
    val: EpisodeFile,
}

/// Full geometric-shapes schema with random 32×32 images in place of renders.
fn fixture(train_count: usize, val_count: usize) -> Fixture {
    let schema = PropertySchema::geometric_shapes();
    let records: Vec<ManifestRecord> = schema
        .all_vectors()
        .into_iter()
        .enumerate()
        .map(|(i, properties)| ManifestRecord { sample_id: format!("s{i:03}"), image_path: format!("images/s{i:03}.png"), properties })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let images = records
        .iter()
        .map(|r| (r.sample_id.clone(), (0..3 * SIZE * SIZE).map(|_| rng.random::<f32>()).collect()))
        .collect();
    let manifest = DatasetManifest::new(schema, SIZE as u32, records, serde_json::Value::Null).unwrap();
    let plan = make_split(&manifest, SplitMode::Query, SplitFractions { train: 0.8, val: 0.2, test: 0.0 }, 0).unwrap();
    Fixture {
        bank: ImageBank::from_pixels(SIZE, images).unwrap(),
        train: build_episode_set(&manifest, &plan, SplitTag::Train, &EpisodeSetConfig::with_count(train_count), 1).unwrap(),
        val: build_episode_set(&manifest, &plan, SplitTag::Val, &EpisodeSetConfig::with_count(val_count), 2).unwrap(),
    }
}

fn paths(dir: &std::path::Path) -> TrainPaths {
    TrainPaths { checkpoint_dir: dir.join("ck"), log_file: dir.join("log.csv") }
}

#[test]
fn overfits_twenty_fixed_episodes() {
    let f = fixture(20, 8);
    let config = TrainConfig { epochs: 200, episodes_per_epoch: None, batch_size: 5, learning_rate: 3e-3, ..TrainConfig::default() };
    let dir = tempfile::tempdir().unwrap();
    let data = TrainData { bank: &f.bank, train: &f.train, val: &f.val };
    let summary = train(&model_config(), &config, &data, &paths(dir.path()), false).unwrap();
    let last = summary.records.last().unwrap();
    assert_eq!(last.epoch, 200);
    assert!(last.train_loss < 0.1, "train loss after 200 epochs: {}", last.train_loss);
    assert!(summary.records[0].train_loss > last.train_loss);
}

#[test]
fn resume_continues_epoch_numbering_and_best_never_exceeds_last() {
    let f = fixture(24, 8);
    let dir = tempfile::tempdir().unwrap();
    let p = paths(dir.path());
    let data = TrainData { bank: &f.bank, train: &f.train, val: &f.val };
    let short = TrainConfig { epochs: 3, episodes_per_epoch: Some(16), batch_size: 8, ..TrainConfig::default() };
    train(&model_config(), &short, &data, &p, false).unwrap();

    // Extending the schedule changes the train config; resume must still pick up epoch 3.
    let longer = TrainConfig { epochs: 5, ..short.clone() };
    let summary = train(&model_config(), &longer, &data, &p, true).unwrap();
    let epochs: Vec<usize> = summary.records.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, vec![4, 5]);
    let log: Vec<usize> = read_log(&p.log_file).unwrap().iter().map(|r| r.epoch).collect();
    assert_eq!(log, vec![1, 2, 3, 4, 5]);

    let best = Checkpoint::load(&p.best()).unwrap().state;
    let last = Checkpoint::load(&p.last()).unwrap().state;
    assert_eq!(last.epoch, 5);
    assert!(best.val_loss.unwrap() <= last.val_loss.unwrap());
    assert_eq!(best.val_loss, last.best_val_loss);
}

#[test]
fn training_is_deterministic_given_the_seed() {
    let f = fixture(16, 8);
    let data = TrainData { bank: &f.bank, train: &f.train, val: &f.val };
    let config = TrainConfig { epochs: 2, episodes_per_epoch: Some(16), batch_size: 8, ..TrainConfig::default() };
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let s = train(&model_config(), &config, &data, &paths(dir.path()), false).unwrap();
        let losses: Vec<(f64, f64)> = s.records.iter().map(|r| (r.train_loss, r.val_loss)).collect();
        (losses, std::fs::read(paths(dir.path()).last()).unwrap())
    };
    let (a, ck_a) = run();
    let (b, ck_b) = run();
    assert_eq!(a, b);
    assert_eq!(ck_a, ck_b);
}
