//! End-to-end run: dataset, split, episodes, training, evaluation, report.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use aspectfsl_core::episodes::{EpisodeSetConfig, EpisodeSetSize, SamplerConfig, SplitFractions, SplitMode, SplitTag};
use aspectfsl_core::model::ModelConfig;
use aspectfsl_core::shapegen::{Combos, Palette};
use aspectfsl_core::sprites::IngestOptions;
use aspectfsl_core::training::{TrainConfig, TrainPaths};
use serde::{Deserialize, Serialize};

use crate::stages::{self, EvalJob, ModelSource, TrainJob};
use crate::stamp::Stamp;

pub const RUN_CONFIG: &str = "pipeline.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Shapes {
        /// Built-in schema name or schema file.
        #[serde(default = "default_shapes_schema")]
        schema: String,
        /// Render this many sampled combinations instead of all of them.
        #[serde(default)]
        sample: Option<usize>,
        #[serde(default)]
        palette: Palette,
    },
    Sprites {
        frames: PathBuf,
        metadata: PathBuf,
        #[serde(default = "default_sprites_schema")]
        schema: String,
        #[serde(default)]
        options: IngestOptions,
    },
}

fn default_shapes_schema() -> String {
    "shapes".into()
}

fn default_sprites_schema() -> String {
    "sprites".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub mode: SplitMode,
    #[serde(default)]
    pub fractions: SplitFractions,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { mode: SplitMode::Query, fractions: SplitFractions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodesConfig {
    pub support_size: usize,
    pub train_count: usize,
    pub val_count: usize,
    /// Test episodes drawn per test query.
    pub test_per_query: usize,
    pub sampler: SamplerConfig,
}

impl Default for EpisodesConfig {
    fn default() -> Self {
        Self { support_size: 4, train_count: 2000, val_count: 200, test_per_query: 10, sampler: SamplerConfig::default() }
    }
}

impl EpisodesConfig {
    fn set(&self, size: EpisodeSetSize) -> EpisodeSetConfig {
        EpisodeSetConfig { support_size: self.support_size, size, aspect: None, shared_count: None, sampler: self.sampler.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Drives every random choice in the run.
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub episodes: EpisodesConfig,
    #[serde(default)]
    pub model: ModelConfig,
    /// Evaluated untrained next to the trained model; `null` skips it.
    #[serde(default = "default_baseline")]
    pub baseline: Option<ModelConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
}

fn default_baseline() -> Option<ModelConfig> {
    Some(ModelConfig::baseline())
}

fn default_eval_batch() -> usize {
    16
}

impl PipelineConfig {
    /// Reads a config and resolves its relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut config: Self = stages::load_json(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let resolve_schema = |s: &mut String| {
            if !matches!(s.as_str(), "shapes" | "geometric_shapes" | "sprites") && Path::new(s).is_relative() {
                *s = base.join(&*s).to_string_lossy().into_owned();
            }
        };
        match &mut config.dataset {
            DatasetConfig::Shapes { schema, .. } => resolve_schema(schema),
            DatasetConfig::Sprites { frames, metadata, schema, .. } => {
                resolve(frames);
                resolve(metadata);
                resolve_schema(schema);
            }
        }
        Ok(config)
    }

    /// Makes `seed` the source of every seed in the config.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.model.init_seed = seed;
        self.train.seed = seed;
        if let Some(b) = &mut self.baseline {
            b.init_seed = seed;
        }
        self
    }

    /// Checks everything that can fail before any file is written.
    pub fn check(&self) -> Result<()> {
        let schema = match &self.dataset {
            DatasetConfig::Shapes { schema, .. } => schema,
            DatasetConfig::Sprites { frames, metadata, schema, .. } => {
                if !frames.is_dir() {
                    bail!("dataset frames directory {} does not exist", frames.display());
                }
                if !metadata.is_file() {
                    bail!("dataset metadata file {} does not exist", metadata.display());
                }
                schema
            }
        };
        stages::load_schema(schema)?.validate()?;
        self.model.validate().context("model config")?;
        if let Some(b) = &self.baseline {
            b.validate().context("baseline config")?;
        }
        self.train.validate().context("train config")?;
        if self.eval_batch_size == 0 {
            bail!("eval_batch_size must be positive");
        }
        Ok(())
    }
}

/// Fixed layout of a run directory.
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn episodes(&self) -> PathBuf {
        self.root.join("episodes")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }
    pub fn split(&self) -> PathBuf {
        self.episodes().join("split.json")
    }
    pub fn episode_file(&self, tag: SplitTag) -> PathBuf {
        self.episodes().join(format!("{tag}.jsonl"))
    }

    fn create(&self) -> Result<()> {
        for dir in [self.data(), self.episodes(), self.checkpoints(), self.reports(), self.logs()] {
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        Ok(())
    }
}

/// `ROOT/run-YYYYmmdd-HHMMSS`, with a numeric suffix if that already exists.
pub fn timestamped_run_dir(root: &Path) -> PathBuf {
    let stem = format!("run-{}", chrono::Local::now().format("%Y%m%d-%H%M%S"));
    let mut dir = root.join(&stem);
    let mut n = 1;
    while dir.exists() {
        dir = root.join(format!("{stem}-{n}"));
        n += 1;
    }
    dir
}

fn stage<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    log::info!("stage {name}");
    f().with_context(|| format!("stage `{name}` failed"))
}

/// Runs every stage into `run_dir` and returns the merged report table path.
pub fn run_pipeline(config: &PipelineConfig, run_dir: &Path) -> Result<PathBuf> {
    config.check()?;
    if run_dir.exists() && std::fs::read_dir(run_dir)?.next().is_some() {
        bail!("run directory {} is not empty", run_dir.display());
    }
    let layout = RunLayout { root: run_dir.to_path_buf() };
    layout.create()?;
    let config_file = layout.root.join(RUN_CONFIG);
    std::fs::write(&config_file, serde_json::to_string_pretty(config)? + "\n")
        .with_context(|| format!("writing {}", config_file.display()))?;
    Stamp::new("pipeline", Some(config.seed), config)?
        .output("config", &config_file)?
        .save(&layout.logs().join("pipeline.stamp.json"))?;

    let seed = config.seed;
    let manifest = stage("gen-data", || match &config.dataset {
        DatasetConfig::Shapes { schema, sample, palette } => {
            let schema = stages::load_schema(schema)?;
            let combos = match sample {
                Some(k) => Combos::Sampled { k: *k, seed },
                None => Combos::All,
            };
            stages::gen_data(&schema, &layout.data(), &combos, palette, seed)
        }
        DatasetConfig::Sprites { frames, metadata, schema, options } => {
            stages::ingest(frames, metadata, &stages::load_schema(schema)?, &layout.data(), options)
        }
    })?;
    let manifest_file = aspectfsl_core::manifest::manifest_path(&layout.data());

    let plan = stage("split", || {
        stages::split(&manifest_file, config.split.mode, config.split.fractions, seed, &layout.split())
    })?;

    stage("episodes", || {
        let ep = &config.episodes;
        let sets = [
            (SplitTag::Train, ep.set(EpisodeSetSize::Count(ep.train_count)), 1),
            (SplitTag::Val, ep.set(EpisodeSetSize::Count(ep.val_count)), 2),
            (SplitTag::Test, ep.set(EpisodeSetSize::PerQuery(ep.test_per_query)), 3),
        ];
        for (tag, set, offset) in sets {
            let out = layout.episode_file(tag);
            stages::episodes(&manifest_file, &plan, Some(&layout.split()), tag, &set, seed.wrapping_add(offset), &out)?;
        }
        Ok(())
    })?;

    let paths = TrainPaths { checkpoint_dir: layout.checkpoints(), log_file: layout.logs().join("train.csv") };
    let best = paths.best();
    stage("train", || {
        stages::train(&TrainJob {
            model: &config.model,
            train: &config.train,
            manifest: &manifest_file,
            train_episodes: &layout.episode_file(SplitTag::Train),
            val_episodes: &layout.episode_file(SplitTag::Val),
            paths,
            stamp: layout.logs().join("train.stamp.json"),
            resume: false,
        })
    })?;

    let test = layout.episode_file(SplitTag::Test);
    let mut eval_dirs = Vec::new();
    stage("eval", || {
        if let Some(b) = &config.baseline {
            let ck = layout.checkpoints().join("baseline.safetensors");
            stages::save_untrained(b, &manifest, &ck)?;
            let out = layout.reports().join("baseline");
            stages::eval(&EvalJob {
                source: ModelSource::Checkpoint(&ck),
                name: Some("baseline"),
                manifest: &manifest_file,
                episodes: &test,
                out: &out,
                batch_size: config.eval_batch_size,
                fig3_query: None,
                fig3_sets: 3,
            })?;
            eval_dirs.push(out);
        }
        let out = layout.reports().join("dstm");
        let name = if config.model.dstm.is_some() { "dstm" } else { "trained" };
        stages::eval(&EvalJob {
            source: ModelSource::Checkpoint(&best),
            name: Some(name),
            manifest: &manifest_file,
            episodes: &test,
            out: &out,
            batch_size: config.eval_batch_size,
            fig3_query: None,
            fig3_sets: 3,
        })?;
        eval_dirs.push(out);
        Ok(())
    })?;

    stage("report", || {
        let rows = stages::report(&eval_dirs, &layout.reports())?;
        println!("{}", aspectfsl_core::evaluation::format_table(&rows));
        Ok(layout.reports().join(aspectfsl_core::evaluation::REPORT_TXT))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let config: PipelineConfig = serde_json::from_str(r#"{"dataset": {"kind": "shapes"}}"#).unwrap();
        assert_eq!(config.split.mode, SplitMode::Query);
        assert_eq!(config.episodes.support_size, 4);
        assert_eq!(config.model, ModelConfig::shallow_dstm());
        assert_eq!(config.baseline, Some(ModelConfig::baseline()));
        assert_eq!(config.train, TrainConfig::default());
    }

    #[test]
    fn seed_reaches_every_stage() {
        let config: PipelineConfig = serde_json::from_str(r#"{"dataset": {"kind": "shapes"}}"#).unwrap();
        let config = config.with_seed(9);
        assert_eq!((config.seed, config.model.init_seed, config.train.seed), (9, 9, 9));
        assert_eq!(config.baseline.unwrap().init_seed, 9);
    }

    #[test]
    fn unknown_fields_and_missing_inputs_are_rejected() {
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"dataset": {"kind": "shapes"}, "sede": 1}"#).is_err());
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("p.json");
        std::fs::write(&file, r#"{"dataset": {"kind": "sprites", "frames": "nope", "metadata": "meta.json"}}"#).unwrap();
        let config = PipelineConfig::load(&file).unwrap();
        let run = dir.path().join("run");
        let err = run_pipeline(&config, &run).unwrap_err().to_string();
        assert!(err.contains("does not exist"), "{err}");
        assert!(!run.exists());
    }

    #[test]
    fn run_dirs_do_not_collide() {
        let dir = tempfile::tempdir().unwrap();
        let a = timestamped_run_dir(dir.path());
        std::fs::create_dir_all(&a).unwrap();
        let b = timestamped_run_dir(dir.path());
        assert_ne!(a, b);
        assert!(b.file_name().unwrap().to_string_lossy().starts_with("run-"));
    }
}
