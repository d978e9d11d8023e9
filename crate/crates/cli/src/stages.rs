//! One function per pipeline stage. Each writes its artifacts plus a stamp.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use aspectfsl_core::checkpoint::{Checkpoint, TrainState};
use aspectfsl_core::episodes::{build_episode_set, EpisodeFile, EpisodeSetConfig, SplitFractions, SplitMode, SplitPlan, SplitTag};
use aspectfsl_core::evaluation::{self, DistanceReport};
use aspectfsl_core::manifest::{manifest_base, manifest_path, DatasetManifest};
use aspectfsl_core::model::{Model, ModelConfig};
use aspectfsl_core::shapegen::{build_dataset, Combos, Palette};
use aspectfsl_core::sprites::{ingest_sprites, IngestOptions};
use aspectfsl_core::training::{self, ImageBank, TrainConfig, TrainData, TrainPaths, TrainSummary};
use aspectfsl_core::{fingerprint, PropertySchema};
use serde::Serialize;

use crate::stamp::{stamp_path, Stamp};

/// Built-in schema name (`shapes`, `sprites`) or a path to a schema JSON file.
pub fn load_schema(spec: &str) -> Result<PropertySchema> {
    match spec {
        "shapes" | "geometric_shapes" => Ok(PropertySchema::geometric_shapes()),
        "sprites" => Ok(PropertySchema::sprites()),
        path => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading schema {path}"))?;
            PropertySchema::from_json(&text).with_context(|| format!("parsing schema {path}"))
        }
    }
}

pub fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn load_manifest(path: &Path) -> Result<(PathBuf, DatasetManifest)> {
    let file = manifest_path(path);
    let manifest = DatasetManifest::load(&file).with_context(|| format!("loading manifest {}", file.display()))?;
    Ok((file, manifest))
}

pub fn gen_data(schema: &PropertySchema, out: &Path, combos: &Combos, palette: &Palette, seed: u64) -> Result<DatasetManifest> {
    #[derive(Serialize)]
    struct Config<'a> {
        schema: &'a PropertySchema,
        combos: &'a Combos,
        palette: &'a Palette,
    }
    let manifest = build_dataset(schema, out, combos, palette)?;
    Stamp::new("gen-data", Some(seed), &Config { schema, combos, palette })?
        .output("manifest", &manifest_path(out))?
        .save(&stamp_path(out))?;
    Ok(manifest)
}

pub fn ingest(frames: &Path, meta: &Path, schema: &PropertySchema, out: &Path, options: &IngestOptions) -> Result<DatasetManifest> {
    #[derive(Serialize)]
    struct Config<'a> {
        schema: &'a PropertySchema,
        options: &'a IngestOptions,
    }
    if !frames.is_dir() {
        bail!("frames directory {} does not exist", frames.display());
    }
    let manifest = ingest_sprites(frames, meta, schema, out, options)?;
    Stamp::new("ingest-sprites", None, &Config { schema, options })?
        .input("frames", frames)?
        .input("metadata", meta)?
        .output("manifest", &manifest_path(out))?
        .save(&stamp_path(out))?;
    Ok(manifest)
}

pub fn split(manifest: &Path, mode: SplitMode, fractions: SplitFractions, seed: u64, out: &Path) -> Result<SplitPlan> {
    let (file, m) = load_manifest(manifest)?;
    let plan = aspectfsl_core::episodes::make_split(&m, mode, fractions, seed)?;
    create_parent(out)?;
    plan.save(out)?;
    Stamp::new("split", Some(seed), &(mode, fractions))?
        .input("manifest", &file)?
        .output("split", out)?
        .save(&stamp_path(out))?;
    Ok(plan)
}

/// Builds an episode file. `plan_file` is recorded in the stamp when the plan
/// came from disk.
pub fn episodes(
    manifest: &Path,
    plan: &SplitPlan,
    plan_file: Option<&Path>,
    tag: SplitTag,
    config: &EpisodeSetConfig,
    seed: u64,
    out: &Path,
) -> Result<EpisodeFile> {
    let (file, m) = load_manifest(manifest)?;
    let set = build_episode_set(&m, plan, tag, config, seed)?;
    set.save(out)?;
    let mut stamp = Stamp::new("episodes", Some(seed), &(tag, config, fingerprint::config_hash(plan)?))?.input("manifest", &file)?;
    if let Some(p) = plan_file {
        stamp = stamp.input("split", p)?;
    }
    stamp.output("episodes", out)?.save(&stamp_path(out))?;
    log::info!("wrote {} {tag} episodes to {} (per shared count: {:?})", set.episodes.len(), out.display(), set.shared_count_histogram());
    Ok(set)
}

pub struct TrainJob<'a> {
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
    pub manifest: &'a Path,
    pub train_episodes: &'a Path,
    pub val_episodes: &'a Path,
    pub paths: TrainPaths,
    pub stamp: PathBuf,
    pub resume: bool,
}

pub fn train(job: &TrainJob<'_>) -> Result<TrainSummary> {
    let (file, manifest) = load_manifest(job.manifest)?;
    let train_set = EpisodeFile::load(job.train_episodes)?;
    let val_set = EpisodeFile::load(job.val_episodes)?;
    train_set.validate(&manifest).context("training episodes")?;
    val_set.validate(&manifest).context("validation episodes")?;
    let bank = ImageBank::load(&manifest, &manifest_base(&file))?;
    let data = TrainData { bank: &bank, train: &train_set, val: &val_set };
    let summary = training::train(job.model, job.train, &data, &job.paths, job.resume)?;
    Stamp::new("train", Some(job.train.seed), &(job.model, job.train))?
        .input("manifest", &file)?
        .input("train_episodes", job.train_episodes)?
        .input("val_episodes", job.val_episodes)?
        .output("best", &job.paths.best())?
        .output("last", &job.paths.last())?
        .output("log", &job.paths.log_file)?
        .save(&job.stamp)?;
    Ok(summary)
}

pub enum ModelSource<'a> {
    Checkpoint(&'a Path),
    /// A freshly initialised model, used for the untrained baseline.
    Untrained(&'a ModelConfig),
}

pub struct EvalJob<'a> {
    pub source: ModelSource<'a>,
    pub name: Option<&'a str>,
    pub manifest: &'a Path,
    pub episodes: &'a Path,
    pub out: &'a Path,
    pub batch_size: usize,
    pub fig3_query: Option<&'a str>,
    pub fig3_sets: usize,
}

pub fn eval(job: &EvalJob<'_>) -> Result<Vec<DistanceReport>> {
    let (file, manifest) = load_manifest(job.manifest)?;
    let set = EpisodeFile::load(job.episodes)?;
    let (model, source_path) = match job.source {
        ModelSource::Checkpoint(path) => {
            let ck = Checkpoint::load(path)?;
            evaluation::check_checkpoint_matches(&ck, &set)?;
            (ck.model::<f32>()?, Some(path))
        }
        ModelSource::Untrained(config) => (Model::<f32>::new(config.clone())?, None),
    };
    let name = match job.name {
        Some(n) => n.to_string(),
        None if model.has_dstm() => "dstm".to_string(),
        None => "baseline".to_string(),
    };
    let bank = ImageBank::load(&manifest, &manifest_base(&file))?;
    let result = evaluation::evaluate(&model, &name, &set, &bank, &manifest, job.batch_size)?;
    let fig3 = evaluation::fig3_export(&name, &result.raw, &set, &manifest, job.fig3_query, job.fig3_sets)?;
    evaluation::render_report(job.out, &result.reports, &result.raw, Some(&fig3))?;

    let mut stamp = Stamp::new("eval", Some(model.config().init_seed), &(model.config(), &name, job.batch_size))?
        .input("manifest", &file)?
        .input("episodes", job.episodes)?;
    if let Some(p) = source_path {
        stamp = stamp.input("checkpoint", p)?;
    }
    for f in [evaluation::REPORT_CSV, evaluation::REPORT_TXT, evaluation::RAW_DISTANCES_CSV, evaluation::FIG3_EXPORT] {
        stamp = stamp.output(f, &job.out.join(f))?;
    }
    stamp.save(&stamp_path(job.out))?;
    Ok(result.reports)
}

/// Writes an untrained model as a checkpoint tied to `manifest`.
pub fn save_untrained(config: &ModelConfig, manifest: &DatasetManifest, out: &Path) -> Result<()> {
    let model = Model::<f32>::new(config.clone())?;
    Checkpoint::from_model(&model, None, TrainState::untrained(manifest.content_hash()?)).save(out)?;
    Ok(())
}

/// Merges the report tables found in `inputs` into one table in `out`.
pub fn report(inputs: &[PathBuf], out: &Path) -> Result<Vec<DistanceReport>> {
    if inputs.is_empty() {
        bail!("report needs at least one evaluation directory");
    }
    let mut rows = Vec::new();
    let mut stamp = Stamp::new("report", None, &inputs)?;
    for dir in inputs {
        let csv = dir.join(evaluation::REPORT_CSV);
        rows.extend(evaluation::read_report_csv(&csv).with_context(|| format!("reading {}", csv.display()))?);
        stamp = stamp.input("report", &csv)?;
    }
    for p in evaluation::write_table(out, &rows)? {
        let role = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
        stamp = stamp.output(&role, &p)?;
    }
    stamp.save(&stamp_path(out))?;
    Ok(rows)
}

pub fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}
