use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use aspectfsl_core::episodes::{EpisodeSetConfig, EpisodeSetSize, SamplerConfig, SplitFractions, SplitMode, SplitPlan, SplitTag};
use aspectfsl_core::model::{Model, ModelConfig};
use aspectfsl_core::shapegen::{Combos, Palette};
use aspectfsl_core::sprites::IngestOptions;
use aspectfsl_core::training::{TrainConfig, TrainPaths};
use clap::{Args, Parser, Subcommand};

use crate::pipeline::{self, PipelineConfig};
use crate::stages::{self, EvalJob, ModelSource, TrainJob};
use crate::stamp::recorded_manifest;

#[derive(Debug, Parser)]
#[command(name = "aspectfsl", version, about = "Aspect-based few-shot learning experiments")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic shapes dataset.
    GenData(GenDataArgs),
    /// Normalize sprite frames into a dataset.
    IngestSprites(IngestArgs),
    /// Partition a dataset into train/val/test pools.
    Split(SplitArgs),
    /// Sample an episode file.
    Episodes(EpisodesArgs),
    /// Train a model on episode files.
    Train(TrainArgs),
    /// Score a model on an episode file.
    Eval(EvalArgs),
    /// Merge evaluation tables.
    Report(ReportArgs),
    /// Run every stage into a fresh run directory.
    Pipeline(PipelineArgs),
    /// Print the per-stage tensor shapes of a model.
    ModelInfo(ModelInfoArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// `shapes` or a schema JSON file.
    #[arg(long, default_value = "shapes")]
    pub schema: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Render K sampled combinations instead of all.
    #[arg(long)]
    pub sample: Option<usize>,
    /// Color/thickness lookup JSON.
    #[arg(long)]
    pub palette: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub frames: PathBuf,
    /// Metadata JSON: list of {file, properties, crop?}.
    #[arg(long)]
    pub meta: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `sprites` or a schema JSON file.
    #[arg(long, default_value = "sprites")]
    pub schema: String,
    #[arg(long, default_value_t = 112)]
    pub image_size: u32,
}

#[derive(Debug, Clone, Copy, Args)]
pub struct FractionArgs {
    #[arg(long, default_value_t = 0.8)]
    pub train: f64,
    #[arg(long, default_value_t = 0.1)]
    pub val: f64,
    #[arg(long, default_value_t = 0.1)]
    pub test: f64,
}

impl From<FractionArgs> for SplitFractions {
    fn from(a: FractionArgs) -> Self {
        SplitFractions { train: a.train, val: a.val, test: a.test }
    }
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Manifest file or dataset directory.
    #[arg(long)]
    pub manifest: PathBuf,
    /// unique | query
    #[arg(long)]
    pub mode: SplitMode,
    #[command(flatten)]
    pub fractions: FractionArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EpisodesArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Build a split of this mode (unique | query) with the same seed.
    #[arg(long, conflicts_with = "plan", required_unless_present = "plan")]
    pub split: Option<SplitMode>,
    /// Use a split written by `split`.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[command(flatten)]
    pub fractions: FractionArgs,
    /// Pool to draw queries from: train | val | test.
    #[arg(long, default_value = "test")]
    pub tag: SplitTag,
    /// Support set size.
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    /// Episodes per query in the pool [default: 10].
    #[arg(long, conflicts_with = "count")]
    pub per_query: Option<usize>,
    /// Total episodes over randomly drawn queries.
    #[arg(long)]
    pub count: Option<usize>,
    /// Restrict to one aspect property.
    #[arg(long)]
    pub aspect: Option<String>,
    /// Restrict to one shared count.
    #[arg(long)]
    pub shared_count: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    pub max_retries: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Model config JSON [default: shallow backbone with single-layer DSTM].
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// Training config JSON [default: built-in defaults].
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    #[arg(long)]
    pub train_episodes: PathBuf,
    #[arg(long)]
    pub val_episodes: PathBuf,
    /// Run directory; receives checkpoints/ and logs/.
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to the manifest recorded in the training episodes' stamp.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Continue from the last checkpoint in the run directory.
    #[arg(long)]
    pub resume: bool,
    /// Overrides both the training and the initialisation seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("model").required(true).args(["checkpoint", "model_config"])))]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate a freshly initialised model instead of a checkpoint.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long)]
    pub episodes: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to the manifest recorded in the episodes' stamp.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Model name in the report [default: dstm or baseline].
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Query shown in the figure export [default: first query].
    #[arg(long)]
    pub fig3_query: Option<String>,
    /// Support sets shown in the figure export.
    #[arg(long, default_value_t = 3)]
    pub fig3_sets: usize,
    /// Initialisation seed for --model-config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Evaluation output directories.
    #[arg(long = "input", required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Parent of the timestamped run directory.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Exact run directory instead of a timestamped one.
    #[arg(long, conflicts_with = "out")]
    pub run_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ModelInfoArgs {
    /// Model config JSON.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// shallow_dstm | baseline | vgg_residual | resnet_residual
    #[arg(long, default_value = "shallow_dstm")]
    pub preset: String,
}

fn model_config(path: Option<&Path>) -> Result<ModelConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ModelConfig::from_json(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(ModelConfig::shallow_dstm()),
    }
}

fn preset(name: &str) -> Result<ModelConfig> {
    Ok(match name {
        "shallow_dstm" => ModelConfig::shallow_dstm(),
        "baseline" => ModelConfig::baseline(),
        "vgg_residual" => ModelConfig::vgg_residual(),
        "resnet_residual" => ModelConfig::resnet_residual(),
        other => bail!("unknown preset `{other}`"),
    })
}

fn manifest_for(explicit: Option<&PathBuf>, episodes: &Path) -> Result<PathBuf> {
    match explicit {
        Some(p) => Ok(p.clone()),
        None => recorded_manifest(episodes),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => {
            let schema = stages::load_schema(&a.schema)?;
            let palette: Palette = match &a.palette {
                Some(p) => stages::load_json(p)?,
                None => Palette::default(),
            };
            let combos = match a.sample {
                Some(k) => Combos::Sampled { k, seed: a.seed },
                None => Combos::All,
            };
            let m = stages::gen_data(&schema, &a.out, &combos, &palette, a.seed)?;
            println!("{} images in {}", m.records.len(), a.out.display());
        }
        Command::IngestSprites(a) => {
            let schema = stages::load_schema(&a.schema)?;
            let m = stages::ingest(&a.frames, &a.meta, &schema, &a.out, &IngestOptions { image_size: a.image_size })?;
            println!("{} frames in {}", m.records.len(), a.out.display());
        }
        Command::Split(a) => {
            let plan = stages::split(&a.manifest, a.mode, a.fractions.into(), a.seed, &a.out)?;
            println!("{} split: {}/{}/{} ids", plan.mode, plan.train.len(), plan.val.len(), plan.test.len());
        }
        Command::Episodes(a) => {
            let (plan, plan_file): (SplitPlan, Option<&Path>) = match (&a.plan, a.split) {
                (Some(p), _) => (SplitPlan::load(p)?, Some(p.as_path())),
                (None, Some(mode)) => {
                    let (_, m) = stages::load_manifest(&a.manifest)?;
                    (aspectfsl_core::episodes::make_split(&m, mode, a.fractions.into(), a.seed)?, None)
                }
                (None, None) => bail!("either --split or --plan is required"),
            };
            let size = match (a.per_query, a.count) {
                (_, Some(c)) => EpisodeSetSize::Count(c),
                (k, None) => EpisodeSetSize::PerQuery(k.unwrap_or(10)),
            };
            let config = EpisodeSetConfig {
                support_size: a.n,
                size,
                aspect: a.aspect,
                shared_count: a.shared_count,
                sampler: SamplerConfig { max_retries: a.max_retries, ..SamplerConfig::default() },
            };
            let set = stages::episodes(&a.manifest, &plan, plan_file, a.tag, &config, a.seed, &a.out)?;
            println!("{} episodes in {}", set.episodes.len(), a.out.display());
        }
        Command::Train(a) => {
            let mut model = model_config(a.model_config.as_deref())?;
            let mut train: TrainConfig = match &a.train_config {
                Some(p) => stages::load_json(p)?,
                None => TrainConfig::default(),
            };
            if let Some(seed) = a.seed {
                model.init_seed = seed;
                train.seed = seed;
            }
            let manifest = manifest_for(a.manifest.as_ref(), &a.train_episodes)?;
            let summary = stages::train(&TrainJob {
                model: &model,
                train: &train,
                manifest: &manifest,
                train_episodes: &a.train_episodes,
                val_episodes: &a.val_episodes,
                paths: TrainPaths { checkpoint_dir: a.out.join("checkpoints"), log_file: a.out.join("logs/train.csv") },
                stamp: a.out.join("train.stamp.json"),
                resume: a.resume,
            })?;
            let s = &summary.state;
            println!(
                "trained {} epochs; best val loss {:.4} at epoch {}",
                s.epoch,
                s.best_val_loss.unwrap_or(f64::NAN),
                s.best_epoch.unwrap_or(0)
            );
        }
        Command::Eval(a) => {
            let mut untrained = None;
            let source = match (&a.checkpoint, &a.model_config) {
                (Some(ck), _) => ModelSource::Checkpoint(ck),
                (None, Some(p)) => {
                    let mut c = model_config(Some(p))?;
                    if let Some(seed) = a.seed {
                        c.init_seed = seed;
                    }
                    ModelSource::Untrained(untrained.insert(c))
                }
                (None, None) => bail!("either --checkpoint or --model-config is required"),
            };
            let manifest = manifest_for(a.manifest.as_ref(), &a.episodes)?;
            let reports = stages::eval(&EvalJob {
                source,
                name: a.name.as_deref(),
                manifest: &manifest,
                episodes: &a.episodes,
                out: &a.out,
                batch_size: a.batch_size,
                fig3_query: a.fig3_query.as_deref(),
                fig3_sets: a.fig3_sets,
            })?;
            println!("{}", aspectfsl_core::evaluation::format_table(&reports));
        }
        Command::Report(a) => {
            let rows = stages::report(&a.inputs, &a.out)?;
            println!("{}", aspectfsl_core::evaluation::format_table(&rows));
        }
        Command::Pipeline(a) => {
            let mut config = PipelineConfig::load(&a.config)?;
            if let Some(seed) = a.seed {
                config = config.with_seed(seed);
            }
            let dir = a.run_dir.unwrap_or_else(|| pipeline::timestamped_run_dir(&a.out));
            let report = pipeline::run_pipeline(&config, &dir)?;
            println!("run directory: {}\nreport: {}", dir.display(), report.display());
        }
        Command::ModelInfo(a) => {
            let config = match &a.config {
                Some(p) => model_config(Some(p))?,
                None => preset(&a.preset)?,
            };
            config.validate()?;
            for (stage, [c, h, w]) in config.shape_table()? {
                println!("{stage:<32} {c:>4} x {h:>3} x {w:>3}");
            }
            let model = Model::<f32>::new(config)?;
            let params = model.params();
            let count: usize = params.trainable().map(|id| params.get(id).numel()).sum();
            println!("trainable parameters: {count}");
        }
    }
    Ok(())
}
