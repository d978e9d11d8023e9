//! Episodic tuplet-loss training.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TrainState};
use crate::episodes::{Episode, EpisodeFile};
use crate::error::{Error, Result};
use crate::fingerprint;
use crate::manifest::{load_rgb, to_chw_unit, DatasetManifest};
use crate::model::{Mode, Model, ModelConfig};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::{log1p_sum_exp, Graph, Real, Tensor};

pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const LAST_CHECKPOINT: &str = "last.safetensors";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    pub epochs: usize,
    /// Episodes drawn from the training file per epoch; `None` uses the whole
    /// file once. The file is cycled in reshuffled passes when it is shorter.
    pub episodes_per_epoch: Option<usize>,
    /// Episodes per gradient step.
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 7e-4,
            weight_decay: 1e-2,
            epochs: 50,
            episodes_per_epoch: Some(2000),
            batch_size: 16,
            seed: 0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning_rate must be positive and weight_decay non-negative");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.episodes_per_epoch == Some(0) {
            return bad("epochs, batch_size and episodes_per_epoch must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }

    /// Hash of every field except `epochs`, so a resumed run may extend its schedule.
    pub fn resume_hash(&self) -> Result<String> {
        fingerprint::config_hash(&TrainConfig { epochs: 0, ..self.clone() })
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// `log(1 + Σ_j exp(‖q − p‖² − ‖q − n_j‖²))`.
pub fn tuplet_loss(query: &[f64], positive: &[f64], negatives: &[&[f64]]) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::InvalidArgument("the tuplet loss needs at least one negative".into()));
    }
    let sq = |other: &[f64]| -> Result<f64> {
        if other.len() != query.len() {
            return Err(Error::Shape(format!("vector of length {} against query of length {}", other.len(), query.len())));
        }
        Ok(query.iter().zip(other).map(|(a, b)| (a - b) * (a - b)).sum())
    };
    let dp = sq(positive)?;
    let z = negatives.iter().map(|n| Ok(dp - sq(n)?)).collect::<Result<Vec<_>>>()?;
    Ok(log1p_sum_exp(&z))
}

/// Decoded images of a manifest, kept in memory as CHW floats in `[0, 1]`.
pub struct ImageBank {
    size: usize,
    index: HashMap<String, usize>,
    pixels: Vec<Vec<f32>>,
}

impl ImageBank {
    pub fn load(manifest: &DatasetManifest, base: &Path) -> Result<Self> {
        let mut images = Vec::with_capacity(manifest.records.len());
        for r in &manifest.records {
            let path = base.join(&r.image_path);
            let img = load_rgb(&path)?;
            if img.dimensions() != (manifest.image_size, manifest.image_size) {
                return Err(Error::InvalidManifest(format!(
                    "{} is {:?}, manifest declares {}×{}",
                    path.display(),
                    img.dimensions(),
                    manifest.image_size,
                    manifest.image_size
                )));
            }
            images.push((r.sample_id.clone(), to_chw_unit(&img)));
        }
        Self::from_pixels(manifest.image_size as usize, images)
    }

    pub fn from_pixels(size: usize, images: Vec<(String, Vec<f32>)>) -> Result<Self> {
        let mut index = HashMap::new();
        let mut pixels = Vec::with_capacity(images.len());
        for (id, px) in images {
            if px.len() != 3 * size * size {
                return Err(Error::Shape(format!("image `{id}` has {} values, expected {}", px.len(), 3 * size * size)));
            }
            if index.insert(id.clone(), pixels.len()).is_some() {
                return Err(Error::InvalidManifest(format!("duplicate image id `{id}`")));
            }
            pixels.push(px);
        }
        Ok(Self { size, index, pixels })
    }

    pub fn image_size(&self) -> usize {
        self.size
    }

    pub fn get(&self, id: &str) -> Result<&[f32]> {
        self.index
            .get(id)
            .map(|&i| self.pixels[i].as_slice())
            .ok_or_else(|| Error::InvalidEpisodes(format!("unknown sample id `{id}`")))
    }

    /// Stacks the named images into `[k, 3, S, S]`.
    pub fn gather<'a, T: Real>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<Tensor<T>> {
        let mut data = Vec::new();
        let mut k = 0;
        for id in ids {
            data.extend(self.get(id)?.iter().map(|v| T::lit(f64::from(*v))));
            k += 1;
        }
        Tensor::new(vec![k, 3, self.size, self.size], data)
    }

    /// Query and support tensors for a batch of episodes with equal support size.
    pub fn batch<T: Real>(&self, episodes: &[&Episode]) -> Result<EpisodeBatch<T>> {
        let first = episodes.first().ok_or_else(|| Error::InvalidArgument("empty episode batch".into()))?;
        let n = first.support_ids.len();
        if episodes.iter().any(|e| e.support_ids.len() != n) {
            return Err(Error::InvalidEpisodes("episodes in one batch must share the support size".into()));
        }
        Ok(EpisodeBatch {
            query: self.gather(episodes.iter().map(|e| e.query_id.as_str()))?,
            support: self.gather(episodes.iter().flat_map(|e| e.support_ids.iter().map(String::as_str)))?,
            support_size: n,
            positives: episodes.iter().map(|e| e.positive_index).collect(),
        })
    }
}

pub struct EpisodeBatch<T> {
    pub query: Tensor<T>,
    pub support: Tensor<T>,
    pub support_size: usize,
    pub positives: Vec<usize>,
}

/// Mean tuplet loss of a batch and its parameter gradients (training mode).
pub fn batch_loss_and_grads<T: Real>(
    model: &Model<T>,
    batch: &EpisodeBatch<T>,
) -> Result<(f64, Vec<(crate::tensor::ParamId, Tensor<T>)>, Vec<crate::tensor::BnStat<T>>)> {
    let mut g = Graph::new();
    let vars = model.forward(&mut g, Mode::Train, &batch.query, &batch.support, batch.support_size)?;
    let loss = g.tuplet_loss(vars.query, vars.support, &batch.positives)?;
    let value = g.value(loss).data()[0].as_f64();
    let grads = g.backward(loss)?.params();
    Ok((value, grads, g.take_bn_stats()))
}

/// Per-episode tuplet losses in inference mode.
pub fn episode_losses<T: Real>(model: &Model<T>, batch: &EpisodeBatch<T>) -> Result<Vec<f64>> {
    let (q, s) = model.embed_batch(&batch.query, &batch.support, batch.support_size)?;
    let n = batch.support_size;
    let to64 = |row: &[T]| row.iter().map(|v| v.as_f64()).collect::<Vec<_>>();
    (0..q.rows())
        .map(|b| {
            let support: Vec<Vec<f64>> = (0..n).map(|j| to64(s.row(b * n + j))).collect();
            let pos = batch.positives[b];
            let negs: Vec<&[f64]> = (0..n).filter(|&j| j != pos).map(|j| support[j].as_slice()).collect();
            tuplet_loss(&to64(q.row(b)), &support[pos], &negs)
        })
        .collect()
}

/// Mean inference-mode loss over an episode file.
pub fn mean_loss<T: Real>(model: &Model<T>, bank: &ImageBank, episodes: &[Episode], batch_size: usize) -> Result<f64> {
    if episodes.is_empty() {
        return Err(Error::InvalidArgument("no episodes to score".into()));
    }
    let mut total = 0.0;
    for chunk in episodes.chunks(batch_size.max(1)) {
        let refs: Vec<&Episode> = chunk.iter().collect();
        total += episode_losses(model, &bank.batch(&refs)?)?.iter().sum::<f64>();
    }
    Ok(total / episodes.len() as f64)
}

/// Indices into the training file visited in `epoch` (1-based).
pub fn epoch_schedule(file_len: usize, per_epoch: Option<usize>, seed: u64, epoch: usize) -> Vec<usize> {
    let want = per_epoch.unwrap_or(file_len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut out = Vec::with_capacity(want);
    while out.len() < want && file_len > 0 {
        let mut pass: Vec<usize> = (0..file_len).collect();
        pass.shuffle(&mut rng);
        out.extend(pass.into_iter().take(want - out.len()));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wallclock_s: f64,
    pub episodes: usize,
    pub best: bool,
}

pub struct TrainData<'a> {
    pub bank: &'a ImageBank,
    pub train: &'a EpisodeFile,
    pub val: &'a EpisodeFile,
}

pub struct TrainPaths {
    pub checkpoint_dir: PathBuf,
    pub log_file: PathBuf,
}

impl TrainPaths {
    pub fn best(&self) -> PathBuf {
        self.checkpoint_dir.join(BEST_CHECKPOINT)
    }

    pub fn last(&self) -> PathBuf {
        self.checkpoint_dir.join(LAST_CHECKPOINT)
    }
}

pub struct TrainSummary {
    pub records: Vec<EpochRecord>,
    pub state: TrainState,
    pub model: Model<f32>,
}

fn episodes_hash(file: &EpisodeFile) -> Result<String> {
    Ok(fingerprint::bytes_hash(file.to_jsonl()?.as_bytes()))
}

fn append_log(path: &Path, records: &[EpochRecord], fresh: bool) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Trains from scratch, or continues from the last checkpoint when `resume`
/// is set and one exists. Writes `best` and `last` checkpoints and appends one
/// CSV row per epoch to the log.
pub fn train(
    model_config: &ModelConfig,
    config: &TrainConfig,
    data: &TrainData<'_>,
    paths: &TrainPaths,
    resume: bool,
) -> Result<TrainSummary> {
    config.validate()?;
    if data.train.episodes.is_empty() || data.val.episodes.is_empty() {
        return Err(Error::InvalidArgument("training needs nonempty train and validation episode files".into()));
    }
    let manifest_hash = data.train.header.manifest_hash.clone();
    if data.val.header.manifest_hash != manifest_hash {
        return Err(Error::InvalidEpisodes("train and validation episodes come from different manifests".into()));
    }
    let fresh_state = TrainState {
        epoch: 0,
        train_loss: None,
        val_loss: None,
        best_val_loss: None,
        best_epoch: None,
        optimizer_steps: 0,
        train_config_hash: config.resume_hash()?,
        manifest_hash,
        train_episodes_hash: episodes_hash(data.train)?,
        val_episodes_hash: episodes_hash(data.val)?,
    };

    let (mut model, mut opt, mut state) = if resume && paths.last().exists() {
        let ck = Checkpoint::load(&paths.last())?;
        if ck.model_config != *model_config {
            return Err(Error::Checkpoint("cannot resume: model config differs from the checkpoint".into()));
        }
        let s = &ck.state;
        if (&s.train_config_hash, &s.train_episodes_hash, &s.val_episodes_hash)
            != (&fresh_state.train_config_hash, &fresh_state.train_episodes_hash, &fresh_state.val_episodes_hash)
        {
            return Err(Error::Checkpoint("cannot resume: training config or episode files changed".into()));
        }
        let model: Model<f32> = ck.model()?;
        let opt = ck.optimizer(&model, config.optimizer())?;
        (model, opt, ck.state)
    } else {
        (Model::new(model_config.clone())?, AdamW::new(config.optimizer()), fresh_state)
    };

    let start_epoch = state.epoch + 1;
    let mut records = Vec::new();
    for epoch in start_epoch..=config.epochs {
        let started = Instant::now();
        let schedule = epoch_schedule(data.train.episodes.len(), config.episodes_per_epoch, config.seed, epoch);
        let mut total = 0.0;
        for chunk in schedule.chunks(config.batch_size) {
            let episodes: Vec<&Episode> = chunk.iter().map(|&i| &data.train.episodes[i]).collect();
            let batch = data.bank.batch::<f32>(&episodes)?;
            let (loss, grads, stats) = batch_loss_and_grads(&model, &batch)?;
            if !loss.is_finite() || grads.iter().any(|(_, g)| !g.all_finite()) {
                return Err(non_finite(&model, &batch, &episodes, epoch));
            }
            total += loss * chunk.len() as f64;
            opt.step(model.params_mut(), &grads)?;
            model.params_mut().apply_bn_stats(&stats, model_config.bn_momentum);
        }
        let train_loss = total / schedule.len() as f64;
        let val_loss = mean_loss(&model, data.bank, &data.val.episodes, config.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, episode: "validation".into() });
        }
        let best = state.best_val_loss.map_or(true, |b| val_loss < b);
        state.epoch = epoch;
        state.train_loss = Some(train_loss);
        state.val_loss = Some(val_loss);
        state.optimizer_steps = opt.steps();
        if best {
            state.best_val_loss = Some(val_loss);
            state.best_epoch = Some(epoch);
            Checkpoint::from_model(&model, Some(&opt), state.clone()).save(&paths.best())?;
        }
        Checkpoint::from_model(&model, Some(&opt), state.clone()).save(&paths.last())?;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            wallclock_s: started.elapsed().as_secs_f64(),
            episodes: schedule.len(),
            best,
        };
        log::info!(
            "epoch {epoch}/{}: train {train_loss:.4} val {val_loss:.4}{} ({:.1}s)",
            config.epochs,
            if best { " *" } else { "" },
            record.wallclock_s
        );
        append_log(&paths.log_file, std::slice::from_ref(&record), epoch == 1)?;
        records.push(record);
    }
    Ok(TrainSummary { records, state, model })
}

/// Builds the abort diagnostic, naming the first episode whose loss is not finite.
fn non_finite(model: &Model<f32>, batch: &EpisodeBatch<f32>, episodes: &[&Episode], epoch: usize) -> Error {
    let culprit = episode_losses(model, batch)
        .ok()
        .and_then(|losses| losses.iter().position(|l| !l.is_finite()))
        .unwrap_or(0);
    let e = episodes[culprit];
    Error::NonFiniteLoss { epoch, episode: format!("#{} (query {})", e.index, e.query_id) }
}
