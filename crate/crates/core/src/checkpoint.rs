//! Single-file model checkpoints: safetensors archive with the model config and
//! training state in the header metadata.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::AdamW;
use crate::tensor::{ParamKind, ParamStore, Real, Tensor};

pub const CHECKPOINT_FORMAT: &str = "aspectfsl-ckpt-v1";

const META_KEY: &str = "aspectfsl";
const PARAM_PREFIX: &str = "param/";
const M_PREFIX: &str = "adam_m/";
const V_PREFIX: &str = "adam_v/";

/// Training progress stored with every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Number of completed epochs.
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub best_val_loss: Option<f64>,
    pub best_epoch: Option<usize>,
    pub optimizer_steps: u64,
    pub train_config_hash: String,
    /// Hash of the dataset manifest the episodes were drawn from.
    pub manifest_hash: String,
    pub train_episodes_hash: String,
    pub val_episodes_hash: String,
}

impl TrainState {
    /// State of a model that was never trained, such as an untrained baseline.
    pub fn untrained(manifest_hash: impl Into<String>) -> Self {
        Self {
            epoch: 0,
            train_loss: None,
            val_loss: None,
            best_val_loss: None,
            best_epoch: None,
            optimizer_steps: 0,
            train_config_hash: String::new(),
            manifest_hash: manifest_hash.into(),
            train_episodes_hash: String::new(),
            val_episodes_hash: String::new(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    model_config: ModelConfig,
    train_state: TrainState,
    optimizer_steps: Option<u64>,
}

#[derive(Deserialize)]
struct FormatOnly {
    format: String,
}

pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub state: TrainState,
    pub params: ParamStore<f32>,
    /// Optimizer step count and per-parameter moments, by parameter name.
    pub optimizer: Option<(u64, Vec<(String, Tensor<f32>, Tensor<f32>)>)>,
}

fn f32_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn read_f32(view: &TensorView<'_>, name: &str) -> Result<Tensor<f32>> {
    if view.dtype() != Dtype::F32 {
        return Err(Error::Checkpoint(format!("tensor `{name}` has dtype {:?}, expected F32", view.dtype())));
    }
    let data = view
        .data()
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(view.shape().to_vec(), data)
}

fn ck_err(e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(e.to_string())
}

impl Checkpoint {
    pub fn from_model<T: Real>(model: &Model<T>, optimizer: Option<&AdamW<T>>, state: TrainState) -> Self {
        let params = model.params().cast::<f32>();
        let optimizer = optimizer.map(|opt| {
            let moments = model
                .params()
                .ids()
                .filter_map(|id| {
                    opt.moments(id)
                        .map(|(m, v)| (model.params().name(id).to_string(), m.cast(), v.cast()))
                })
                .collect();
            (opt.steps(), moments)
        });
        Self { model_config: model.config().clone(), state, params, optimizer }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut owned: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for id in self.params.ids() {
            let t = self.params.get(id);
            owned.push((format!("{PARAM_PREFIX}{}", self.params.name(id)), t.shape().to_vec(), f32_bytes(t)));
        }
        if let Some((_, moments)) = &self.optimizer {
            for (name, m, v) in moments {
                owned.push((format!("{M_PREFIX}{name}"), m.shape().to_vec(), f32_bytes(m)));
                owned.push((format!("{V_PREFIX}{name}"), v.shape().to_vec(), f32_bytes(v)));
            }
        }
        let views = owned
            .iter()
            .map(|(name, shape, bytes)| Ok((name.clone(), TensorView::new(Dtype::F32, shape.clone(), bytes).map_err(ck_err)?)))
            .collect::<Result<Vec<_>>>()?;
        let header = Header {
            format: CHECKPOINT_FORMAT.to_string(),
            model_config: self.model_config.clone(),
            train_state: self.state.clone(),
            optimizer_steps: self.optimizer.as_ref().map(|(steps, _)| *steps),
        };
        // A single metadata entry keeps the archive byte-identical across runs.
        let meta = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&header)?)]);
        safetensors::tensor::serialize(views, Some(meta)).map_err(ck_err)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(ck_err)?;
        let meta = header.metadata().as_ref().ok_or_else(|| Error::Checkpoint("missing header metadata".into()))?;
        let text = meta.get(META_KEY).ok_or_else(|| Error::Checkpoint(format!("missing metadata `{META_KEY}`")))?;
        let format: FormatOnly = serde_json::from_str(text).map_err(ck_err)?;
        if format.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported checkpoint format `{}`", format.format)));
        }
        let Header { model_config, train_state: state, optimizer_steps, .. } = serde_json::from_str(text)?;
        model_config.validate()?;

        let archive = SafeTensors::deserialize(bytes).map_err(ck_err)?;
        let mut names: Vec<&str> = archive.names();
        names.sort_unstable();
        // Register parameters in the model's own order so ids line up.
        let reference = Model::<f32>::new(model_config.clone())?;
        let mut params = ParamStore::new();
        for id in reference.params().ids() {
            let name = reference.params().name(id);
            let view = archive
                .tensor(&format!("{PARAM_PREFIX}{name}"))
                .map_err(|_| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            params.add(name, reference.params().kind(id), read_f32(&view, name)?)?;
        }
        let stored = names.iter().filter(|n| n.starts_with(PARAM_PREFIX)).count();
        if stored != params.len() {
            return Err(Error::Checkpoint(format!("checkpoint holds {stored} parameters, model expects {}", params.len())));
        }
        let optimizer = match optimizer_steps {
            None => None,
            Some(steps) => {
                let mut moments = Vec::new();
                for name in names.iter().filter_map(|n| n.strip_prefix(M_PREFIX)) {
                    let m = read_f32(&archive.tensor(&format!("{M_PREFIX}{name}")).map_err(ck_err)?, name)?;
                    let v = archive
                        .tensor(&format!("{V_PREFIX}{name}"))
                        .map_err(|_| Error::Checkpoint(format!("missing second moment for `{name}`")))?;
                    moments.push((name.to_string(), m, read_f32(&v, name)?));
                }
                Some((steps, moments))
            }
        };
        Ok(Self { model_config, state, params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn model<T: Real>(&self) -> Result<Model<T>> {
        Model::with_params(self.model_config.clone(), &self.params.cast())
    }

    /// Optimizer restored onto the parameter ids of `model`.
    pub fn optimizer<T: Real>(&self, model: &Model<T>, config: crate::optim::AdamWConfig) -> Result<AdamW<T>> {
        let mut opt = AdamW::new(config);
        if let Some((steps, moments)) = &self.optimizer {
            let mut restored = Vec::new();
            for (name, m, v) in moments {
                let id = model
                    .params()
                    .find(name)
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown parameter `{name}`")))?;
                if model.params().kind(id) == ParamKind::Buffer || model.params().get(id).shape() != m.shape() {
                    return Err(Error::Checkpoint(format!("optimizer state for `{name}` does not fit the model")));
                }
                restored.push((id, m.cast(), v.cast()));
            }
            opt.restore(*steps, restored);
        }
        Ok(opt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BackboneConfig, DstmConfig};
    use crate::optim::AdamWConfig;

    fn config() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig::shallow(3),
            dstm: Some(DstmConfig::single_layer(2, 2, 4)),
            input_size: 16,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            init_seed: 3,
        }
    }

    #[test]
    fn round_trip_preserves_weights_state_and_moments() {
        let model = Model::<f32>::new(config()).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut params = model.params().clone();
        let grads: Vec<_> = params.trainable().map(|id| (id, Tensor::full(params.get(id).shape(), 0.5f32))).collect();
        opt.step(&mut params, &grads).unwrap();
        let model = Model::with_params(config(), &params).unwrap();
        let mut state = TrainState::untrained("abc");
        state.epoch = 4;
        state.best_val_loss = Some(0.25);
        let ck = Checkpoint::from_model(&model, Some(&opt), state.clone());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck/last.safetensors");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.state, state);
        assert_eq!(back.model_config, config());
        let restored: Model<f32> = back.model().unwrap();
        for id in model.params().ids() {
            assert_eq!(model.params().get(id), restored.params().get(id));
        }
        let opt2 = back.optimizer(&restored, AdamWConfig::default()).unwrap();
        assert_eq!(opt2.steps(), 1);
        let id = restored.params().trainable().next().unwrap();
        assert_eq!(opt2.moments(id).unwrap().0, opt.moments(id).unwrap().0);
    }

    #[test]
    fn corrupt_or_foreign_files_are_rejected() {
        assert!(matches!(Checkpoint::from_bytes(b"not a checkpoint"), Err(Error::Checkpoint(_))));
        let data = vec![0u8; 4];
        let view = TensorView::new(Dtype::F32, vec![1], &data).unwrap();
        let meta = HashMap::from([(META_KEY.to_string(), r#"{"format": "other"}"#.to_string())]);
        let bytes = safetensors::tensor::serialize(vec![("x", view)], Some(meta)).unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
    }
}
