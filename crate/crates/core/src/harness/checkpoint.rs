use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{load_state_dict, state_dict};

pub const CHECKPOINT_FORMAT: &str = "icre-checkpoint";
pub const CHECKPOINT_VERSION: &str = "1";

const MODEL_PREFIX: &str = "model.";
const VELOCITY_PREFIX: &str = "velocity.";

/// Everything needed to resume a run or rebuild its model: parameters and
/// batch-norm statistics, optimizer velocity, the sampling RNG position and
/// the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: ModelConfig,
    /// Raw labels of the training identities, in classifier order.
    pub original_ids: Vec<u64>,
    /// Epochs completed.
    pub epoch: usize,
    pub state: Vec<(String, ArrayD<f32>)>,
    pub velocity: BTreeMap<String, ArrayD<f32>>,
    pub rng: ChaCha8Rng,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn le_bytes(a: &ArrayD<f32>) -> Vec<u8> {
    a.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// SHA-256 over every tensor, sorted by name: name, shape, then the
/// little-endian values.
pub fn param_hash(state: &[(String, ArrayD<f32>)]) -> String {
    let mut sorted: Vec<&(String, ArrayD<f32>)> = state.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut h = Sha256::new();
    for (name, v) in sorted {
        h.update(name.as_bytes());
        h.update([0u8]);
        for &d in v.shape() {
            h.update((d as u64).to_le_bytes());
        }
        h.update(le_bytes(v));
    }
    hex::encode(h.finalize())
}

impl Checkpoint {
    pub fn capture(
        config: &TrainConfig,
        model: &mut Model<f32>,
        original_ids: &[u64],
        epoch: usize,
        velocity: &BTreeMap<String, ArrayD<f32>>,
        rng: &ChaCha8Rng,
    ) -> Self {
        Self {
            config: config.clone(),
            model: model.config().clone(),
            original_ids: original_ids.to_vec(),
            epoch,
            state: state_dict(model),
            velocity: velocity.clone(),
            rng: rng.clone(),
        }
    }

    pub fn param_hash(&self) -> String {
        param_hash(&self.state)
    }

    pub fn build_model(&self) -> Result<Model<f32>> {
        let mut model = Model::new(&self.model, self.config.seed)?;
        let map: HashMap<String, ArrayD<f32>> = self.state.iter().cloned().collect();
        load_state_dict(&mut model, &map)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
        meta.insert("version".to_string(), CHECKPOINT_VERSION.to_string());
        meta.insert(
            "train_config".to_string(),
            serde_json::to_string(&self.config)?,
        );
        meta.insert(
            "model_config".to_string(),
            serde_json::to_string(&self.model)?,
        );
        meta.insert(
            "original_ids".to_string(),
            serde_json::to_string(&self.original_ids)?,
        );
        meta.insert("epoch".to_string(), self.epoch.to_string());
        meta.insert("rng_seed".to_string(), hex::encode(self.rng.get_seed()));
        meta.insert("rng_stream".to_string(), self.rng.get_stream().to_string());
        meta.insert(
            "rng_word_pos".to_string(),
            self.rng.get_word_pos().to_string(),
        );
        // Keep the stored order so a reload reproduces the state list.
        meta.insert(
            "state_order".to_string(),
            serde_json::to_string(&self.state.iter().map(|(n, _)| n).collect::<Vec<_>>())?,
        );

        let named: Vec<(String, &ArrayD<f32>)> = self
            .state
            .iter()
            .map(|(n, v)| (format!("{MODEL_PREFIX}{n}"), v))
            .chain(
                self.velocity
                    .iter()
                    .map(|(n, v)| (format!("{VELOCITY_PREFIX}{n}"), v)),
            )
            .collect();
        let bytes: Vec<Vec<u8>> = named.iter().map(|(_, v)| le_bytes(v)).collect();
        let views = named
            .iter()
            .zip(&bytes)
            .map(|((n, v), b)| {
                TensorView::new(Dtype::F32, v.shape().to_vec(), b)
                    .map(|view| (n.clone(), view))
                    .map_err(|e| bad(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        safetensors::serialize(views, Some(meta)).map_err(|e| bad(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| bad(e.to_string()))?;
        let meta = header
            .metadata()
            .clone()
            .ok_or_else(|| bad("missing metadata"))?;
        let get = |k: &str| {
            meta.get(k)
                .ok_or_else(|| bad(format!("missing metadata `{k}`")))
        };
        if get("format")? != CHECKPOINT_FORMAT {
            return Err(bad("not an icre checkpoint"));
        }
        let version = get("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let num =
            |k: &str| -> Result<u128> { get(k)?.parse().map_err(|_| bad(format!("bad `{k}`"))) };
        let seed: [u8; 32] = hex::decode(get("rng_seed")?)
            .ok()
            .and_then(|v| v.try_into().ok())
            .ok_or_else(|| bad("bad `rng_seed`"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(num("rng_stream")? as u64);
        rng.set_word_pos(num("rng_word_pos")?);

        let tensors = SafeTensors::deserialize(bytes).map_err(|e| bad(e.to_string()))?;
        let mut model_tensors = HashMap::new();
        let mut velocity = BTreeMap::new();
        for (name, view) in tensors.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(bad(format!(
                    "{name}: expected F32, found {:?}",
                    view.dtype()
                )));
            }
            let values: Vec<f32> = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(view.shape()), values)
                .map_err(|e| bad(e.to_string()))?;
            if let Some(n) = name.strip_prefix(MODEL_PREFIX) {
                model_tensors.insert(n.to_string(), arr);
            } else if let Some(n) = name.strip_prefix(VELOCITY_PREFIX) {
                velocity.insert(n.to_string(), arr);
            } else {
                return Err(bad(format!("unexpected tensor `{name}`")));
            }
        }
        let order: Vec<String> = serde_json::from_str(get("state_order")?)?;
        let state = order
            .into_iter()
            .map(|n| {
                let v = model_tensors
                    .remove(&n)
                    .ok_or_else(|| bad(format!("missing tensor `{n}`")))?;
                Ok((n, v))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: serde_json::from_str(get("train_config")?)?,
            model: serde_json::from_str(get("model_config")?)?,
            original_ids: serde_json::from_str(get("original_ids")?)?,
            epoch: num("epoch")? as usize,
            state,
            velocity,
            rng,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
