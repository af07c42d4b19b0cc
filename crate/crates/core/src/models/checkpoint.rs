//! Checkpoint serialization: every parameter of a trained model, with its
//! configuration, as one JSON document. Loading reconstructs the model from
//! the stored configuration and then overwrites each parameter by name.

use std::io::{Read, Write};

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::discrete::LatentConfig;
use crate::nn::ParamStore;

use super::{Ama2, CubeSpace, NetworkConfig, Sae, TrainedModel};

pub const CHECKPOINT_FORMAT: &str = "pixplan-checkpoint-v1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("bad checkpoint: {0}")]
    Format(String),
}

#[derive(Serialize, Deserialize)]
struct ParamDump {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub kind: String,
    pub network: NetworkConfig,
    pub latent: LatentConfig,
    params: Vec<ParamDump>,
}

fn dump_store(store: &ParamStore, out: &mut Vec<ParamDump>) {
    for (name, value, trainable) in store.entries() {
        out.push(ParamDump {
            name: name.to_string(),
            shape: value.shape().to_vec(),
            trainable,
            data: value.iter().cloned().collect(),
        });
    }
}

pub fn to_checkpoint(model: &TrainedModel) -> Checkpoint {
    let mut params = Vec::new();
    match model {
        TrainedModel::Sae(m) => dump_store(&m.store, &mut params),
        TrainedModel::Ama2(m) => {
            dump_store(&m.sae.store, &mut params);
            dump_store(&m.store, &mut params);
        }
        TrainedModel::CubeSpace(m) => dump_store(&m.store, &mut params),
    }
    Checkpoint {
        format: CHECKPOINT_FORMAT.to_string(),
        kind: model.kind().to_string(),
        network: *model.net(),
        latent: *model.lat(),
        params,
    }
}

pub fn save(model: &TrainedModel, w: &mut dyn Write) -> Result<(), CheckpointError> {
    let ckpt = to_checkpoint(model);
    serde_json::to_writer(w, &ckpt)?;
    Ok(())
}

pub fn from_checkpoint(ckpt: Checkpoint) -> Result<TrainedModel, CheckpointError> {
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(CheckpointError::Format(format!(
            "unsupported format tag {:?}, expected {CHECKPOINT_FORMAT:?}",
            ckpt.format
        )));
    }
    // Parameter values are fully overwritten below, so the seed here only
    // shapes throwaway initial values.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = match ckpt.kind.as_str() {
        "sae" => TrainedModel::Sae(Sae::new(ckpt.network, ckpt.latent, &mut rng)),
        "ama2" => {
            let sae = Sae::new(ckpt.network, ckpt.latent, &mut rng);
            TrainedModel::Ama2(Ama2::new(sae, &mut rng))
        }
        "csae" => TrainedModel::CubeSpace(CubeSpace::new(ckpt.network, ckpt.latent, false, &mut rng)),
        "bicsae" => TrainedModel::CubeSpace(CubeSpace::new(ckpt.network, ckpt.latent, true, &mut rng)),
        other => return Err(CheckpointError::Format(format!("unknown model kind {other:?}"))),
    };
    let expected: usize = match &model {
        TrainedModel::Sae(m) => m.store.len(),
        TrainedModel::Ama2(m) => m.sae.store.len() + m.store.len(),
        TrainedModel::CubeSpace(m) => m.store.len(),
    };
    if ckpt.params.len() != expected {
        return Err(CheckpointError::Format(format!(
            "checkpoint has {} parameters, model {:?} expects {expected}",
            ckpt.params.len(),
            ckpt.kind
        )));
    }
    for dump in ckpt.params {
        let value = ArrayD::from_shape_vec(IxDyn(&dump.shape), dump.data)
            .map_err(|e| CheckpointError::Format(format!("parameter {}: {e}", dump.name)))?;
        let restored = match &mut model {
            TrainedModel::Sae(m) => m.store.restore(&dump.name, value),
            TrainedModel::Ama2(m) => {
                if m.store.lookup(&dump.name).is_some() {
                    m.store.restore(&dump.name, value)
                } else {
                    m.sae.store.restore(&dump.name, value)
                }
            }
            TrainedModel::CubeSpace(m) => m.store.restore(&dump.name, value),
        };
        restored.map_err(CheckpointError::Format)?;
    }
    Ok(model)
}

pub fn load(r: &mut dyn Read) -> Result<TrainedModel, CheckpointError> {
    let ckpt: Checkpoint = serde_json::from_reader(r)?;
    from_checkpoint(ckpt)
}

pub fn save_to_path(model: &TrainedModel, path: &std::path::Path) -> Result<(), CheckpointError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    save(model, &mut f)
}

pub fn load_from_path(path: &std::path::Path) -> Result<TrainedModel, CheckpointError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    load(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::Rng;

    fn tiny_model(bidirectional: bool) -> CubeSpace {
        let net = NetworkConfig { image_shape: (1, 7, 7), conv_channels: 3, kernel: 3, action_hidden: 12 };
        let lat = LatentConfig::new(5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        CubeSpace::new(net, lat, bidirectional, &mut rng)
    }

    #[test]
    fn round_trip_preserves_behavior() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut model = TrainedModel::CubeSpace(tiny_model(true));
        let x = Array4::from_shape_fn((2, 1, 7, 7), |_| rng.gen_range(0.0..1.0));
        let before = model.as_cube_space().unwrap().encode_logits(&x);

        let mut buf = Vec::new();
        save(&model, &mut buf).unwrap();
        let mut loaded = load(&mut buf.as_slice()).unwrap();
        assert_eq!(loaded.kind(), "bicsae");
        let after = loaded.as_cube_space().unwrap().encode_logits(&x);
        assert_eq!(before, after);
    }

    #[test]
    fn kind_is_distinguished() {
        let model = TrainedModel::CubeSpace(tiny_model(false));
        let mut buf = Vec::new();
        save(&model, &mut buf).unwrap();
        let loaded = load(&mut buf.as_slice()).unwrap();
        assert_eq!(loaded.kind(), "csae");
    }

    #[test]
    fn ama2_round_trip_covers_both_stores() {
        let net = NetworkConfig { image_shape: (1, 7, 7), conv_channels: 2, kernel: 3, action_hidden: 8 };
        let lat = LatentConfig::new(4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let sae = Sae::new(net, lat, &mut rng);
        let mut model = TrainedModel::Ama2(Ama2::new(sae, &mut rng));
        let mut x = Array4::zeros((2, 1, 7, 7));
        for v in x.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        let (z_before, labels_before) = match &mut model {
            TrainedModel::Ama2(m) => (m.sae.encode_bits(&x), m.action_labels(&x, &x)),
            _ => unreachable!(),
        };
        let mut buf = Vec::new();
        save(&model, &mut buf).unwrap();
        let mut loaded = load(&mut buf.as_slice()).unwrap();
        match &mut loaded {
            TrainedModel::Ama2(m) => {
                assert_eq!(m.sae.encode_bits(&x), z_before);
                assert_eq!(m.action_labels(&x, &x), labels_before);
            }
            _ => panic!("wrong kind"),
        }
    }

    #[test]
    fn wrong_format_tag_is_rejected() {
        let model = TrainedModel::CubeSpace(tiny_model(false));
        let mut ckpt = to_checkpoint(&model);
        ckpt.format = "something-else".into();
        match from_checkpoint(ckpt) {
            Err(CheckpointError::Format(msg)) => assert!(msg.contains("format tag")),
            _ => panic!("expected a format error"),
        }
    }
}
