//! Checkpoint and pretrained-weight files.
//!
//! Both use the safetensors container. A checkpoint stores every parameter
//! and batch-norm buffer; the header's `__metadata__` map carries the
//! [`ModelConfig`] and run metadata as JSON. Pretrained backbone files
//! only need torchvision-style tensor names (`layer2.3.conv2.weight`, ...);
//! extra entries such as `fc.*` or `layer4.2.*` are ignored.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use log::{debug, info};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CrackNet, ModelConfig, HEAD_PREFIX};

pub const FORMAT: &str = "crackseg-checkpoint-v1";
/// Single header key holding [`Header`] as JSON, so the serialized header is
/// byte-stable.
const HEADER_KEY: &str = "crackseg";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    model_config: ModelConfig,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: CrackNet,
    /// Run metadata stored alongside the weights.
    pub metadata: BTreeMap<String, String>,
}

/// Serializes `model` (weights + config) and `extra` metadata.
pub fn checkpoint_bytes(model: &CrackNet, extra: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let header = Header {
        format: FORMAT.into(),
        model_config: model.config().clone(),
        metadata: extra.clone(),
    };
    let meta = HashMap::from([(HEADER_KEY.to_string(), serde_json::to_string(&header)?)]);
    let tensors = model.named_tensors();
    let bytes: Vec<Vec<u8>> = tensors
        .iter()
        .map(|t| t.data.iter().flat_map(|v| v.to_le_bytes()).collect())
        .collect();
    let views = tensors
        .iter()
        .zip(&bytes)
        .map(|(t, b)| {
            TensorView::new(Dtype::F32, t.shape.clone(), b)
                .map(|v| (t.name.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    safetensors::serialize(views, &Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save_checkpoint(
    model: &CrackNet,
    extra: &BTreeMap<String, String>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let bytes = checkpoint_bytes(model, extra)?;
    if let Some(parent) = path.as_ref().parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Loads a checkpoint; with `expected` set, any architectural difference
/// between it and the stored config is an error.
pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path.as_ref())?;
    checkpoint_from_bytes(&bytes, expected)
}

pub fn checkpoint_from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let (_, header) =
        SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let raw = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(HEADER_KEY))
        .ok_or_else(|| Error::Checkpoint("missing crackseg header".into()))?;
    let Header {
        format,
        model_config: config,
        metadata,
    } = serde_json::from_str(raw).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    if format != FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format `{format}`")));
    }
    config.validate()?;
    if let Some(expected) = expected {
        if let Some(diff) = expected.architecture_mismatch(&config) {
            return Err(Error::CheckpointConfigMismatch(diff));
        }
    }
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut model = CrackNet::random(config)?;
    for slot in model.named_tensors_mut() {
        let view = st.tensor(&slot.name).map_err(|_| Error::WeightMismatch {
            layer: slot.name.clone(),
            reason: "missing from checkpoint".into(),
        })?;
        copy_into(&slot.name, &slot.shape, &view, slot.data)?;
    }
    Ok(Checkpoint { model, metadata })
}

/// Copies every backbone tensor from a pretrained weights file into `net`;
/// the class head keeps its fresh initialization.
pub(crate) fn load_backbone(net: &mut CrackNet, bytes: &[u8]) -> Result<()> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::WeightMismatch {
        layer: "<file>".into(),
        reason: e.to_string(),
    })?;
    let mut used = 0;
    for slot in net.named_tensors_mut() {
        if slot.name.starts_with(HEAD_PREFIX) {
            continue;
        }
        let view = st.tensor(&slot.name).map_err(|_| Error::WeightMismatch {
            layer: slot.name.clone(),
            reason: "missing from weights file".into(),
        })?;
        copy_into(&slot.name, &slot.shape, &view, slot.data)?;
        used += 1;
    }
    let unused = st.len() - used;
    info!("loaded {used} pretrained backbone tensors ({unused} unused entries ignored)");
    debug!("pretrained file entries: {:?}", st.names());
    Ok(())
}

fn copy_into(name: &str, shape: &[usize], view: &TensorView<'_>, dst: &mut [f32]) -> Result<()> {
    if view.shape() != shape {
        return Err(Error::WeightMismatch {
            layer: name.into(),
            reason: format!("expected shape {shape:?}, found {:?}", view.shape()),
        });
    }
    let raw = view.data();
    match view.dtype() {
        Dtype::F32 => {
            for (d, c) in dst.iter_mut().zip(raw.chunks_exact(4)) {
                *d = f32::from_le_bytes(c.try_into().expect("4 bytes"));
            }
        }
        Dtype::F64 => {
            for (d, c) in dst.iter_mut().zip(raw.chunks_exact(8)) {
                *d = f64::from_le_bytes(c.try_into().expect("8 bytes")) as f32;
            }
        }
        other => {
            return Err(Error::WeightMismatch {
                layer: name.into(),
                reason: format!("unsupported dtype {other:?} (expected F32 or F64)"),
            })
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lp_pooling::PoolingSpec;
    use crate::tensor::Tensor;

    fn config() -> ModelConfig {
        ModelConfig {
            input_size: [24, 24],
            width_divisor: 32,
            pooling: PoolingSpec::finite(3.0).unwrap(),
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_preserves_outputs() {
        let model = CrackNet::random(config()).unwrap();
        let mut extra = BTreeMap::new();
        extra.insert("bn_mode".to_string(), "fine-tune".to_string());
        let bytes = checkpoint_bytes(&model, &extra).unwrap();
        let ck = checkpoint_from_bytes(&bytes, Some(&config())).unwrap();
        assert_eq!(ck.metadata.get("bn_mode").map(String::as_str), Some("fine-tune"));
        let x = Tensor::from_vec([1, 3, 24, 24], (0..1728).map(|i| (i as f32 * 0.01).sin()).collect())
            .unwrap();
        assert_eq!(model.forward(&x).unwrap().scores, ck.model.forward(&x).unwrap().scores);
        // serialization is deterministic
        assert_eq!(bytes, checkpoint_bytes(&ck.model, &extra).unwrap());
    }

    #[test]
    fn config_mismatch_fails_loudly() {
        let model = CrackNet::random(config()).unwrap();
        let bytes = checkpoint_bytes(&model, &BTreeMap::new()).unwrap();
        let mut other = config();
        other.pooling = PoolingSpec::infinity();
        let err = checkpoint_from_bytes(&bytes, Some(&other)).unwrap_err();
        assert!(matches!(err, Error::CheckpointConfigMismatch(ref m) if m.contains("pooling")));
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(checkpoint_from_bytes(b"", None).is_err());
        assert!(checkpoint_from_bytes(&[255; 16], None).is_err());
    }

    #[test]
    fn pretrained_loading_names_first_bad_layer() {
        let donor = CrackNet::random(config()).unwrap();
        let tensors = donor.named_tensors();
        let bytes: Vec<Vec<u8>> = tensors
            .iter()
            .map(|t| t.data.iter().flat_map(|v| v.to_le_bytes()).collect())
            .collect();
        // drop one tensor
        let views: Vec<_> = tensors
            .iter()
            .zip(&bytes)
            .filter(|(t, _)| t.name != "layer2.1.bn2.running_var")
            .map(|(t, b)| (t.name.clone(), TensorView::new(Dtype::F32, t.shape.clone(), b).unwrap()))
            .collect();
        let file = safetensors::serialize(views, &None).unwrap();
        let mut target = CrackNet::random(ModelConfig { seed: 99, ..config() }).unwrap();
        let err = load_backbone(&mut target, &file).unwrap_err();
        assert!(matches!(err, Error::WeightMismatch { ref layer, .. } if layer == "layer2.1.bn2.running_var"));

        // full file loads and changes the backbone but not the head
        let views: Vec<_> = tensors
            .iter()
            .zip(&bytes)
            .map(|(t, b)| (t.name.clone(), TensorView::new(Dtype::F32, t.shape.clone(), b).unwrap()))
            .collect();
        let file = safetensors::serialize(views, &None).unwrap();
        let mut target = CrackNet::random(ModelConfig { seed: 99, ..config() }).unwrap();
        let before_head = target.head().weight.value.clone();
        let before = target.backbone_checksum();
        load_backbone(&mut target, &file).unwrap();
        assert_ne!(before, target.backbone_checksum());
        assert_eq!(target.backbone_checksum(), donor.backbone_checksum());
        assert_eq!(target.head().weight.value, before_head);
    }
}
