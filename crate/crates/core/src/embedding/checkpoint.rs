//! JSON checkpoint: a versioned header followed by every tensor in declared
//! order, row-major.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchConfig, NetParams, ParamSet, TENSOR_NAMES};

pub const CHECKPOINT_FORMAT: &str = "earcan-tdnn";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported checkpoint {format} v{version}")]
    Version { format: String, version: u32 },
    #[error("tensor {name}: {detail}")]
    Tensor { name: String, detail: String },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Tensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct File {
    format: String,
    version: u32,
    arch: ArchConfig,
    tensors: Vec<Tensor>,
}

fn shapes(a: &ArchConfig) -> [Vec<usize>; 7] {
    [
        vec![a.conv1_channels, a.conv1_kernel, a.in_bands],
        vec![a.conv1_channels],
        vec![a.conv2_channels, a.conv2_kernel, a.conv1_channels],
        vec![a.conv2_channels],
        vec![a.embed_dim, 2 * a.conv2_channels],
        vec![a.embed_dim],
        vec![a.n_classes, a.embed_dim],
    ]
}

pub fn to_json(p: &NetParams) -> String {
    let tensors = TENSOR_NAMES
        .iter()
        .zip(shapes(&p.arch))
        .zip(p.weights.tensors())
        .map(|((name, shape), data)| Tensor { name: name.to_string(), shape, data: data.clone() })
        .collect();
    let f = File {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        arch: p.arch,
        tensors,
    };
    serde_json::to_string(&f).expect("checkpoint serialises")
}

pub fn from_json(s: &str) -> Result<NetParams, CheckpointError> {
    let f: File = serde_json::from_str(s)?;
    if f.format != CHECKPOINT_FORMAT || f.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version { format: f.format, version: f.version });
    }
    f.arch.validate().map_err(|e| CheckpointError::Tensor { name: "arch".into(), detail: e.to_string() })?;
    if f.tensors.len() != TENSOR_NAMES.len() {
        return Err(CheckpointError::Tensor {
            name: "*".into(),
            detail: format!("expected {} tensors, found {}", TENSOR_NAMES.len(), f.tensors.len()),
        });
    }
    let mut weights = ParamSet::zeros(&f.arch);
    let expected = shapes(&f.arch);
    for (i, (t, slot)) in f.tensors.into_iter().zip(weights.tensors_mut()).enumerate() {
        let bad = |detail: String| CheckpointError::Tensor { name: t.name.clone(), detail };
        if t.name != TENSOR_NAMES[i] {
            return Err(bad(format!("expected {} at position {i}", TENSOR_NAMES[i])));
        }
        if t.shape != expected[i] || t.data.len() != slot.len() {
            return Err(bad(format!("shape {:?} does not match {:?}", t.shape, expected[i])));
        }
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite value".into()));
        }
        *slot = t.data;
    }
    Ok(NetParams { arch: f.arch, weights })
}

pub fn save_checkpoint(p: &NetParams, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, to_json(p))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<NetParams, CheckpointError> {
    from_json(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::init_net;

    #[test]
    fn round_trip_is_exact() {
        let p = init_net(4, &ArchConfig::with_classes(3)).unwrap();
        let back = from_json(&to_json(&p)).unwrap();
        assert_eq!(p, back);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        save_checkpoint(&p, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), p);
    }

    #[test]
    fn rejects_tampering() {
        let p = init_net(4, &ArchConfig::with_classes(2)).unwrap();
        let s = to_json(&p);
        assert!(matches!(
            from_json(&s.replace("\"version\":1", "\"version\":9")),
            Err(CheckpointError::Version { .. })
        ));
        assert!(matches!(
            from_json(&s.replace("conv2.bias", "conv2.bais")),
            Err(CheckpointError::Tensor { .. })
        ));
        assert!(matches!(from_json("{"), Err(CheckpointError::Parse(_))));
    }
}
