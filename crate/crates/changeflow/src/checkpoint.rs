//! Parameter serialization shared by encoder backends and training
//! checkpoints: values and optimizer moments travel as base64-encoded
//! little-endian f64 bytes inside ordinary JSON, so checkpoints are
//! diffable, versionable, and bit-exact.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamSnapshot, ParamStore};

/// One serialized parameter. `moment1`/`moment2` are empty strings when the
/// blob carries no optimizer state (frozen backends, exported encoders).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamBlob {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
    pub steps: u64,
    pub data: String,
    #[serde(default)]
    pub moment1: String,
    #[serde(default)]
    pub moment2: String,
}

fn encode(a: &ArrayD<f64>) -> String {
    let mut bytes = Vec::with_capacity(a.len() * 8);
    for &x in a.iter() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    B64.encode(bytes)
}

fn decode(field: &str, shape: &[usize], data: &str) -> Result<ArrayD<f64>> {
    let bytes = B64
        .decode(data)
        .map_err(|e| Error::validation(format!("bad base64 in {field}: {e}")))?;
    let n: usize = shape.iter().product();
    if bytes.len() != n * 8 {
        return Err(Error::validation(format!(
            "{field}: expected {} bytes for shape {shape:?}, found {}",
            n * 8,
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), values)
        .map_err(|e| Error::validation(format!("{field}: {e}")))
}

/// Serializes matching parameters. With `with_moments` the optimizer state
/// rides along for exact training resume.
pub fn blobs_from_store(
    store: &ParamStore,
    with_moments: bool,
    filter: impl Fn(&str) -> bool,
) -> Vec<ParamBlob> {
    store
        .snapshot()
        .into_iter()
        .filter(|s| filter(&s.name))
        .map(|s| ParamBlob {
            name: s.name.clone(),
            shape: s.value.shape().to_vec(),
            frozen: s.frozen,
            steps: s.steps,
            data: encode(&s.value),
            moment1: if with_moments { encode(&s.m) } else { String::new() },
            moment2: if with_moments { encode(&s.v) } else { String::new() },
        })
        .collect()
}

/// Decodes blobs into snapshots suitable for [`ParamStore::restore`].
pub fn blobs_to_snapshots(blobs: &[ParamBlob]) -> Result<Vec<ParamSnapshot>> {
    blobs
        .iter()
        .map(|b| {
            let value = decode(&b.name, &b.shape, &b.data)?;
            let zeros = ArrayD::zeros(IxDyn(&b.shape));
            let m = if b.moment1.is_empty() {
                zeros.clone()
            } else {
                decode(&b.name, &b.shape, &b.moment1)?
            };
            let v = if b.moment2.is_empty() {
                zeros
            } else {
                decode(&b.name, &b.shape, &b.moment2)?
            };
            Ok(ParamSnapshot {
                name: b.name.clone(),
                frozen: b.frozen,
                steps: b.steps,
                value,
                m,
                v,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn blob_round_trip_is_bit_exact() {
        let mut store = ParamStore::new();
        let v = ArrayD::from_shape_vec(
            IxDyn(&[2, 2]),
            vec![0.1, -std::f64::consts::PI, 1e-300, f64::MAX],
        )
        .unwrap();
        store.register("w", v.clone(), false).unwrap();
        let blobs = blobs_from_store(&store, true, |_| true);
        let snaps = blobs_to_snapshots(&blobs).unwrap();
        assert_eq!(snaps.len(), 1);
        for (a, b) in snaps[0].value.iter().zip(v.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(snaps[0].m.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn truncated_data_is_rejected_with_sizes() {
        let blob = ParamBlob {
            name: "w".into(),
            shape: vec![3],
            frozen: false,
            steps: 0,
            data: B64.encode([0u8; 16]),
            moment1: String::new(),
            moment2: String::new(),
        };
        let err = blobs_to_snapshots(&[blob]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("24") && msg.contains("16"), "{msg}");
    }

    #[test]
    fn filter_narrows_the_export() {
        let mut store = ParamStore::new();
        store.register("enc.w", ArrayD::zeros(IxDyn(&[1])), true).unwrap();
        store.register("flow.w", ArrayD::zeros(IxDyn(&[1])), false).unwrap();
        let blobs = blobs_from_store(&store, false, |n| n.starts_with("enc."));
        assert_eq!(blobs.len(), 1);
        assert_eq!(blobs[0].name, "enc.w");
        assert!(blobs[0].frozen);
    }
}
