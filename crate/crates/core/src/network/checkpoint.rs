//! Checkpoint format: `weights.bin` (length-prefixed JSON index followed by
//! raw little-endian f32 payloads) plus a `checkpoint.json` sidecar holding
//! the network configuration and training step.

use crate::error::{Error, Result};
use crate::network::{Network, NetworkConfig};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const SIDECAR_FILE: &str = "checkpoint.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub network: NetworkConfig,
    /// Optimizer step at which the checkpoint was taken.
    pub step: usize,
    /// Validation Dice of this checkpoint, when produced by training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_dice: Option<f64>,
    /// Seed the network was initialized with.
    pub init_seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    kind: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Index {
    entries: Vec<Entry>,
}

fn collect(net: &mut Network) -> (Vec<Entry>, Vec<Vec<f32>>) {
    let mut entries = Vec::new();
    let mut payloads = Vec::new();
    net.visit_params(&mut |p| {
        entries.push(Entry {
            name: p.name.clone(),
            shape: p.data.shape().to_vec(),
            kind: "param".into(),
        });
        payloads.push(p.data.as_slice().expect("standard layout").to_vec());
    });
    net.visit_batchnorms(&mut |bn| {
        let scope = bn
            .gamma
            .name
            .strip_suffix(".gamma")
            .expect("bn gamma naming")
            .to_string();
        entries.push(Entry {
            name: format!("{scope}.running_mean"),
            shape: vec![bn.running_mean.len()],
            kind: "buffer".into(),
        });
        payloads.push(bn.running_mean.clone());
        entries.push(Entry {
            name: format!("{scope}.running_var"),
            shape: vec![bn.running_var.len()],
            kind: "buffer".into(),
        });
        payloads.push(bn.running_var.clone());
    });
    (entries, payloads)
}

pub fn save_checkpoint(dir: &Path, net: &mut Network, meta: &CheckpointMeta) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (entries, payloads) = collect(net);
    let index = serde_json::to_vec(&Index { entries })?;
    let mut file = fs::File::create(dir.join(WEIGHTS_FILE))?;
    file.write_all(&(index.len() as u64).to_le_bytes())?;
    file.write_all(&index)?;
    let mut bytes = Vec::new();
    for p in &payloads {
        for &v in p {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    file.write_all(&bytes)?;
    fs::write(
        dir.join(SIDECAR_FILE),
        serde_json::to_string_pretty(meta)?,
    )?;
    Ok(())
}

pub fn load_meta(dir: &Path) -> Result<CheckpointMeta> {
    let raw = fs::read_to_string(dir.join(SIDECAR_FILE))?;
    serde_json::from_str(&raw).map_err(|e| Error::MalformedHeader(format!("sidecar: {e}")))
}

pub fn load_checkpoint(dir: &Path) -> Result<(Network, CheckpointMeta)> {
    let meta = load_meta(dir)?;
    let mut net = Network::new(&meta.network, meta.init_seed)?;

    let mut file = fs::File::open(dir.join(WEIGHTS_FILE))?;
    let mut len_buf = [0u8; 8];
    file.read_exact(&mut len_buf)?;
    let index_len = u64::from_le_bytes(len_buf) as usize;
    let mut index_buf = vec![0u8; index_len];
    file.read_exact(&mut index_buf)?;
    let index: Index = serde_json::from_slice(&index_buf)
        .map_err(|e| Error::MalformedHeader(format!("weights index: {e}")))?;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;

    let total: usize = index.entries.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if payload.len() != total * 4 {
        return Err(Error::PayloadSizeMismatch(format!(
            "weights payload {} bytes, index implies {}",
            payload.len(),
            total * 4
        )));
    }

    let mut values: std::collections::BTreeMap<String, (Vec<usize>, Vec<f32>)> =
        std::collections::BTreeMap::new();
    let mut off = 0usize;
    for e in &index.entries {
        let n: usize = e.shape.iter().product();
        let data: Vec<f32> = payload[off..off + n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        off += n * 4;
        values.insert(e.name.clone(), (e.shape.clone(), data));
    }

    let mut missing: Vec<String> = Vec::new();
    net.visit_params(&mut |p| match values.remove(&p.name) {
        Some((shape, data)) if shape == p.data.shape() => {
            p.data
                .as_slice_mut()
                .expect("standard layout")
                .copy_from_slice(&data);
        }
        Some(_) => missing.push(format!("{} (shape mismatch)", p.name)),
        None => missing.push(p.name.clone()),
    });
    net.visit_batchnorms(&mut |bn| {
        let scope = bn
            .gamma
            .name
            .strip_suffix(".gamma")
            .expect("bn gamma naming")
            .to_string();
        for (leaf, buf) in [
            ("running_mean", &mut bn.running_mean),
            ("running_var", &mut bn.running_var),
        ] {
            let name = format!("{scope}.{leaf}");
            match values.remove(&name) {
                Some((_, data)) if data.len() == buf.len() => buf.copy_from_slice(&data),
                _ => missing.push(name),
            }
        }
    });
    if !missing.is_empty() {
        return Err(Error::MalformedHeader(format!(
            "checkpoint missing or mismatched entries: {}",
            missing.join(", ")
        )));
    }
    if !values.is_empty() {
        return Err(Error::MalformedHeader(format!(
            "checkpoint has {} unknown entries (first: {})",
            values.len(),
            values.keys().next().expect("non-empty")
        )));
    }
    Ok((net, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{AttentionMode, Dim, LayerSchedule, LevelSpec, Variant};
    use ndarray::Array5;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> NetworkConfig {
        NetworkConfig {
            variant: Variant::TwoPointFiveD,
            schedule: Some(LayerSchedule {
                levels: vec![
                    LevelSpec { dim: Dim::Two, channels: 4 },
                    LevelSpec { dim: Dim::Three, channels: 8 },
                ],
                pool_factors: vec![[1, 2, 2]],
            }),
            n_classes: 2,
            attention_mode: AttentionMode::SpvPA,
            upsample_mode: Default::default(),
        }
    }

    #[test]
    fn checkpoint_round_trip_reproduces_outputs() {
        let cfg = tiny_config();
        let mut net = Network::new(&cfg, 42).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array5::from_shape_fn((1, 1, 2, 8, 8), |_| rng.gen_range(-1.0f32..1.0));
        // move BN stats away from init
        for _ in 0..3 {
            net.forward(&x, true).unwrap();
        }
        let want = net.forward(&x, false).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let meta = CheckpointMeta {
            format_version: 1,
            network: cfg,
            step: 17,
            val_dice: Some(0.5),
            init_seed: 42,
        };
        save_checkpoint(dir.path(), &mut net, &meta).unwrap();
        let (mut loaded, meta2) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(meta2.step, 17);
        let got = loaded.forward(&x, false).unwrap();
        assert_eq!(got.probs, want.probs);
        assert_eq!(got.attentions.len(), want.attentions.len());
        for (a, b) in got.attentions.iter().zip(want.attentions.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn truncated_payload_rejected() {
        let cfg = tiny_config();
        let mut net = Network::new(&cfg, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let meta = CheckpointMeta {
            format_version: 1,
            network: cfg,
            step: 0,
            val_dice: None,
            init_seed: 0,
        };
        save_checkpoint(dir.path(), &mut net, &meta).unwrap();
        let path = dir.path().join(WEIGHTS_FILE);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(Error::PayloadSizeMismatch(_))
        ));
    }
}
