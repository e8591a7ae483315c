//! Bit-exact model persistence.
//!
//! File layout:
//!
//! | bytes                | contents                                        |
//! |----------------------|-------------------------------------------------|
//! | 0..4                 | magic `NVF1`                                    |
//! | 4..12                | header length `H` (little-endian u64)           |
//! | 12..12+H             | UTF-8 JSON header                               |
//! | 12+H..               | parameter payload: little-endian f64 arrays     |
//!
//! The header records the format version, latent spec, flow and encoder
//! architecture (including the fixed permutations), a parameter manifest
//! (name, shape, byte offset into the payload), the dataset standardization
//! stats, and an echo of the training config. Payload arrays appear in
//! manifest order, contiguously. Identical models produce byte-identical
//! files — nothing time- or environment-dependent is written.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::StandardizeStats;
use crate::error::{Error, Result};
use crate::latent::LatentSpec;
use crate::training::{NvfModel, TrainConfig};

const MAGIC: &[u8; 4] = b"NVF1";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct FlowArch {
    data_dim: usize,
    context_dim: usize,
    depth: usize,
    width: usize,
    permutations: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct EncoderArch {
    depth: usize,
    width: usize,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset of this array in the payload.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    latent: Option<LatentSpec>,
    flow: FlowArch,
    encoder: Option<EncoderArch>,
    manifest: Vec<ManifestEntry>,
    stats: Option<StandardizeStats>,
    config: TrainConfig,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Serialize the model to `path`. The same (model, stats, config) triple
/// always produces byte-identical files.
pub fn save(
    model: &NvfModel,
    stats: Option<&StandardizeStats>,
    config: &TrainConfig,
    path: &Path,
) -> Result<()> {
    let params = model.params();
    let mut manifest = Vec::with_capacity(params.len());
    let mut payload = Vec::new();
    for p in &params {
        manifest.push(ManifestEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for v in p.value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        latent: model.latent.clone(),
        flow: FlowArch {
            data_dim: model.flow.data_dim(),
            context_dim: model.flow.context_dim(),
            depth: config.depth,
            width: config.width,
            permutations: model.flow.permutations(),
        },
        encoder: model.encoder.as_ref().map(|_| EncoderArch {
            depth: config.enc_depth,
            width: config.enc_width,
        }),
        manifest,
        stats: stats.cloned(),
        config: config.clone(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| corrupt(format!("header serialization failed: {e}")))?;
    let mut bytes = Vec::with_capacity(12 + header_json.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(&payload);
    std::fs::write(path, &bytes)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Read a checkpoint back into a model, the standardization stats, and the
/// training config echo. The reconstructed model evaluates bit-identically
/// to the one saved.
pub fn load(path: &Path) -> Result<(NvfModel, Option<StandardizeStats>, TrainConfig)> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if bytes.len() < 12 {
        return Err(corrupt(format!(
            "truncated file: expected at least 12 bytes of framing, found {}",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(corrupt("bad magic: not an NVF1 checkpoint"));
    }
    let header_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let payload_start = 12usize
        .checked_add(header_len)
        .ok_or_else(|| corrupt("header length overflows"))?;
    if bytes.len() < payload_start {
        return Err(corrupt(format!(
            "truncated header: expected {header_len} bytes, found {}",
            bytes.len() - 12
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[12..payload_start])
        .map_err(|e| corrupt(format!("malformed header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(corrupt(format!(
            "unsupported format version {} (this reader supports {FORMAT_VERSION})",
            header.format_version
        )));
    }

    // validate the manifest: contiguous offsets, then total payload length
    let mut expected_offset = 0u64;
    for entry in &header.manifest {
        if entry.offset != expected_offset {
            return Err(corrupt(format!(
                "manifest inconsistency: `{}` at offset {}, expected {expected_offset}",
                entry.name, entry.offset
            )));
        }
        let numel: usize = entry.shape.iter().product();
        expected_offset += (numel * 8) as u64;
    }
    let payload = &bytes[payload_start..];
    if payload.len() as u64 != expected_offset {
        return Err(corrupt(format!(
            "truncated payload: expected {expected_offset} bytes, found {}",
            payload.len()
        )));
    }

    // rebuild the architecture, then overwrite every parameter from the payload
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = NvfModel::init(
        header.latent.clone(),
        header.flow.data_dim,
        header.flow.depth,
        header.flow.width,
        header.encoder.as_ref().map_or(2, |e| e.depth),
        header.encoder.as_ref().map_or(32, |e| e.width),
        &mut rng,
    )?;
    if model.flow.context_dim() != header.flow.context_dim {
        return Err(corrupt(format!(
            "manifest inconsistency: latent spec implies context width {}, header says {}",
            model.flow.context_dim(),
            header.flow.context_dim
        )));
    }
    model.flow.set_permutations(&header.flow.permutations);

    let mut params = model.params_mut();
    if params.len() != header.manifest.len() {
        return Err(corrupt(format!(
            "manifest inconsistency: {} arrays for an architecture with {} parameters",
            header.manifest.len(),
            params.len()
        )));
    }
    for entry in &header.manifest {
        let param = params
            .iter_mut()
            .find(|p| p.name == entry.name)
            .ok_or_else(|| {
                corrupt(format!("manifest inconsistency: unknown parameter `{}`", entry.name))
            })?;
        if param.value.shape() != entry.shape.as_slice() {
            return Err(corrupt(format!(
                "manifest inconsistency: `{}` has shape {:?}, architecture expects {:?}",
                entry.name,
                entry.shape,
                param.value.shape()
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let values: Vec<f64> = (0..numel)
            .map(|i| {
                let at = start + i * 8;
                f64::from_le_bytes(payload[at..at + 8].try_into().unwrap())
            })
            .collect();
        param.value = Tensor::from_shape(entry.shape.clone(), values)?;
    }
    Ok((model, header.stats, header.config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::exact_log_density;

    fn model_and_config(latent: Option<LatentSpec>, seed: u64) -> (NvfModel, TrainConfig) {
        let mut config = TrainConfig::toy(latent.clone(), "test", seed);
        config.depth = 2;
        config.width = 8;
        config.enc_depth = 2;
        config.enc_width = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = NvfModel::init(latent, 2, 2, 8, 2, 8, &mut rng).unwrap();
        // perturb so the round trip exercises non-default values
        use rand_distr::{Distribution, Normal};
        let dist = Normal::new(0.0, 0.3).unwrap();
        for p in model.params_mut() {
            let data: Vec<f64> =
                p.value.data().iter().map(|v| v + dist.sample(&mut rng)).collect();
            p.value = Tensor::from_shape(p.value.shape().to_vec(), data).unwrap();
        }
        (model, config)
    }

    fn stats() -> StandardizeStats {
        StandardizeStats {
            means: vec![0.5, -1.25],
            stds: vec![2.0, 0.125],
            kept_columns: vec![0, 1],
            log_jacobian: -(2.0f64.ln()) - (0.125f64.ln()),
        }
    }

    #[test]
    fn round_trip_preserves_every_parameter_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.nvf");
        let (model, config) = model_and_config(Some(LatentSpec::Discrete { s: 3 }), 1);
        save(&model, Some(&stats()), &config, &path).unwrap();
        let (loaded, loaded_stats, loaded_config) = load(&path).unwrap();

        let orig = model.params();
        let new = loaded.params();
        assert_eq!(orig.len(), new.len());
        for (a, b) in orig.iter().zip(&new) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.shape(), b.value.shape());
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "parameter {} drifted", a.name);
            }
        }
        let s = loaded_stats.unwrap();
        assert_eq!(s.means, stats().means);
        assert_eq!(s.log_jacobian.to_bits(), stats().log_jacobian.to_bits());
        assert_eq!(loaded_config.seed, config.seed);
        assert_eq!(loaded_config.latent, config.latent);
    }

    #[test]
    fn saving_twice_is_byte_identical_and_a_fixed_point() {
        let dir = tempfile::tempdir().unwrap();
        let (model, config) = model_and_config(Some(LatentSpec::Sequential { s: 2, m: 3, d_code: 2 }), 2);
        let p1 = dir.path().join("a.nvf");
        let p2 = dir.path().join("b.nvf");
        save(&model, None, &config, &p1).unwrap();
        save(&model, None, &config, &p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2, "identical saves differ");

        // save ∘ load ∘ save fixed point
        let (loaded, loaded_stats, loaded_config) = load(&p1).unwrap();
        let p3 = dir.path().join("c.nvf");
        save(&loaded, loaded_stats.as_ref(), &loaded_config, &p3).unwrap();
        assert_eq!(b1, std::fs::read(&p3).unwrap(), "second save differs from first");
    }

    #[test]
    fn probe_batch_log_densities_survive_the_round_trip_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.nvf");
        let (model, config) = model_and_config(Some(LatentSpec::Discrete { s: 4 }), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        use rand_distr::{Distribution, Normal};
        let dist = Normal::new(0.0, 1.0).unwrap();
        let probe =
            Tensor::matrix(32, 2, (0..64).map(|_| dist.sample(&mut rng)).collect()).unwrap();
        let before = exact_log_density(&model, &probe).unwrap();
        save(&model, None, &config, &path).unwrap();
        let (loaded, _, _) = load(&path).unwrap();
        let after = exact_log_density(&loaded, &probe).unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert_eq!(a.to_bits(), b.to_bits(), "log density changed across the round trip");
        }
    }

    #[test]
    fn permutations_are_restored_not_regenerated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.nvf");
        let (mut model, config) = model_and_config(None, 5);
        // force a specific, non-default permutation before saving
        let mut perms = model.flow.permutations();
        for p in &mut perms {
            p.reverse();
        }
        model.flow.set_permutations(&perms);
        save(&model, None, &config, &path).unwrap();
        let (loaded, _, _) = load(&path).unwrap();
        assert_eq!(loaded.flow.permutations(), perms);
    }

    #[test]
    fn corrupt_files_get_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.nvf");
        let (model, config) = model_and_config(None, 6);
        save(&model, None, &config, &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let check = |bytes: &[u8], needle: &str| {
            let p = dir.path().join("bad.nvf");
            std::fs::write(&p, bytes).unwrap();
            match load(&p) {
                Err(Error::Checkpoint(msg)) => {
                    assert!(msg.contains(needle), "`{msg}` does not mention `{needle}`")
                }
                other => panic!("expected checkpoint error mentioning `{needle}`, got {other:?}"),
            }
        };

        // bad magic
        let mut bad = good.clone();
        bad[0] = b'X';
        check(&bad, "bad magic");

        // version bump
        let header_len = u64::from_le_bytes(good[4..12].try_into().unwrap()) as usize;
        let header_str = std::str::from_utf8(&good[12..12 + header_len]).unwrap();
        let bumped = header_str.replacen("\"format_version\":1", "\"format_version\":2", 1);
        assert_ne!(header_str, bumped, "version field not found to bump");
        let mut bad = Vec::new();
        bad.extend_from_slice(&good[0..4]);
        bad.extend_from_slice(&(bumped.len() as u64).to_le_bytes());
        bad.extend_from_slice(bumped.as_bytes());
        bad.extend_from_slice(&good[12 + header_len..]);
        check(&bad, "format version 2");

        // truncated payload names expected vs actual byte counts
        let bad = &good[..good.len() - 8];
        let expected_payload = good.len() - 12 - header_len;
        check(bad, &format!("expected {expected_payload} bytes, found {}", expected_payload - 8));

        // not even a full frame
        check(&good[..7], "truncated file");
    }

    #[test]
    fn unconditional_model_round_trips_without_encoder_or_stats() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.nvf");
        let (model, config) = model_and_config(None, 7);
        save(&model, None, &config, &path).unwrap();
        let (loaded, s, _) = load(&path).unwrap();
        assert!(loaded.encoder.is_none());
        assert!(loaded.prior.is_none());
        assert!(s.is_none());
        assert_eq!(loaded.params().len(), model.params().len());
    }
}
