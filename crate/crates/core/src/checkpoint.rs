//! Binary model checkpoints.
//!
//! Layout (all numbers little-endian): magic `ADVT`, format version `u32`,
//! model kind tag `u8`, a fixed 14-word `u32` config block, the action
//! normalization statistics (six `f64`: per-component mean then std), the
//! parameter count `u32`, then each parameter in declaration order as name
//! length `u32` + UTF-8 name + rank `u32` + dims (`u32` each) + raw `f32`
//! data. The normalization stats ride along because predictions are only
//! meaningful with the action scaling the model was trained under.
//! Optimizer state is not stored: checkpoints are for inference and for
//! resuming evaluation, not for bit-resuming an interrupted optimizer.

use std::fs;
use std::path::Path;

use crate::data::NormalizationStats;
use crate::error::{Error, Result};
use crate::model::{
    CopyConfig, ModelConfig, ModelKind, PredictiveModel, SdfTilingConfig, SdfVectorConfig,
};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ADVT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn kind_tag(kind: ModelKind) -> u8 {
    match kind {
        ModelKind::SdfTiling => 0,
        ModelKind::SdfVector => 1,
        ModelKind::CopyLastFrame => 2,
    }
}

/// Flattens a config into the fixed block:
/// `[window, height, width, action_dim, e1, e2, e3, d1, d2, d3, kernel,
/// stride, padding, hidden_width]`, with unused slots zero.
fn config_block(config: &ModelConfig) -> [u32; 14] {
    let mut b = [0u32; 14];
    match config {
        ModelConfig::SdfTiling(c) => {
            let fields = [
                c.window,
                c.input_height,
                c.input_width,
                c.action_dim,
                c.encoder_channels[0],
                c.encoder_channels[1],
                c.encoder_channels[2],
                c.decoder_channels[0],
                c.decoder_channels[1],
                c.decoder_channels[2],
                c.kernel,
                c.stride,
                c.padding,
                0,
            ];
            for (dst, src) in b.iter_mut().zip(fields) {
                *dst = src as u32;
            }
        }
        ModelConfig::SdfVector(c) => {
            let fields = [
                c.window,
                c.input_height,
                c.input_width,
                c.action_dim,
                c.encoder_channels[0],
                c.encoder_channels[1],
                c.encoder_channels[2],
                c.decoder_channels[0],
                c.decoder_channels[1],
                0,
                c.kernel,
                c.stride,
                c.padding,
                c.hidden_width,
            ];
            for (dst, src) in b.iter_mut().zip(fields) {
                *dst = src as u32;
            }
        }
        ModelConfig::CopyLastFrame(c) => {
            b[0] = c.window as u32;
            b[1] = c.input_height as u32;
            b[2] = c.input_width as u32;
        }
    }
    b
}

fn config_from_block(tag: u8, b: &[u32; 14]) -> Result<ModelConfig> {
    let u = |i: usize| b[i] as usize;
    let config = match tag {
        0 => ModelConfig::SdfTiling(SdfTilingConfig {
            window: u(0),
            input_height: u(1),
            input_width: u(2),
            action_dim: u(3),
            encoder_channels: [u(4), u(5), u(6)],
            decoder_channels: [u(7), u(8), u(9)],
            kernel: u(10),
            stride: u(11),
            padding: u(12),
        }),
        1 => ModelConfig::SdfVector(SdfVectorConfig {
            window: u(0),
            input_height: u(1),
            input_width: u(2),
            action_dim: u(3),
            encoder_channels: [u(4), u(5), u(6)],
            decoder_channels: [u(7), u(8)],
            hidden_width: u(13),
            kernel: u(10),
            stride: u(11),
            padding: u(12),
        }),
        2 => ModelConfig::CopyLastFrame(CopyConfig {
            window: u(0),
            input_height: u(1),
            input_width: u(2),
        }),
        other => {
            return Err(Error::Format(format!(
                "unknown model kind tag {other} in checkpoint"
            )))
        }
    };
    Ok(config)
}

/// Serializes a model and its action normalization to the checkpoint format.
pub fn checkpoint_bytes(model: &PredictiveModel<f32>, stats: &NormalizationStats) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(kind_tag(model.kind()));
    for word in config_block(model.config()) {
        out.extend_from_slice(&word.to_le_bytes());
    }
    for v in stats.mean.iter().chain(&stats.std) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for p in model.params() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value().rank() as u32).to_le_bytes());
        for &d in p.value().shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value().data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(
    model: &PredictiveModel<f32>,
    stats: &NormalizationStats,
    path: impl AsRef<Path>,
) -> Result<()> {
    fs::write(path, checkpoint_bytes(model, stats))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated reading {what}: need {n} bytes at offset {}, \
                 file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        let mut raw = [0u8; 8];
        raw.copy_from_slice(b);
        Ok(f64::from_le_bytes(raw))
    }
}

/// Deserializes a model from checkpoint bytes, validating the header, the
/// config, and every parameter's name and shape against the config's own
/// declaration order.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(PredictiveModel<f32>, NormalizationStats)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format(
            "not a model checkpoint (bad magic; expected ADVT)".into(),
        ));
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (this build reads {CHECKPOINT_VERSION})"
        )));
    }
    let tag = c.take(1, "kind tag")?[0];
    let mut block = [0u32; 14];
    for (i, slot) in block.iter_mut().enumerate() {
        *slot = c.u32(&format!("config word {i}"))?;
    }
    let config = config_from_block(tag, &block)?;
    config.validate()?;
    let mut stats = NormalizationStats::identity();
    for i in 0..3 {
        stats.mean[i] = c.f64("normalization mean")?;
    }
    for i in 0..3 {
        stats.std[i] = c.f64("normalization std")?;
    }
    if stats.std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::Format(format!(
            "normalization stds must be positive and finite, found {:?}",
            stats.std
        )));
    }
    let mut model = PredictiveModel::new(config, 0)?;

    let n_params = c.u32("parameter count")? as usize;
    if n_params != model.params().len() {
        return Err(Error::Format(format!(
            "checkpoint holds {n_params} parameters but the config declares {}",
            model.params().len()
        )));
    }
    for i in 0..n_params {
        let name_len = c.u32("parameter name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "parameter name")?)
            .map_err(|_| Error::Format("parameter name is not valid UTF-8".into()))?
            .to_string();
        let rank = c.u32("parameter rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32("parameter dim")? as usize);
        }
        let expected = &model.params()[i];
        if name != expected.name {
            return Err(Error::Format(format!(
                "parameter '{name}': expected '{}' at position {i}",
                expected.name
            )));
        }
        if shape != expected.value().shape() {
            return Err(Error::Format(format!(
                "parameter '{name}': expected shape {:?}, found {shape:?}",
                expected.value().shape()
            )));
        }
        let numel: usize = shape.iter().product();
        let raw = c.take(numel * 4, "parameter data")?;
        let dst = model.params_mut()[i].value_mut().data_mut();
        for (d, chunk) in dst.iter_mut().zip(raw.chunks_exact(4)) {
            *d = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
    }
    if c.pos != bytes.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} trailing bytes after the last parameter",
            bytes.len() - c.pos
        )));
    }
    Ok((model, stats))
}

pub fn load_checkpoint(
    path: impl AsRef<Path>,
) -> Result<(PredictiveModel<f32>, NormalizationStats)> {
    let bytes = fs::read(path.as_ref())?;
    checkpoint_from_bytes(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.as_ref().display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SdfTilingConfig;

    fn tiny_tiling() -> PredictiveModel<f32> {
        let config = SdfTilingConfig {
            window: 2,
            input_height: 16,
            input_width: 24,
            action_dim: 3,
            encoder_channels: [4, 4, 4],
            decoder_channels: [6, 6, 5],
            ..SdfTilingConfig::default()
        };
        PredictiveModel::sdf_tiling(config, 9).unwrap()
    }

    fn some_stats() -> NormalizationStats {
        NormalizationStats {
            mean: [0.1, -0.25, 0.03],
            std: [1.5, 0.8, 0.01],
        }
    }

    /// Byte offset of `needle`'s first occurrence.
    fn find(haystack: &[u8], needle: &[u8]) -> usize {
        haystack
            .windows(needle.len())
            .position(|w| w == needle)
            .expect("pattern present")
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let model = tiny_tiling();
        let stats = some_stats();
        let bytes = checkpoint_bytes(&model, &stats);
        let (loaded, loaded_stats) = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(loaded.config(), model.config());
        assert_eq!(loaded_stats, stats);
        for (a, b) in model.params().iter().zip(loaded.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value().data(), b.value().data());
        }
        // save → load → save reproduces the exact bytes
        assert_eq!(checkpoint_bytes(&loaded, &loaded_stats), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.advt");
        let model = tiny_tiling();
        let stats = some_stats();
        save_checkpoint(&model, &stats, &path).unwrap();
        let (loaded, loaded_stats) = load_checkpoint(&path).unwrap();
        assert_eq!(
            checkpoint_bytes(&loaded, &loaded_stats),
            checkpoint_bytes(&model, &stats)
        );
    }

    #[test]
    fn copy_model_round_trips_with_no_parameters() {
        let model = PredictiveModel::copy_last_frame(CopyConfig::default());
        let bytes = checkpoint_bytes(&model, &NormalizationStats::identity());
        let (loaded, stats) = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(loaded.kind(), ModelKind::CopyLastFrame);
        assert!(loaded.params().is_empty());
        assert_eq!(stats, NormalizationStats::identity());
    }

    #[test]
    fn header_corruption_is_diagnosed() {
        let model = tiny_tiling();
        let good = checkpoint_bytes(&model, &some_stats());

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        let err = checkpoint_from_bytes(&bad_magic).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");

        let mut bad_version = good.clone();
        bad_version[4..8].copy_from_slice(&99u32.to_le_bytes());
        let err = checkpoint_from_bytes(&bad_version).unwrap_err();
        assert!(err.to_string().contains("version 99"), "{err}");

        let err = checkpoint_from_bytes(&good[..40]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");

        let mut trailing = good.clone();
        trailing.extend_from_slice(&[0u8; 3]);
        let err = checkpoint_from_bytes(&trailing).unwrap_err();
        assert!(err.to_string().contains("trailing"), "{err}");
    }

    #[test]
    fn bad_normalization_stats_are_rejected() {
        let model = tiny_tiling();
        let mut stats = some_stats();
        stats.std[1] = -1.0;
        let err = checkpoint_from_bytes(&checkpoint_bytes(&model, &stats)).unwrap_err();
        assert!(err.to_string().contains("stds"), "{err}");
    }

    #[test]
    fn shape_mismatch_names_the_offending_parameter() {
        let model = tiny_tiling();
        let mut bytes = checkpoint_bytes(&model, &some_stats());
        // first dim word sits right after the first parameter's name + rank
        let first_dim = find(&bytes, b"enc1.weight") + "enc1.weight".len() + 4;
        bytes[first_dim..first_dim + 4].copy_from_slice(&99u32.to_le_bytes());
        let err = checkpoint_from_bytes(&bytes).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("enc1.weight") && msg.contains("expected shape"),
            "{msg}"
        );
    }

    #[test]
    fn name_mismatch_names_both_sides() {
        let model = tiny_tiling();
        let mut bytes = checkpoint_bytes(&model, &some_stats());
        // overwrite the first name in place: same length, different text
        let at = find(&bytes, b"enc1.weight");
        bytes[at..at + 11].copy_from_slice(b"enc9.weight");
        let err = checkpoint_from_bytes(&bytes).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("enc9.weight") && msg.contains("enc1.weight"), "{msg}");
    }

    #[test]
    fn config_block_survives_both_model_kinds() {
        let vector = PredictiveModel::<f32>::sdf_vector(
            SdfVectorConfig {
                window: 2,
                input_height: 16,
                input_width: 16,
                action_dim: 3,
                encoder_channels: [4, 4, 4],
                decoder_channels: [6, 6],
                hidden_width: 32,
                ..SdfVectorConfig::default()
            },
            3,
        )
        .unwrap();
        let bytes = checkpoint_bytes(&vector, &NormalizationStats::identity());
        let (loaded, _) = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(loaded.config(), vector.config());
        assert_eq!(loaded.count_params(), vector.count_params());
    }
}
