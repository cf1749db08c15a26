//! Checkpoint serialization.
//!
//! Layout: the magic string `MORPHNET1`, a manifest of (name, dtype, shape)
//! entries, then the raw little-endian scalar payloads in manifest order.
//! Round-trips are byte-exact.

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Dtype, Scalar, Tensor};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 9] = b"MORPHNET1";

pub fn write_checkpoint<T: Scalar, W: Write>(
    mut out: W,
    params: &[(String, &Tensor<T>)],
) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, tensor) in params {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::Format(format!("parameter name too long: {name}")));
        }
        out.write_all(&(bytes.len() as u16).to_le_bytes())?;
        out.write_all(bytes)?;
        out.write_all(&[T::DTYPE.code()])?;
        let shape = tensor.shape();
        if shape.len() > u8::MAX as usize {
            return Err(Error::Format(format!("rank too high for '{name}'")));
        }
        out.write_all(&[shape.len() as u8])?;
        for &e in shape {
            out.write_all(&(e as u32).to_le_bytes())?;
        }
    }
    let mut payload = Vec::new();
    for (_, tensor) in params {
        for v in tensor.data() {
            v.write_le(&mut payload);
        }
    }
    out.write_all(&payload)?;
    Ok(())
}

pub fn save_model<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_checkpoint(std::io::BufWriter::new(file), &model.named_params())
}

/// One deserialized checkpoint entry with its raw payload bytes.
pub struct RawEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Vec<RawEntry>> {
    let mut magic = [0u8; 9];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic; not a checkpoint file".into()));
    }
    let mut count_buf = [0u8; 4];
    input.read_exact(&mut count_buf)?;
    let count = u32::from_le_bytes(count_buf) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let mut len_buf = [0u8; 2];
        input.read_exact(&mut len_buf)?;
        let mut name_buf = vec![0u8; u16::from_le_bytes(len_buf) as usize];
        input.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Format("parameter name is not utf-8".into()))?;
        let mut byte = [0u8; 1];
        input.read_exact(&mut byte)?;
        let dtype = Dtype::from_code(byte[0])?;
        input.read_exact(&mut byte)?;
        let mut shape = Vec::with_capacity(byte[0] as usize);
        for _ in 0..byte[0] {
            let mut e = [0u8; 4];
            input.read_exact(&mut e)?;
            shape.push(u32::from_le_bytes(e) as usize);
        }
        entries.push(RawEntry {
            name,
            dtype,
            shape,
            payload: Vec::new(),
        });
    }
    for entry in &mut entries {
        let numel: usize = entry.shape.iter().product();
        let mut payload = vec![0u8; numel * entry.dtype.size_bytes()];
        input.read_exact(&mut payload)?;
        entry.payload = payload;
    }
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last payload",
            rest.len()
        )));
    }
    Ok(entries)
}

/// Outcome of loading a checkpoint into a model.
#[derive(Debug, Default)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// Model parameters absent from the file (left at their current values).
    pub missing: Vec<String>,
    /// File entries with no matching model parameter.
    pub unexpected: Vec<String>,
    /// Name matches whose shape or dtype differ; skipped.
    pub skipped: Vec<String>,
}

impl LoadReport {
    pub fn is_exact(&self) -> bool {
        self.missing.is_empty() && self.unexpected.is_empty() && self.skipped.is_empty()
    }
}

/// Load a checkpoint by parameter name. With `strict`, any mismatch between
/// the file and the model is an error; otherwise the intersection loads and
/// the report lists what was skipped (how a video model picks up spatial
/// weights from an image checkpoint while its temporal mixers stay fresh).
pub fn load_model<T: Scalar>(model: &mut Model<T>, path: &Path, strict: bool) -> Result<LoadReport> {
    let file = std::fs::File::open(path)?;
    let entries = read_checkpoint(std::io::BufReader::new(file))?;
    let mut by_name: std::collections::HashMap<&str, &RawEntry> =
        entries.iter().map(|e| (e.name.as_str(), e)).collect();
    let mut report = LoadReport::default();
    model.for_each_param_mut(&mut |name, tensor| {
        match by_name.remove(name) {
            None => report.missing.push(name.to_string()),
            Some(entry) => {
                if entry.dtype != T::DTYPE || entry.shape != tensor.shape() {
                    report.skipped.push(name.to_string());
                } else {
                    let width = T::DTYPE.size_bytes();
                    for (i, v) in tensor.data_mut().iter_mut().enumerate() {
                        *v = T::read_le(&entry.payload[i * width..(i + 1) * width]);
                    }
                    report.loaded.push(name.to_string());
                }
            }
        }
        Ok(())
    })?;
    report.unexpected = by_name.keys().map(|s| s.to_string()).collect();
    report.unexpected.sort();
    if strict && !report.is_exact() {
        return Err(Error::Format(format!(
            "strict load failed: {} missing, {} unexpected, {} shape-mismatched",
            report.missing.len(),
            report.unexpected.len(),
            report.skipped.len()
        )));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, Init, ModelConfig};

    #[test]
    fn roundtrip_is_byte_exact() {
        let cfg = ModelConfig::toy_image(8, 8, 4);
        let model = build_model::<f32>(&cfg, Init::Seeded(11)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path_a = dir.path().join("a.ckpt");
        save_model(&model, &path_a).unwrap();

        let mut reloaded = build_model::<f32>(&cfg, Init::Zeros).unwrap();
        let report = load_model(&mut reloaded, &path_a, true).unwrap();
        assert!(report.is_exact());

        let path_b = dir.path().join("b.ckpt");
        save_model(&reloaded, &path_b).unwrap();
        let a = std::fs::read(&path_a).unwrap();
        let b = std::fs::read(&path_b).unwrap();
        assert_eq!(a, b, "save -> load -> save must reproduce the bytes");
    }

    #[test]
    fn loaded_model_forwards_identically() {
        let cfg = ModelConfig::toy_image(8, 8, 4);
        let model = build_model::<f32>(&cfg, Init::Seeded(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_model(&model, &path).unwrap();
        let mut other = build_model::<f32>(&cfg, Init::Seeded(99)).unwrap();
        load_model(&mut other, &path, true).unwrap();

        let x = Tensor::full(&[8, 8, 3], 0.25f32);
        let ya = model.forward_tensor(&x).unwrap();
        let yb = other.forward_tensor(&x).unwrap();
        assert_eq!(ya, yb);
    }

    #[test]
    fn image_weights_transfer_into_video_model() {
        let image_cfg = ModelConfig::toy_image(8, 8, 4);
        let image = build_model::<f32>(&image_cfg, Init::Seeded(5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ckpt");
        save_model(&image, &path).unwrap();

        let video_cfg = ModelConfig::toy_video(8, 8, 8, 4);
        let mut video = build_model::<f32>(&video_cfg, Init::Seeded(6)).unwrap();
        let report = load_model(&mut video, &path, false).unwrap();
        // Spatial mixers, norms, MLPs, head: loaded. Temporal mixers and
        // their norms: missing. Patch embeddings differ in input width.
        assert!(report.loaded.iter().any(|n| n.ends_with(".morphfc.w_h")));
        assert!(report.missing.iter().any(|n| n.ends_with(".temporal.w_t")));
        assert!(report.skipped.iter().any(|n| n.starts_with("patch_embed")));
        let spatial: Vec<_> = image
            .named_params()
            .into_iter()
            .filter(|(n, _)| n.contains(".morphfc."))
            .collect();
        let video_params = video.named_params();
        for (name, tensor) in spatial {
            let loaded = video_params
                .iter()
                .find(|(n, _)| *n == name)
                .expect("video model shares spatial names");
            assert_eq!(loaded.1, &tensor.clone());
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let bytes = b"NOTAMODEL0\x00\x00\x00\x00";
        let err = read_checkpoint(&bytes[..]);
        assert!(matches!(err, Err(Error::Format(_))));
    }
}
