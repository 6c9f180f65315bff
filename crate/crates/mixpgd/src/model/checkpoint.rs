//! Single-file checkpoint container: JSON header followed by named f64
//! parameter blobs. Writes are atomic (temp file + rename).

use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::alphabet::Alphabet;
use crate::model::{AsrModel, ModelConfig};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"MIXPGD01";
pub const FORMAT_VERSION: u32 = 1;

/// Training provenance embedded in every checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub regime: String,
    pub epoch: usize,
    pub seed: u64,
    /// Position of the training RNG stream, enough to resume deterministically.
    #[serde(default)]
    pub rng_step: u64,
    #[serde(default)]
    pub config_hash: Option<String>,
}

/// A named f64 tensor outside the model parameters (e.g. optimizer moments).
#[derive(Debug, Clone)]
pub struct NamedBlob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// A loaded or about-to-be-saved checkpoint.
#[derive(Debug)]
pub struct Checkpoint {
    pub model: AsrModel,
    pub alphabet: Alphabet,
    pub meta: TrainingMeta,
    pub extra_blobs: Vec<NamedBlob>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model_config: ModelConfig,
    alphabet: Alphabet,
    meta: TrainingMeta,
    n_blobs: usize,
}

fn write_blob(w: &mut impl Write, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[shape.len() as u8])?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact_vec(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

fn read_blob(r: &mut impl Read) -> Result<NamedBlob> {
    let name_len = u32::from_le_bytes(read_exact_vec(r, 4)?.try_into().unwrap()) as usize;
    if name_len > 4096 {
        return Err(Error::Checkpoint("corrupted blob name length".into()));
    }
    let name = String::from_utf8(read_exact_vec(r, name_len)?)
        .map_err(|_| Error::Checkpoint("blob name not utf-8".into()))?;
    let ndim = read_exact_vec(r, 1)?[0] as usize;
    let mut shape = Vec::with_capacity(ndim);
    let mut count = 1usize;
    for _ in 0..ndim {
        let d = u64::from_le_bytes(read_exact_vec(r, 8)?.try_into().unwrap()) as usize;
        count = count.saturating_mul(d);
        shape.push(d);
    }
    if count > 100_000_000 {
        return Err(Error::Checkpoint("corrupted blob shape".into()));
    }
    let raw = read_exact_vec(r, count * 8)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(NamedBlob { name, shape, data })
}

/// Persist a checkpoint atomically.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut n_blobs = ckpt.extra_blobs.len();
    ckpt.model.for_each_param(&mut |_, _, _| n_blobs += 1);
    let header = Header {
        format_version: FORMAT_VERSION,
        model_config: ckpt.model.cfg.clone(),
        alphabet: ckpt.alphabet.clone(),
        meta: ckpt.meta.clone(),
        n_blobs,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header serialize: {e}")))?;

    let tmp = path.with_extension("tmp");
    {
        let file = std::fs::File::create(&tmp)?;
        let mut w = BufWriter::new(file);
        w.write_all(MAGIC)?;
        w.write_all(&(header_json.len() as u64).to_le_bytes())?;
        w.write_all(&header_json)?;
        let mut result = Ok(());
        ckpt.model.for_each_param(&mut |name, shape, data| {
            if result.is_ok() {
                result = write_blob(&mut w, name, shape, data);
            }
        });
        result?;
        for blob in &ckpt.extra_blobs {
            write_blob(&mut w, &blob.name, &blob.shape, &blob.data)?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Load a checkpoint; any inconsistency is a hard error, never a partial load.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let magic = read_exact_vec(&mut r, 8)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let header_len = u64::from_le_bytes(read_exact_vec(&mut r, 8)?.try_into().unwrap()) as usize;
    if header_len > 10_000_000 {
        return Err(Error::Checkpoint("corrupted header length".into()));
    }
    let header: Header = serde_json::from_slice(&read_exact_vec(&mut r, header_len)?)
        .map_err(|e| Error::Checkpoint(format!("header parse: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format_version mismatch: file has {}, supported {}",
            header.format_version, FORMAT_VERSION
        )));
    }
    if header.model_config.n_classes != header.alphabet.n_classes() {
        return Err(Error::Checkpoint(format!(
            "field n_classes mismatch: model_config says {}, alphabet implies {}",
            header.model_config.n_classes,
            header.alphabet.n_classes()
        )));
    }

    let mut blobs = std::collections::HashMap::new();
    let mut order = Vec::new();
    for _ in 0..header.n_blobs {
        let blob = read_blob(&mut r)?;
        order.push(blob.name.clone());
        blobs.insert(blob.name.clone(), blob);
    }

    let mut model = AsrModel::new(&header.model_config, 0);
    let mut load_err: Option<Error> = None;
    let mut consumed = std::collections::HashSet::new();
    model.for_each_param_mut(&mut |name, data| {
        if load_err.is_some() {
            return;
        }
        match blobs.get(name) {
            Some(blob) if blob.data.len() == data.len() => {
                data.copy_from_slice(&blob.data);
                consumed.insert(name.to_string());
            }
            Some(blob) => {
                load_err = Some(Error::Checkpoint(format!(
                    "field {name} shape mismatch: expected {} values, file has {}",
                    data.len(),
                    blob.data.len()
                )));
            }
            None => {
                load_err = Some(Error::Checkpoint(format!("field {name} missing from file")));
            }
        }
    });
    if let Some(e) = load_err {
        return Err(e);
    }
    let extra_blobs = order
        .into_iter()
        .filter(|n| !consumed.contains(n))
        .map(|n| blobs.remove(&n).unwrap())
        .collect();
    Ok(Checkpoint {
        model,
        alphabet: header.alphabet,
        meta: header.meta,
        extra_blobs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::MelConfig;
    use crate::data::{make_batch, synth_toy_corpus};
    use crate::model::Mode;

    fn small_model() -> AsrModel {
        let cfg = ModelConfig {
            n_rescnn_blocks: 1,
            n_birnn_layers: 1,
            rnn_hidden: 8,
            conv_channels: 6,
            fc_hidden: 8,
            mel_bins: 16,
            ..ModelConfig::default()
        };
        AsrModel::new(&cfg, 11)
    }

    fn probe_batch() -> crate::data::FeatureBatch {
        let mel = MelConfig {
            mel_bins: 16,
            ..MelConfig::default()
        };
        let mut ex = synth_toy_corpus(2, 2);
        for e in &mut ex {
            e.featurize(&mel).unwrap();
        }
        make_batch(&ex, &Alphabet::default()).unwrap()
    }

    #[test]
    fn save_load_roundtrip_probe_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = small_model();
        let batch = probe_batch();
        let (out_before, _) = model.forward(&batch, Mode::Eval, None).unwrap();
        let ckpt = Checkpoint {
            model,
            alphabet: Alphabet::default(),
            meta: TrainingMeta {
                regime: "standard".into(),
                epoch: 3,
                seed: 11,
                rng_step: 0,
                config_hash: None,
            },
            extra_blobs: vec![NamedBlob {
                name: "opt.m.test".into(),
                shape: vec![2],
                data: vec![1.0, 2.0],
            }],
        };
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.meta.regime, "standard");
        assert_eq!(loaded.meta.epoch, 3);
        assert_eq!(loaded.extra_blobs.len(), 1);
        assert_eq!(loaded.extra_blobs[0].data, vec![1.0, 2.0]);
        let (out_after, _) = loaded.model.forward(&batch, Mode::Eval, None).unwrap();
        let max_diff = out_before
            .log_probs
            .iter()
            .zip(out_after.log_probs.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff <= 1e-6, "probe outputs differ by {max_diff}");
        assert_eq!(ckpt.model.param_hash(), loaded.model.param_hash());
    }

    #[test]
    fn corrupted_file_is_explicit_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn inconsistent_n_classes_names_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = small_model();
        let mut ckpt = Checkpoint {
            model,
            alphabet: Alphabet::default(),
            meta: TrainingMeta {
                regime: "standard".into(),
                epoch: 0,
                seed: 0,
                rng_step: 0,
                config_hash: None,
            },
            extra_blobs: vec![],
        };
        ckpt.model.cfg.n_classes = 31; // header no longer matches the alphabet
        save_checkpoint(&ckpt, &path).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("n_classes"), "{err}");
    }

    #[test]
    fn truncated_file_never_partially_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ckpt = Checkpoint {
            model: small_model(),
            alphabet: Alphabet::default(),
            meta: TrainingMeta {
                regime: "standard".into(),
                epoch: 0,
                seed: 0,
                rng_step: 0,
                config_hash: None,
            },
            extra_blobs: vec![],
        };
        save_checkpoint(&ckpt, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
