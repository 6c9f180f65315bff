//! Corpus ingestion, batching, and the deterministic toy corpus.

use ndarray::{Array2, Array3, s};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

use crate::alphabet::Alphabet;
use crate::audio::{self, MelConfig, SAMPLE_RATE};
use crate::{Error, Result};

/// One utterance: waveform (or precomputed features) plus its transcript.
#[derive(Debug, Clone)]
pub struct AudioExample {
    pub id: String,
    pub waveform: Option<Vec<f64>>,
    pub features: Option<Array2<f64>>,
    pub transcript: String,
    pub duration_frames: usize,
}

impl AudioExample {
    /// Compute (and cache) log-mel features for this example.
    pub fn featurize(&mut self, cfg: &MelConfig) -> Result<&Array2<f64>> {
        if self.features.is_none() {
            let wav = self.waveform.as_ref().ok_or_else(|| Error::Audio {
                id: self.id.clone(),
                msg: "no waveform and no precomputed features".into(),
            })?;
            let f = audio::featurize(&self.id, wav, cfg)?;
            self.duration_frames = f.dim().1;
            self.features = Some(f);
        }
        Ok(self.features.as_ref().unwrap())
    }
}

/// Result of loading a manifest: accepted examples plus rejected row ids.
#[derive(Debug, Default)]
pub struct ManifestLoad {
    pub examples: Vec<AudioExample>,
    pub rejects: Vec<String>,
}

/// Load a CSV manifest with header `id,audio_path,transcript`.
///
/// Rows whose audio cannot be read are skipped and recorded in `rejects`.
/// Relative audio paths are resolved against the manifest's directory.
pub fn load_manifest(path: &Path, alphabet: &Alphabet) -> Result<ManifestLoad> {
    if !path.exists() {
        return Err(Error::Manifest(format!(
            "manifest not found: {}",
            path.display()
        )));
    }
    let base = path.parent().map(PathBuf::from).unwrap_or_default();
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Manifest(format!("cannot read manifest: {e}")))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Manifest(format!("manifest header: {e}")))?
        .clone();
    for field in ["id", "audio_path", "transcript"] {
        if !headers.iter().any(|h| h == field) {
            return Err(Error::Manifest(format!("manifest missing column '{field}'")));
        }
    }
    let idx = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (i_id, i_path, i_tr) = (idx("id"), idx("audio_path"), idx("transcript"));

    let mut out = ManifestLoad::default();
    for (row_no, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Manifest(format!("row {row_no}: {e}")))?;
        let id = record.get(i_id).unwrap_or("").to_string();
        let audio_path = base.join(record.get(i_path).unwrap_or(""));
        let transcript = alphabet.normalize(record.get(i_tr).unwrap_or(""));
        if transcript.is_empty() {
            log::warn!("manifest row '{id}': empty transcript after normalization, rejected");
            out.rejects.push(id);
            continue;
        }
        match audio::read_wav(&audio_path) {
            Ok(waveform) => out.examples.push(AudioExample {
                id,
                waveform: Some(waveform),
                features: None,
                transcript,
                duration_frames: 0,
            }),
            Err(e) => {
                log::warn!("manifest row '{id}': {e}, rejected");
                out.rejects.push(id);
            }
        }
    }
    Ok(out)
}

/// Padded batch of feature matrices and tokenized transcripts.
///
/// `features` is `[batch, mel_bins, time]`; padding regions are exactly zero
/// and excluded from loss computation via the length vectors.
#[derive(Debug, Clone)]
pub struct FeatureBatch {
    pub features: Array3<f64>,
    pub feature_lengths: Vec<usize>,
    pub label_indices: Array2<usize>,
    pub label_lengths: Vec<usize>,
    pub ids: Vec<String>,
}

impl FeatureBatch {
    pub fn batch_size(&self) -> usize {
        self.features.dim().0
    }

    pub fn mel_bins(&self) -> usize {
        self.features.dim().1
    }

    pub fn max_time(&self) -> usize {
        self.features.dim().2
    }

    /// Label indices of example `i`, truncated to its true length.
    pub fn labels_of(&self, i: usize) -> Vec<usize> {
        self.label_indices
            .row(i)
            .iter()
            .take(self.label_lengths[i])
            .copied()
            .collect()
    }

    /// Zero out feature frames beyond each example's valid length.
    pub fn mask_padding(&mut self) {
        let (b, _, t) = self.features.dim();
        for i in 0..b {
            let len = self.feature_lengths[i];
            if len < t {
                self.features.slice_mut(s![i, .., len..]).fill(0.0);
            }
        }
    }
}

/// Assemble featurized examples into a padded batch.
pub fn make_batch(examples: &[AudioExample], alphabet: &Alphabet) -> Result<FeatureBatch> {
    if examples.is_empty() {
        return Err(Error::Invalid("cannot batch an empty example list".into()));
    }
    let mel_bins = examples[0]
        .features
        .as_ref()
        .ok_or_else(|| Error::Invalid("example not featurized".into()))?
        .dim()
        .0;
    let mut labels = Vec::with_capacity(examples.len());
    let mut max_t = 0;
    let mut max_l = 0;
    for ex in examples {
        let f = ex
            .features
            .as_ref()
            .ok_or_else(|| Error::Invalid(format!("example '{}' not featurized", ex.id)))?;
        if f.dim().0 != mel_bins {
            return Err(Error::Shape {
                context: format!("batch features for '{}'", ex.id),
                expected: format!("{mel_bins} mel bins"),
                got: format!("{}", f.dim().0),
            });
        }
        let lab = alphabet.encode(&alphabet.normalize(&ex.transcript))?;
        if lab.is_empty() {
            return Err(Error::Invalid(format!("example '{}' has empty label", ex.id)));
        }
        max_t = max_t.max(f.dim().1);
        max_l = max_l.max(lab.len());
        labels.push(lab);
    }
    let mut features = Array3::zeros((examples.len(), mel_bins, max_t));
    let mut label_indices = Array2::zeros((examples.len(), max_l));
    let mut feature_lengths = Vec::with_capacity(examples.len());
    let mut label_lengths = Vec::with_capacity(examples.len());
    let mut ids = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let f = ex.features.as_ref().unwrap();
        let t = f.dim().1;
        features.slice_mut(s![i, .., ..t]).assign(f);
        feature_lengths.push(t);
        for (j, &l) in labels[i].iter().enumerate() {
            label_indices[[i, j]] = l;
        }
        label_lengths.push(labels[i].len());
        ids.push(ex.id.clone());
    }
    Ok(FeatureBatch {
        features,
        feature_lengths,
        label_indices,
        label_lengths,
        ids,
    })
}

/// Tone frequency for one alphabet symbol; symbols map to well-separated
/// sinusoids so the toy task is learnable from mel features.
fn char_freq(index: usize) -> f64 {
    300.0 + 150.0 * index as f64
}

const CHAR_SAMPLES: usize = 1600; // 0.1 s per character

/// Synthesize a deterministic toy corpus: each transcript character becomes a
/// fixed-frequency tone segment. Same seed yields the same corpus.
pub fn synth_toy_corpus(seed: u64, n: usize) -> Vec<AudioExample> {
    assert!(n >= 1, "toy corpus needs n >= 1");
    let alphabet = Alphabet::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let letters: Vec<char> = ('a'..='z').collect();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let n_words = rng.gen_range(1..=2usize);
        let mut transcript = String::new();
        for w in 0..n_words {
            if w > 0 {
                transcript.push(' ');
            }
            let len = rng.gen_range(2..=4usize);
            for _ in 0..len {
                transcript.push(letters[rng.gen_range(0..letters.len())]);
            }
        }
        let mut waveform = Vec::with_capacity(transcript.len() * CHAR_SAMPLES);
        let mut phase = 0.0f64;
        for c in transcript.chars() {
            let f = char_freq(alphabet.index_of(c).unwrap());
            let step = 2.0 * std::f64::consts::PI * f / SAMPLE_RATE as f64;
            for k in 0..CHAR_SAMPLES {
                // short fade at segment edges to avoid clicks
                let env = (k.min(CHAR_SAMPLES - k) as f64 / 100.0).min(1.0);
                waveform.push(0.4 * env * phase.sin());
                phase += step;
            }
        }
        // small deterministic noise floor
        for s in waveform.iter_mut() {
            *s += 0.002 * (rng.gen::<f64>() - 0.5);
        }
        out.push(AudioExample {
            id: format!("toy-{seed}-{i:04}"),
            waveform: Some(waveform),
            features: None,
            transcript,
            duration_frames: 0,
        });
    }
    out
}

/// Write a toy corpus to disk as WAVs plus a manifest CSV; returns the
/// manifest path.
pub fn write_toy_corpus(dir: &Path, seed: u64, n: usize) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let examples = synth_toy_corpus(seed, n);
    let manifest = dir.join("manifest.csv");
    let mut writer = csv::Writer::from_path(&manifest)
        .map_err(|e| Error::Manifest(format!("cannot write manifest: {e}")))?;
    writer
        .write_record(["id", "audio_path", "transcript"])
        .map_err(|e| Error::Manifest(e.to_string()))?;
    for ex in &examples {
        let wav_name = format!("{}.wav", ex.id);
        audio::write_wav(&dir.join(&wav_name), ex.waveform.as_ref().unwrap())?;
        writer
            .write_record([&ex.id, &wav_name, &ex.transcript])
            .map_err(|e| Error::Manifest(e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::Manifest(e.to_string()))?;
    Ok(manifest)
}
