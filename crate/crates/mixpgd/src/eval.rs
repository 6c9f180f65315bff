//! Corpus-level CER/WER evaluation under clean and attacked inputs, plus
//! report serialization (JSON and CSV).

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alphabet::Alphabet;
use crate::attacks::{generate, AttackConfig};
use crate::data::{make_batch, AudioExample};
use crate::losses::SinkhornConfig;
use crate::model::{decode::greedy_decode, AsrModel, Mode};
use crate::{Error, Result};

/// Levenshtein distance between two token sequences.
pub fn edit_distance<T: Eq>(a: &[T], b: &[T]) -> usize {
    let (n, m) = (a.len(), b.len());
    if n == 0 {
        return m;
    }
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for i in 1..=n {
        cur[0] = i;
        for j in 1..=m {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorRates {
    /// Character error rate in percent, corpus-level.
    pub cer: f64,
    /// Word error rate in percent, corpus-level.
    pub wer: f64,
    pub n_utts: usize,
}

/// Corpus-level rates: total edit distance over total reference length, ×100.
pub fn error_rates(refs: &[String], hyps: &[String]) -> Result<ErrorRates> {
    if refs.len() != hyps.len() {
        return Err(Error::Invalid(format!(
            "got {} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    if refs.is_empty() {
        return Err(Error::Invalid("no utterances to score".into()));
    }
    let (mut char_errs, mut char_total) = (0usize, 0usize);
    let (mut word_errs, mut word_total) = (0usize, 0usize);
    for (r, h) in refs.iter().zip(hyps) {
        let rc: Vec<char> = r.chars().collect();
        let hc: Vec<char> = h.chars().collect();
        char_errs += edit_distance(&rc, &hc);
        char_total += rc.len();
        let rw: Vec<&str> = r.split_whitespace().collect();
        let hw: Vec<&str> = h.split_whitespace().collect();
        word_errs += edit_distance(&rw, &hw);
        word_total += rw.len();
    }
    if char_total == 0 || word_total == 0 {
        return Err(Error::Invalid("empty reference transcripts".into()));
    }
    Ok(ErrorRates {
        cer: 100.0 * char_errs as f64 / char_total as f64,
        wer: 100.0 * word_errs as f64 / word_total as f64,
        n_utts: refs.len(),
    })
}

/// One report row; (model_id, attack_hash) must be unique within a report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub model_id: String,
    pub regime: String,
    pub attack: String,
    pub epsilon: f64,
    pub steps: usize,
    pub cer: f64,
    pub wer: f64,
    pub attack_hash: String,
}

/// Provenance embedded in every persisted report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportMeta {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default)]
    pub meta: Option<ReportMeta>,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn push(&mut self, row: EvalRow) -> Result<()> {
        if self
            .rows
            .iter()
            .any(|r| r.model_id == row.model_id && r.attack_hash == row.attack_hash)
        {
            return Err(Error::Invalid(format!(
                "duplicate report row for model '{}' attack '{}'",
                row.model_id, row.attack
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn merge(&mut self, other: EvalReport) -> Result<()> {
        for row in other.rows {
            self.push(row)?;
        }
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<EvalReport> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Invalid(e.to_string()))?;
        w.write_record(["model_id", "regime", "attack", "epsilon", "steps", "cer", "wer"])
            .map_err(|e| Error::Invalid(e.to_string()))?;
        for r in &self.rows {
            w.write_record([
                r.model_id.as_str(),
                r.regime.as_str(),
                r.attack.as_str(),
                &format!("{}", r.epsilon),
                &format!("{}", r.steps),
                &format!("{:.4}", r.cer),
                &format!("{:.4}", r.wer),
            ])
            .map_err(|e| Error::Invalid(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn find(&self, model_id: &str, attack: &str) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.model_id == model_id && r.attack == attack)
    }
}

fn check_unique_ids(examples: &[AudioExample]) -> Result<()> {
    let mut seen = HashSet::new();
    for e in examples {
        if !seen.insert(e.id.as_str()) {
            return Err(Error::Invalid(format!("duplicate example id '{}'", e.id)));
        }
    }
    Ok(())
}

/// Decode `model` on `examples`, optionally perturbing each batch with an
/// attack whose gradients come from `grad_model` (the surrogate; pass the
/// same model for white-box evaluation).
pub fn eval_attacked(
    model: &AsrModel,
    grad_model: &AsrModel,
    examples: &[AudioExample],
    alphabet: &Alphabet,
    attack: Option<&AttackConfig>,
    sinkhorn: &SinkhornConfig,
    batch_size: usize,
) -> Result<ErrorRates> {
    if examples.is_empty() {
        return Err(Error::Invalid("no evaluation examples".into()));
    }
    check_unique_ids(examples)?;
    let mut refs = Vec::with_capacity(examples.len());
    let mut hyps = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let batch = make_batch(chunk, alphabet)?;
        let eval_batch = match attack {
            Some(cfg) => {
                let p = generate(grad_model, &batch, cfg, sinkhorn)?;
                p.apply(&batch)
            }
            None => batch,
        };
        let (out, _) = model.forward(&eval_batch, Mode::Eval, None)?;
        hyps.extend(greedy_decode(&out, alphabet));
        refs.extend(chunk.iter().map(|e| e.transcript.clone()));
    }
    error_rates(&refs, &hyps)
}

/// White-box evaluation: a mandatory clean row plus one row per attack, with
/// attack gradients taken on the evaluated model itself.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_whitebox(
    model: &AsrModel,
    model_id: &str,
    regime: &str,
    examples: &[AudioExample],
    alphabet: &Alphabet,
    attacks: &[AttackConfig],
    sinkhorn: &SinkhornConfig,
    batch_size: usize,
) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    let clean = eval_attacked(model, model, examples, alphabet, None, sinkhorn, batch_size)?;
    report.push(EvalRow {
        model_id: model_id.to_string(),
        regime: regime.to_string(),
        attack: "clean".to_string(),
        epsilon: 0.0,
        steps: 0,
        cer: clean.cer,
        wer: clean.wer,
        attack_hash: "clean".to_string(),
    })?;
    for cfg in attacks {
        cfg.validate()?;
        let rates = eval_attacked(model, model, examples, alphabet, Some(cfg), sinkhorn, batch_size)?;
        report.push(EvalRow {
            model_id: model_id.to_string(),
            regime: regime.to_string(),
            attack: cfg.display_name(),
            epsilon: cfg.epsilon,
            steps: cfg.n_steps,
            cer: rates.cer,
            wer: rates.wer,
            attack_hash: cfg.hash(),
        })?;
    }
    Ok(report)
}

/// Transfer evaluation: perturbations are crafted on `surrogate` and applied
/// to `target`. With `surrogate` == `target` this reduces to white-box.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_transfer(
    target: &AsrModel,
    surrogate: &AsrModel,
    examples: &[AudioExample],
    alphabet: &Alphabet,
    attack: &AttackConfig,
    sinkhorn: &SinkhornConfig,
    batch_size: usize,
) -> Result<ErrorRates> {
    attack.validate()?;
    eval_attacked(target, surrogate, examples, alphabet, Some(attack), sinkhorn, batch_size)
}
