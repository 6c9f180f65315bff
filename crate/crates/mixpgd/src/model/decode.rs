//! Greedy CTC decoding: per-frame argmax, collapse repeats, drop blanks.

use crate::alphabet::Alphabet;
use crate::model::ModelOutput;

/// Decode each example of a model output to text.
pub fn greedy_decode(output: &ModelOutput, alphabet: &Alphabet) -> Vec<String> {
    let (b, _, k) = output.log_probs.dim();
    let blank = alphabet.blank_index();
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let mut text = String::new();
        let mut prev = usize::MAX;
        for t in 0..output.out_lengths[i] {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for c in 0..k {
                let v = output.log_probs[[i, t, c]];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            if best != prev && best != blank {
                if let Some(ch) = alphabet.char_at(best) {
                    text.push(ch);
                }
            }
            prev = best;
        }
        out.push(text);
    }
    out
}
