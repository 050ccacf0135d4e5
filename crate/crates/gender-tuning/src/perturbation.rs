//! Gender-word masking, MLM replacement prediction, and the five-way
//! replacement taxonomy with its sampling audit.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, TokenSequence, Vocab, MASK_ID, UNK_TOKEN};
use crate::encoder::ModelState;
use crate::error::{Error, Result};
use crate::lexicon::{self, GenderLexicon, GenderWordMatch};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationType {
    Neutral,
    ConvertGender,
    SameGender,
    Deleting,
    Identical,
}

pub const ALL_TYPES: [PerturbationType; 5] = [
    PerturbationType::Neutral,
    PerturbationType::ConvertGender,
    PerturbationType::SameGender,
    PerturbationType::Deleting,
    PerturbationType::Identical,
];

impl PerturbationType {
    pub fn label(&self) -> &'static str {
        match self {
            PerturbationType::Neutral => "neutral",
            PerturbationType::ConvertGender => "convert-gender",
            PerturbationType::SameGender => "same-gender",
            PerturbationType::Deleting => "deleting",
            PerturbationType::Identical => "identical",
        }
    }
}

/// One example's masked positions, MLM predictions, perturbation loss, and
/// per-position taxonomy labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerturbationRecord {
    pub original: TokenSequence,
    pub masked_positions: Vec<usize>,
    pub predicted: Vec<usize>,
    pub perturbed: TokenSequence,
    pub perturb_loss: f64,
    pub taxonomy: Vec<PerturbationType>,
}

/// Substitute `[MASK]` at each position; all other tokens are unchanged.
pub fn mask_positions(seq: &TokenSequence, positions: &[usize]) -> Result<TokenSequence> {
    if positions.is_empty() {
        return Err(Error::Contract(
            "mask_positions called with no positions; gender-free examples bypass masking".into(),
        ));
    }
    let mut ids = seq.ids.clone();
    for &p in positions {
        if p == 0 || p >= ids.len() {
            return Err(Error::IndexOutOfRange {
                op: "mask_positions",
                index: p,
                bound: ids.len(),
            });
        }
        ids[p] = MASK_ID;
    }
    Ok(TokenSequence { ids })
}

/// Mask every matched gender word. `matches` must come from
/// `find_gender_words` on the same tokens.
pub fn mask_gender_words(seq: &TokenSequence, matches: &[GenderWordMatch]) -> Result<TokenSequence> {
    let positions: Vec<usize> = matches.iter().map(|m| m.position).collect();
    mask_positions(seq, &positions)
}

/// Greedy replacement: argmax over the vocabulary with `[MASK]` excluded
/// from the candidates ([UNK] stays eligible); ties break to the lowest id.
pub fn predicted_replacement(logits_row: &[f64]) -> usize {
    let mut best = usize::MAX;
    let mut best_v = f64::NEG_INFINITY;
    for (id, &v) in logits_row.iter().enumerate() {
        if id == MASK_ID {
            continue;
        }
        if v > best_v {
            best_v = v;
            best = id;
        }
    }
    best
}

/// Five-way classification of a single replacement. Total over any pair of
/// words; the cases are checked in priority order and are exhaustive.
pub fn classify_replacement(
    original_word: &str,
    predicted_word: &str,
    lexicon: &GenderLexicon,
) -> PerturbationType {
    if predicted_word == original_word {
        return PerturbationType::Identical;
    }
    if predicted_word == UNK_TOKEN {
        return PerturbationType::Deleting;
    }
    match (lexicon.gender_of(original_word), lexicon.gender_of(predicted_word)) {
        (Some(orig), Some(pred)) if orig == pred => PerturbationType::SameGender,
        (Some(_), Some(_)) => PerturbationType::ConvertGender,
        _ => PerturbationType::Neutral,
    }
}

/// Mask the matches, run the MLM, and build the gender-perturbed example.
///
/// `perturb_loss` is the mean cross-entropy of the MLM logits at the masked
/// positions against the original gender tokens; predictions substitute the
/// masked tokens in the returned sequence.
pub fn perturb(
    model: &ModelState,
    vocab: &Vocab,
    lexicon: &GenderLexicon,
    original: &TokenSequence,
    matches: &[GenderWordMatch],
) -> Result<PerturbationRecord> {
    if matches.is_empty() {
        return Err(Error::Contract("perturb requires at least one gender-word match".into()));
    }
    let positions: Vec<usize> = matches.iter().map(|m| m.position).collect();
    let masked = mask_positions(original, &positions)?;
    let hidden = model.encode(&masked)?;
    let logits = model.mlm_logits(&hidden, &positions)?;
    let vocab_size = model.config.vocab_size;

    let mut predicted = Vec::with_capacity(positions.len());
    let mut taxonomy = Vec::with_capacity(positions.len());
    let mut loss = 0.0;
    for (row, &pos) in positions.iter().enumerate() {
        let row_logits = &logits.data()[row * vocab_size..(row + 1) * vocab_size];
        let target = original.ids[pos];
        let max = row_logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row_logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row_logits[target];

        let pred = predicted_replacement(row_logits);
        predicted.push(pred);
        taxonomy.push(classify_replacement(vocab.token(target), vocab.token(pred), lexicon));
    }
    loss /= positions.len() as f64;

    let mut perturbed = original.clone();
    for (&pos, &pred) in positions.iter().zip(&predicted) {
        perturbed.ids[pos] = pred;
    }
    Ok(PerturbationRecord {
        original: original.clone(),
        masked_positions: positions,
        predicted,
        perturbed,
        perturb_loss: loss,
        taxonomy,
    })
}

/// Replacement-taxonomy distribution over a seeded sample of gender-bearing
/// examples; fractions are per masked position.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditReport {
    pub counts: BTreeMap<String, u64>,
    pub fractions: BTreeMap<String, f64>,
    pub sample_size: usize,
    pub seed: u64,
    pub total_positions: u64,
}

pub fn audit(
    dataset: &[String],
    model: &ModelState,
    vocab: &Vocab,
    lexicon: &GenderLexicon,
    sample_size: usize,
    seed: u64,
) -> Result<AuditReport> {
    let max_len = model.config.max_len;
    let bearing: Vec<TokenSequence> = dataset
        .iter()
        .map(|text| corpus::tokenize(text, vocab, max_len))
        .filter(|seq| !lexicon::find_gender_words_in_sequence(seq, vocab, lexicon).is_empty())
        .collect();
    if bearing.len() < sample_size {
        return Err(Error::Data(format!(
            "need {sample_size} gender-bearing examples, found {}",
            bearing.len()
        )));
    }
    let mut indices: Vec<usize> = (0..bearing.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    indices.truncate(sample_size);
    indices.sort_unstable();

    let selected: Vec<&TokenSequence> = indices.iter().map(|&i| &bearing[i]).collect();
    let per_example: Vec<Result<Vec<PerturbationType>>> = par::map_slice(&selected, |seq| {
        let matches = lexicon::find_gender_words_in_sequence(seq, vocab, lexicon);
        Ok(perturb(model, vocab, lexicon, seq, &matches)?.taxonomy)
    });

    let mut counts: BTreeMap<String, u64> =
        ALL_TYPES.iter().map(|t| (t.label().to_string(), 0)).collect();
    let mut total = 0u64;
    for labels in per_example {
        for label in labels? {
            *counts.get_mut(label.label()).unwrap() += 1;
            total += 1;
        }
    }
    let fractions = counts
        .iter()
        .map(|(k, &v)| (k.clone(), if total == 0 { 0.0 } else { v as f64 / total as f64 }))
        .collect();
    Ok(AuditReport { counts, fractions, sample_size, seed, total_positions: total })
}
