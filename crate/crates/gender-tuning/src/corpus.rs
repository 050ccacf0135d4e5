//! Tokenization, vocabulary, dataset ingestion, and synthetic corpus
//! generation with controlled gender-concept co-occurrence.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const MASK_ID: usize = 3;

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const MASK_TOKEN: &str = "[MASK]";

const RESERVED: [&str; 4] = [PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, MASK_TOKEN];

/// Word pools shared by the synthetic generators and the bundled
/// measurement specs.
pub mod words {
    pub const MASC_TERMS: &[&str] = &[
        "he", "him", "his", "man", "men", "boy", "boys", "father", "son", "brother", "uncle",
        "husband", "king", "actor",
    ];
    pub const FEM_TERMS: &[&str] = &[
        "she", "her", "hers", "woman", "women", "girl", "girls", "mother", "daughter", "sister",
        "aunt", "wife", "queen", "actress",
    ];
    pub const MASC_NAMES: &[&str] = &[
        "john", "james", "david", "michael", "robert", "william", "thomas", "daniel",
    ];
    pub const FEM_NAMES: &[&str] = &[
        "mary", "susan", "linda", "karen", "lisa", "sarah", "emily", "anna",
    ];
    pub const CAREER: &[&str] = &[
        "career", "office", "salary", "business", "manager", "profession", "corporation",
        "promotion",
    ];
    pub const FAMILY: &[&str] = &[
        "family", "home", "children", "parents", "marriage", "wedding", "relatives", "cousins",
    ];
    pub const MATH: &[&str] = &[
        "math", "algebra", "geometry", "calculus", "equations", "numbers", "computation",
        "addition",
    ];
    pub const ART: &[&str] = &[
        "art", "poetry", "dance", "painting", "sculpture", "novel", "symphony", "drama",
    ];
    pub const SCIENCE: &[&str] = &[
        "science", "physics", "chemistry", "biology", "experiment", "laboratory", "telescope",
        "astronomy",
    ];
    pub const POSITIVE: &[&str] = &[
        "wonderful", "excellent", "superb", "delightful", "brilliant", "marvelous",
    ];
    pub const NEGATIVE: &[&str] = &[
        "terrible", "awful", "horrible", "dreadful", "boring", "miserable",
    ];
    pub const NEUTRAL_SUBJECTS: &[&str] = &[
        "person", "people", "student", "teacher", "everyone", "somebody",
    ];
    pub const VERBS: &[&str] = &[
        "likes", "enjoys", "studies", "discusses", "mentions", "describes", "remembers", "admires",
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Gender {
    Masculine,
    Feminine,
}

impl Gender {
    pub fn opposite(self) -> Gender {
        match self {
            Gender::Masculine => Gender::Feminine,
            Gender::Feminine => Gender::Masculine,
        }
    }
}

// ---------------------------------------------------------------------------
// Vocabulary and token sequences
// ---------------------------------------------------------------------------

/// Bijective token/id map with fixed reserved ids.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
}

impl TryFrom<VocabRepr> for Vocab {
    type Error = Error;
    fn try_from(repr: VocabRepr) -> Result<Self> {
        Vocab::from_tokens(repr.tokens)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr { tokens: v.id_to_token }
    }
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len()
            || RESERVED.iter().zip(&tokens).any(|(r, t)| r != t)
        {
            return Err(Error::Validation(
                "vocabulary must start with the reserved tokens".into(),
            ));
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if token_to_id.insert(tok.clone(), id).is_some() {
                return Err(Error::Validation(format!("duplicate token `{tok}`")));
            }
        }
        Ok(Vocab { id_to_token: tokens, token_to_id })
    }

    /// Deterministic vocabulary: reserved ids first, then corpus tokens by
    /// descending frequency, ties broken lexicographically.
    pub fn build(corpus: &[String], min_freq: usize) -> Result<Vocab> {
        if corpus.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in corpus {
            for tok in split_tokens(line) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        let mut entries: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_freq.max(1))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(entries.into_iter().map(|(t, _)| t));
        Vocab::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved tokens are always present
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }
}

/// Token ids for one input; position 0 is always `[CLS]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if ids.first() != Some(&CLS_ID) {
            return Err(Error::Contract("token sequence must start with [CLS]".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab_size) {
            return Err(Error::IndexOutOfRange {
                op: "TokenSequence::new",
                index: bad,
                bound: vocab_size,
            });
        }
        Ok(TokenSequence { ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Lowercase, split on whitespace and punctuation (punctuation marks become
/// their own tokens), prepend `[CLS]`, map unknowns to `[UNK]`, truncate to
/// `max_len`. Total over all inputs.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> TokenSequence {
    let mut ids = Vec::with_capacity(max_len.min(text.len() + 1));
    ids.push(CLS_ID);
    for tok in split_tokens(text) {
        if ids.len() >= max_len {
            break;
        }
        ids.push(vocab.id(&tok).unwrap_or(UNK_ID));
    }
    TokenSequence { ids }
}

/// Surface tokens of `text` under the same normalization as `tokenize`.
pub fn split_tokens(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in lower.chars() {
        if ch.is_alphanumeric() {
            word.push(ch);
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Inverse of `tokenize` on punctuation-free in-vocab text: drops the
/// leading `[CLS]` and joins tokens with single spaces.
pub fn detokenize(seq: &TokenSequence, vocab: &Vocab) -> String {
    let mut out = String::new();
    for (i, &id) in seq.ids.iter().enumerate().skip(1) {
        if i > 1 {
            out.push(' ');
        }
        let _ = write!(out, "{}", vocab.token(id));
    }
    out
}

// ---------------------------------------------------------------------------
// Labeled datasets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub examples: Vec<(String, usize)>,
    pub label_names: Vec<String>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Parse a UTF-8 TSV of `label<TAB>text` rows. `#` lines are ignored.
/// Labels are mapped in first-seen order unless `label_map` pins them.
pub fn load_tsv(path: &Path, label_map: Option<&[String]>) -> Result<LabeledDataset> {
    let content = std::fs::read_to_string(path)?;
    let mut label_names: Vec<String> = label_map.map(|m| m.to_vec()).unwrap_or_default();
    let fixed = label_map.is_some();
    let mut examples = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((label, text)) = line.split_once('\t') else {
            return Err(Error::Parse {
                line: lineno + 1,
                message: "expected `label<TAB>text`".into(),
            });
        };
        if text.trim().is_empty() {
            return Err(Error::Parse {
                line: lineno + 1,
                message: "empty text field".into(),
            });
        }
        let idx = match label_names.iter().position(|l| l == label) {
            Some(i) => i,
            None if fixed => {
                return Err(Error::Data(format!(
                    "unknown label `{label}` at line {} with a fixed label map",
                    lineno + 1
                )))
            }
            None => {
                label_names.push(label.to_string());
                label_names.len() - 1
            }
        };
        examples.push((text.to_string(), idx));
    }
    if examples.is_empty() {
        return Err(Error::Data(format!("no examples in {}", path.display())));
    }
    Ok(LabeledDataset { examples, label_names })
}

pub fn save_tsv(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (text, label) in &dataset.examples {
        let _ = writeln!(out, "{}\t{}", dataset.label_names[*label], text);
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic generators
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConceptGroup {
    pub name: String,
    pub words: Vec<String>,
    pub stereotyped: Gender,
}

fn owned(words: &[&str]) -> Vec<String> {
    words.iter().map(|w| w.to_string()).collect()
}

pub fn default_concept_groups() -> Vec<ConceptGroup> {
    vec![
        ConceptGroup { name: "career".into(), words: owned(words::CAREER), stereotyped: Gender::Masculine },
        ConceptGroup { name: "family".into(), words: owned(words::FAMILY), stereotyped: Gender::Feminine },
        ConceptGroup { name: "math".into(), words: owned(words::MATH), stereotyped: Gender::Masculine },
        ConceptGroup { name: "art".into(), words: owned(words::ART), stereotyped: Gender::Feminine },
        ConceptGroup { name: "science".into(), words: owned(words::SCIENCE), stereotyped: Gender::Masculine },
    ]
}

/// Pre-training corpus generator. `bias_strength` is the probability that a
/// concept sentence pairs the concept with its stereotyped gender;
/// 0.5 is statistically balanced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticCorpusConfig {
    pub n_sentences: usize,
    pub bias_strength: f64,
    pub seed: u64,
    pub concept_groups: Vec<ConceptGroup>,
}

impl SyntheticCorpusConfig {
    pub fn new(n_sentences: usize, bias_strength: f64, seed: u64) -> Self {
        SyntheticCorpusConfig {
            n_sentences,
            bias_strength,
            seed,
            concept_groups: default_concept_groups(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sentences == 0 {
            return Err(Error::Validation("n_sentences must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.bias_strength) {
            return Err(Error::Validation("bias_strength must lie in [0,1]".into()));
        }
        if self.concept_groups.is_empty() {
            return Err(Error::Validation("at least one concept group required".into()));
        }
        Ok(())
    }
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, items: &'a [T]) -> &'a T {
    &items[rng.gen_range(0..items.len())]
}

fn gendered_subject(rng: &mut ChaCha8Rng, gender: Gender) -> &'static str {
    let (terms, names) = match gender {
        Gender::Masculine => (words::MASC_TERMS, words::MASC_NAMES),
        Gender::Feminine => (words::FEM_TERMS, words::FEM_NAMES),
    };
    if rng.gen_bool(0.5) {
        pick(rng, terms)
    } else {
        pick(rng, names)
    }
}

/// Seeded and reproducible: identical config yields identical lines.
pub fn generate_pretrain_corpus(config: &SyntheticCorpusConfig) -> Result<Vec<String>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let groups = &config.concept_groups;
    let all_subject_words: Vec<&str> = words::MASC_TERMS
        .iter()
        .chain(words::FEM_TERMS)
        .chain(words::MASC_NAMES)
        .chain(words::FEM_NAMES)
        .chain(words::NEUTRAL_SUBJECTS)
        .copied()
        .collect();
    let all_carriers: Vec<&str> = words::POSITIVE.iter().chain(words::NEGATIVE).copied().collect();

    let mut lines = Vec::with_capacity(config.n_sentences);
    for _ in 0..config.n_sentences {
        let roll: f64 = rng.gen();
        let line = if roll < 0.60 {
            // concept sentence carrying the controlled gender pairing
            let group = pick(&mut rng, groups);
            let concept = pick(&mut rng, &group.words).clone();
            let stereotyped = rng.gen_bool(config.bias_strength);
            let gender = if stereotyped { group.stereotyped } else { group.stereotyped.opposite() };
            let subject = gendered_subject(&mut rng, gender);
            let verb = pick(&mut rng, words::VERBS);
            format!("{subject} {verb} the {concept}")
        } else if roll < 0.72 {
            let group = pick(&mut rng, groups);
            let w: &str = if rng.gen_bool(0.5) { pick(&mut rng, &group.words) } else { pick(&mut rng, &all_subject_words) };
            format!("this is a {w}")
        } else if roll < 0.84 {
            let group = pick(&mut rng, groups);
            let w: &str = if rng.gen_bool(0.5) { pick(&mut rng, &group.words) } else { pick(&mut rng, &all_subject_words) };
            format!("that is a {w}")
        } else if roll < 0.92 {
            let subject = pick(&mut rng, words::NEUTRAL_SUBJECTS);
            let group = pick(&mut rng, groups);
            let concept = pick(&mut rng, &group.words).clone();
            let carrier = pick(&mut rng, &all_carriers);
            format!("{subject} says the {concept} was {carrier}")
        } else {
            let subject = pick(&mut rng, words::NEUTRAL_SUBJECTS);
            let verb = pick(&mut rng, words::VERBS);
            let group = pick(&mut rng, groups);
            let concept = pick(&mut rng, &group.words).clone();
            format!("{subject} {verb} the {concept}")
        };
        lines.push(line);
    }
    Ok(lines)
}

/// Binary sentiment-style dataset. Labels come from carrier words alone and
/// are independent of gender by construction; `gender_fraction` of the
/// examples use a gendered subject term.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassificationConfig {
    pub n_examples: usize,
    pub gender_fraction: f64,
    pub seed: u64,
}

impl ClassificationConfig {
    pub fn new(n_examples: usize, gender_fraction: f64, seed: u64) -> Self {
        ClassificationConfig { n_examples, gender_fraction, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_examples == 0 {
            return Err(Error::Validation("n_examples must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gender_fraction) {
            return Err(Error::Validation("gender_fraction must lie in [0,1]".into()));
        }
        Ok(())
    }
}

pub fn generate_classification_dataset(config: &ClassificationConfig) -> Result<LabeledDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let groups = default_concept_groups();
    let mut examples = Vec::with_capacity(config.n_examples);
    for _ in 0..config.n_examples {
        let positive = rng.gen_bool(0.5);
        let carrier = if positive { pick(&mut rng, words::POSITIVE) } else { pick(&mut rng, words::NEGATIVE) };
        let gendered = rng.gen_bool(config.gender_fraction);
        let subject: &str = if gendered {
            let gender = if rng.gen_bool(0.5) { Gender::Masculine } else { Gender::Feminine };
            match gender {
                Gender::Masculine => pick(&mut rng, words::MASC_TERMS),
                Gender::Feminine => pick(&mut rng, words::FEM_TERMS),
            }
        } else {
            pick(&mut rng, words::NEUTRAL_SUBJECTS)
        };
        let group = pick(&mut rng, &groups);
        let concept = pick(&mut rng, &group.words).clone();
        let text = format!("{subject} says the {concept} was {carrier}");
        examples.push((text, positive as usize));
    }
    Ok(LabeledDataset {
        examples,
        label_names: vec!["negative".into(), "positive".into()],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_vocab() -> Vocab {
        Vocab::build(&["he is tall".into(), "she is small .".into()], 1).unwrap()
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = tiny_vocab();
        assert_eq!(v.id(PAD_TOKEN), Some(PAD_ID));
        assert_eq!(v.id(UNK_TOKEN), Some(UNK_ID));
        assert_eq!(v.id(CLS_TOKEN), Some(CLS_ID));
        assert_eq!(v.id(MASK_TOKEN), Some(MASK_ID));
    }

    #[test]
    fn tokenize_normalizes_case_and_punctuation() {
        let v = tiny_vocab();
        let seq = tokenize("He is TALL.", &v, 24);
        let toks: Vec<&str> = seq.ids.iter().map(|&id| v.token(id)).collect();
        assert_eq!(toks, vec!["[CLS]", "he", "is", "tall", "."]);
    }

    #[test]
    fn tokenize_maps_unknowns_and_truncates() {
        let v = tiny_vocab();
        let seq = tokenize("quantum flux", &v, 24);
        assert_eq!(seq.ids, vec![CLS_ID, UNK_ID, UNK_ID]);
        let seq = tokenize("he is tall he is tall", &v, 4);
        assert_eq!(seq.ids.len(), 4);
        assert_eq!(seq.ids[0], CLS_ID);
    }

    #[test]
    fn vocab_ids_stable_across_builds() {
        let corpus = vec!["b a a".to_string(), "c b a".to_string()];
        let v1 = Vocab::build(&corpus, 1).unwrap();
        let v2 = Vocab::build(&corpus, 1).unwrap();
        for id in 0..v1.len() {
            assert_eq!(v1.token(id), v2.token(id));
        }
        // frequency desc then lexicographic
        assert_eq!(v1.token(4), "a");
        assert_eq!(v1.token(5), "b");
        assert_eq!(v1.token(6), "c");
    }

    #[test]
    fn min_freq_drops_hapax_tokens() {
        let corpus = vec!["rare common common".to_string()];
        let v = Vocab::build(&corpus, 2).unwrap();
        assert!(v.contains("common"));
        assert!(!v.contains("rare"));
        let seq = tokenize("rare common", &v, 10);
        assert_eq!(seq.ids[1], UNK_ID);
    }

    #[test]
    fn empty_corpus_is_a_data_error() {
        assert!(Vocab::build(&[], 1).is_err());
    }

    #[test]
    fn detokenize_roundtrip_on_invocab_text() {
        let config = SyntheticCorpusConfig::new(200, 0.8, 9);
        let lines = generate_pretrain_corpus(&config).unwrap();
        let vocab = Vocab::build(&lines, 1).unwrap();
        for line in &lines {
            let seq = tokenize(line, &vocab, 64);
            let text = detokenize(&seq, &vocab);
            assert_eq!(&text, line);
            let again = tokenize(&text, &vocab, 64);
            assert_eq!(again.ids, seq.ids);
        }
    }

    #[test]
    fn token_sequence_requires_cls() {
        assert!(TokenSequence::new(vec![5, 6], 10).is_err());
        assert!(TokenSequence::new(vec![CLS_ID, 6], 10).is_ok());
        assert!(TokenSequence::new(vec![CLS_ID, 11], 10).is_err());
    }

    #[test]
    fn pretrain_corpus_is_seeded_and_sized() {
        let config = SyntheticCorpusConfig::new(1000, 0.9, 4);
        let a = generate_pretrain_corpus(&config).unwrap();
        let b = generate_pretrain_corpus(&config).unwrap();
        assert_eq!(a.len(), 1000);
        assert_eq!(a, b);
    }

    fn gender_of_subject(word: &str) -> Option<Gender> {
        let masc = words::MASC_TERMS.iter().chain(words::MASC_NAMES);
        let fem = words::FEM_TERMS.iter().chain(words::FEM_NAMES);
        if masc.clone().any(|w| *w == word) {
            Some(Gender::Masculine)
        } else if fem.clone().any(|w| *w == word) {
            Some(Gender::Feminine)
        } else {
            None
        }
    }

    fn stereotype_counts(lines: &[String], groups: &[ConceptGroup]) -> (usize, usize) {
        // counts (stereotyped, total) over subject-verb-concept sentences
        let mut stereotyped = 0;
        let mut total = 0;
        for line in lines {
            let toks: Vec<&str> = line.split(' ').collect();
            if toks.len() != 4 || toks[2] != "the" {
                continue;
            }
            let Some(gender) = gender_of_subject(toks[0]) else { continue };
            let Some(group) = groups.iter().find(|g| g.words.iter().any(|w| w == toks[3])) else {
                continue;
            };
            total += 1;
            if group.stereotyped == gender {
                stereotyped += 1;
            }
        }
        (stereotyped, total)
    }

    #[test]
    fn bias_one_has_no_counter_stereotyped_pairings() {
        let config = SyntheticCorpusConfig::new(2000, 1.0, 5);
        let lines = generate_pretrain_corpus(&config).unwrap();
        let (stereotyped, total) = stereotype_counts(&lines, &config.concept_groups);
        assert!(total > 500);
        assert_eq!(stereotyped, total);
    }

    #[test]
    fn bias_half_is_balanced_within_three_sigma() {
        let config = SyntheticCorpusConfig::new(4000, 0.5, 6);
        let lines = generate_pretrain_corpus(&config).unwrap();
        let (stereotyped, total) = stereotype_counts(&lines, &config.concept_groups);
        let frac = stereotyped as f64 / total as f64;
        let sigma = 0.5 / (total as f64).sqrt();
        assert!((frac - 0.5).abs() < 3.0 * sigma, "frac {frac} total {total}");
    }

    #[test]
    fn classification_label_comes_from_carrier_only() {
        let config = ClassificationConfig::new(3000, 0.7, 10);
        let ds = generate_classification_dataset(&config).unwrap();
        for (text, label) in &ds.examples {
            let carrier = text.rsplit(' ').next().unwrap();
            let expect = words::POSITIVE.contains(&carrier);
            assert_eq!(*label == 1, expect, "text `{text}`");
        }
    }

    #[test]
    fn classification_balance_and_gender_fraction() {
        let config = ClassificationConfig::new(5000, 0.7, 11);
        let ds = generate_classification_dataset(&config).unwrap();
        let n = ds.len() as f64;
        let positives = ds.examples.iter().filter(|(_, l)| *l == 1).count() as f64;
        let sigma_label = 0.5 / n.sqrt();
        assert!((positives / n - 0.5).abs() < 3.0 * sigma_label);

        let gendered = ds
            .examples
            .iter()
            .filter(|(text, _)| {
                let subj = text.split(' ').next().unwrap();
                gender_of_subject(subj).is_some()
            })
            .count() as f64;
        let p: f64 = 0.7;
        let sigma_gender = (p * (1.0 - p)).sqrt() / n.sqrt();
        assert!((gendered / n - p).abs() < 3.0 * sigma_gender);
    }

    #[test]
    fn gender_presence_independent_of_label() {
        // empirical mutual information under 0.01 bits at n >= 5000
        let config = ClassificationConfig::new(6000, 0.7, 12);
        let ds = generate_classification_dataset(&config).unwrap();
        let mut joint = [[0.0f64; 2]; 2];
        for (text, label) in &ds.examples {
            let subj = text.split(' ').next().unwrap();
            let g = gender_of_subject(subj).is_some() as usize;
            joint[g][*label] += 1.0;
        }
        let n: f64 = joint.iter().flatten().sum();
        let mut mi = 0.0;
        for g in 0..2 {
            for l in 0..2 {
                let pxy = joint[g][l] / n;
                if pxy == 0.0 {
                    continue;
                }
                let px = (joint[g][0] + joint[g][1]) / n;
                let py = (joint[0][l] + joint[1][l]) / n;
                mi += pxy * (pxy / (px * py)).log2();
            }
        }
        assert!(mi < 0.01, "mutual information {mi}");
    }

    #[test]
    fn tsv_roundtrip_and_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.tsv");
        std::fs::write(&path, "pos\tgood film\nneg\tbad film\npos\tfine movie\n").unwrap();
        let ds = load_tsv(&path, None).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.label_names, vec!["pos", "neg"]);

        let saved = dir.path().join("saved.tsv");
        save_tsv(&ds, &saved).unwrap();
        let again = load_tsv(&saved, None).unwrap();
        assert_eq!(again.examples, ds.examples);

        std::fs::write(&path, "pos\tgood\nbroken-row\n").unwrap();
        match load_tsv(&path, None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn fixed_label_map_rejects_unknown_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.tsv");
        std::fs::write(&path, "neutral\tsome text\n").unwrap();
        let map = vec!["negative".to_string(), "positive".to_string()];
        assert!(load_tsv(&path, Some(&map)).is_err());
    }

    #[test]
    fn classification_text_is_covered_by_pretrain_vocab() {
        let corpus = generate_pretrain_corpus(&SyntheticCorpusConfig::new(4000, 0.9, 1)).unwrap();
        let vocab = Vocab::build(&corpus, 1).unwrap();
        let ds = generate_classification_dataset(&ClassificationConfig::new(2000, 0.7, 2)).unwrap();
        for (text, _) in &ds.examples {
            for tok in split_tokens(text) {
                assert!(vocab.contains(&tok), "`{tok}` missing from pretrain vocab");
            }
        }
    }
}
