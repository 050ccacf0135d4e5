//! Paired masculine/feminine word lists and gender-word lookup.
//!
//! Matching is exact full-token and case-insensitive (the tokenizer
//! lowercases); there is no stemming or morphology.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

pub use crate::corpus::Gender;
use crate::corpus::{TokenSequence, Vocab};
use crate::error::{Error, Result};

const BUNDLED_TSV: &str = include_str!("../data/lexicon.tsv");

#[derive(Debug, Clone)]
pub struct GenderLexicon {
    masculine: BTreeSet<String>,
    feminine: BTreeSet<String>,
    pairs: HashMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenderWordMatch {
    pub position: usize,
    pub word: String,
    pub gender: Gender,
}

impl GenderLexicon {
    /// The word list shipped with the crate.
    pub fn bundled() -> GenderLexicon {
        GenderLexicon::parse(BUNDLED_TSV).expect("bundled lexicon is valid")
    }

    /// Parse `masculine<TAB>feminine` rows; `#` lines are comments and either
    /// column may be empty for an unpaired word.
    pub fn parse(content: &str) -> Result<GenderLexicon> {
        let mut masculine = BTreeSet::new();
        let mut feminine = BTreeSet::new();
        let mut pairs = HashMap::new();
        for (lineno, raw) in content.lines().enumerate() {
            // keep trailing tabs: an empty second column is meaningful
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((m, f)) = line.split_once('\t') else {
                return Err(Error::Parse {
                    line: lineno + 1,
                    message: "expected `masculine<TAB>feminine`".into(),
                });
            };
            let m = m.trim().to_lowercase();
            let f = f.trim().to_lowercase();
            if m.is_empty() && f.is_empty() {
                return Err(Error::Parse {
                    line: lineno + 1,
                    message: "both columns empty".into(),
                });
            }
            if !m.is_empty() {
                masculine.insert(m.clone());
            }
            if !f.is_empty() {
                feminine.insert(f.clone());
            }
            if !m.is_empty() && !f.is_empty() {
                pairs.insert(m.clone(), f.clone());
                pairs.insert(f, m);
            }
        }
        if masculine.is_empty() && feminine.is_empty() {
            return Err(Error::Validation("lexicon file has no entries".into()));
        }
        if let Some(both) = masculine.intersection(&feminine).next() {
            return Err(Error::Validation(format!(
                "word `{both}` appears in both gender lists"
            )));
        }
        Ok(GenderLexicon { masculine, feminine, pairs })
    }

    pub fn load(path: &Path) -> Result<GenderLexicon> {
        let content = std::fs::read_to_string(path)?;
        GenderLexicon::parse(&content)
    }

    pub fn gender_of(&self, word: &str) -> Option<Gender> {
        if self.masculine.contains(word) {
            Some(Gender::Masculine)
        } else if self.feminine.contains(word) {
            Some(Gender::Feminine)
        } else {
            None
        }
    }

    pub fn contains(&self, word: &str) -> bool {
        self.gender_of(word).is_some()
    }

    /// Paired opposite-gender word, if one exists.
    pub fn opposite(&self, word: &str) -> Option<&str> {
        self.pairs.get(word).map(|s| s.as_str())
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.len() / 2
    }

    pub fn masculine(&self) -> impl Iterator<Item = &str> {
        self.masculine.iter().map(|s| s.as_str())
    }

    pub fn feminine(&self) -> impl Iterator<Item = &str> {
        self.feminine.iter().map(|s| s.as_str())
    }
}

/// All and only the positions whose token is a lexicon gender word, in
/// ascending position order. Tokens are expected lowercased.
pub fn find_gender_words<S: AsRef<str>>(
    tokens: &[S],
    lexicon: &GenderLexicon,
) -> Vec<GenderWordMatch> {
    tokens
        .iter()
        .enumerate()
        .filter_map(|(position, tok)| {
            lexicon.gender_of(tok.as_ref()).map(|gender| GenderWordMatch {
                position,
                word: tok.as_ref().to_string(),
                gender,
            })
        })
        .collect()
}

/// `find_gender_words` over a token-id sequence. Positions are sequence
/// indices, so position 0 ([CLS]) never matches.
pub fn find_gender_words_in_sequence(
    seq: &TokenSequence,
    vocab: &Vocab,
    lexicon: &GenderLexicon,
) -> Vec<GenderWordMatch> {
    let tokens: Vec<&str> = seq.ids.iter().map(|&id| vocab.token(id)).collect();
    find_gender_words(&tokens, lexicon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn direct_load_builds_sets_and_pairs() {
        let lex = GenderLexicon::parse("he\tshe\nactor\tactress\n").unwrap();
        assert_eq!(lex.gender_of("he"), Some(Gender::Masculine));
        assert_eq!(lex.gender_of("actor"), Some(Gender::Masculine));
        assert_eq!(lex.gender_of("she"), Some(Gender::Feminine));
        assert_eq!(lex.gender_of("actress"), Some(Gender::Feminine));
        assert_eq!(lex.opposite("he"), Some("she"));
        assert_eq!(lex.opposite("she"), Some("he"));
        assert_eq!(lex.opposite("actress"), Some("actor"));
    }

    #[test]
    fn overlapping_word_is_rejected() {
        assert!(GenderLexicon::parse("man\tman\n").is_err());
    }

    #[test]
    fn empty_file_is_rejected() {
        assert!(GenderLexicon::parse("# only comments\n").is_err());
    }

    #[test]
    fn unpaired_words_are_allowed() {
        let lex = GenderLexicon::parse("stag\t\n\tmaiden\nhe\tshe\n").unwrap();
        assert_eq!(lex.gender_of("stag"), Some(Gender::Masculine));
        assert_eq!(lex.gender_of("maiden"), Some(Gender::Feminine));
        assert_eq!(lex.opposite("stag"), None);
        assert_eq!(lex.opposite("maiden"), None);
    }

    #[test]
    fn bundled_list_has_at_least_fifty_pairs() {
        let lex = GenderLexicon::bundled();
        assert!(lex.pair_count() >= 50, "only {} pairs", lex.pair_count());
    }

    #[test]
    fn finds_masculine_words_in_order() {
        let lex = GenderLexicon::bundled();
        let tokens: Vec<&str> = "he is at 22 a powerful actor".split(' ').collect();
        let matches = find_gender_words(&tokens, &lex);
        assert_eq!(matches.len(), 2);
        assert_eq!((matches[0].position, matches[0].word.as_str()), (0, "he"));
        assert_eq!(matches[0].gender, Gender::Masculine);
        assert_eq!((matches[1].position, matches[1].word.as_str()), (6, "actor"));
        assert_eq!(matches[1].gender, Gender::Masculine);
    }

    #[test]
    fn no_gender_words_yields_empty() {
        let lex = GenderLexicon::bundled();
        let tokens: Vec<&str> = "the cat sat".split(' ').collect();
        assert!(find_gender_words(&tokens, &lex).is_empty());
    }

    #[test]
    fn finds_feminine_words() {
        let lex = GenderLexicon::bundled();
        let tokens: Vec<&str> = "she beautifully chaperon the girls in the kitchen"
            .split(' ')
            .collect();
        let matches = find_gender_words(&tokens, &lex);
        let found: Vec<(usize, &str)> =
            matches.iter().map(|m| (m.position, m.word.as_str())).collect();
        assert_eq!(found, vec![(0, "she"), (4, "girls")]);
        assert!(matches.iter().all(|m| m.gender == Gender::Feminine));
    }

    #[test]
    fn opposite_of_he_is_she() {
        let lex = GenderLexicon::bundled();
        assert_eq!(lex.opposite("he"), Some("she"));
        assert_eq!(lex.opposite("she"), Some("he"));
        assert_eq!(lex.opposite("table"), None);
    }

    #[test]
    fn opposite_is_an_involution_over_all_pairs() {
        let lex = GenderLexicon::bundled();
        for word in lex.masculine().chain(lex.feminine()) {
            if let Some(opp) = lex.opposite(word) {
                assert_eq!(lex.opposite(opp), Some(word));
            }
        }
    }

    proptest! {
        // matches agree with a scratch set-membership scan and are stable
        #[test]
        fn matches_cover_exactly_the_set_predicate(
            indices in proptest::collection::vec(0usize..20, 1..12)
        ) {
            let pool = [
                "he", "she", "cat", "table", "actor", "girls", "runs", "blue",
                "aunt", "king", "stone", "wife", "tree", "son", "cloud", "mother",
                "quick", "men", "paper", "queen",
            ];
            let lex = GenderLexicon::bundled();
            let tokens: Vec<&str> = indices.iter().map(|&i| pool[i]).collect();
            let matches = find_gender_words(&tokens, &lex);
            let again = find_gender_words(&tokens, &lex);
            prop_assert_eq!(&matches, &again);

            let matched: std::collections::BTreeSet<usize> =
                matches.iter().map(|m| m.position).collect();
            for (i, tok) in tokens.iter().enumerate() {
                prop_assert_eq!(matched.contains(&i), lex.contains(tok));
            }
            for w in matches.windows(2) {
                prop_assert!(w[0].position < w[1].position);
            }
        }
    }
}
