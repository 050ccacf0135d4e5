//! WEAT association statistic, effect size, sentence templating, the
//! permutation significance test, and aggregate reports.
//!
//! All computation is read-only over an immutable model and parallelizes
//! across words and Monte Carlo draws with order-independent reductions.

use std::collections::BTreeSet;
use std::path::Path;

use itertools::Itertools;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, Vocab, UNK_ID};
use crate::encoder::ModelState;
use crate::error::{Error, Result};
use crate::par;

pub const TEMPLATE_SLOT: &str = "[word]";

/// Exactly rounded sum of f64 values (Shewchuk partials, fsum-style).
/// Order-independent and exactly sign-symmetric, which makes the effect
/// size antisymmetries below hold bitwise.
fn exact_sum(values: &[f64]) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for &value in values {
        let mut x = value;
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    // round the non-overlapping partials to one f64
    let mut n = partials.len();
    if n == 0 {
        return 0.0;
    }
    n -= 1;
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("zero-norm embedding in cosine".into()));
    }
    Ok(dot / (na * nb))
}

/// `s(w, A, B)`: difference between `w`'s mean cosine similarity with the
/// embeddings in `a` and with the embeddings in `b`.
pub fn association(w: &[f64], a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("association over an empty attribute set".into()));
    }
    let mut sa = 0.0;
    for v in a {
        sa += cosine(w, v)?;
    }
    let mut sb = 0.0;
    for v in b {
        sb += cosine(w, v)?;
    }
    Ok(sa / a.len() as f64 - sb / b.len() as f64)
}

/// Test statistic `s(X, Y, A, B) = sum_x s(x,A,B) - sum_y s(y,A,B)`.
pub fn weat_statistic(
    x: &[Vec<f64>],
    y: &[Vec<f64>],
    a: &[Vec<f64>],
    b: &[Vec<f64>],
) -> Result<f64> {
    let mut sx = 0.0;
    for w in x {
        sx += association(w, a, b)?;
    }
    let mut sy = 0.0;
    for w in y {
        sy += association(w, a, b)?;
    }
    Ok(sx - sy)
}

/// Which population the effect-size denominator is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DenominatorVariant {
    /// sigma over t in X union Y of s(t, A, B) — the standard definition.
    Canonical,
    /// sigma over t in A union B of s(t, X, Y).
    AttributeSpread,
}

impl DenominatorVariant {
    pub fn label(&self) -> &'static str {
        match self {
            DenominatorVariant::Canonical => "canonical",
            DenominatorVariant::AttributeSpread => "attribute-spread",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EffectSizeResult {
    pub d: f64,
    pub s: f64,
    pub associations_x: Vec<f64>,
    pub associations_y: Vec<f64>,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population standard deviation with order-independent summation.
fn population_sigma(values: &[f64]) -> f64 {
    let mu = exact_sum(values) / values.len() as f64;
    let sq: Vec<f64> = values.iter().map(|&v| (v - mu) * (v - mu)).collect();
    (exact_sum(&sq) / values.len() as f64).sqrt()
}

/// Effect size `d = (mean_x s - mean_y s) / sigma`, population sigma.
pub fn effect_size(
    x: &[Vec<f64>],
    y: &[Vec<f64>],
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    variant: DenominatorVariant,
) -> Result<EffectSizeResult> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Contract("effect_size over an empty target set".into()));
    }
    if x.len() + y.len() < 2 {
        return Err(Error::Contract("effect_size needs at least two target words".into()));
    }
    let associations_x: Vec<f64> = x
        .iter()
        .map(|w| association(w, a, b))
        .collect::<Result<_>>()?;
    let associations_y: Vec<f64> = y
        .iter()
        .map(|w| association(w, a, b))
        .collect::<Result<_>>()?;

    let sigma = match variant {
        DenominatorVariant::Canonical => {
            let mut all = associations_x.clone();
            all.extend_from_slice(&associations_y);
            population_sigma(&all)
        }
        DenominatorVariant::AttributeSpread => {
            let spread: Vec<f64> = a
                .iter()
                .chain(b)
                .map(|w| association(w, x, y))
                .collect::<Result<_>>()?;
            population_sigma(&spread)
        }
    };
    if sigma == 0.0 {
        return Err(Error::DegenerateSpread);
    }
    let s = exact_sum(&associations_x) - exact_sum(&associations_y);
    let d = (mean(&associations_x) - mean(&associations_y)) / sigma;
    Ok(EffectSizeResult { d, s, associations_x, associations_y })
}

// ---------------------------------------------------------------------------
// Sentence templating and model-level SEAT
// ---------------------------------------------------------------------------

/// Target/attribute word sets plus the sentence templates that contextualize
/// each word.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeatTestSpec {
    pub name: String,
    pub targets_x: Vec<String>,
    pub targets_y: Vec<String>,
    pub attributes_a: Vec<String>,
    pub attributes_b: Vec<String>,
    pub templates: Vec<String>,
}

impl SeatTestSpec {
    pub fn validate(&self) -> Result<()> {
        for (field, list) in [
            ("targets_x", &self.targets_x),
            ("targets_y", &self.targets_y),
            ("attributes_a", &self.attributes_a),
            ("attributes_b", &self.attributes_b),
        ] {
            if list.is_empty() {
                return Err(Error::Validation(format!(
                    "spec `{}`: field {field} must be nonempty",
                    self.name
                )));
            }
        }
        if self.templates.is_empty() {
            return Err(Error::Validation(format!(
                "spec `{}`: field templates must be nonempty",
                self.name
            )));
        }
        for t in &self.templates {
            if t.matches(TEMPLATE_SLOT).count() != 1 {
                return Err(Error::Validation(format!(
                    "spec `{}`: template `{t}` must contain exactly one {TEMPLATE_SLOT} slot",
                    self.name
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SeatTestSpec> {
        let content = std::fs::read_to_string(path)?;
        let spec: SeatTestSpec = serde_json::from_str(&content)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Bundled test specs mirroring the usual six gender rows
/// (Terms/Names crossed with Career-Family, Math-Art, Science-Art).
pub fn bundled_specs() -> Vec<SeatTestSpec> {
    const FILES: [&str; 6] = [
        include_str!("../data/seat/names_career_family.json"),
        include_str!("../data/seat/terms_career_family.json"),
        include_str!("../data/seat/terms_math_art.json"),
        include_str!("../data/seat/names_math_art.json"),
        include_str!("../data/seat/terms_science_art.json"),
        include_str!("../data/seat/names_science_art.json"),
    ];
    FILES
        .iter()
        .map(|content| {
            let spec: SeatTestSpec = serde_json::from_str(content).expect("bundled spec parses");
            spec.validate().expect("bundled spec is valid");
            spec
        })
        .collect()
}

/// Cartesian product of words and templates, word-major order.
pub fn apply_templates(words: &[String], templates: &[String]) -> Result<Vec<String>> {
    for t in templates {
        if t.matches(TEMPLATE_SLOT).count() != 1 {
            return Err(Error::Validation(format!(
                "template `{t}` must contain exactly one {TEMPLATE_SLOT} slot"
            )));
        }
    }
    let mut out = Vec::with_capacity(words.len() * templates.len());
    for w in words {
        for t in templates {
            out.push(t.replace(TEMPLATE_SLOT, w));
        }
    }
    Ok(out)
}

/// Per-word representation: mean of the word's templated sentence
/// embeddings. Returns the embeddings plus the number of out-of-vocabulary
/// tokens that were replaced by `[UNK]`.
fn embed_words(
    model: &ModelState,
    vocab: &Vocab,
    words: &[String],
    templates: &[String],
) -> Result<(Vec<Vec<f64>>, usize)> {
    let per_word: Vec<Result<(Vec<f64>, usize)>> = par::map_slice(words, |word| {
        let sentences = apply_templates(std::slice::from_ref(word), templates)?;
        let d = model.config.d_model;
        let mut acc = vec![0.0; d];
        let mut oov = 0usize;
        for sentence in &sentences {
            let seq = corpus::tokenize(sentence, vocab, model.config.max_len);
            oov += seq.ids.iter().filter(|&&id| id == UNK_ID).count();
            let emb = model.sentence_embedding(&seq)?;
            for (a, e) in acc.iter_mut().zip(emb.data()) {
                *a += e;
            }
        }
        for a in acc.iter_mut() {
            *a /= sentences.len() as f64;
        }
        Ok((acc, oov))
    });
    let mut embeddings = Vec::with_capacity(words.len());
    let mut oov_total = 0;
    for item in per_word {
        let (emb, oov) = item?;
        embeddings.push(emb);
        oov_total += oov;
    }
    Ok((embeddings, oov_total))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeatOutcome {
    pub result: EffectSizeResult,
    /// Count of out-of-vocabulary tokens replaced by [UNK] while embedding.
    pub oov_tokens: usize,
}

/// SEAT: effect size over template-contextualized word representations.
pub fn seat_effect_size(
    model: &ModelState,
    vocab: &Vocab,
    spec: &SeatTestSpec,
    variant: DenominatorVariant,
) -> Result<SeatOutcome> {
    spec.validate()?;
    let (x, oov_x) = embed_words(model, vocab, &spec.targets_x, &spec.templates)?;
    let (y, oov_y) = embed_words(model, vocab, &spec.targets_y, &spec.templates)?;
    let (a, oov_a) = embed_words(model, vocab, &spec.attributes_a, &spec.templates)?;
    let (b, oov_b) = embed_words(model, vocab, &spec.attributes_b, &spec.templates)?;
    let oov_tokens = oov_x + oov_y + oov_a + oov_b;
    if oov_tokens > 0 {
        eprintln!(
            "warning: spec `{}`: {oov_tokens} out-of-vocabulary tokens replaced by [UNK]",
            spec.name
        );
    }
    let result = effect_size(&x, &y, &a, &b, variant)?;
    Ok(SeatOutcome { result, oov_tokens })
}

// ---------------------------------------------------------------------------
// Permutation test
// ---------------------------------------------------------------------------

pub const DEFAULT_MAX_EXACT: usize = 12;
pub const DEFAULT_MC_DRAWS: usize = 10_000;

/// p-value of the observed statistic under repartitions of `X union Y`.
///
/// Exact enumeration over equal-size repartitions when the union is at most
/// `max_exact` elements (requires `|X| == |Y|`), otherwise seeded Monte
/// Carlo with `mc_draws` shuffles. p is the fraction of partitions whose
/// statistic is at least the observed one.
pub fn permutation_pvalue(
    x: &[Vec<f64>],
    y: &[Vec<f64>],
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    max_exact: usize,
    mc_draws: usize,
    seed: u64,
) -> Result<f64> {
    let union: Vec<&Vec<f64>> = x.iter().chain(y).collect();
    let n = union.len();
    let k = x.len();
    // per-element associations; any subset statistic is a signed sum of these
    let assoc: Vec<f64> = union
        .iter()
        .map(|w| association(w, a, b))
        .collect::<Result<_>>()?;
    let total: f64 = assoc.iter().sum();
    let subset_stat = |subset: &[usize]| -> f64 {
        let sx: f64 = subset.iter().map(|&i| assoc[i]).sum();
        2.0 * sx - total
    };
    let observed: f64 = {
        let first: Vec<usize> = (0..k).collect();
        subset_stat(&first)
    };

    if n <= max_exact {
        if x.len() != y.len() {
            return Err(Error::Contract(format!(
                "exact permutation test requires |X| == |Y|, got {} vs {}",
                x.len(),
                y.len()
            )));
        }
        let mut hits = 0usize;
        let mut count = 0usize;
        for subset in (0..n).combinations(k) {
            if subset_stat(&subset) >= observed {
                hits += 1;
            }
            count += 1;
        }
        Ok(hits as f64 / count as f64)
    } else {
        let hits: Vec<u32> = par::map_range(mc_draws, |draw| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(draw as u64);
            let mut indices: Vec<usize> = (0..n).collect();
            indices.shuffle(&mut rng);
            (subset_stat(&indices[..k]) >= observed) as u32
        });
        let total_hits: u64 = hits.iter().map(|&h| h as u64).sum();
        Ok(total_hits as f64 / mc_draws as f64)
    }
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpecEffect {
    pub name: String,
    pub d: f64,
    pub abs_d: f64,
}

/// Per-spec |d|, their mean, and the task accuracy in one document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeatReport {
    pub specs: Vec<SpecEffect>,
    pub avg_abs_d: f64,
    pub accuracy: Option<f64>,
    pub denominator_variant: String,
}

pub fn aggregate_report(
    results: &[(String, EffectSizeResult)],
    accuracy: Option<f64>,
    variant: DenominatorVariant,
) -> Result<SeatReport> {
    if results.is_empty() {
        return Err(Error::Contract("aggregate_report needs at least one spec result".into()));
    }
    let specs: Vec<SpecEffect> = results
        .iter()
        .map(|(name, r)| SpecEffect { name: name.clone(), d: r.d, abs_d: r.d.abs() })
        .collect();
    let avg_abs_d = specs.iter().map(|s| s.abs_d).sum::<f64>() / specs.len() as f64;
    Ok(SeatReport {
        specs,
        avg_abs_d,
        accuracy,
        denominator_variant: variant.label().to_string(),
    })
}

/// Spec-name set equality check used when comparing runs.
pub fn spec_names(report: &SeatReport) -> BTreeSet<&str> {
    report.specs.iter().map(|s| s.name.as_str()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    }

    /// Independent brute-force effect size: two explicit cosine loops and a
    /// plain-population sigma, no shared code with the implementation.
    fn brute_force_d(
        x: &[Vec<f64>],
        y: &[Vec<f64>],
        a: &[Vec<f64>],
        b: &[Vec<f64>],
    ) -> f64 {
        fn cos(u: &[f64], v: &[f64]) -> f64 {
            let mut dot = 0.0;
            let mut nu = 0.0;
            let mut nv = 0.0;
            for i in 0..u.len() {
                dot += u[i] * v[i];
                nu += u[i] * u[i];
                nv += v[i] * v[i];
            }
            dot / (nu.sqrt() * nv.sqrt())
        }
        fn s(w: &[f64], a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
            let ma: f64 = a.iter().map(|v| cos(w, v)).sum::<f64>() / a.len() as f64;
            let mb: f64 = b.iter().map(|v| cos(w, v)).sum::<f64>() / b.len() as f64;
            ma - mb
        }
        let sx: Vec<f64> = x.iter().map(|w| s(w, a, b)).collect();
        let sy: Vec<f64> = y.iter().map(|w| s(w, a, b)).collect();
        let mx = sx.iter().sum::<f64>() / sx.len() as f64;
        let my = sy.iter().sum::<f64>() / sy.len() as f64;
        let all: Vec<f64> = sx.iter().chain(&sy).copied().collect();
        let mu = all.iter().sum::<f64>() / all.len() as f64;
        let var = all.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / all.len() as f64;
        (mx - my) / var.sqrt()
    }

    #[test]
    fn association_with_identical_sets_is_zero() {
        let mut r = rng(1);
        let w: Vec<f64> = (0..6).map(|_| r.gen_range(-1.0..1.0)).collect();
        let a = random_set(&mut r, 4, 6);
        assert_eq!(association(&w, &a, &a).unwrap(), 0.0);
    }

    #[test]
    fn association_cosine_extremes() {
        let w = vec![2.0, 0.0, 0.0];
        let a = vec![vec![1.0, 0.0, 0.0], vec![5.0, 0.0, 0.0]];
        let b = vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 3.0]];
        assert!((association(&w, &a, &b).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn association_matches_two_loop_oracle() {
        let mut r = rng(2);
        for _ in 0..20 {
            let w: Vec<f64> = (0..8).map(|_| r.gen_range(-1.0..1.0)).collect();
            let a = random_set(&mut r, 5, 8);
            let b = random_set(&mut r, 5, 8);
            let got = association(&w, &a, &b).unwrap();
            let mut sa = 0.0;
            for v in &a {
                let dot: f64 = w.iter().zip(v).map(|(x, y)| x * y).sum();
                let nw: f64 = w.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nv: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                sa += dot / (nw * nv);
            }
            let mut sb = 0.0;
            for v in &b {
                let dot: f64 = w.iter().zip(v).map(|(x, y)| x * y).sum();
                let nw: f64 = w.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nv: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                sb += dot / (nw * nv);
            }
            let expected = sa / 5.0 - sb / 5.0;
            assert!((got - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn association_rejects_zero_norm() {
        let w = vec![0.0, 0.0];
        let a = vec![vec![1.0, 0.0]];
        let b = vec![vec![0.0, 1.0]];
        assert!(association(&w, &a, &b).is_err());
    }

    #[test]
    fn weat_statistic_zero_and_antisymmetric() {
        let mut r = rng(3);
        let x = random_set(&mut r, 4, 6);
        let y = random_set(&mut r, 4, 6);
        let a = random_set(&mut r, 3, 6);
        let b = random_set(&mut r, 3, 6);
        assert_eq!(weat_statistic(&x, &x, &a, &b).unwrap(), 0.0);
        let s1 = weat_statistic(&x, &y, &a, &b).unwrap();
        let s2 = weat_statistic(&y, &x, &a, &b).unwrap();
        assert_eq!(s1.to_bits(), (-s2).to_bits());
    }

    #[test]
    fn weat_statistic_matches_full_enumeration_on_2x2() {
        let x = vec![vec![1.0, 0.2], vec![0.5, -0.4]];
        let y = vec![vec![-0.3, 0.9], vec![0.8, 0.1]];
        let a = vec![vec![0.6, 0.6], vec![1.0, -1.0]];
        let b = vec![vec![-0.2, 0.5], vec![0.3, 0.3]];
        fn cos(u: &[f64], v: &[f64]) -> f64 {
            let dot: f64 = u.iter().zip(v).map(|(p, q)| p * q).sum();
            let nu: f64 = u.iter().map(|p| p * p).sum::<f64>().sqrt();
            let nv: f64 = v.iter().map(|p| p * p).sum::<f64>().sqrt();
            dot / (nu * nv)
        }
        // hand-expanded sum over the full 2x2x2x2 instance
        let mut expected = 0.0;
        for w in &x {
            expected += (cos(w, &a[0]) + cos(w, &a[1])) / 2.0 - (cos(w, &b[0]) + cos(w, &b[1])) / 2.0;
        }
        for w in &y {
            expected -= (cos(w, &a[0]) + cos(w, &a[1])) / 2.0 - (cos(w, &b[0]) + cos(w, &b[1])) / 2.0;
        }
        let got = weat_statistic(&x, &y, &a, &b).unwrap();
        assert!((got - expected).abs() < 1e-14);
    }

    #[test]
    fn effect_size_zero_when_target_multisets_coincide() {
        let mut r = rng(4);
        let x = random_set(&mut r, 3, 5);
        let a = random_set(&mut r, 4, 5);
        let b = random_set(&mut r, 4, 5);
        let res = effect_size(&x, &x, &a, &b, DenominatorVariant::Canonical);
        match res {
            Ok(r) => assert_eq!(r.d, 0.0),
            // identical multisets can also make sigma zero when |X|=1
            Err(Error::DegenerateSpread) => {}
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn effect_size_antisymmetries_are_exact() {
        let mut r = rng(5);
        for _ in 0..50 {
            let dim = r.gen_range(2..10);
            let (nx, ny, na, nb) = (
                r.gen_range(1..6),
                r.gen_range(1..6),
                r.gen_range(1..6),
                r.gen_range(1..6),
            );
            let x = random_set(&mut r, nx, dim);
            let y = random_set(&mut r, ny, dim);
            if x.len() + y.len() < 2 {
                continue;
            }
            let a = random_set(&mut r, na, dim);
            let b = random_set(&mut r, nb, dim);
            let base = match effect_size(&x, &y, &a, &b, DenominatorVariant::Canonical) {
                Ok(res) => res,
                Err(_) => continue,
            };
            let ab = effect_size(&x, &y, &b, &a, DenominatorVariant::Canonical).unwrap();
            let xy = effect_size(&y, &x, &a, &b, DenominatorVariant::Canonical).unwrap();
            assert_eq!(base.d.to_bits(), (-ab.d).to_bits(), "A<->B swap not exact");
            assert_eq!(base.d.to_bits(), (-xy.d).to_bits(), "X<->Y swap not exact");
        }
    }

    #[test]
    fn effect_size_scale_invariance() {
        let mut r = rng(6);
        let x = random_set(&mut r, 4, 7);
        let y = random_set(&mut r, 3, 7);
        let a = random_set(&mut r, 5, 7);
        let b = random_set(&mut r, 5, 7);
        let base = effect_size(&x, &y, &a, &b, DenominatorVariant::Canonical).unwrap();
        for c in [1e-3, 1.0, 1e3] {
            let scale = |s: &[Vec<f64>]| -> Vec<Vec<f64>> {
                s.iter().map(|v| v.iter().map(|e| e * c).collect()).collect()
            };
            let scaled =
                effect_size(&scale(&x), &scale(&y), &scale(&a), &scale(&b), DenominatorVariant::Canonical)
                    .unwrap();
            assert!((scaled.d - base.d).abs() < 1e-12);
        }
    }

    #[test]
    fn effect_size_matches_brute_force() {
        let mut r = rng(7);
        for trial in 0..100 {
            let dim = r.gen_range(2..=16);
            let nx = r.gen_range(1..=8);
            let ny = r.gen_range(1..=8);
            if nx + ny < 2 {
                continue;
            }
            let x = random_set(&mut r, nx, dim);
            let y = random_set(&mut r, ny, dim);
            let (na, nb) = (r.gen_range(1..=8), r.gen_range(1..=8));
            let a = random_set(&mut r, na, dim);
            let b = random_set(&mut r, nb, dim);
            let got = match effect_size(&x, &y, &a, &b, DenominatorVariant::Canonical) {
                Ok(res) => res.d,
                Err(_) => continue,
            };
            let want = brute_force_d(&x, &y, &a, &b);
            assert!(
                (got - want).abs() < 1e-10,
                "trial {trial}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn attribute_spread_variant_differs_but_same_numerator_sign() {
        let mut r = rng(8);
        let x = random_set(&mut r, 4, 6);
        let y = random_set(&mut r, 4, 6);
        let a = random_set(&mut r, 4, 6);
        let b = random_set(&mut r, 4, 6);
        let canon = effect_size(&x, &y, &a, &b, DenominatorVariant::Canonical).unwrap();
        let paper = effect_size(&x, &y, &a, &b, DenominatorVariant::AttributeSpread).unwrap();
        assert_eq!(canon.d.signum(), paper.d.signum());
        assert_ne!(canon.d.to_bits(), paper.d.to_bits());
    }

    #[test]
    fn templates_cardinality_and_substitution() {
        let words = vec!["engineer".to_string(), "nurse".to_string()];
        let templates = vec!["this is a [word]".to_string(), "that is a [word]".to_string()];
        let out = apply_templates(&words, &templates).unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(out[0], "this is a engineer");
        assert_eq!(out[1], "that is a engineer");
        assert_eq!(out[2], "this is a nurse");
        for (i, s) in out.iter().enumerate() {
            let word = &words[i / 2];
            assert_eq!(s.matches(word.as_str()).count(), 1);
        }
    }

    #[test]
    fn templates_without_slot_are_rejected() {
        let words = vec!["engineer".to_string()];
        assert!(apply_templates(&words, &["no slot here".to_string()]).is_err());
        assert!(apply_templates(&words, &["[word] and [word]".to_string()]).is_err());
    }

    #[test]
    fn exact_sum_matches_naive_on_clean_data_and_is_order_free() {
        let mut r = rng(9);
        let values: Vec<f64> = (0..64).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut rev = values.clone();
        rev.reverse();
        assert_eq!(exact_sum(&values).to_bits(), exact_sum(&rev).to_bits());
        let neg: Vec<f64> = values.iter().map(|v| -v).collect();
        assert_eq!(exact_sum(&neg).to_bits(), (-exact_sum(&values)).to_bits());
        let naive: f64 = values.iter().sum();
        assert!((exact_sum(&values) - naive).abs() < 1e-12);
    }

    #[test]
    fn permutation_null_instance_p_is_large() {
        // X and Y identical embedding multisets: every repartition has the
        // same statistic, so all partitions tie with the observed one.
        let mut r = rng(10);
        let x = random_set(&mut r, 4, 5);
        let a = random_set(&mut r, 3, 5);
        let b = random_set(&mut r, 3, 5);
        let p = permutation_pvalue(&x, &x, &a, &b, 12, 1000, 0).unwrap();
        assert!(p >= 0.4, "p = {p}");
    }

    #[test]
    fn permutation_separated_instance_hits_minimum() {
        // X strongly associated with A, Y with B: observed statistic is the
        // maximum, so only permutations tying it count.
        let x = vec![vec![1.0, 0.0], vec![0.9, 0.1]];
        let y = vec![vec![0.0, 1.0], vec![0.1, 0.9]];
        let a = vec![vec![1.0, 0.05]];
        let b = vec![vec![0.05, 1.0]];
        let p = permutation_pvalue(&x, &y, &a, &b, 12, 1000, 0).unwrap();
        let minimum = 1.0 / 6.0; // C(4,2) partitions
        assert!(p <= 2.0 * minimum, "p = {p}");
    }

    #[test]
    fn permutation_exact_and_monte_carlo_agree() {
        let mut r = rng(11);
        let x = random_set(&mut r, 5, 6);
        let y = random_set(&mut r, 5, 6);
        let a = random_set(&mut r, 4, 6);
        let b = random_set(&mut r, 4, 6);
        let exact = permutation_pvalue(&x, &y, &a, &b, 12, 0, 0).unwrap();
        let mc = permutation_pvalue(&x, &y, &a, &b, 4, 10_000, 123).unwrap();
        assert!((exact - mc).abs() < 0.02, "exact {exact} vs mc {mc}");
    }

    #[test]
    fn permutation_exact_requires_equal_sizes() {
        let mut r = rng(12);
        let x = random_set(&mut r, 3, 4);
        let y = random_set(&mut r, 5, 4);
        let a = random_set(&mut r, 3, 4);
        let b = random_set(&mut r, 3, 4);
        assert!(permutation_pvalue(&x, &y, &a, &b, 12, 100, 0).is_err());
    }

    #[test]
    fn aggregate_report_shapes() {
        let res = |d: f64| EffectSizeResult {
            d,
            s: d,
            associations_x: vec![d],
            associations_y: vec![0.0],
        };
        let single = aggregate_report(
            &[("only".to_string(), res(0.4))],
            Some(0.9),
            DenominatorVariant::Canonical,
        )
        .unwrap();
        assert!((single.avg_abs_d - 0.4).abs() < 1e-15);

        let pair = aggregate_report(
            &[("p".to_string(), res(0.2)), ("n".to_string(), res(-0.2))],
            None,
            DenominatorVariant::Canonical,
        )
        .unwrap();
        assert!((pair.avg_abs_d - 0.2).abs() < 1e-15);
        assert_eq!(pair.denominator_variant, "canonical");
    }

    #[test]
    fn bundled_specs_are_six_and_valid() {
        let specs = bundled_specs();
        assert_eq!(specs.len(), 6);
        let names: BTreeSet<&str> = specs.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names.len(), 6);
        for spec in &specs {
            assert!(spec.templates.iter().any(|t| t.contains("this is a")));
        }
    }
}
