//! Joint perturbation + fine-tuning training loop, the origin and
//! random-mask baselines, and both ablation modes.
//!
//! Each batch shares one tape: every parameter is bound once, per-example
//! losses are recorded against the shared leaves, and a single backward
//! pass drives one optimizer step. Predicted replacement tokens are taken
//! by argmax and re-enter the graph as fresh constants, so no gradient
//! flows from the classification loss back into the MLM head; the head
//! learns only through the perturbation loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::corpus::{self, LabeledDataset, TokenSequence, Vocab};
use crate::encoder::{BoundModel, ModelState};
use crate::error::{Error, Result};
use crate::lexicon::{self, GenderLexicon};
use crate::optim::Optimizer;
use crate::par;
use crate::perturbation::{self, predicted_replacement};
use crate::seat::{self, DenominatorVariant, SeatTestSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Origin,
    GenderTuning,
    GenderTuningRandom,
    NoJointTrain,
    NoJointLoss,
}

impl TrainMode {
    pub fn label(&self) -> &'static str {
        match self {
            TrainMode::Origin => "origin",
            TrainMode::GenderTuning => "gender",
            TrainMode::GenderTuningRandom => "random",
            TrainMode::NoJointTrain => "no-joint-train",
            TrainMode::NoJointLoss => "no-joint-loss",
        }
    }

    pub fn parse(s: &str) -> Result<TrainMode> {
        match s {
            "origin" => Ok(TrainMode::Origin),
            "gender" | "gender-tuning" => Ok(TrainMode::GenderTuning),
            "random" | "gender-tuning-random" => Ok(TrainMode::GenderTuningRandom),
            "no-joint-train" => Ok(TrainMode::NoJointTrain),
            "no-joint-loss" => Ok(TrainMode::NoJointLoss),
            other => Err(Error::Usage(format!("unknown training mode `{other}`"))),
        }
    }

    fn needs_lexicon(&self) -> bool {
        matches!(
            self,
            TrainMode::GenderTuning | TrainMode::NoJointTrain | TrainMode::NoJointLoss
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub alpha: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub random_mask_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::GenderTuning,
            alpha: 0.7,
            learning_rate: 1e-3,
            epochs: 3,
            batch_size: 16,
            seed: 0,
            random_mask_fraction: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0,1]", self.alpha)));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.random_mask_fraction) {
            return Err(Error::Config("random_mask_fraction outside [0,1]".into()));
        }
        Ok(())
    }
}

/// `alpha * lp + (1 - alpha) * lf`.
pub fn joint_loss(lp: f64, lf: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0,1]")));
    }
    Ok(alpha * lp + (1.0 - alpha) * lf)
}

/// Perturbation, fine-tuning, and combined loss for one step or epoch.
/// `joint` is always the weighted combination of the logged terms (a term
/// that never occurred is logged as zero); which loss the optimizer
/// actually minimized depends on the training mode.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub perturb: f64,
    pub finetune: f64,
    pub joint: f64,
}

impl LossBreakdown {
    pub fn new(perturb: f64, finetune: f64, alpha: f64) -> Result<LossBreakdown> {
        Ok(LossBreakdown { perturb, finetune, joint: joint_loss(perturb, finetune, alpha)? })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_perturb: f64,
    pub mean_finetune: f64,
    pub mean_joint: f64,
    pub train_acc: f64,
    pub eval_acc: f64,
}

#[derive(Debug)]
pub struct TrainOutput {
    pub model: ModelState,
    pub metrics: Vec<EpochMetrics>,
    /// Per-optimizer-step loss breakdowns, in step order.
    pub steps: Vec<LossBreakdown>,
    /// How many example perturbations (masked MLM forwards) happened.
    pub perturbed_examples: u64,
}

struct TokenizedExample {
    seq: TokenSequence,
    label: usize,
    gender_positions: Vec<usize>,
}

/// Which node the optimizer minimizes for a batch.
#[derive(Clone, Copy, PartialEq)]
enum Objective {
    FineTune,
    Joint,
    MlmOnly,
}

struct BatchStats {
    breakdown: LossBreakdown,
    lp_sum: f64,
    lp_count: usize,
    lf_sum: f64,
    lf_count: usize,
    perturbed: u64,
}

fn mean_nodes(tape: &mut Tape, nodes: &[NodeId]) -> Result<NodeId> {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = tape.add(acc, n)?;
    }
    Ok(tape.scale(acc, 1.0 / nodes.len() as f64))
}

fn run_batch(
    model: &mut ModelState,
    opt: &mut Optimizer,
    alpha: f64,
    objective: Objective,
    items: &[(&TokenizedExample, Vec<usize>)],
) -> Result<BatchStats> {
    let mut tape = Tape::new();
    let bound: BoundModel = model.bind(&mut tape);
    let vocab_size = model.config.vocab_size;

    let mut lp_nodes = Vec::new();
    let mut lf_nodes = Vec::new();
    let mut perturbed = 0u64;

    for (example, mask_positions) in items {
        if mask_positions.is_empty() {
            // gender-free bypass: straight to fine-tuning on the original text
            if objective == Objective::MlmOnly {
                continue;
            }
            let hidden = bound.encode(&mut tape, &example.seq)?;
            let logits = bound.cls_logits(&mut tape, hidden)?;
            lf_nodes.push(tape.softmax_cross_entropy(logits, vec![example.label])?);
            continue;
        }

        let masked = perturbation::mask_positions(&example.seq, mask_positions)?;
        let hidden = bound.encode(&mut tape, &masked)?;
        let mlm_logits = bound.mlm_logits(&mut tape, hidden, mask_positions)?;
        let targets: Vec<usize> = mask_positions.iter().map(|&p| example.seq.ids[p]).collect();
        lp_nodes.push(tape.softmax_cross_entropy(mlm_logits, targets)?);
        perturbed += 1;

        if objective != Objective::MlmOnly {
            // greedy replacements, detached from the graph
            let logits_value = tape.value(mlm_logits).clone();
            let mut perturbed_seq = example.seq.clone();
            for (row, &pos) in mask_positions.iter().enumerate() {
                let row_logits = &logits_value.data()[row * vocab_size..(row + 1) * vocab_size];
                perturbed_seq.ids[pos] = predicted_replacement(row_logits);
            }
            let hidden_p = bound.encode(&mut tape, &perturbed_seq)?;
            let logits_p = bound.cls_logits(&mut tape, hidden_p)?;
            lf_nodes.push(tape.softmax_cross_entropy(logits_p, vec![example.label])?);
        }
    }

    let lp_mean = if lp_nodes.is_empty() { None } else { Some(mean_nodes(&mut tape, &lp_nodes)?) };
    let lf_mean = if lf_nodes.is_empty() { None } else { Some(mean_nodes(&mut tape, &lf_nodes)?) };

    let optimized = match objective {
        Objective::FineTune => lf_mean.ok_or_else(|| Error::Contract("empty batch".into()))?,
        Objective::MlmOnly => lp_mean.ok_or_else(|| Error::Contract("empty MLM batch".into()))?,
        Objective::Joint => match (lp_mean, lf_mean) {
            (Some(lp), Some(lf)) => {
                let wp = tape.scale(lp, alpha);
                let wf = tape.scale(lf, 1.0 - alpha);
                tape.add(wp, wf)?
            }
            (None, Some(lf)) => tape.scale(lf, 1.0 - alpha),
            (Some(lp), None) => tape.scale(lp, alpha),
            (None, None) => return Err(Error::Contract("empty batch".into())),
        },
    };

    let lp_value = lp_mean.map(|n| tape.value(n).item()).unwrap_or(0.0);
    let lf_value = lf_mean.map(|n| tape.value(n).item()).unwrap_or(0.0);

    let grads = tape.backward(optimized)?;
    let named: std::collections::BTreeMap<String, crate::tensor::Tensor> = bound
        .param_nodes()
        .filter_map(|(name, id)| grads.get(id).map(|g| (name.to_string(), g.clone())))
        .collect();
    opt.step(model.params_mut(), &named)?;

    Ok(BatchStats {
        breakdown: LossBreakdown::new(lp_value, lf_value, alpha)?,
        lp_sum: lp_value * lp_nodes.len() as f64,
        lp_count: lp_nodes.len(),
        lf_sum: lf_value * lf_nodes.len() as f64,
        lf_count: lf_nodes.len(),
        perturbed,
    })
}

/// Argmax-class accuracy over a dataset; evaluation is read-only and runs
/// in parallel across examples.
pub fn evaluate_accuracy(
    model: &ModelState,
    vocab: &Vocab,
    dataset: &LabeledDataset,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let correct: Vec<Result<bool>> = par::map_slice(&dataset.examples, |(text, label)| {
        let seq = corpus::tokenize(text, vocab, model.config.max_len);
        Ok(model.classify(&seq)? == *label)
    });
    let mut hits = 0usize;
    for c in correct {
        hits += c? as usize;
    }
    Ok(hits as f64 / dataset.len() as f64)
}

fn tokenize_dataset(
    dataset: &LabeledDataset,
    vocab: &Vocab,
    max_len: usize,
    num_classes: usize,
    lexicon: Option<&GenderLexicon>,
) -> Result<Vec<TokenizedExample>> {
    if dataset.is_empty() {
        return Err(Error::Data("empty training dataset".into()));
    }
    dataset
        .examples
        .iter()
        .map(|(text, label)| {
            if *label >= num_classes {
                return Err(Error::Data(format!(
                    "label {label} out of range for {num_classes} classes"
                )));
            }
            let seq = corpus::tokenize(text, vocab, max_len);
            let gender_positions = lexicon
                .map(|lex| {
                    lexicon::find_gender_words_in_sequence(&seq, vocab, lex)
                        .into_iter()
                        .map(|m| m.position)
                        .collect()
                })
                .unwrap_or_default();
            Ok(TokenizedExample { seq, label: *label, gender_positions })
        })
        .collect()
}

/// Shuffled index order for an epoch; a pure function of (seed, epoch).
fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * epoch as u64);
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut rng);
    indices
}

fn random_mask_positions(
    rng: &mut ChaCha8Rng,
    seq_len: usize,
    fraction: f64,
) -> Vec<usize> {
    let content = seq_len.saturating_sub(1);
    if content == 0 {
        return Vec::new();
    }
    let count = ((fraction * content as f64).round() as usize).clamp(1, content);
    let mut positions: Vec<usize> = (1..seq_len).collect();
    positions.shuffle(rng);
    positions.truncate(count);
    positions.sort_unstable();
    positions
}

/// Mode dispatch over the whole dataset. `eval` falls back to the training
/// set when absent.
pub fn train(
    model: ModelState,
    vocab: &Vocab,
    lexicon: Option<&GenderLexicon>,
    dataset: &LabeledDataset,
    eval: Option<&LabeledDataset>,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    config.validate()?;
    if config.mode.needs_lexicon() && lexicon.is_none() {
        return Err(Error::Config(format!(
            "mode `{}` requires a gender lexicon",
            config.mode.label()
        )));
    }
    let lexicon_for_masking = if config.mode.needs_lexicon() { lexicon } else { None };
    let examples = tokenize_dataset(
        dataset,
        vocab,
        model.config.max_len,
        model.config.num_classes,
        lexicon_for_masking,
    )?;

    let mut model = model;
    let mut opt = Optimizer::adam(config.learning_rate);
    let mut metrics = Vec::new();
    let mut steps = Vec::new();
    let mut perturbed_examples = 0u64;

    // (objective, example filter) per stage; NoJointTrain runs two stages
    let stages: Vec<(Objective, bool)> = match config.mode {
        TrainMode::Origin => vec![(Objective::FineTune, false)],
        TrainMode::GenderTuning | TrainMode::GenderTuningRandom => vec![(Objective::Joint, false)],
        TrainMode::NoJointLoss => vec![(Objective::FineTune, true)],
        TrainMode::NoJointTrain => vec![(Objective::MlmOnly, true), (Objective::FineTune, false)],
    };

    let mut epoch_no = 0usize;
    for (stage_idx, &(objective, _)) in stages.iter().enumerate() {
        // stage 1 of no-joint-train touches only gender-bearing examples
        let pool: Vec<usize> = if objective == Objective::MlmOnly {
            let bearing: Vec<usize> = (0..examples.len())
                .filter(|&i| !examples[i].gender_positions.is_empty())
                .collect();
            if bearing.is_empty() {
                return Err(Error::Data(
                    "no gender-bearing examples for MLM-only training".into(),
                ));
            }
            bearing
        } else {
            (0..examples.len()).collect()
        };

        for _ in 0..config.epochs {
            epoch_no += 1;
            let order = epoch_order(pool.len(), config.seed, epoch_no);
            let mut mask_rng = ChaCha8Rng::seed_from_u64(config.seed);
            mask_rng.set_stream(2 * epoch_no as u64 + 1);

            let mut lp_sum = 0.0;
            let mut lp_count = 0usize;
            let mut lf_sum = 0.0;
            let mut lf_count = 0usize;

            for chunk in order.chunks(config.batch_size) {
                let items: Vec<(&TokenizedExample, Vec<usize>)> = chunk
                    .iter()
                    .map(|&oi| {
                        let ex = &examples[pool[oi]];
                        let positions = match (config.mode, stage_idx) {
                            (TrainMode::Origin, _) => Vec::new(),
                            (TrainMode::NoJointTrain, 1) => Vec::new(),
                            (TrainMode::GenderTuningRandom, _) => random_mask_positions(
                                &mut mask_rng,
                                ex.seq.len(),
                                config.random_mask_fraction,
                            ),
                            _ => ex.gender_positions.clone(),
                        };
                        (ex, positions)
                    })
                    .collect();
                let stats = run_batch(&mut model, &mut opt, config.alpha, objective, &items)?;
                lp_sum += stats.lp_sum;
                lp_count += stats.lp_count;
                lf_sum += stats.lf_sum;
                lf_count += stats.lf_count;
                perturbed_examples += stats.perturbed;
                steps.push(stats.breakdown);
            }

            let mean_perturb = if lp_count == 0 { 0.0 } else { lp_sum / lp_count as f64 };
            let mean_finetune = if lf_count == 0 { 0.0 } else { lf_sum / lf_count as f64 };
            let train_acc = evaluate_accuracy(&model, vocab, dataset)?;
            let eval_acc = match eval {
                Some(ds) => evaluate_accuracy(&model, vocab, ds)?,
                None => train_acc,
            };
            metrics.push(EpochMetrics {
                epoch: epoch_no,
                mean_perturb,
                mean_finetune,
                mean_joint: joint_loss(mean_perturb, mean_finetune, config.alpha)?,
                train_acc,
                eval_acc,
            });
        }
    }

    Ok(TrainOutput { model, metrics, steps, perturbed_examples })
}

/// One optimizer step on a single batch; used by tests and the gradient
/// check. The batch is every example of `dataset`, unshuffled.
pub fn train_step(
    model: ModelState,
    vocab: &Vocab,
    lexicon: &GenderLexicon,
    dataset: &LabeledDataset,
    config: &TrainConfig,
) -> Result<(ModelState, LossBreakdown)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let examples = tokenize_dataset(
        dataset,
        vocab,
        model.config.max_len,
        model.config.num_classes,
        Some(lexicon),
    )?;
    let mut model = model;
    let mut opt = Optimizer::adam(config.learning_rate);
    let items: Vec<(&TokenizedExample, Vec<usize>)> = examples
        .iter()
        .map(|e| (e, e.gender_positions.clone()))
        .collect();
    let stats = run_batch(&mut model, &mut opt, config.alpha, Objective::Joint, &items)?;
    Ok((model, stats.breakdown))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlphaGridRow {
    pub alpha: f64,
    pub accuracy: f64,
    pub avg_abs_d: f64,
}

/// Accuracy and mean |effect size| per alpha; every run restarts from the
/// same base model and seed.
#[allow(clippy::too_many_arguments)]
pub fn grid_search_alpha(
    base: &ModelState,
    vocab: &Vocab,
    lexicon: &GenderLexicon,
    dataset: &LabeledDataset,
    eval: Option<&LabeledDataset>,
    specs: &[SeatTestSpec],
    config: &TrainConfig,
    grid: &[f64],
) -> Result<Vec<AlphaGridRow>> {
    for &alpha in grid {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Config(format!("grid alpha {alpha} outside (0,1)")));
        }
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &alpha in grid {
        let mut cfg = config.clone();
        cfg.alpha = alpha;
        cfg.mode = TrainMode::GenderTuning;
        let out = train(base.clone(), vocab, Some(lexicon), dataset, eval, &cfg)?;
        let accuracy = match eval {
            Some(ds) => evaluate_accuracy(&out.model, vocab, ds)?,
            None => evaluate_accuracy(&out.model, vocab, dataset)?,
        };
        let mut abs_sum = 0.0;
        for spec in specs {
            let outcome =
                seat::seat_effect_size(&out.model, vocab, spec, DenominatorVariant::Canonical)?;
            abs_sum += outcome.result.d.abs();
        }
        rows.push(AlphaGridRow {
            alpha,
            accuracy,
            avg_abs_d: abs_sum / specs.len().max(1) as f64,
        });
    }
    Ok(rows)
}

/// The default unit grid 0.1..=0.9.
pub fn default_alpha_grid() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

/// Mean masked-token cross-entropy without any update; the seeded masking
/// draw matches what a training epoch with the same stream would use.
fn mlm_eval_loss(
    model: &ModelState,
    examples: &[TokenizedExample],
    mask_rate: f64,
    seed: u64,
    stream: u64,
) -> Result<f64> {
    let mut mask_rng = ChaCha8Rng::seed_from_u64(seed);
    mask_rng.set_stream(stream);
    let masked: Vec<(&TokenizedExample, Vec<usize>)> = examples
        .iter()
        .map(|ex| (ex, random_mask_positions(&mut mask_rng, ex.seq.len(), mask_rate)))
        .collect();
    let losses: Vec<Result<f64>> = par::map_slice(&masked, |(ex, positions)| {
        if positions.is_empty() {
            return Ok(f64::NAN);
        }
        let seq = perturbation::mask_positions(&ex.seq, positions)?;
        let hidden = model.encode(&seq)?;
        let logits = model.mlm_logits(&hidden, positions)?;
        let v = model.config.vocab_size;
        let mut loss = 0.0;
        for (row, &pos) in positions.iter().enumerate() {
            let rl = &logits.data()[row * v..(row + 1) * v];
            let max = rl.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + rl.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - rl[ex.seq.ids[pos]];
        }
        Ok(loss / positions.len() as f64)
    });
    let mut sum = 0.0;
    let mut count = 0usize;
    for l in losses {
        let l = l?;
        if !l.is_nan() {
            sum += l;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// MLM pretraining with random masking. The returned history has one entry
/// per epoch plus a leading entry: the evaluation loss of the untrained
/// model, so `history.first()` is the initial loss.
pub fn pretrain_mlm(
    model: ModelState,
    vocab: &Vocab,
    corpus_lines: &[String],
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    mask_rate: f64,
    seed: u64,
) -> Result<(ModelState, Vec<f64>)> {
    if corpus_lines.is_empty() {
        return Err(Error::Data("empty pretraining corpus".into()));
    }
    if !(0.0..=1.0).contains(&mask_rate) {
        return Err(Error::Config("mask_rate outside [0,1]".into()));
    }
    let sequences: Vec<TokenSequence> = corpus_lines
        .iter()
        .map(|line| corpus::tokenize(line, vocab, model.config.max_len))
        .collect();
    let examples: Vec<TokenizedExample> = sequences
        .into_iter()
        .map(|seq| TokenizedExample { seq, label: 0, gender_positions: Vec::new() })
        .collect();

    let mut model = model;
    let mut opt = Optimizer::adam(learning_rate);
    let mut history = Vec::with_capacity(epochs + 1);
    history.push(mlm_eval_loss(&model, &examples, mask_rate, seed, 1)?);
    for epoch in 1..=epochs {
        let order = epoch_order(examples.len(), seed, epoch);
        let mut mask_rng = ChaCha8Rng::seed_from_u64(seed);
        mask_rng.set_stream(2 * epoch as u64 + 1);
        let mut lp_sum = 0.0;
        let mut lp_count = 0usize;
        for chunk in order.chunks(batch_size) {
            let items: Vec<(&TokenizedExample, Vec<usize>)> = chunk
                .iter()
                .map(|&i| {
                    let ex = &examples[i];
                    (ex, random_mask_positions(&mut mask_rng, ex.seq.len(), mask_rate))
                })
                .collect();
            let stats = run_batch(&mut model, &mut opt, 1.0, Objective::MlmOnly, &items)?;
            lp_sum += stats.lp_sum;
            lp_count += stats.lp_count;
        }
        history.push(if lp_count == 0 { 0.0 } else { lp_sum / lp_count as f64 });
    }
    Ok((model, history))
}
