//! Command-line front end: corpus generation, MLM pretraining, the five
//! training modes, SEAT evaluation, perturbation audit, and run comparison.
//!
//! A flat JSON config file (`--config`) may supply any flag; explicit
//! command-line flags win. When `--out` is omitted, the directory named by
//! `GENDER_TUNING_DATA_DIR` is used.
//!
//! Exit codes: 0 success, 1 validation/usage, 2 IO, 3 numeric failure.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::corpus::{self, ClassificationConfig, SyntheticCorpusConfig, Vocab};
use crate::encoder::{Checkpoint, EncoderConfig, ModelState, Pooling};
use crate::error::{Error, Result};
use crate::lexicon::GenderLexicon;
use crate::manifest::RunManifest;
use crate::perturbation;
use crate::seat::{self, DenominatorVariant, SeatReport, SeatTestSpec};
use crate::trainer::{self, TrainConfig, TrainMode};

pub const DATA_DIR_ENV: &str = "GENDER_TUNING_DATA_DIR";

#[derive(Parser)]
#[command(
    name = "gender-tuning",
    version,
    about = "Debias a small encoder by joint masked-LM gender-word perturbation and fine-tuning; measure bias with SEAT"
)]
pub struct Cli {
    /// Flat JSON config file supplying defaults for any flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic pretraining corpus and classification TSVs.
    CorpusGen(CorpusGenArgs),
    /// MLM-pretrain a fresh encoder on a text corpus.
    Pretrain(PretrainArgs),
    /// Standard fine-tuning on the original examples (origin setup).
    Finetune(TrainArgs),
    /// Train with a selectable mode (gender, random, ablations, origin).
    #[command(visible_alias = "gender-tune")]
    Train(TrainArgs),
    /// SEAT effect sizes for a checkpoint over test specs.
    Seat(SeatArgs),
    /// Replacement-taxonomy audit of the MLM over a dataset sample.
    PerturbAudit(AuditArgs),
    /// Side-by-side comparison of several SEAT reports.
    Report(ReportArgs),
}

#[derive(Args)]
struct CorpusGenArgs {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Pretraining sentences to generate.
    #[arg(long)]
    n_pretrain: Option<usize>,
    /// Classification training examples.
    #[arg(long)]
    n_train: Option<usize>,
    /// Classification eval examples.
    #[arg(long)]
    n_eval: Option<usize>,
    /// Probability that a concept sentence uses its stereotyped gender.
    #[arg(long)]
    bias_strength: Option<f64>,
    /// Fraction of classification examples containing a gender word.
    #[arg(long)]
    gender_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PretrainArgs {
    /// Corpus file, one sentence per line.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, alias = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Fraction of content positions masked during pretraining.
    #[arg(long)]
    mask_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    min_freq: Option<usize>,
    #[arg(long)]
    num_classes: Option<usize>,
    /// Sentence pooling: cls or mean.
    #[arg(long)]
    pooling: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Labeled TSV: `label<TAB>text`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Held-out labeled TSV for eval accuracy.
    #[arg(long)]
    eval: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// origin | gender | random | no-joint-train | no-joint-loss
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, alias = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Gender word list TSV; the bundled list is used when omitted.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Mask fraction for the random mode.
    #[arg(long)]
    random_mask_fraction: Option<f64>,
}

#[derive(Args)]
struct SeatArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Spec JSON file; repeatable. Bundled six are used when neither
    /// --spec nor --specs-dir is given.
    #[arg(long)]
    spec: Vec<PathBuf>,
    /// Directory of spec JSON files.
    #[arg(long)]
    specs_dir: Option<PathBuf>,
    /// Report output file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// canonical | attribute-spread
    #[arg(long)]
    denominator: Option<String>,
    /// Labeled TSV to report accuracy alongside the effect sizes.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Labeled TSV or plain text file to sample from.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    sample_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// `NAME=path/to/seat-report.json`; repeatable.
    #[arg(long = "run")]
    runs: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// Config-file overlay
// ---------------------------------------------------------------------------

struct Overlay(serde_json::Map<String, serde_json::Value>);

impl Overlay {
    fn load(path: Option<&Path>) -> Result<Overlay> {
        match path {
            None => Ok(Overlay(serde_json::Map::new())),
            Some(p) => {
                let value: serde_json::Value =
                    serde_json::from_str(&std::fs::read_to_string(p)?)?;
                match value {
                    serde_json::Value::Object(map) => Ok(Overlay(map)),
                    _ => Err(Error::Config(format!(
                        "config file {} must hold a flat JSON object",
                        p.display()
                    ))),
                }
            }
        }
    }

    fn f64(&self, key: &str) -> Result<Option<f64>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_f64()
                .map(Some)
                .ok_or_else(|| Error::Config(format!("config key `{key}` must be a number"))),
        }
    }

    fn usize(&self, key: &str) -> Result<Option<usize>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_u64()
                .map(|u| Some(u as usize))
                .ok_or_else(|| Error::Config(format!("config key `{key}` must be an integer"))),
        }
    }

    fn u64(&self, key: &str) -> Result<Option<u64>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_u64()
                .map(Some)
                .ok_or_else(|| Error::Config(format!("config key `{key}` must be an integer"))),
        }
    }

    fn string(&self, key: &str) -> Result<Option<String>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_str()
                .map(|s| Some(s.to_string()))
                .ok_or_else(|| Error::Config(format!("config key `{key}` must be a string"))),
        }
    }

    fn path(&self, key: &str) -> Result<Option<PathBuf>> {
        Ok(self.string(key)?.map(PathBuf::from))
    }
}

fn resolve_out(explicit: Option<PathBuf>, overlay: &Overlay, default_name: &str) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p);
    }
    if let Some(p) = overlay.path("out")? {
        return Ok(p);
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(dir) => Ok(PathBuf::from(dir).join(default_name)),
        None => Err(Error::Usage(format!(
            "--out is required (or set {DATA_DIR_ENV})"
        ))),
    }
}

fn required<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| Error::Usage(format!("--{flag} is required")))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for item in items {
        let _ = writeln!(out, "{}", serde_json::to_string(item)?);
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn load_lexicon_arg(path: &Option<PathBuf>) -> Result<(GenderLexicon, Option<PathBuf>)> {
    match path {
        Some(p) => Ok((GenderLexicon::load(p)?, Some(p.clone()))),
        None => Ok((GenderLexicon::bundled(), None)),
    }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_corpus_gen(args: CorpusGenArgs, overlay: &Overlay) -> Result<()> {
    let start = Instant::now();
    let out = resolve_out(args.out, overlay, "corpus")?;
    let n_pretrain = args.n_pretrain.or(overlay.usize("n-pretrain")?).unwrap_or(3000);
    let n_train = args.n_train.or(overlay.usize("n-train")?).unwrap_or(600);
    let n_eval = args.n_eval.or(overlay.usize("n-eval")?).unwrap_or(300);
    let bias_strength = args.bias_strength.or(overlay.f64("bias-strength")?).unwrap_or(0.9);
    let gender_fraction = args.gender_fraction.or(overlay.f64("gender-fraction")?).unwrap_or(0.7);
    let seed = args.seed.or(overlay.u64("seed")?).unwrap_or(0);

    if n_train == 0 || n_eval == 0 {
        return Err(Error::Validation("n-train and n-eval must be positive".into()));
    }
    let pretrain_cfg = SyntheticCorpusConfig::new(n_pretrain, bias_strength, seed);
    pretrain_cfg.validate()?;
    let lines = corpus::generate_pretrain_corpus(&pretrain_cfg)?;
    let train_ds = corpus::generate_classification_dataset(&ClassificationConfig::new(
        n_train,
        gender_fraction,
        seed.wrapping_add(1),
    ))?;
    let eval_ds = corpus::generate_classification_dataset(&ClassificationConfig::new(
        n_eval,
        gender_fraction,
        seed.wrapping_add(2),
    ))?;

    std::fs::create_dir_all(&out)?;
    let pretrain_path = out.join("pretrain.txt");
    std::fs::write(&pretrain_path, lines.join("\n") + "\n")?;
    let train_path = out.join("train.tsv");
    corpus::save_tsv(&train_ds, &train_path)?;
    let eval_path = out.join("eval.tsv");
    corpus::save_tsv(&eval_ds, &eval_path)?;

    let mut manifest = RunManifest::new(
        "corpus-gen",
        serde_json::json!({
            "n_pretrain": n_pretrain,
            "n_train": n_train,
            "n_eval": n_eval,
            "bias_strength": bias_strength,
            "gender_fraction": gender_fraction,
            "seed": seed,
        }),
        seed,
    );
    manifest.output(&pretrain_path);
    manifest.output(&train_path);
    manifest.output(&eval_path);
    manifest.duration_secs = start.elapsed().as_secs_f64();
    manifest.write_in_dir(&out)?;
    println!(
        "wrote {} pretrain sentences, {} train and {} eval examples to {}",
        n_pretrain,
        n_train,
        n_eval,
        out.display()
    );
    Ok(())
}

fn cmd_pretrain(args: PretrainArgs, overlay: &Overlay) -> Result<()> {
    let start = Instant::now();
    let corpus_path = required(args.corpus.or(overlay.path("corpus")?), "corpus")?;
    let out = resolve_out(args.out, overlay, "pretrain")?;
    let epochs = args.epochs.or(overlay.usize("epochs")?).unwrap_or(3);
    let lr = args.learning_rate.or(overlay.f64("learning-rate")?).unwrap_or(1e-3);
    let batch_size = args.batch_size.or(overlay.usize("batch-size")?).unwrap_or(16);
    let mask_rate = args.mask_rate.or(overlay.f64("mask-rate")?).unwrap_or(0.15);
    let seed = args.seed.or(overlay.u64("seed")?).unwrap_or(0);
    let min_freq = args.min_freq.or(overlay.usize("min-freq")?).unwrap_or(1);

    let content = std::fs::read_to_string(&corpus_path)?;
    let lines: Vec<String> = content
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(String::from)
        .collect();
    let vocab = Vocab::build(&lines, min_freq)?;

    let mut config = EncoderConfig::desk_scale(vocab.len());
    if let Some(v) = args.d_model.or(overlay.usize("d-model")?) {
        config.d_model = v;
    }
    if let Some(v) = args.n_layers.or(overlay.usize("n-layers")?) {
        config.n_layers = v;
    }
    if let Some(v) = args.n_heads.or(overlay.usize("n-heads")?) {
        config.n_heads = v;
    }
    if let Some(v) = args.d_ff.or(overlay.usize("d-ff")?) {
        config.d_ff = v;
    }
    if let Some(v) = args.max_len.or(overlay.usize("max-len")?) {
        config.max_len = v;
    }
    if let Some(v) = args.num_classes.or(overlay.usize("num-classes")?) {
        config.num_classes = v;
    }
    if let Some(p) = args.pooling.or(overlay.string("pooling")?) {
        config.pooling = match p.as_str() {
            "cls" => Pooling::Cls,
            "mean" => Pooling::Mean,
            other => return Err(Error::Usage(format!("unknown pooling `{other}`"))),
        };
    }
    config.validate()?;

    let model = ModelState::init(config.clone(), seed)?;
    let (model, history) =
        trainer::pretrain_mlm(model, &vocab, &lines, epochs, lr, batch_size, mask_rate, seed)?;

    std::fs::create_dir_all(&out)?;
    let ckpt_path = out.join("checkpoint.json");
    Checkpoint::new(model, vocab).save(&ckpt_path)?;
    #[derive(Serialize)]
    struct PretrainEpoch {
        epoch: usize,
        mlm_loss: f64,
    }
    // epoch 0 is the evaluation loss of the untrained model
    let rows: Vec<PretrainEpoch> = history
        .iter()
        .enumerate()
        .map(|(i, &mlm_loss)| PretrainEpoch { epoch: i, mlm_loss })
        .collect();
    let loss_path = out.join("pretrain_loss.jsonl");
    write_jsonl(&loss_path, &rows)?;

    let mut manifest = RunManifest::new(
        "pretrain",
        serde_json::json!({
            "epochs": epochs,
            "learning_rate": lr,
            "batch_size": batch_size,
            "mask_rate": mask_rate,
            "seed": seed,
            "min_freq": min_freq,
            "encoder": config,
        }),
        seed,
    );
    manifest.input(&corpus_path);
    manifest.output(&ckpt_path);
    manifest.output(&loss_path);
    manifest.duration_secs = start.elapsed().as_secs_f64();
    manifest.write_in_dir(&out)?;
    match (history.first(), history.last()) {
        (Some(first), Some(last)) => {
            println!("pretrained {epochs} epochs: mlm loss {first:.4} -> {last:.4}")
        }
        _ => println!("pretrained 0 epochs: checkpoint equals initialization"),
    }
    Ok(())
}

fn cmd_train(args: TrainArgs, overlay: &Overlay, fixed_mode: Option<TrainMode>) -> Result<()> {
    let start = Instant::now();
    let ckpt_path = required(args.checkpoint.or(overlay.path("checkpoint")?), "checkpoint")?;
    let dataset_path = required(args.dataset.or(overlay.path("dataset")?), "dataset")?;
    let mode = match fixed_mode {
        Some(m) => m,
        None => {
            let name = args
                .mode
                .or(overlay.string("mode")?)
                .unwrap_or_else(|| "gender".to_string());
            TrainMode::parse(&name)?
        }
    };
    let out = resolve_out(args.out, overlay, &format!("train-{}", mode.label()))?;
    let config = TrainConfig {
        mode,
        alpha: args.alpha.or(overlay.f64("alpha")?).unwrap_or(0.7),
        learning_rate: args
            .learning_rate
            .or(overlay.f64("learning-rate")?)
            .unwrap_or(1e-3),
        epochs: args.epochs.or(overlay.usize("epochs")?).unwrap_or(3),
        batch_size: args.batch_size.or(overlay.usize("batch-size")?).unwrap_or(16),
        seed: args.seed.or(overlay.u64("seed")?).unwrap_or(0),
        random_mask_fraction: args
            .random_mask_fraction
            .or(overlay.f64("random-mask-fraction")?)
            .unwrap_or(0.05),
    };
    config.validate()?;

    let ckpt = Checkpoint::load(&ckpt_path)?;
    let train_ds = corpus::load_tsv(&dataset_path, None)?;
    let eval_path = match args.eval {
        Some(p) => Some(p),
        None => overlay.path("eval")?,
    };
    let eval_ds = match &eval_path {
        Some(p) => Some(corpus::load_tsv(p, Some(&train_ds.label_names))?),
        None => None,
    };

    // modes that never mask gender words must not read a lexicon file
    let lexicon_arg = args.lexicon.or(overlay.path("lexicon")?);
    let (lexicon, lexicon_input) = match mode {
        TrainMode::Origin | TrainMode::GenderTuningRandom => (None, None),
        _ => {
            let (lex, input) = load_lexicon_arg(&lexicon_arg)?;
            (Some(lex), input)
        }
    };

    let output = trainer::train(
        ckpt.model,
        &ckpt.vocab,
        lexicon.as_ref(),
        &train_ds,
        eval_ds.as_ref(),
        &config,
    )?;

    std::fs::create_dir_all(&out)?;
    let new_ckpt_path = out.join("checkpoint.json");
    Checkpoint::new(output.model, ckpt.vocab).save(&new_ckpt_path)?;
    let metrics_path = out.join("metrics.jsonl");
    write_jsonl(&metrics_path, &output.metrics)?;

    let mut manifest = RunManifest::new(
        "train",
        serde_json::json!({
            "mode": mode.label(),
            "train": config,
            "label_names": train_ds.label_names,
            "perturbed_examples": output.perturbed_examples,
        }),
        config.seed,
    );
    manifest.input(&ckpt_path);
    manifest.input(&dataset_path);
    if let Some(p) = &eval_path {
        manifest.input(p);
    }
    if let Some(p) = &lexicon_input {
        manifest.input(p);
    }
    manifest.output(&new_ckpt_path);
    manifest.output(&metrics_path);
    manifest.duration_secs = start.elapsed().as_secs_f64();
    manifest.write_in_dir(&out)?;

    if let Some(last) = output.metrics.last() {
        println!(
            "mode {}: {} epochs, final joint {:.4}, train acc {:.3}, eval acc {:.3}",
            mode.label(),
            output.metrics.len(),
            last.mean_joint,
            last.train_acc,
            last.eval_acc
        );
    }
    Ok(())
}

fn cmd_seat(args: SeatArgs, overlay: &Overlay) -> Result<()> {
    let start = Instant::now();
    let ckpt_path = required(args.checkpoint.or(overlay.path("checkpoint")?), "checkpoint")?;
    let out = resolve_out(args.out, overlay, "seat-report.json")?;
    let variant = match args
        .denominator
        .or(overlay.string("denominator")?)
        .unwrap_or_else(|| "canonical".to_string())
        .as_str()
    {
        "canonical" => DenominatorVariant::Canonical,
        "attribute-spread" | "paper" => DenominatorVariant::AttributeSpread,
        other => return Err(Error::Usage(format!("unknown denominator variant `{other}`"))),
    };

    let mut spec_inputs: Vec<PathBuf> = args.spec;
    if let Some(dir) = args.specs_dir.or(overlay.path("specs-dir")?) {
        let mut found: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        found.sort();
        if found.is_empty() {
            return Err(Error::Usage(format!(
                "no spec files found in {}",
                dir.display()
            )));
        }
        spec_inputs.extend(found);
    }
    let specs: Vec<SeatTestSpec> = if spec_inputs.is_empty() {
        seat::bundled_specs()
    } else {
        spec_inputs
            .iter()
            .map(|p| SeatTestSpec::load(p))
            .collect::<Result<_>>()?
    };

    let ckpt = Checkpoint::load(&ckpt_path)?;
    let accuracy = match args.dataset.or(overlay.path("dataset")?) {
        Some(p) => {
            let ds = corpus::load_tsv(&p, None)?;
            Some(trainer::evaluate_accuracy(&ckpt.model, &ckpt.vocab, &ds)?)
        }
        None => None,
    };

    let mut results = Vec::new();
    for spec in &specs {
        let outcome = seat::seat_effect_size(&ckpt.model, &ckpt.vocab, spec, variant)?;
        results.push((spec.name.clone(), outcome.result));
    }
    let report = seat::aggregate_report(&results, accuracy, variant)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;

    let mut manifest = RunManifest::new(
        "seat",
        serde_json::json!({
            "denominator": variant.label(),
            "specs": specs.iter().map(|s| s.name.clone()).collect::<Vec<_>>(),
        }),
        0,
    );
    manifest.input(&ckpt_path);
    for p in &spec_inputs {
        manifest.input(p);
    }
    manifest.output(&out);
    manifest.duration_secs = start.elapsed().as_secs_f64();
    manifest.write_beside(&out)?;

    for row in &report.specs {
        println!("{:<26} d = {:+.4}", row.name, row.d);
    }
    println!("avg |d| = {:.4} ({})", report.avg_abs_d, report.denominator_variant);
    Ok(())
}

fn cmd_perturb_audit(args: AuditArgs, overlay: &Overlay) -> Result<()> {
    let start = Instant::now();
    let ckpt_path = required(args.checkpoint.or(overlay.path("checkpoint")?), "checkpoint")?;
    let dataset_path = required(args.dataset.or(overlay.path("dataset")?), "dataset")?;
    let out = resolve_out(args.out, overlay, "perturb-audit.json")?;
    let sample_size = args.sample_size.or(overlay.usize("sample-size")?).unwrap_or(300);
    let seed = args.seed.or(overlay.u64("seed")?).unwrap_or(0);

    let ckpt = Checkpoint::load(&ckpt_path)?;
    let lexicon_arg = args.lexicon.or(overlay.path("lexicon")?);
    let (lexicon, lexicon_input) = load_lexicon_arg(&lexicon_arg)?;

    let texts: Vec<String> = if dataset_path.extension().is_some_and(|e| e == "tsv") {
        corpus::load_tsv(&dataset_path, None)?
            .examples
            .into_iter()
            .map(|(text, _)| text)
            .collect()
    } else {
        std::fs::read_to_string(&dataset_path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(String::from)
            .collect()
    };

    let report =
        perturbation::audit(&texts, &ckpt.model, &ckpt.vocab, &lexicon, sample_size, seed)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;

    let mut manifest = RunManifest::new(
        "perturb-audit",
        serde_json::json!({ "sample_size": sample_size, "seed": seed }),
        seed,
    );
    manifest.input(&ckpt_path);
    manifest.input(&dataset_path);
    if let Some(p) = &lexicon_input {
        manifest.input(p);
    }
    manifest.output(&out);
    manifest.duration_secs = start.elapsed().as_secs_f64();
    manifest.write_beside(&out)?;

    for (label, frac) in &report.fractions {
        println!("{label:<16} {:5.1}%", frac * 100.0);
    }
    Ok(())
}

/// Comparison document: per-spec |d| per run, aggregate row, accuracy row.
#[derive(Debug, Serialize)]
struct ComparisonReport {
    runs: Vec<String>,
    rows: Vec<ComparisonRow>,
    avg_abs_d: BTreeMap<String, f64>,
    accuracy: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Serialize)]
struct ComparisonRow {
    name: String,
    abs_d: BTreeMap<String, f64>,
    d: BTreeMap<String, f64>,
}

fn render_comparison(report: &ComparisonReport) -> String {
    let name_width = report
        .rows
        .iter()
        .map(|r| r.name.len())
        .chain(["Avg. Abs. e-size".len(), "Accuracy".len()])
        .max()
        .unwrap_or(0)
        .max(24);
    let col = 12usize;
    let mut out = String::new();
    let _ = write!(out, "{:<name_width$}", "");
    for run in &report.runs {
        let _ = write!(out, "{run:>col$}");
    }
    out.push('\n');
    for row in &report.rows {
        let _ = write!(out, "{:<name_width$}", row.name);
        for run in &report.runs {
            let _ = write!(out, "{:>col$.3}", row.abs_d[run]);
        }
        out.push('\n');
    }
    let _ = write!(out, "{:<name_width$}", "Avg. Abs. e-size");
    for run in &report.runs {
        let _ = write!(out, "{:>col$.3}", report.avg_abs_d[run]);
    }
    out.push('\n');
    let _ = write!(out, "{:<name_width$}", "Accuracy");
    for run in &report.runs {
        match report.accuracy[run] {
            Some(acc) => {
                let _ = write!(out, "{:>col$.3}", acc);
            }
            None => {
                let _ = write!(out, "{:>col$}", "-");
            }
        }
    }
    out.push('\n');
    out
}

fn cmd_report(args: ReportArgs, overlay: &Overlay) -> Result<()> {
    let start = Instant::now();
    if args.runs.is_empty() {
        return Err(Error::Usage("at least one --run NAME=PATH is required".into()));
    }
    let out = resolve_out(args.out, overlay, "comparison.json")?;

    let mut runs = Vec::new();
    let mut reports: Vec<(String, SeatReport, PathBuf)> = Vec::new();
    for spec in &args.runs {
        let (name, path) = match spec.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(spec);
                let stem = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().to_string())
                    .unwrap_or_else(|| spec.clone());
                (stem, p)
            }
        };
        let report: SeatReport = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
        runs.push(name.clone());
        reports.push((name, report, path));
    }

    let reference = seat::spec_names(&reports[0].1);
    for (name, report, _) in &reports[1..] {
        if seat::spec_names(report) != reference {
            return Err(Error::Validation(format!(
                "run `{name}` covers a different spec set than `{}`",
                reports[0].0
            )));
        }
    }

    let mut rows = Vec::new();
    for spec in &reports[0].1.specs {
        let mut abs_d = BTreeMap::new();
        let mut d = BTreeMap::new();
        for (run, report, _) in &reports {
            let found = report.specs.iter().find(|s| s.name == spec.name).unwrap();
            abs_d.insert(run.clone(), found.abs_d);
            d.insert(run.clone(), found.d);
        }
        rows.push(ComparisonRow { name: spec.name.clone(), abs_d, d });
    }
    let avg_abs_d: BTreeMap<String, f64> = reports
        .iter()
        .map(|(run, report, _)| (run.clone(), report.avg_abs_d))
        .collect();
    let accuracy: BTreeMap<String, Option<f64>> = reports
        .iter()
        .map(|(run, report, _)| (run.clone(), report.accuracy))
        .collect();
    let comparison = ComparisonReport { runs, rows, avg_abs_d, accuracy };

    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(&out, serde_json::to_string_pretty(&comparison)?)?;
    print!("{}", render_comparison(&comparison));

    let mut manifest = RunManifest::new(
        "report",
        serde_json::json!({ "runs": comparison.runs }),
        0,
    );
    for (_, _, path) in &reports {
        manifest.input(path);
    }
    manifest.output(&out);
    manifest.duration_secs = start.elapsed().as_secs_f64();
    manifest.write_beside(&out)?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let overlay = Overlay::load(cli.config.as_deref())?;
    match cli.command {
        Command::CorpusGen(args) => cmd_corpus_gen(args, &overlay),
        Command::Pretrain(args) => cmd_pretrain(args, &overlay),
        Command::Finetune(args) => cmd_train(args, &overlay, Some(TrainMode::Origin)),
        Command::Train(args) => cmd_train(args, &overlay, None),
        Command::Seat(args) => cmd_seat(args, &overlay),
        Command::PerturbAudit(args) => cmd_perturb_audit(args, &overlay),
        Command::Report(args) => cmd_report(args, &overlay),
    }
}

/// Entry point returning the process exit code.
pub fn run_cli() -> i32 {
    match Cli::try_parse() {
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            code
        }
        Ok(cli) => match run(cli) {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("error: {e}");
                e.exit_code()
            }
        },
    }
}
