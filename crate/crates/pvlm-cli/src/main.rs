//! Command-line pipeline: corpus generation, training, context extension,
//! and evaluation.
//!
//! Exit codes: 0 success, 2 usage error (bad flags), 1 runtime failure.
//! Every command is fully deterministic given its --seed; no output file
//! contains timestamps or hostnames.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pvlm_core::context_ext::{extend_positional, ExtensionSpec};
use pvlm_core::data::{
    self, generate_corpus, load_manifest, resolve_features, save_manifest, PairManifest,
    Tokenizer,
};
use pvlm_core::encoders::ImageEncoderKind;
use pvlm_core::evalsuite::{
    map_at_r, pool_prompts, recall_at_k, score_pairs, uncertainty_report, EvalReport,
};
use pvlm_core::objectives::{InclusionDirection, LossConfig};
use pvlm_core::prob_geom::{uncertainty, ProbEmbedding};
use pvlm_core::training::{
    finetune, load_checkpoint, metrics_to_tsv, save_checkpoint, TrainConfig, TrainMeta,
};
use pvlm_core::{EncoderConfig, Model};

#[derive(Parser)]
#[command(name = "pvlm", about = "Probabilistic vision-language pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic (image, caption) manifest.
    Gen(GenArgs),
    /// Fine-tune a model on one or more manifests.
    Train(TrainArgs),
    /// Stretch a checkpoint's text context via positional interpolation.
    Extend(ExtendArgs),
    /// Evaluate a checkpoint.
    #[command(subcommand)]
    Eval(EvalCommand),
}

fn parse_fraction(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if !(0.0..=1.0).contains(&v) {
        return Err(format!("{v} is outside [0, 1]"));
    }
    Ok(v)
}

#[derive(Args)]
struct GenArgs {
    /// Output manifest path.
    #[arg(long)]
    out: PathBuf,
    /// Number of records.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of records given long enumerating captions.
    #[arg(long, value_parser = parse_fraction, default_value_t = 0.5)]
    long_fraction: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration (see configs/default.toml).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training manifests; records keep the source tags written in the files.
    #[arg(long, required = true)]
    manifest: Vec<PathBuf>,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Metrics log path (defaults to <out>.metrics.tsv).
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Total training examples to consume.
    #[arg(long)]
    seen_samples: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Starting checkpoint; a fresh random init is used when absent.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args)]
struct ExtendArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Target context length.
    #[arg(long)]
    context: usize,
    /// Leading positional rows copied verbatim.
    #[arg(long, default_value_t = 20)]
    keep_prefix: usize,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Paired image/text retrieval: R@K both directions plus mAP@R.
    Retrieval(RetrievalArgs),
    /// Zero-shot classification against a class prompt file.
    Zeroshot(ZeroshotArgs),
    /// Per-source uncertainty statistics and the specificity correlation.
    Uncertainty(UncertaintyArgs),
}

#[derive(Args)]
struct RetrievalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Optional report file; the report always goes to stdout.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ZeroshotArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Labeled images: the source tag of each record is its class name.
    #[arg(long)]
    manifest: PathBuf,
    /// Class prompt file: one "name<TAB>prompt" line per prompt; repeated
    /// names pool multiple prompts per class.
    #[arg(long)]
    classes: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct UncertaintyArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// Run configuration file
// ---------------------------------------------------------------------------

#[derive(serde::Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RunConfigFile {
    #[serde(default)]
    encoder: EncoderSection,
    #[serde(default)]
    train: TrainSection,
    #[serde(default)]
    loss: LossSection,
}

#[derive(serde::Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct EncoderSection {
    vocab_size: Option<usize>,
    ctx_len: Option<usize>,
    embed_dim: Option<usize>,
    num_layers: Option<usize>,
    num_heads: Option<usize>,
    out_dim: Option<usize>,
    image_input_dim: Option<usize>,
    mlp_hidden: Option<usize>,
    /// "mlp:<hidden>" or "patch:<patches>x<patch_dim>".
    image_encoder: Option<String>,
}

#[derive(serde::Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    learning_rate: Option<f64>,
    weight_decay: Option<f64>,
    batch_size: Option<usize>,
    mix_long_fraction: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    epsilon: Option<f64>,
    freeze: Option<Vec<String>>,
}

#[derive(serde::Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct LossSection {
    a_init: Option<f64>,
    b_init: Option<f64>,
    lambda_incl: Option<f64>,
    lambda_vib: Option<f64>,
    /// "image_in_text" or "text_in_image".
    inclusion_direction: Option<String>,
}

fn parse_image_encoder(s: &str) -> Result<ImageEncoderKind> {
    if let Some(h) = s.strip_prefix("mlp:") {
        return Ok(ImageEncoderKind::Mlp { hidden: h.parse()? });
    }
    if let Some(rest) = s.strip_prefix("patch:") {
        if let Some((p, d)) = rest.split_once('x') {
            return Ok(ImageEncoderKind::PatchGrid {
                patches: p.parse()?,
                patch_dim: d.parse()?,
            });
        }
    }
    bail!("bad image_encoder {s:?} (expected mlp:<hidden> or patch:<patches>x<patch_dim>)")
}

impl RunConfigFile {
    fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfigFile::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    fn encoder_config(&self, tokenizer: &Tokenizer) -> Result<EncoderConfig> {
        let e = &self.encoder;
        Ok(EncoderConfig {
            vocab_size: e.vocab_size.unwrap_or_else(|| tokenizer.vocab_size()),
            ctx_len: e.ctx_len.unwrap_or(64),
            embed_dim: e.embed_dim.unwrap_or(32),
            num_layers: e.num_layers.unwrap_or(2),
            num_heads: e.num_heads.unwrap_or(4),
            out_dim: e.out_dim.unwrap_or(16),
            image_input_dim: e.image_input_dim.unwrap_or(data::IMAGE_FEATURE_DIM),
            mlp_hidden: e.mlp_hidden.unwrap_or(64),
            image_encoder: match &e.image_encoder {
                Some(s) => parse_image_encoder(s)?,
                None => ImageEncoderKind::Mlp { hidden: 48 },
            },
        })
    }

    fn train_config(&self, seen_samples: u64, seed: u64) -> TrainConfig {
        let t = &self.train;
        let d = TrainConfig::default();
        TrainConfig {
            learning_rate: t.learning_rate.unwrap_or(d.learning_rate),
            weight_decay: t.weight_decay.unwrap_or(d.weight_decay),
            batch_size: t.batch_size.unwrap_or(d.batch_size),
            seen_samples_budget: seen_samples,
            mix_long_fraction: t.mix_long_fraction.unwrap_or(d.mix_long_fraction),
            seed,
            beta1: t.beta1.unwrap_or(d.beta1),
            beta2: t.beta2.unwrap_or(d.beta2),
            epsilon: t.epsilon.unwrap_or(d.epsilon),
            freeze: t.freeze.clone().unwrap_or_default(),
        }
    }

    fn loss_config(&self) -> Result<LossConfig> {
        let l = &self.loss;
        let d = LossConfig::default();
        Ok(LossConfig {
            a_init: l.a_init.unwrap_or(d.a_init),
            b_init: l.b_init.unwrap_or(d.b_init),
            lambda_incl: l.lambda_incl.unwrap_or(d.lambda_incl),
            lambda_vib: l.lambda_vib.unwrap_or(d.lambda_vib),
            inclusion_direction: match l.inclusion_direction.as_deref() {
                None | Some("image_in_text") => InclusionDirection::ImageInText,
                Some("text_in_image") => InclusionDirection::TextInImage,
                Some(other) => bail!("bad inclusion_direction {other:?}"),
            },
        })
    }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_gen(args: &GenArgs) -> Result<()> {
    let manifest = generate_corpus(args.n, args.seed, args.long_fraction)?;
    save_manifest(&manifest, &args.out)?;
    println!("wrote {} records to {}", manifest.len(), args.out.display());
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg_file = RunConfigFile::load(args.config.as_deref())?;
    let tokenizer = Tokenizer::synthetic();
    let (mut model, start_meta) = match &args.init {
        Some(path) => load_checkpoint(path)?,
        None => {
            let loss = cfg_file.loss_config()?;
            let enc = cfg_file.encoder_config(&tokenizer)?;
            (
                Model::init(enc, args.seed, loss.a_init, loss.b_init)?,
                TrainMeta::default(),
            )
        }
    };
    let mut manifest = PairManifest::default();
    for path in &args.manifest {
        manifest.records.extend(load_manifest(path)?.records);
    }
    let train_cfg = cfg_file.train_config(args.seen_samples, args.seed);
    let loss_cfg = cfg_file.loss_config()?;
    let result = finetune(
        &mut model,
        &manifest,
        &tokenizer,
        &train_cfg,
        &loss_cfg,
        start_meta.seen_samples,
    )?;
    let meta = TrainMeta {
        seen_samples: result.seen_samples,
        seed: args.seed,
    };
    save_checkpoint(&model, &meta, &args.out)?;
    let metrics_path = args
        .metrics
        .clone()
        .unwrap_or_else(|| args.out.with_extension("metrics.tsv"));
    std::fs::write(&metrics_path, metrics_to_tsv(&result.metrics))
        .with_context(|| format!("writing metrics {}", metrics_path.display()))?;
    let last = result.metrics.last();
    println!(
        "trained {} steps ({} seen samples), final total loss {}",
        result.metrics.len(),
        meta.seen_samples,
        last.map_or(f64::NAN, |m| m.total)
    );
    Ok(())
}

fn cmd_extend(args: &ExtendArgs) -> Result<()> {
    let (mut model, meta) = load_checkpoint(&args.input)?;
    let spec = ExtensionSpec {
        source_ctx: model.config.ctx_len,
        target_ctx: args.context,
        keep_prefix: args.keep_prefix,
    };
    let table = extend_positional(&model.text_positional_table(), &spec)?;
    model.replace_text_positional_table(table)?;
    save_checkpoint(&model, &meta, &args.out)?;
    println!(
        "extended context {} -> {} (keep_prefix {})",
        spec.source_ctx, spec.target_ctx, spec.keep_prefix
    );
    Ok(())
}

fn embed_pairs(model: &Model, manifest: &PairManifest) -> Result<(Vec<ProbEmbedding>, Vec<ProbEmbedding>)> {
    let tokenizer = Tokenizer::synthetic();
    let ctx = model.config.ctx_len;
    let mut images = Vec::with_capacity(manifest.len());
    let mut texts = Vec::with_capacity(manifest.len());
    for r in &manifest.records {
        images.push(model.encode_image(&resolve_features(&r.image_ref)?)?);
        texts.push(model.encode_text(&tokenizer.encode(&r.caption, ctx))?);
    }
    Ok((images, texts))
}

fn emit_report(report: &EvalReport, path: Option<&Path>) -> Result<()> {
    let text = report.to_text();
    print!("{text}");
    if let Some(p) = path {
        std::fs::write(p, text).with_context(|| format!("writing report {}", p.display()))?;
    }
    Ok(())
}

fn cmd_eval_retrieval(args: &RetrievalArgs) -> Result<()> {
    let (model, _) = load_checkpoint(&args.ckpt)?;
    let manifest = load_manifest(&args.manifest)?;
    let (images, texts) = embed_pairs(&model, &manifest)?;
    let m = score_pairs(&images, &texts)?;
    let t = m.transposed();
    let mut report = EvalReport::default();
    for k in [1usize, 5, 10] {
        if k <= m.gallery() {
            report
                .r_at_k
                .push((k, recall_at_k(&m, k)?, recall_at_k(&t, k)?));
        }
    }
    report.map_i2t = Some(map_at_r(&m)?);
    report.map_t2i = Some(map_at_r(&t)?);
    emit_report(&report, args.report.as_deref())
}

fn cmd_eval_zeroshot(args: &ZeroshotArgs) -> Result<()> {
    let (model, _) = load_checkpoint(&args.ckpt)?;
    let manifest = load_manifest(&args.manifest)?;
    let tokenizer = Tokenizer::synthetic();
    let ctx = model.config.ctx_len;

    let text = std::fs::read_to_string(&args.classes)
        .with_context(|| format!("reading classes {}", args.classes.display()))?;
    let mut names: Vec<String> = Vec::new();
    let mut prompts: Vec<Vec<ProbEmbedding>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (name, prompt) = line
            .split_once('\t')
            .with_context(|| format!("classes line {}: expected name<TAB>prompt", i + 1))?;
        let z = model.encode_text(&tokenizer.encode(prompt, ctx))?;
        match names.iter().position(|n| n == name) {
            Some(j) => prompts[j].push(z),
            None => {
                names.push(name.to_string());
                prompts.push(vec![z]);
            }
        }
    }
    if names.len() < 2 {
        bail!("classes file defines {} classes, need >= 2", names.len());
    }
    let classes: Vec<ProbEmbedding> = prompts
        .iter()
        .map(|ps| pool_prompts(ps))
        .collect::<Result<_, _>>()?;

    let mut images = Vec::with_capacity(manifest.len());
    let mut labels = Vec::with_capacity(manifest.len());
    for r in &manifest.records {
        let label = names
            .iter()
            .position(|n| n == &r.source)
            .with_context(|| format!("record class {:?} not in classes file", r.source))?;
        images.push(model.encode_image(&resolve_features(&r.image_ref)?)?);
        labels.push(label);
    }
    let report = EvalReport {
        zeroshot_accuracy: Some(pvlm_core::evalsuite::zeroshot_classify(
            &images, &classes, &labels,
        )?),
        ..EvalReport::default()
    };
    emit_report(&report, args.report.as_deref())
}

fn cmd_eval_uncertainty(args: &UncertaintyArgs) -> Result<()> {
    let (model, _) = load_checkpoint(&args.ckpt)?;
    let manifest = load_manifest(&args.manifest)?;
    let tokenizer = Tokenizer::synthetic();
    let ctx = model.config.ctx_len;
    let items: Vec<(String, f64, f64)> = manifest
        .records
        .iter()
        .map(|r| {
            let z = model.encode_text(&tokenizer.encode(&r.caption, ctx))?;
            Ok((
                r.source.clone(),
                data::specificity(&r.caption) as f64,
                uncertainty(&z),
            ))
        })
        .collect::<Result<_>>()?;
    let report = EvalReport {
        uncertainty: Some(uncertainty_report(&items)?),
        ..EvalReport::default()
    };
    emit_report(&report, args.report.as_deref())
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Gen(args) => cmd_gen(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Extend(args) => cmd_extend(&args),
        Command::Eval(EvalCommand::Retrieval(args)) => cmd_eval_retrieval(&args),
        Command::Eval(EvalCommand::Zeroshot(args)) => cmd_eval_zeroshot(&args),
        Command::Eval(EvalCommand::Uncertainty(args)) => cmd_eval_uncertainty(&args),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
