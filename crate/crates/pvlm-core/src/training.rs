//! Fine-tuning loop with a seen-samples budget, multi-source batch mixing,
//! decoupled-weight-decay adaptive optimizer, and bit-exact checkpointing.
//!
//! The trajectory is fully determined by (seed, config, manifest). The
//! backward pass runs in three stages: per-sample forward tapes built in
//! parallel, a small batch-level loss tape over the stacked embeddings, then
//! per-sample vector-Jacobian products seeded by the loss gradients.
//! Parallel work is reduced in fixed batch order, so worker timing never
//! changes the result.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{resolve_features, DataError, PairManifest, PairRecord, Tokenizer};
use crate::encoders::{
    image_forward, text_forward, Bound, EncoderConfig, EncoderError, ImageEncoderKind, Model,
    Param,
};
use crate::objectives::{total_loss, EmbeddingVars, LossConfig, ObjectiveError};
use crate::tape::Tape;
use crate::tensor::{Tensor, TensorError};

#[derive(Error, Debug)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("gradient shape {grad:?} does not match param {name} shape {param:?}")]
    GradShape {
        name: String,
        grad: Vec<usize>,
        param: Vec<usize>,
    },
    #[error("non-finite gradient for param {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss at step {step}; batch image refs: {refs:?}")]
    NonFiniteLoss { step: u64, refs: Vec<String> },
    #[error("no records available for source tag {0:?}")]
    EmptyPool(String),
    #[error("seen-samples budget {budget} is below one batch of {batch}")]
    BudgetTooSmall { budget: u64, batch: usize },
    #[error("io error for {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported checkpoint version {got} (expected {want})")]
    Version { got: u32, want: u32 },
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("unknown tensor name {0:?}")]
    UnknownTensor(String),
    #[error("invalid checkpoint metadata: {0}")]
    Metadata(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Total training examples to consume; steps = budget / batch_size.
    pub seen_samples_budget: u64,
    /// Fraction of each batch drawn from "long"-tagged records.
    pub mix_long_fraction: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Canonical names of parameters to leave untouched.
    pub freeze: Vec<String>,
}

impl Default for TrainConfig {
    /// Reference hyperparameters at desk scale; full-scale runs use the
    /// same lr/wd with batch 8192.
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-6,
            weight_decay: 0.01,
            batch_size: 32,
            seen_samples_budget: 32,
            mix_long_fraction: 0.5,
            seed: 0,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-8,
            freeze: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.mix_long_fraction) {
            return Err(TrainError::Config(format!(
                "mix_long_fraction {} outside [0, 1]",
                self.mix_long_fraction
            )));
        }
        if self.batch_size < 2 {
            return Err(TrainError::Config(
                "batch_size must be >= 2 for the pairwise loss".into(),
            ));
        }
        if self.seen_samples_budget < self.batch_size as u64 {
            return Err(TrainError::BudgetTooSmall {
                budget: self.seen_samples_budget,
                batch: self.batch_size,
            });
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(TrainError::Config(format!("{name} must be in [0, 1)")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(TrainError::Config("epsilon must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// First and second moment accumulators, one pair per parameter.
#[derive(Clone, Debug)]
pub struct OptState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl OptState {
    pub fn new(params: &[Param]) -> Self {
        OptState {
            m: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One adaptive-moment update with bias correction, then decoupled weight
/// decay p <- p - lr * wd * p applied to decay-flagged tensors only (weight
/// matrices, not biases, gains, positional tables, or the loss scalars).
pub fn optimizer_step(
    params: &mut [Param],
    grads: &[Tensor],
    state: &mut OptState,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(TrainError::Config(format!(
            "optimizer arity mismatch: {} params, {} grads, {} states",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if g.shape() != p.value.shape() {
            return Err(TrainError::GradShape {
                name: p.name.clone(),
                grad: g.shape().to_vec(),
                param: p.value.shape().to_vec(),
            });
        }
        if g.data().iter().any(|x| !x.is_finite()) {
            return Err(TrainError::NonFiniteGradient(p.name.clone()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        if cfg.freeze.iter().any(|f| f == &p.name) {
            continue;
        }
        let g = grads[i].data();
        let m: Vec<f64> = state.m[i]
            .data()
            .iter()
            .zip(g)
            .map(|(&m, &g)| cfg.beta1 * m + (1.0 - cfg.beta1) * g)
            .collect();
        let v: Vec<f64> = state.v[i]
            .data()
            .iter()
            .zip(g)
            .map(|(&v, &g)| cfg.beta2 * v + (1.0 - cfg.beta2) * g * g)
            .collect();
        let decay = if p.decay { cfg.weight_decay } else { 0.0 };
        let new: Vec<f64> = p
            .value
            .data()
            .iter()
            .zip(m.iter().zip(&v))
            .map(|(&w, (&m, &v))| {
                let mh = m / bc1;
                let vh = v / bc2;
                w - cfg.learning_rate * (mh / (vh.sqrt() + cfg.epsilon) + decay * w)
            })
            .collect();
        let shape = p.value.shape().to_vec();
        state.m[i] = Tensor::from_vec(&shape, m)?;
        state.v[i] = Tensor::from_vec(&shape, v)?;
        p.value = Tensor::from_vec(&shape, new)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Batch mixing
// ---------------------------------------------------------------------------

struct Pool {
    records: Vec<PairRecord>,
    order: Vec<usize>,
    cursor: usize,
}

impl Pool {
    fn new(records: Vec<PairRecord>) -> Self {
        let order = (0..records.len()).collect();
        Pool {
            records,
            order,
            cursor: usize::MAX, // forces a shuffle before the first draw
        }
    }

    fn take<'a>(
        &'a mut self,
        n: usize,
        rng: &mut ChaCha8Rng,
        tag: &str,
        out: &mut Vec<PairRecord>,
    ) -> Result<(), TrainError> {
        if n == 0 {
            return Ok(());
        }
        if self.records.is_empty() {
            return Err(TrainError::EmptyPool(tag.to_string()));
        }
        for _ in 0..n {
            if self.cursor >= self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            out.push(self.records[self.order[self.cursor]].clone());
            self.cursor += 1;
        }
        Ok(())
    }
}

/// Epoch-shuffled sampler over a manifest split into "long"-tagged records
/// and everything else. Draws are without replacement within an epoch and
/// fully determined by the seed.
pub struct BatchSampler {
    long: Pool,
    short: Pool,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(manifest: &PairManifest, seed: u64) -> Self {
        let (long, short): (Vec<_>, Vec<_>) = manifest
            .records
            .iter()
            .cloned()
            .partition(|r| r.source == "long");
        BatchSampler {
            long: Pool::new(long),
            short: Pool::new(short),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// ceil(mix_long_fraction * batch_size) long records, remainder short.
    pub fn mixed_batch(
        &mut self,
        batch_size: usize,
        mix_long_fraction: f64,
    ) -> Result<Vec<PairRecord>, TrainError> {
        let n_long = (mix_long_fraction * batch_size as f64).ceil() as usize;
        let n_long = n_long.min(batch_size);
        let mut out = Vec::with_capacity(batch_size);
        self.long.take(n_long, &mut self.rng, "long", &mut out)?;
        self.short
            .take(batch_size - n_long, &mut self.rng, "short", &mut out)?;
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Fine-tuning loop
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub seen_samples: u64,
    pub total: f64,
    pub contrastive: f64,
    pub inclusion: f64,
    pub vib: f64,
}

/// Metrics log: one line per step, tab-separated:
/// step, seen_samples, total, contrastive, inclusion, vib.
pub fn metrics_to_tsv(metrics: &[StepMetrics]) -> String {
    let mut out = String::new();
    for m in metrics {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            m.step, m.seen_samples, m.total, m.contrastive, m.inclusion, m.vib
        ));
    }
    out
}

#[derive(Clone, Debug)]
pub struct FinetuneResult {
    pub metrics: Vec<StepMetrics>,
    /// Cumulative examples consumed, including any starting offset.
    pub seen_samples: u64,
}

struct SampleForward {
    tape: Tape,
    param_vars: Vec<crate::tape::Var>,
    vars: [crate::tape::Var; 4], // img mu, img lv, txt mu, txt lv
    values: [Tensor; 4],
}

fn forward_sample(model: &Model, features: &[f64], seq: &crate::encoders::TokenSequence)
    -> Result<SampleForward, TrainError> {
    let mut tape = Tape::new();
    let bound = Bound::bind(&mut tape, model);
    let (im, il) = image_forward(&mut tape, &bound, model, features)?;
    let (tm, tl) = text_forward(&mut tape, &bound, model, seq)?;
    let values = [
        tape.value(im).clone(),
        tape.value(il).clone(),
        tape.value(tm).clone(),
        tape.value(tl).clone(),
    ];
    Ok(SampleForward {
        tape,
        param_vars: bound.vars,
        vars: [im, il, tm, tl],
        values,
    })
}

/// Runs floor(budget / batch_size) minimization steps of the combined
/// objective, mutating the model in place. `start_seen` seeds the cumulative
/// seen-samples counter (from checkpoint metadata).
pub fn finetune(
    model: &mut Model,
    manifest: &PairManifest,
    tokenizer: &Tokenizer,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    start_seen: u64,
) -> Result<FinetuneResult, TrainError> {
    cfg.validate()?;
    let steps = cfg.seen_samples_budget / cfg.batch_size as u64;
    let mut sampler = BatchSampler::new(manifest, cfg.seed);
    let mut state = OptState::new(&model.params);
    let mut metrics = Vec::with_capacity(steps as usize);
    let ctx = model.config.ctx_len;
    let a_idx = model.a_raw_index();
    let b_idx = model.b_index();

    for step in 1..=steps {
        let batch = sampler.mixed_batch(cfg.batch_size, cfg.mix_long_fraction)?;

        // stage 1: per-sample forward tapes, in parallel
        let inputs: Vec<(Vec<f64>, crate::encoders::TokenSequence)> = batch
            .iter()
            .map(|r| Ok((resolve_features(&r.image_ref)?, tokenizer.encode(&r.caption, ctx))))
            .collect::<Result<_, TrainError>>()?;
        let forwards: Vec<SampleForward> = inputs
            .par_iter()
            .map(|(f, s)| forward_sample(model, f, s))
            .collect::<Result<_, _>>()?;

        // stage 2: batch loss tape over the stacked embeddings
        let mut loss_tape = Tape::new();
        let mut leaf_vars = Vec::with_capacity(4 * forwards.len());
        let (iv, tv): (Vec<EmbeddingVars>, Vec<EmbeddingVars>) = forwards
            .iter()
            .map(|s| {
                let lv: Vec<_> = s.values.iter().map(|t| loss_tape.leaf(t.clone())).collect();
                leaf_vars.extend_from_slice(&lv);
                (
                    EmbeddingVars {
                        mu: lv[0],
                        log_var: lv[1],
                    },
                    EmbeddingVars {
                        mu: lv[2],
                        log_var: lv[3],
                    },
                )
            })
            .unzip();
        let a_leaf = loss_tape.leaf(model.params[a_idx].value.clone());
        let b_leaf = loss_tape.leaf(model.params[b_idx].value.clone());
        let parts = total_loss(&mut loss_tape, &iv, &tv, a_leaf, b_leaf, loss_cfg)?;
        let total = loss_tape.value(parts.total).item()?;
        if !total.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step,
                refs: batch.iter().map(|r| r.image_ref.clone()).collect(),
            });
        }
        let mut wrt = leaf_vars.clone();
        wrt.push(a_leaf);
        wrt.push(b_leaf);
        let leaf_grads = loss_tape.grad(parts.total, &wrt)?;

        // stage 3: per-sample VJPs seeded by the loss gradients, in
        // parallel, reduced in fixed batch order
        let per_sample: Vec<Vec<Tensor>> = forwards
            .par_iter()
            .enumerate()
            .map(|(b, s)| {
                let seeds: Vec<_> = (0..4)
                    .map(|k| (s.vars[k], leaf_grads[4 * b + k].clone()))
                    .collect();
                s.tape.vjp(&seeds, &s.param_vars)
            })
            .collect::<Result<_, _>>()?;
        let mut grads: Vec<Tensor> = model
            .params
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        for sg in &per_sample {
            for (acc, g) in grads.iter_mut().zip(sg) {
                *acc = acc.add(g)?;
            }
        }
        grads[a_idx] = grads[a_idx].add(&leaf_grads[leaf_grads.len() - 2])?;
        grads[b_idx] = grads[b_idx].add(&leaf_grads[leaf_grads.len() - 1])?;

        optimizer_step(&mut model.params, &grads, &mut state, cfg)?;

        metrics.push(StepMetrics {
            step,
            seen_samples: start_seen + step * cfg.batch_size as u64,
            total,
            contrastive: loss_tape.value(parts.contrastive).item()?,
            inclusion: loss_tape.value(parts.inclusion).item()?,
            vib: loss_tape.value(parts.vib).item()?,
        });
    }

    Ok(FinetuneResult {
        seen_samples: start_seen + steps * cfg.batch_size as u64,
        metrics,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"LPLP";
const VERSION: u32 = 1;

/// Training metadata carried alongside the weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct TrainMeta {
    pub seen_samples: u64,
    pub seed: u64,
}

fn encoder_kind_str(kind: &ImageEncoderKind) -> String {
    match kind {
        ImageEncoderKind::Mlp { hidden } => format!("mlp:{hidden}"),
        ImageEncoderKind::PatchGrid { patches, patch_dim } => {
            format!("patch:{patches}x{patch_dim}")
        }
    }
}

fn parse_encoder_kind(s: &str) -> Result<ImageEncoderKind, TrainError> {
    if let Some(h) = s.strip_prefix("mlp:") {
        let hidden = h
            .parse()
            .map_err(|_| TrainError::Metadata(format!("bad image_encoder value {s:?}")))?;
        return Ok(ImageEncoderKind::Mlp { hidden });
    }
    if let Some(rest) = s.strip_prefix("patch:") {
        if let Some((p, d)) = rest.split_once('x') {
            if let (Ok(patches), Ok(patch_dim)) = (p.parse(), d.parse()) {
                return Ok(ImageEncoderKind::PatchGrid { patches, patch_dim });
            }
        }
    }
    Err(TrainError::Metadata(format!(
        "bad image_encoder value {s:?}"
    )))
}

fn metadata_text(model: &Model, meta: &TrainMeta) -> String {
    let c = &model.config;
    let mut s = String::new();
    let kv = [
        ("config.vocab_size", c.vocab_size.to_string()),
        ("config.ctx_len", c.ctx_len.to_string()),
        ("config.embed_dim", c.embed_dim.to_string()),
        ("config.num_layers", c.num_layers.to_string()),
        ("config.num_heads", c.num_heads.to_string()),
        ("config.out_dim", c.out_dim.to_string()),
        ("config.image_input_dim", c.image_input_dim.to_string()),
        ("config.mlp_hidden", c.mlp_hidden.to_string()),
        ("config.image_encoder", encoder_kind_str(&c.image_encoder)),
        ("meta.seen_samples", meta.seen_samples.to_string()),
        ("meta.seed", meta.seed.to_string()),
    ];
    for (k, v) in kv {
        s.push_str(&format!("{k}={v}\n"));
    }
    for p in &model.params {
        let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        s.push_str(&format!(
            "tensor={} {} decay={}\n",
            p.name,
            dims.join("x"),
            u8::from(p.decay)
        ));
    }
    s
}

/// Checkpoint file: magic "LPLP", u32 LE version, u64 LE length-prefixed
/// UTF-8 metadata (config, training metadata, and the named tensor shape
/// table), then each tensor's payload in metadata order as little-endian
/// 32-bit floats, row-major. Compute is 64-bit; storage is 32-bit, and
/// round-trip identity is defined at the stored level.
pub fn save_checkpoint(model: &Model, meta: &TrainMeta, path: &Path) -> Result<(), TrainError> {
    let md = metadata_text(model, meta);
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(md.len() as u64).to_le_bytes());
    bytes.extend_from_slice(md.as_bytes());
    for p in &model.params {
        for &x in p.value.data() {
            bytes.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })
}

struct MetaDoc {
    kv: Vec<(String, String)>,
    tensors: Vec<(String, Vec<usize>, bool)>,
}

fn parse_metadata(text: &str) -> Result<MetaDoc, TrainError> {
    let mut kv = Vec::new();
    let mut tensors = Vec::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| TrainError::Metadata(format!("bad line {line:?}")))?;
        if k == "tensor" {
            let mut parts = v.split(' ');
            let name = parts
                .next()
                .ok_or_else(|| TrainError::Metadata("tensor line missing name".into()))?;
            let shape_s = parts
                .next()
                .ok_or_else(|| TrainError::Metadata("tensor line missing shape".into()))?;
            let decay_s = parts
                .next()
                .and_then(|d| d.strip_prefix("decay="))
                .ok_or_else(|| TrainError::Metadata("tensor line missing decay flag".into()))?;
            let shape = shape_s
                .split('x')
                .map(|d| {
                    d.parse()
                        .map_err(|_| TrainError::Metadata(format!("bad shape {shape_s:?}")))
                })
                .collect::<Result<Vec<usize>, _>>()?;
            tensors.push((name.to_string(), shape, decay_s == "1"));
        } else {
            kv.push((k.to_string(), v.to_string()));
        }
    }
    Ok(MetaDoc { kv, tensors })
}

fn kv_get<'a>(doc: &'a MetaDoc, key: &str) -> Result<&'a str, TrainError> {
    doc.kv
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| TrainError::Metadata(format!("missing key {key}")))
}

fn kv_num<T: std::str::FromStr>(doc: &MetaDoc, key: &str) -> Result<T, TrainError> {
    kv_get(doc, key)?
        .parse()
        .map_err(|_| TrainError::Metadata(format!("bad value for {key}")))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, TrainMeta), TrainError> {
    let bytes = std::fs::read(path).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if bytes.len() < 16 {
        return Err(TrainError::Truncated("header".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(TrainError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(TrainError::Version {
            got: version,
            want: VERSION,
        });
    }
    let md_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + md_len {
        return Err(TrainError::Truncated("metadata".into()));
    }
    let md_text = std::str::from_utf8(&bytes[16..16 + md_len])
        .map_err(|_| TrainError::Metadata("metadata is not valid UTF-8".into()))?;
    let doc = parse_metadata(md_text)?;

    let config = EncoderConfig {
        vocab_size: kv_num(&doc, "config.vocab_size")?,
        ctx_len: kv_num(&doc, "config.ctx_len")?,
        embed_dim: kv_num(&doc, "config.embed_dim")?,
        num_layers: kv_num(&doc, "config.num_layers")?,
        num_heads: kv_num(&doc, "config.num_heads")?,
        out_dim: kv_num(&doc, "config.out_dim")?,
        image_input_dim: kv_num(&doc, "config.image_input_dim")?,
        mlp_hidden: kv_num(&doc, "config.mlp_hidden")?,
        image_encoder: parse_encoder_kind(kv_get(&doc, "config.image_encoder")?)?,
    };
    let meta = TrainMeta {
        seen_samples: kv_num(&doc, "meta.seen_samples")?,
        seed: kv_num(&doc, "meta.seed")?,
    };

    // structural skeleton; every value is overwritten from the payload
    let mut model =
        Model::init(config, 0, 1.0, 0.0).map_err(|e| TrainError::Metadata(e.to_string()))?;
    if doc.tensors.len() != model.params.len() {
        return Err(TrainError::Metadata(format!(
            "tensor table has {} entries, model expects {}",
            doc.tensors.len(),
            model.params.len()
        )));
    }
    for ((name, shape, decay), p) in doc.tensors.iter().zip(&model.params) {
        if name != &p.name {
            return Err(TrainError::UnknownTensor(name.clone()));
        }
        if shape != p.value.shape() || *decay != p.decay {
            return Err(TrainError::Metadata(format!(
                "tensor {name}: shape/decay {:?}/{decay} does not match expected {:?}/{}",
                shape,
                p.value.shape(),
                p.decay
            )));
        }
    }

    let mut off = 16 + md_len;
    for i in 0..model.params.len() {
        let n: usize = model.params[i].value.shape().iter().product();
        let end = off + 4 * n;
        if bytes.len() < end {
            return Err(TrainError::Truncated(format!(
                "payload for tensor {}",
                model.params[i].name
            )));
        }
        let data: Vec<f64> = bytes[off..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let shape = model.params[i].value.shape().to_vec();
        let value = Tensor::from_vec(&shape, data)
            .map_err(|e| TrainError::Metadata(format!("payload: {e}")))?;
        model
            .set_param_value(i, value)
            .map_err(|e| TrainError::Metadata(e.to_string()))?;
        off = end;
    }
    if off != bytes.len() {
        return Err(TrainError::Metadata(format!(
            "{} trailing bytes after tensor payloads",
            bytes.len() - off
        )));
    }
    Ok((model, meta))
}
