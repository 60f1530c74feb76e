//! Probabilistic text and image encoders.
//!
//! The text encoder is a pre-LN transformer over ctx_len token positions plus
//! two terminal special positions. The final hidden state at the [CLS]
//! position is projected to the embedding mean and the [UNC] position to the
//! per-dimension log-variance. The image pathway is either a small MLP over a
//! feature vector or a transformer over patch tokens with its own [CLS]/[UNC]
//! slots.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::prob_geom::ProbEmbedding;
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

/// Additive attention bias for masked-off key positions. Large enough that
/// exp underflows to exactly zero after row-max subtraction.
const MASK_BIAS: f64 = -1e30;
const LN_EPS: f64 = 1e-5;

#[derive(Error, Debug)]
pub enum EncoderError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("sequence length {got} does not match ctx_len + 2 = {want}")]
    SequenceLength { got: usize, want: usize },
    #[error("token id {0} out of vocabulary (size {1})")]
    UnknownToken(usize, usize),
    #[error("image feature length {got} does not match image_input_dim {want}")]
    FeatureLength { got: usize, want: usize },
    #[error("invalid embedding output: {0}")]
    Output(String),
}

#[derive(Clone, Debug, PartialEq)]
pub enum ImageEncoderKind {
    /// Single-hidden-layer MLP over a raw feature vector.
    Mlp { hidden: usize },
    /// Transformer over a grid of patch tokens.
    PatchGrid { patches: usize, patch_dim: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub ctx_len: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub out_dim: usize,
    pub image_input_dim: usize,
    pub mlp_hidden: usize,
    pub image_encoder: ImageEncoderKind,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.embed_dim == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(EncoderError::Config(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.ctx_len < 1 {
            return Err(EncoderError::Config("ctx_len must be >= 1".into()));
        }
        if self.vocab_size == 0 || self.out_dim == 0 || self.num_layers == 0 {
            return Err(EncoderError::Config(
                "vocab_size, out_dim, num_layers must be positive".into(),
            ));
        }
        if let ImageEncoderKind::PatchGrid { patches, patch_dim } = self.image_encoder {
            if patches * patch_dim != self.image_input_dim {
                return Err(EncoderError::Config(format!(
                    "patches {patches} x patch_dim {patch_dim} != image_input_dim {}",
                    self.image_input_dim
                )));
            }
        }
        Ok(())
    }

    /// Total text sequence length: ctx_len plus the [CLS] and [UNC] slots.
    pub fn seq_len(&self) -> usize {
        self.ctx_len + 2
    }
}

/// The learned positional-embedding matrix, including the two terminal
/// special-token rows ([CLS] then [UNC]).
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalTable {
    rows: Tensor,
    ctx_len: usize,
}

impl PositionalTable {
    pub fn new(rows: Tensor, ctx_len: usize) -> Result<Self, EncoderError> {
        if rows.shape().len() != 2 || rows.shape()[0] != ctx_len + 2 {
            return Err(EncoderError::Config(format!(
                "positional table shape {:?} does not match ctx_len {} + 2",
                rows.shape(),
                ctx_len
            )));
        }
        Ok(PositionalTable { rows, ctx_len })
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    pub fn ctx_len(&self) -> usize {
        self.ctx_len
    }
}

/// A tokenized text: exactly ctx_len + 2 ids, the last two being the
/// [CLS] and [UNC] special ids, with an attention mask that always covers
/// those two positions.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Whether decoupled weight decay applies (weight matrices only).
    pub decay: bool,
}

#[derive(Clone, Debug)]
struct BlockIdx {
    ln1_g: usize,
    ln1_b: usize,
    wqkv: usize,
    bqkv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct TowerIdx {
    pos: usize,
    blocks: Vec<BlockIdx>,
    lnf_g: usize,
    lnf_b: usize,
    w_mu: usize,
    b_mu: usize,
    w_unc: usize,
    b_unc: usize,
}

#[derive(Clone, Debug)]
enum ImageIdx {
    Mlp {
        w1: usize,
        b1: usize,
        w_mu: usize,
        b_mu: usize,
        w_unc: usize,
        b_unc: usize,
    },
    Patch {
        w_patch: usize,
        b_patch: usize,
        cls: usize,
        unc: usize,
        tower: TowerIdx,
    },
}

/// Full model state: both encoders plus the contrastive loss scalars.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: EncoderConfig,
    pub params: Vec<Param>,
    tok: usize,
    text: TowerIdx,
    image: ImageIdx,
    a_raw: usize,
    b: usize,
}

struct ParamBuilder {
    params: Vec<Param>,
    rng: ChaCha8Rng,
}

impl ParamBuilder {
    fn normal(&mut self, name: &str, shape: &[usize], std: f64, decay: bool) -> usize {
        let dist = Normal::new(0.0, std).unwrap();
        let t = Tensor::from_fn(shape, |_| dist.sample(&mut self.rng));
        self.push(name, t, decay)
    }

    fn filled(&mut self, name: &str, shape: &[usize], v: f64) -> usize {
        self.push(name, Tensor::filled(shape, v), false)
    }

    fn push(&mut self, name: &str, value: Tensor, decay: bool) -> usize {
        self.params.push(Param {
            name: name.to_string(),
            value,
            decay,
        });
        self.params.len() - 1
    }

    fn block(&mut self, prefix: &str, e: usize, hidden: usize) -> BlockIdx {
        BlockIdx {
            ln1_g: self.filled(&format!("{prefix}.ln1.g"), &[e], 1.0),
            ln1_b: self.filled(&format!("{prefix}.ln1.b"), &[e], 0.0),
            wqkv: self.normal(&format!("{prefix}.attn.wqkv"), &[e, 3 * e], 0.02, true),
            bqkv: self.filled(&format!("{prefix}.attn.bqkv"), &[3 * e], 0.0),
            wo: self.normal(&format!("{prefix}.attn.wo"), &[e, e], 0.02, true),
            bo: self.filled(&format!("{prefix}.attn.bo"), &[e], 0.0),
            ln2_g: self.filled(&format!("{prefix}.ln2.g"), &[e], 1.0),
            ln2_b: self.filled(&format!("{prefix}.ln2.b"), &[e], 0.0),
            w1: self.normal(&format!("{prefix}.mlp.w1"), &[e, hidden], 0.02, true),
            b1: self.filled(&format!("{prefix}.mlp.b1"), &[hidden], 0.0),
            w2: self.normal(&format!("{prefix}.mlp.w2"), &[hidden, e], 0.02, true),
            b2: self.filled(&format!("{prefix}.mlp.b2"), &[e], 0.0),
        }
    }

    fn tower(
        &mut self,
        prefix: &str,
        rows: usize,
        e: usize,
        hidden: usize,
        layers: usize,
        d: usize,
        logvar_bias: f64,
    ) -> TowerIdx {
        let pos = self.normal(&format!("{prefix}.pos"), &[rows, e], 0.01, false);
        let blocks = (0..layers)
            .map(|i| self.block(&format!("{prefix}.l{i}"), e, hidden))
            .collect();
        TowerIdx {
            pos,
            blocks,
            lnf_g: self.filled(&format!("{prefix}.lnf.g"), &[e], 1.0),
            lnf_b: self.filled(&format!("{prefix}.lnf.b"), &[e], 0.0),
            w_mu: self.normal(&format!("{prefix}.head.w_mu"), &[e, d], 0.02, true),
            b_mu: self.filled(&format!("{prefix}.head.b_mu"), &[d], 0.0),
            w_unc: self.normal(&format!("{prefix}.head.w_unc"), &[e, d], 0.02, true),
            b_unc: self.filled(&format!("{prefix}.head.b_unc"), &[d], logvar_bias),
        }
    }
}

/// Initial log-variance head bias: small starting uncertainty.
const LOGVAR_INIT: f64 = -4.0;

impl Model {
    /// Fresh random initialization, fully determined by the seed.
    pub fn init(
        config: EncoderConfig,
        seed: u64,
        a_init: f64,
        b_init: f64,
    ) -> Result<Self, EncoderError> {
        config.validate()?;
        if a_init <= 0.0 {
            return Err(EncoderError::Config(format!(
                "contrastive scale init must be positive, got {a_init}"
            )));
        }
        let mut pb = ParamBuilder {
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let e = config.embed_dim;
        let d = config.out_dim;
        let tok = pb.normal("txt.tok", &[config.vocab_size, e], 0.02, true);
        let text = pb.tower(
            "txt",
            config.seq_len(),
            e,
            config.mlp_hidden,
            config.num_layers,
            d,
            LOGVAR_INIT,
        );
        let image = match config.image_encoder {
            ImageEncoderKind::Mlp { hidden } => ImageIdx::Mlp {
                w1: pb.normal("img.mlp.w1", &[config.image_input_dim, hidden], 0.05, true),
                b1: pb.filled("img.mlp.b1", &[hidden], 0.0),
                w_mu: pb.normal("img.head.w_mu", &[hidden, d], 0.05, true),
                b_mu: pb.filled("img.head.b_mu", &[d], 0.0),
                w_unc: pb.normal("img.head.w_unc", &[hidden, d], 0.05, true),
                b_unc: pb.filled("img.head.b_unc", &[d], LOGVAR_INIT),
            },
            ImageEncoderKind::PatchGrid { patches, patch_dim } => {
                let w_patch = pb.normal("img.patch.w", &[patch_dim, e], 0.02, true);
                let b_patch = pb.filled("img.patch.b", &[e], 0.0);
                let cls = pb.normal("img.cls", &[1, e], 0.02, false);
                let unc = pb.normal("img.unc", &[1, e], 0.02, false);
                let tower = pb.tower(
                    "img",
                    patches + 2,
                    e,
                    config.mlp_hidden,
                    config.num_layers,
                    d,
                    LOGVAR_INIT,
                );
                ImageIdx::Patch {
                    w_patch,
                    b_patch,
                    cls,
                    unc,
                    tower,
                }
            }
        };
        let a_raw = pb.push("loss.a_raw", Tensor::scalar(a_init.ln()), false);
        let b = pb.push("loss.b", Tensor::scalar(b_init), false);
        Ok(Model {
            config,
            params: pb.params,
            tok,
            text,
            image,
            a_raw,
            b,
        })
    }

    pub fn param(&self, index: usize) -> &Param {
        &self.params[index]
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn set_param_value(&mut self, index: usize, value: Tensor) -> Result<(), EncoderError> {
        if value.shape() != self.params[index].value.shape() {
            return Err(EncoderError::Config(format!(
                "shape mismatch for {}: {:?} vs {:?}",
                self.params[index].name,
                value.shape(),
                self.params[index].value.shape()
            )));
        }
        self.params[index].value = value;
        Ok(())
    }

    pub fn a_raw_index(&self) -> usize {
        self.a_raw
    }

    pub fn b_index(&self) -> usize {
        self.b
    }

    pub fn contrastive_scale(&self) -> f64 {
        self.params[self.a_raw].value.data()[0].exp()
    }

    pub fn contrastive_bias(&self) -> f64 {
        self.params[self.b].value.data()[0]
    }

    pub fn text_positional_table(&self) -> PositionalTable {
        PositionalTable {
            rows: self.params[self.text.pos].value.clone(),
            ctx_len: self.config.ctx_len,
        }
    }

    /// Replaces the text positional table, updating ctx_len. Used by the
    /// context-extension path; every other tensor is untouched.
    pub fn replace_text_positional_table(
        &mut self,
        table: PositionalTable,
    ) -> Result<(), EncoderError> {
        if table.rows.shape()[1] != self.config.embed_dim {
            return Err(EncoderError::Config(format!(
                "positional table width {} != embed_dim {}",
                table.rows.shape()[1],
                self.config.embed_dim
            )));
        }
        self.params[self.text.pos].value = table.rows;
        self.config.ctx_len = table.ctx_len;
        Ok(())
    }

    fn validate_sequence(&self, seq: &TokenSequence) -> Result<(), EncoderError> {
        let want = self.config.seq_len();
        if seq.ids.len() != want || seq.mask.len() != want {
            return Err(EncoderError::SequenceLength {
                got: seq.ids.len(),
                want,
            });
        }
        if let Some(&bad) = seq.ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(EncoderError::UnknownToken(bad, self.config.vocab_size));
        }
        if !seq.mask[want - 2] || !seq.mask[want - 1] {
            return Err(EncoderError::Config(
                "[CLS]/[UNC] positions must be attended".into(),
            ));
        }
        Ok(())
    }

    /// Convenience forward pass producing a plain embedding.
    pub fn encode_text(&self, seq: &TokenSequence) -> Result<ProbEmbedding, EncoderError> {
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, self);
        let (mu, lv) = text_forward(&mut tape, &bound, self, seq)?;
        embedding_from_vars(&tape, mu, lv)
    }

    pub fn encode_image(&self, features: &[f64]) -> Result<ProbEmbedding, EncoderError> {
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, self);
        let (mu, lv) = image_forward(&mut tape, &bound, self, features)?;
        embedding_from_vars(&tape, mu, lv)
    }
}

pub fn embedding_from_vars(tape: &Tape, mu: Var, lv: Var) -> Result<ProbEmbedding, EncoderError> {
    ProbEmbedding::new(tape.value(mu).data().to_vec(), tape.value(lv).data().to_vec())
        .map_err(|e| EncoderError::Output(e.to_string()))
}

/// Per-tape leaf registration of every model parameter, aligned by index
/// with `model.params`.
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    pub fn bind(tape: &mut Tape, model: &Model) -> Bound {
        Bound {
            vars: model
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone()))
                .collect(),
        }
    }
}

fn transformer_block(
    tape: &mut Tape,
    bound: &Bound,
    idx: &BlockIdx,
    x: Var,
    num_heads: usize,
    mask_bias: Option<Var>,
) -> Result<Var, TensorError> {
    let e = tape.value(x).shape()[1];
    let hd = e / num_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let v = |i: usize| bound.vars[i];

    let h = tape.layernorm(x, v(idx.ln1_g), v(idx.ln1_b), LN_EPS)?;
    let qkv = tape.matmul(h, v(idx.wqkv))?;
    let qkv = tape.add(qkv, v(idx.bqkv))?;
    let mut heads = Vec::with_capacity(num_heads);
    for k in 0..num_heads {
        let q = tape.slice_cols(qkv, k * hd, (k + 1) * hd)?;
        let key = tape.slice_cols(qkv, e + k * hd, e + (k + 1) * hd)?;
        let val = tape.slice_cols(qkv, 2 * e + k * hd, 2 * e + (k + 1) * hd)?;
        let kt = tape.transpose(key)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, scale);
        let scores = match mask_bias {
            Some(mb) => tape.add(scores, mb)?,
            None => scores,
        };
        let attn = tape.softmax_last(scores)?;
        heads.push(tape.matmul(attn, val)?);
    }
    let merged = tape.concat_cols(&heads)?;
    let o = tape.matmul(merged, v(idx.wo))?;
    let o = tape.add(o, v(idx.bo))?;
    let x = tape.add(x, o)?;

    let h2 = tape.layernorm(x, v(idx.ln2_g), v(idx.ln2_b), LN_EPS)?;
    let m = tape.matmul(h2, v(idx.w1))?;
    let m = tape.add(m, v(idx.b1))?;
    let m = tape.gelu(m);
    let m = tape.matmul(m, v(idx.w2))?;
    let m = tape.add(m, v(idx.b2))?;
    tape.add(x, m)
}

fn tower_forward(
    tape: &mut Tape,
    bound: &Bound,
    idx: &TowerIdx,
    mut x: Var,
    num_heads: usize,
    mask_bias: Option<Var>,
    mu_row: usize,
    unc_row: usize,
) -> Result<(Var, Var), TensorError> {
    let v = |i: usize| bound.vars[i];
    x = tape.add(x, v(idx.pos))?;
    for block in &idx.blocks {
        x = transformer_block(tape, bound, block, x, num_heads, mask_bias)?;
    }
    let x = tape.layernorm(x, v(idx.lnf_g), v(idx.lnf_b), LN_EPS)?;
    let cls = tape.slice_rows(x, mu_row, mu_row + 1)?;
    let unc = tape.slice_rows(x, unc_row, unc_row + 1)?;
    let mu = tape.matmul(cls, v(idx.w_mu))?;
    let mu = tape.add(mu, v(idx.b_mu))?;
    let lv = tape.matmul(unc, v(idx.w_unc))?;
    let lv = tape.add(lv, v(idx.b_unc))?;
    Ok((mu, lv))
}

/// Text forward pass on an existing tape. Returns ([1 x D] mean,
/// [1 x D] log-variance) variables.
pub fn text_forward(
    tape: &mut Tape,
    bound: &Bound,
    model: &Model,
    seq: &TokenSequence,
) -> Result<(Var, Var), EncoderError> {
    model.validate_sequence(seq)?;
    let l = model.config.seq_len();
    let x = tape.gather_rows(bound.vars[model.tok], &seq.ids)?;
    // key-side mask: masked positions cannot be attended by anyone
    let bias = Tensor::from_fn(&[l, l], |i| {
        let j = i % l;
        if seq.mask[j] {
            0.0
        } else {
            MASK_BIAS
        }
    });
    let mask_bias = tape.leaf(bias);
    let (mu, lv) = tower_forward(
        tape,
        bound,
        &model.text,
        x,
        model.config.num_heads,
        Some(mask_bias),
        l - 2,
        l - 1,
    )?;
    Ok((mu, lv))
}

/// Image forward pass on an existing tape.
pub fn image_forward(
    tape: &mut Tape,
    bound: &Bound,
    model: &Model,
    features: &[f64],
) -> Result<(Var, Var), EncoderError> {
    if features.len() != model.config.image_input_dim {
        return Err(EncoderError::FeatureLength {
            got: features.len(),
            want: model.config.image_input_dim,
        });
    }
    let v = |i: usize| bound.vars[i];
    match &model.image {
        ImageIdx::Mlp {
            w1,
            b1,
            w_mu,
            b_mu,
            w_unc,
            b_unc,
        } => {
            let f = tape.leaf(Tensor::from_vec(&[1, features.len()], features.to_vec())?);
            let h = tape.matmul(f, v(*w1))?;
            let h = tape.add(h, v(*b1))?;
            let h = tape.gelu(h);
            let mu = tape.matmul(h, v(*w_mu))?;
            let mu = tape.add(mu, v(*b_mu))?;
            let lv = tape.matmul(h, v(*w_unc))?;
            let lv = tape.add(lv, v(*b_unc))?;
            Ok((mu, lv))
        }
        ImageIdx::Patch {
            w_patch,
            b_patch,
            cls,
            unc,
            tower,
        } => {
            let ImageEncoderKind::PatchGrid { patches, patch_dim } = model.config.image_encoder
            else {
                unreachable!("patch indices imply patch config");
            };
            let toks = tape.leaf(Tensor::from_vec(&[patches, patch_dim], features.to_vec())?);
            let t = tape.matmul(toks, v(*w_patch))?;
            let t = tape.add(t, v(*b_patch))?;
            let x = tape.concat_rows(&[t, v(*cls), v(*unc)])?;
            let (mu, lv) = tower_forward(
                tape,
                bound,
                tower,
                x,
                model.config.num_heads,
                None,
                patches,
                patches + 1,
            )?;
            Ok((mu, lv))
        }
    }
}
