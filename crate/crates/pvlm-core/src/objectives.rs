//! The fine-tuning objective: probabilistic pairwise contrastive loss,
//! inclusion loss, and variational information bottleneck loss, combined
//! with configurable weights.
//!
//! All losses are built from tape primitives over per-sample embedding
//! variables, so gradients flow back through the encoders for free.

use thiserror::Error;

use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

const LOG_2PI: f64 = 1.8378770664093453;

#[derive(Error, Debug)]
pub enum ObjectiveError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("batch size mismatch: {0} images vs {1} texts")]
    BatchMismatch(usize, usize),
    #[error("batch size {0} too small (need >= 2)")]
    BatchTooSmall(usize),
    #[error("empty embedding list")]
    Empty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InclusionDirection {
    /// Image distributions are pulled inside their matched text distribution.
    ImageInText,
    TextInImage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub a_init: f64,
    pub b_init: f64,
    pub lambda_incl: f64,
    pub lambda_vib: f64,
    pub inclusion_direction: InclusionDirection,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            a_init: 10.0,
            b_init: -10.0,
            lambda_incl: 1e-2,
            lambda_vib: 1e-4,
            inclusion_direction: InclusionDirection::ImageInText,
        }
    }
}

/// A diagonal-Gaussian embedding on a tape: [1 x D] mean and log-variance.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingVars {
    pub mu: Var,
    pub log_var: Var,
}

/// Registers plain embeddings as tape leaves (handy for tests and for the
/// two-stage batched backward pass in training).
pub fn embed_leaves(tape: &mut Tape, zs: &[crate::prob_geom::ProbEmbedding]) -> Vec<EmbeddingVars> {
    zs.iter()
        .map(|z| EmbeddingVars {
            mu: tape.leaf(Tensor::raw(vec![1, z.dim()], z.mu().to_vec())),
            log_var: tape.leaf(Tensor::raw(vec![1, z.dim()], z.log_var().to_vec())),
        })
        .collect()
}

struct Stacked {
    mu: Var,      // [B x D]
    log_var: Var, // [B x D]
}

fn stack(tape: &mut Tape, zs: &[EmbeddingVars]) -> Result<Stacked, ObjectiveError> {
    let mus: Vec<Var> = zs.iter().map(|z| z.mu).collect();
    let lvs: Vec<Var> = zs.iter().map(|z| z.log_var).collect();
    Ok(Stacked {
        mu: tape.concat_rows(&mus)?,
        log_var: tape.concat_rows(&lvs)?,
    })
}

/// Row sums of a matrix as a [n] vector (per-sample reductions).
fn row_sums(tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
    let t = tape.transpose(x)?;
    let ones = tape.leaf(Tensor::ones(&[1, tape.value(t).shape()[0]]));
    let s = tape.matmul(ones, t)?; // [1 x n]
    let n = tape.value(s).shape()[1];
    tape.reshape(s, &[n])
}

/// All-pairs closed-form sampled distance matrix: csd[i][j] between image i
/// and text j, as a [B x B] variable.
fn csd_matrix(tape: &mut Tape, images: &Stacked, texts: &Stacked) -> Result<Var, TensorError> {
    let mt = tape.transpose(texts.mu)?;
    let cross = tape.matmul(images.mu, mt)?;
    let cross = tape.scale(cross, -2.0);

    let img_sq = tape.mul(images.mu, images.mu)?;
    let txt_sq = tape.mul(texts.mu, texts.mu)?;
    let img_var = tape.exp(images.log_var)?;
    let txt_var = tape.exp(texts.log_var)?;
    let img_norm = row_sums(tape, img_sq)?;
    let txt_norm = row_sums(tape, txt_sq)?;
    let img_trace = row_sums(tape, img_var)?;
    let txt_trace = row_sums(tape, txt_var)?;

    // text terms broadcast along rows; image terms along columns
    let txt_row = tape.add(txt_norm, txt_trace)?;
    let img_row = tape.add(img_norm, img_trace)?;
    let with_txt = tape.add(cross, txt_row)?;
    let t = tape.transpose(with_txt)?;
    let t = tape.add(t, img_row)?;
    tape.transpose(t)
}

/// Sigmoid pairwise contrastive loss:
/// L = -(1/B^2) sum_ij log sigmoid(m_ij * (-a * csd_ij + b)),
/// with m_ij = +1 on the diagonal and -1 off it; a = exp(a_raw).
pub fn pairwise_contrastive(
    tape: &mut Tape,
    images: &[EmbeddingVars],
    texts: &[EmbeddingVars],
    a_raw: Var,
    b: Var,
) -> Result<Var, ObjectiveError> {
    let bsz = images.len();
    if bsz != texts.len() {
        return Err(ObjectiveError::BatchMismatch(bsz, texts.len()));
    }
    if bsz < 2 {
        return Err(ObjectiveError::BatchTooSmall(bsz));
    }
    let imgs = stack(tape, images)?;
    let txts = stack(tape, texts)?;
    let csd = csd_matrix(tape, &imgs, &txts)?;
    let a = tape.exp(a_raw)?;
    let scaled = tape.mul(csd, a)?;
    let neg = tape.scale(scaled, -1.0);
    let logits = tape.add(neg, b)?;
    let sign = tape.leaf(Tensor::from_fn(&[bsz, bsz], |i| {
        if i / bsz == i % bsz {
            1.0
        } else {
            -1.0
        }
    }));
    let signed = tape.mul(sign, logits)?;
    let logp = tape.log_sigmoid(signed);
    let mean = tape.mean(logp);
    Ok(tape.scale(mean, -1.0))
}

/// Inclusion loss over matched pairs: the negated mean (per pair and per
/// dimension) Gaussian cross-entropy of the inner distribution under the
/// outer one.
pub fn inclusion_loss(
    tape: &mut Tape,
    images: &[EmbeddingVars],
    texts: &[EmbeddingVars],
    direction: InclusionDirection,
) -> Result<Var, ObjectiveError> {
    if images.len() != texts.len() {
        return Err(ObjectiveError::BatchMismatch(images.len(), texts.len()));
    }
    if images.is_empty() {
        return Err(ObjectiveError::Empty);
    }
    let (inner, outer) = match direction {
        InclusionDirection::ImageInText => (stack(tape, images)?, stack(tape, texts)?),
        InclusionDirection::TextInImage => (stack(tape, texts)?, stack(tape, images)?),
    };
    let var_in = tape.exp(inner.log_var)?;
    let neg_lv_out = tape.scale(outer.log_var, -1.0);
    let inv_var_out = tape.exp(neg_lv_out)?;
    let dm = tape.sub(inner.mu, outer.mu)?;
    let dm2 = tape.mul(dm, dm)?;
    let num = tape.add(var_in, dm2)?;
    let ratio = tape.mul(num, inv_var_out)?;
    let t = tape.add(outer.log_var, ratio)?;
    let t = tape.add_scalar(t, LOG_2PI);
    let mean = tape.mean(t);
    Ok(tape.scale(mean, 0.5))
}

/// Variational information bottleneck loss: mean over embeddings of
/// KL(N(mu, var) || N(0, I)) / D.
pub fn vib_loss(tape: &mut Tape, embeddings: &[EmbeddingVars]) -> Result<Var, ObjectiveError> {
    if embeddings.is_empty() {
        return Err(ObjectiveError::Empty);
    }
    let z = stack(tape, embeddings)?;
    let mu2 = tape.mul(z.mu, z.mu)?;
    let var = tape.exp(z.log_var)?;
    let t = tape.add(mu2, var)?;
    let t = tape.sub(t, z.log_var)?;
    let t = tape.add_scalar(t, -1.0);
    let mean = tape.mean(t);
    Ok(tape.scale(mean, 0.5))
}

/// The combined objective and its components.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub contrastive: Var,
    pub inclusion: Var,
    pub vib: Var,
}

pub fn total_loss(
    tape: &mut Tape,
    images: &[EmbeddingVars],
    texts: &[EmbeddingVars],
    a_raw: Var,
    b: Var,
    cfg: &LossConfig,
) -> Result<LossParts, ObjectiveError> {
    let contrastive = pairwise_contrastive(tape, images, texts, a_raw, b)?;
    let inclusion = inclusion_loss(tape, images, texts, cfg.inclusion_direction)?;
    let pooled: Vec<EmbeddingVars> = images.iter().chain(texts).copied().collect();
    let vib = vib_loss(tape, &pooled)?;
    let wi = tape.scale(inclusion, cfg.lambda_incl);
    let wv = tape.scale(vib, cfg.lambda_vib);
    let total = tape.add(contrastive, wi)?;
    let total = tape.add(total, wv)?;
    Ok(LossParts {
        total,
        contrastive,
        inclusion,
        vib,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prob_geom::{self, ProbEmbedding};
    use crate::tensor::softplus;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_embedding(rng: &mut ChaCha8Rng, d: usize) -> ProbEmbedding {
        let mu = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lv = (0..d).map(|_| rng.gen_range(-3.0..0.0)).collect();
        ProbEmbedding::new(mu, lv).unwrap()
    }

    fn contrastive_value(
        images: &[ProbEmbedding],
        texts: &[ProbEmbedding],
        a_raw: f64,
        b: f64,
    ) -> f64 {
        let mut tape = Tape::new();
        let iv = embed_leaves(&mut tape, images);
        let tv = embed_leaves(&mut tape, texts);
        let ar = tape.leaf(Tensor::scalar(a_raw));
        let bv = tape.leaf(Tensor::scalar(b));
        let l = pairwise_contrastive(&mut tape, &iv, &tv, ar, bv).unwrap();
        tape.value(l).item().unwrap()
    }

    /// Independent scalar double-loop reimplementation.
    fn contrastive_oracle(
        images: &[ProbEmbedding],
        texts: &[ProbEmbedding],
        a: f64,
        b: f64,
    ) -> f64 {
        let bsz = images.len();
        let mut acc = 0.0;
        for i in 0..bsz {
            for j in 0..bsz {
                let logit = -a * prob_geom::csd(&images[i], &texts[j]).unwrap() + b;
                let m = if i == j { 1.0 } else { -1.0 };
                acc += softplus(-m * logit); // -log sigmoid(m * logit)
            }
        }
        acc / (bsz * bsz) as f64
    }

    #[test]
    fn degenerate_scale_gives_log_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let images: Vec<_> = (0..3).map(|_| random_embedding(&mut rng, 4)).collect();
        let texts: Vec<_> = (0..3).map(|_| random_embedding(&mut rng, 4)).collect();
        let l = contrastive_value(&images, &texts, (1e-9f64).ln(), 0.0);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-6, "l={l}");
    }

    #[test]
    fn two_pair_closed_form() {
        // diagonal csd = 0, off-diagonal csd = 10 (zero-variance embeddings)
        let p0 = ProbEmbedding::new(vec![0.0], vec![-50.0]).unwrap();
        let p1 = ProbEmbedding::new(vec![10.0f64.sqrt()], vec![-50.0]).unwrap();
        let images = vec![p0.clone(), p1.clone()];
        let texts = vec![p0, p1];
        let l = contrastive_value(&images, &texts, 0.0, 0.0); // a = 1
        let want = (2.0 * std::f64::consts::LN_2 + 2.0 * softplus(10.0_f64 * -1.0 + 10.0 - 10.0))
            / 4.0
            - 0.0;
        // direct: (2 * ln 2 + 2 * (-ln sigmoid(10))) / 4
        let want2 = (2.0 * std::f64::consts::LN_2 + 2.0 * softplus(-10.0)) / 4.0;
        assert!((want2 - 0.34660).abs() < 1e-4);
        assert!((l - want2).abs() < 1e-9, "l={l} want={want2} ({want})");
    }

    #[test]
    fn matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let images: Vec<_> = (0..4).map(|_| random_embedding(&mut rng, 6)).collect();
        let texts: Vec<_> = (0..4).map(|_| random_embedding(&mut rng, 6)).collect();
        let a_raw = 0.7;
        let b = -1.3;
        let got = contrastive_value(&images, &texts, a_raw, b);
        let want = contrastive_oracle(&images, &texts, a_raw.exp(), b);
        assert!((got - want).abs() < 1e-12, "got={got} want={want}");
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let images: Vec<_> = (0..5).map(|_| random_embedding(&mut rng, 4)).collect();
        let texts: Vec<_> = (0..5).map(|_| random_embedding(&mut rng, 4)).collect();
        let l = contrastive_value(&images, &texts, 1.0, -2.0);
        let perm = [3usize, 0, 4, 1, 2];
        let pi: Vec<_> = perm.iter().map(|&i| images[i].clone()).collect();
        let pt: Vec<_> = perm.iter().map(|&i| texts[i].clone()).collect();
        let lp = contrastive_value(&pi, &pt, 1.0, -2.0);
        assert!((l - lp).abs() < 1e-12);
    }

    #[test]
    fn separated_batch_loss_vanishes_at_large_scale() {
        let p0 = ProbEmbedding::new(vec![0.0], vec![-50.0]).unwrap();
        let p1 = ProbEmbedding::new(vec![10.0f64.sqrt()], vec![-50.0]).unwrap();
        let images = vec![p0.clone(), p1.clone()];
        let texts = vec![p0, p1];
        let small = contrastive_value(&images, &texts, 50.0f64.ln(), 5.0);
        assert!(small < 0.01, "loss={small}");
        let at_one = contrastive_value(&images, &texts, 0.0, 5.0);
        assert!(small < at_one);
    }

    #[test]
    fn batch_validation() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let one = embed_leaves(&mut tape, &[random_embedding(&mut rng, 4)]);
        let two = embed_leaves(
            &mut tape,
            &[random_embedding(&mut rng, 4), random_embedding(&mut rng, 4)],
        );
        let a = tape.leaf(Tensor::scalar(0.0));
        let b = tape.leaf(Tensor::scalar(0.0));
        assert!(matches!(
            pairwise_contrastive(&mut tape, &one, &two, a, b),
            Err(ObjectiveError::BatchMismatch(1, 2))
        ));
        assert!(matches!(
            pairwise_contrastive(&mut tape, &one, &one.clone(), a, b),
            Err(ObjectiveError::BatchTooSmall(1))
        ));
    }

    #[test]
    fn inclusion_identical_standard_normals() {
        let z = ProbEmbedding::new(vec![0.0], vec![0.0]).unwrap();
        let batch = vec![z.clone(), z.clone(), z];
        let mut tape = Tape::new();
        let iv = embed_leaves(&mut tape, &batch);
        let tv = embed_leaves(&mut tape, &batch);
        let l = inclusion_loss(&mut tape, &iv, &tv, InclusionDirection::ImageInText).unwrap();
        let want = 0.5 * ((2.0 * std::f64::consts::PI).ln() + 1.0);
        assert!((tape.value(l).item().unwrap() - want).abs() < 1e-10);
        assert!((want - 1.41894).abs() < 1e-5);
    }

    #[test]
    fn inclusion_direction_matters_and_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let images: Vec<_> = (0..3).map(|_| random_embedding(&mut rng, 4)).collect();
        let texts: Vec<_> = (0..3).map(|_| random_embedding(&mut rng, 4)).collect();
        let eval = |dir| {
            let mut tape = Tape::new();
            let iv = embed_leaves(&mut tape, &images);
            let tv = embed_leaves(&mut tape, &texts);
            let l = inclusion_loss(&mut tape, &iv, &tv, dir).unwrap();
            tape.value(l).item().unwrap()
        };
        let i_in_t = eval(InclusionDirection::ImageInText);
        let t_in_i = eval(InclusionDirection::TextInImage);
        assert!((i_in_t - t_in_i).abs() > 1e-9);

        // loop oracle: -(1 / (B * D)) sum_i inclusion_score(inner_i, outer_i)
        let d = 4.0;
        let want = -(0..3)
            .map(|i| prob_geom::inclusion_score(&images[i], &texts[i]).unwrap())
            .sum::<f64>()
            / (3.0 * d);
        assert!((i_in_t - want).abs() < 1e-12);
    }

    #[test]
    fn vib_examples_and_loop_oracle() {
        let std_normals = vec![ProbEmbedding::new(vec![0.0; 4], vec![0.0; 4]).unwrap(); 3];
        let mut tape = Tape::new();
        let zv = embed_leaves(&mut tape, &std_normals);
        let l = vib_loss(&mut tape, &zv).unwrap();
        assert!(tape.value(l).item().unwrap().abs() < 1e-15);

        let single = vec![ProbEmbedding::new(vec![1.0], vec![0.0]).unwrap()];
        let mut tape = Tape::new();
        let zv = embed_leaves(&mut tape, &single);
        let l = vib_loss(&mut tape, &zv).unwrap();
        assert!((tape.value(l).item().unwrap() - 0.5).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let zs: Vec<_> = (0..5).map(|_| random_embedding(&mut rng, 8)).collect();
        let mut tape = Tape::new();
        let zv = embed_leaves(&mut tape, &zs);
        let l = vib_loss(&mut tape, &zv).unwrap();
        let want = zs.iter().map(|z| prob_geom::kl_to_standard(z) / 8.0).sum::<f64>() / 5.0;
        assert!((tape.value(l).item().unwrap() - want).abs() < 1e-12);

        let mut tape = Tape::new();
        assert!(matches!(
            vib_loss(&mut tape, &[]),
            Err(ObjectiveError::Empty)
        ));
    }

    #[test]
    fn total_equals_contrastive_at_zero_weights_and_sums_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let images: Vec<_> = (0..3).map(|_| random_embedding(&mut rng, 4)).collect();
        let texts: Vec<_> = (0..3).map(|_| random_embedding(&mut rng, 4)).collect();
        let run = |cfg: &LossConfig| {
            let mut tape = Tape::new();
            let iv = embed_leaves(&mut tape, &images);
            let tv = embed_leaves(&mut tape, &texts);
            let a = tape.leaf(Tensor::scalar(0.5));
            let b = tape.leaf(Tensor::scalar(-1.0));
            let parts = total_loss(&mut tape, &iv, &tv, a, b, cfg).unwrap();
            (
                tape.value(parts.total).item().unwrap(),
                tape.value(parts.contrastive).item().unwrap(),
                tape.value(parts.inclusion).item().unwrap(),
                tape.value(parts.vib).item().unwrap(),
            )
        };
        let zero = LossConfig {
            lambda_incl: 0.0,
            lambda_vib: 0.0,
            ..LossConfig::default()
        };
        let (total, contrastive, _, _) = run(&zero);
        assert_eq!(total, contrastive);

        let cfg = LossConfig {
            lambda_incl: 0.3,
            lambda_vib: 0.07,
            ..LossConfig::default()
        };
        let (total, c, i, v) = run(&cfg);
        assert!((total - (c + 0.3 * i + 0.07 * v)).abs() < 1e-14);
    }

    #[test]
    fn descent_under_small_gradient_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let images: Vec<_> = (0..4).map(|_| random_embedding(&mut rng, 6)).collect();
        let texts: Vec<_> = (0..4).map(|_| random_embedding(&mut rng, 6)).collect();
        let cfg = LossConfig::default();

        let eval = |im: &[ProbEmbedding], tx: &[ProbEmbedding]| -> (f64, Vec<Tensor>) {
            let mut tape = Tape::new();
            let iv = embed_leaves(&mut tape, im);
            let tv = embed_leaves(&mut tape, tx);
            let a = tape.leaf(Tensor::scalar(1.0f64.ln()));
            let b = tape.leaf(Tensor::scalar(0.0));
            let parts = total_loss(&mut tape, &iv, &tv, a, b, &cfg).unwrap();
            let mut wrt = Vec::new();
            for z in iv.iter().chain(&tv) {
                wrt.push(z.mu);
                wrt.push(z.log_var);
            }
            let grads = tape.grad(parts.total, &wrt).unwrap();
            (tape.value(parts.total).item().unwrap(), grads)
        };

        let (l0, grads) = eval(&images, &texts);
        let mut step = 1e-3;
        let mut decreased = false;
        for _ in 0..10 {
            let apply = |zs: &[ProbEmbedding], offset: usize| -> Vec<ProbEmbedding> {
                zs.iter()
                    .enumerate()
                    .map(|(i, z)| {
                        let gm = &grads[(offset + i) * 2];
                        let gl = &grads[(offset + i) * 2 + 1];
                        let mu = z
                            .mu()
                            .iter()
                            .zip(gm.data())
                            .map(|(&m, &g)| m - step * g)
                            .collect();
                        let lv = z
                            .log_var()
                            .iter()
                            .zip(gl.data())
                            .map(|(&l, &g)| l - step * g)
                            .collect();
                        ProbEmbedding::new(mu, lv).unwrap()
                    })
                    .collect()
            };
            let ni = apply(&images, 0);
            let nt = apply(&texts, 4);
            let (l1, _) = eval(&ni, &nt);
            if l1 < l0 {
                decreased = true;
                break;
            }
            step /= 2.0;
        }
        assert!(decreased, "loss did not decrease within 10 halvings");
    }
}
