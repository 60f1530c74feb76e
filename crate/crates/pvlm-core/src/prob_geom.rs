//! Closed-form geometry of diagonal-Gaussian embeddings.
//!
//! An embedding is a Gaussian N(mu, diag(exp(log_var))). All quantities here
//! have closed forms; the differentiable versions used by the training
//! objective live in `objectives` and are built from tape primitives.

use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum GeomError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("invalid embedding: {0}")]
    Invalid(String),
    #[error("scale parameter must be positive, got {0}")]
    NonPositiveScale(f64),
}

/// A diagonal Gaussian in embedding space: mean plus per-dimension
/// log-variance.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbEmbedding {
    mu: Vec<f64>,
    log_var: Vec<f64>,
}

impl ProbEmbedding {
    pub fn new(mu: Vec<f64>, log_var: Vec<f64>) -> Result<Self, GeomError> {
        if mu.len() != log_var.len() {
            return Err(GeomError::DimMismatch(mu.len(), log_var.len()));
        }
        if mu.is_empty() {
            return Err(GeomError::Invalid("zero-dimensional embedding".into()));
        }
        for &v in &mu {
            if !v.is_finite() {
                return Err(GeomError::Invalid("non-finite mean".into()));
            }
        }
        for &v in &log_var {
            if !v.is_finite() || !v.exp().is_finite() || v.exp() <= 0.0 {
                return Err(GeomError::Invalid("invalid log-variance".into()));
            }
        }
        Ok(ProbEmbedding { mu, log_var })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    pub fn variance(&self) -> Vec<f64> {
        self.log_var.iter().map(|v| v.exp()).collect()
    }
}

fn check_dims(a: &ProbEmbedding, b: &ProbEmbedding) -> Result<(), GeomError> {
    if a.dim() != b.dim() {
        return Err(GeomError::DimMismatch(a.dim(), b.dim()));
    }
    Ok(())
}

/// Closed-form sampled distance: the expected squared Euclidean distance
/// between independent samples of the two Gaussians,
/// ||mu1 - mu2||^2 + sum_d (var1_d + var2_d).
pub fn csd(z1: &ProbEmbedding, z2: &ProbEmbedding) -> Result<f64, GeomError> {
    check_dims(z1, z2)?;
    let mut acc = 0.0;
    for d in 0..z1.dim() {
        let dm = z1.mu[d] - z2.mu[d];
        acc += dm * dm + z1.log_var[d].exp() + z2.log_var[d].exp();
    }
    Ok(acc)
}

/// Match logit -a * csd + b; the pair-match probability is sigmoid of this.
pub fn match_logit(z1: &ProbEmbedding, z2: &ProbEmbedding, a: f64, b: f64) -> Result<f64, GeomError> {
    if a <= 0.0 {
        return Err(GeomError::NonPositiveScale(a));
    }
    Ok(-a * csd(z1, z2)? + b)
}

/// Gaussian cross-entropy term E_{z~inner}[log N(z; mu_outer, var_outer)].
/// Higher means `inner` sits more tightly inside `outer`. Asymmetric.
pub fn inclusion_score(inner: &ProbEmbedding, outer: &ProbEmbedding) -> Result<f64, GeomError> {
    check_dims(inner, outer)?;
    const LOG_2PI: f64 = 1.8378770664093453;
    let mut acc = 0.0;
    for d in 0..inner.dim() {
        let var_out = outer.log_var[d].exp();
        let dm = inner.mu[d] - outer.mu[d];
        acc += LOG_2PI + outer.log_var[d] + (inner.log_var[d].exp() + dm * dm) / var_out;
    }
    Ok(-0.5 * acc)
}

/// KL divergence to the standard normal prior:
/// 1/2 sum_d (mu_d^2 + var_d - log var_d - 1).
pub fn kl_to_standard(z: &ProbEmbedding) -> f64 {
    0.5 * z
        .mu
        .iter()
        .zip(&z.log_var)
        .map(|(&m, &lv)| m * m + lv.exp() - lv - 1.0)
        .sum::<f64>()
}

/// Scalar uncertainty: the trace of the covariance.
pub fn uncertainty(z: &ProbEmbedding) -> f64 {
    z.log_var.iter().map(|v| v.exp()).sum()
}
