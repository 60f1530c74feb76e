//! Context extension: stretching a positional table to a longer context.
//!
//! The first `keep_prefix` rows and the two terminal special-token rows
//! ([CLS]/[UNC]) are copied bit-exactly; the remaining source rows are
//! linearly resampled onto the longer index range with pinned endpoints.

use thiserror::Error;

use crate::encoders::PositionalTable;
use crate::tensor::Tensor;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum ExtensionError {
    #[error("invalid extension spec: {0}")]
    InvalidSpec(String),
    #[error("table has {got} rows but spec expects source_ctx + 2 = {want}")]
    RowCount { got: usize, want: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExtensionSpec {
    pub source_ctx: usize,
    pub target_ctx: usize,
    pub keep_prefix: usize,
}

impl ExtensionSpec {
    pub fn validate(&self) -> Result<(), ExtensionError> {
        if self.source_ctx < self.keep_prefix + 1 {
            return Err(ExtensionError::InvalidSpec(format!(
                "source_ctx {} must be >= keep_prefix {} + 1",
                self.source_ctx, self.keep_prefix
            )));
        }
        if self.target_ctx < self.source_ctx {
            return Err(ExtensionError::InvalidSpec(format!(
                "target_ctx {} must be >= source_ctx {} (shrinking is not supported)",
                self.target_ctx, self.source_ctx
            )));
        }
        Ok(())
    }
}

/// Stretches a (S+2) x E positional table to (T+2) x E.
///
/// With K = keep_prefix: rows [0, K) and the terminal two rows are copied
/// verbatim; row p in [K, T-1] is the linear interpolation of the source at
/// coordinate s = K + (p-K) * (S-1-K) / (T-1-K).
pub fn extend_positional(
    table: &PositionalTable,
    spec: &ExtensionSpec,
) -> Result<PositionalTable, ExtensionError> {
    spec.validate()?;
    let rows = table.rows();
    let s_ctx = spec.source_ctx;
    let t_ctx = spec.target_ctx;
    let k = spec.keep_prefix;
    if table.ctx_len() != s_ctx || rows.shape()[0] != s_ctx + 2 {
        return Err(ExtensionError::RowCount {
            got: rows.shape()[0],
            want: s_ctx + 2,
        });
    }
    let e = rows.shape()[1];
    let src = rows.data();
    let mut out = vec![0.0; (t_ctx + 2) * e];

    let copy_row = |out: &mut [f64], dst: usize, src_row: usize| {
        out[dst * e..(dst + 1) * e].copy_from_slice(&src[src_row * e..(src_row + 1) * e]);
    };

    for p in 0..k {
        copy_row(&mut out, p, p);
    }
    copy_row(&mut out, t_ctx, s_ctx); // [CLS]
    copy_row(&mut out, t_ctx + 1, s_ctx + 1); // [UNC]

    if t_ctx > k {
        let span_src = (s_ctx - 1 - k) as f64;
        let span_dst = (t_ctx - 1 - k) as f64;
        for p in k..t_ctx {
            if span_dst == 0.0 {
                // T == K + 1 forces S == K + 1: a single free row, copied
                copy_row(&mut out, p, k);
                continue;
            }
            let s = k as f64 + (p - k) as f64 * span_src / span_dst;
            let lo = s.floor() as usize;
            let f = s - s.floor();
            if f == 0.0 {
                copy_row(&mut out, p, lo);
            } else {
                for j in 0..e {
                    out[p * e + j] = (1.0 - f) * src[lo * e + j] + f * src[(lo + 1) * e + j];
                }
            }
        }
    }

    let rows = Tensor::from_vec(&[t_ctx + 2, e], out)
        .expect("interpolated rows are convex combinations of finite inputs");
    Ok(PositionalTable::new(rows, t_ctx).expect("row count matches target ctx"))
}
