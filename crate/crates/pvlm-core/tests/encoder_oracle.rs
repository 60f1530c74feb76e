//! Golden-forward oracle: an independent, loop-based reimplementation of
//! both encoder forward passes, checked against the library's tape-based
//! implementation on fixed seeds and inputs.

use pvlm_core::encoders::{ImageEncoderKind, TokenSequence};
use pvlm_core::{EncoderConfig, Model};

type Mat = Vec<Vec<f64>>;

fn param(model: &Model, name: &str) -> Mat {
    let idx = model
        .param_index(name)
        .unwrap_or_else(|| panic!("missing param {name}"));
    let t = &model.param(idx).value;
    match t.shape() {
        [r, c] => (0..*r)
            .map(|i| t.data()[i * c..(i + 1) * c].to_vec())
            .collect(),
        [n] => vec![t.data()[..*n].to_vec()],
        other => panic!("unexpected shape {other:?} for {name}"),
    }
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a[i][l] * b[l][j];
            }
            out[i][j] = acc;
        }
    }
    out
}

fn add_row(a: &Mat, row: &[f64]) -> Mat {
    a.iter()
        .map(|r| r.iter().zip(row).map(|(x, y)| x + y).collect())
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x + y).collect())
        .collect()
}

fn layernorm(x: &Mat, g: &[f64], b: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * inv * g[j] + b[j])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// One pre-LN transformer block with multi-head attention over column
/// slices of the fused qkv projection, optionally adding a key-side mask
/// bias before softmax.
fn block(model: &Model, prefix: &str, x: &Mat, heads: usize, mask: Option<&[bool]>) -> Mat {
    let eps = 1e-5;
    let e = x[0].len();
    let hd = e / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let ln1g = param(model, &format!("{prefix}.ln1.g"));
    let ln1b = param(model, &format!("{prefix}.ln1.b"));
    let h = layernorm(x, &ln1g[0], &ln1b[0], eps);
    let qkv = add_row(
        &matmul(&h, &param(model, &format!("{prefix}.attn.wqkv"))),
        &param(model, &format!("{prefix}.attn.bqkv"))[0],
    );
    let l = x.len();
    let mut merged = vec![vec![0.0; e]; l];
    for k in 0..heads {
        for i in 0..l {
            let mut scores = vec![0.0; l];
            for j in 0..l {
                let mut dot = 0.0;
                for d in 0..hd {
                    dot += qkv[i][k * hd + d] * qkv[j][e + k * hd + d];
                }
                scores[j] = dot * scale
                    + match mask {
                        Some(m) if !m[j] => -1e30,
                        _ => 0.0,
                    };
            }
            let attn = softmax(&scores);
            for d in 0..hd {
                let mut acc = 0.0;
                for j in 0..l {
                    acc += attn[j] * qkv[j][2 * e + k * hd + d];
                }
                merged[i][k * hd + d] = acc;
            }
        }
    }
    let o = add_row(
        &matmul(&merged, &param(model, &format!("{prefix}.attn.wo"))),
        &param(model, &format!("{prefix}.attn.bo"))[0],
    );
    let x = add(x, &o);

    let ln2g = param(model, &format!("{prefix}.ln2.g"));
    let ln2b = param(model, &format!("{prefix}.ln2.b"));
    let h2 = layernorm(&x, &ln2g[0], &ln2b[0], eps);
    let m: Mat = add_row(
        &matmul(&h2, &param(model, &format!("{prefix}.mlp.w1"))),
        &param(model, &format!("{prefix}.mlp.b1"))[0],
    )
    .iter()
    .map(|r| r.iter().map(|&v| gelu(v)).collect())
    .collect();
    let m = add_row(
        &matmul(&m, &param(model, &format!("{prefix}.mlp.w2"))),
        &param(model, &format!("{prefix}.mlp.b2"))[0],
    );
    add(&x, &m)
}

fn tower(
    model: &Model,
    prefix: &str,
    mut x: Mat,
    heads: usize,
    layers: usize,
    mask: Option<&[bool]>,
    mu_row: usize,
    unc_row: usize,
) -> (Vec<f64>, Vec<f64>) {
    x = add(&x, &param(model, &format!("{prefix}.pos")));
    for i in 0..layers {
        x = block(model, &format!("{prefix}.l{i}"), &x, heads, mask);
    }
    let g = param(model, &format!("{prefix}.lnf.g"));
    let b = param(model, &format!("{prefix}.lnf.b"));
    let x = layernorm(&x, &g[0], &b[0], 1e-5);
    let mu = add_row(
        &matmul(
            &vec![x[mu_row].clone()],
            &param(model, &format!("{prefix}.head.w_mu")),
        ),
        &param(model, &format!("{prefix}.head.b_mu"))[0],
    );
    let lv = add_row(
        &matmul(
            &vec![x[unc_row].clone()],
            &param(model, &format!("{prefix}.head.w_unc")),
        ),
        &param(model, &format!("{prefix}.head.b_unc"))[0],
    );
    (mu[0].clone(), lv[0].clone())
}

fn text_oracle(model: &Model, seq: &TokenSequence) -> (Vec<f64>, Vec<f64>) {
    let tok = param(model, "txt.tok");
    let x: Mat = seq.ids.iter().map(|&id| tok[id].clone()).collect();
    let l = seq.ids.len();
    tower(
        model,
        "txt",
        x,
        model.config.num_heads,
        model.config.num_layers,
        Some(&seq.mask),
        l - 2,
        l - 1,
    )
}

fn image_oracle_mlp(model: &Model, features: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let h = add_row(
        &matmul(&vec![features.to_vec()], &param(model, "img.mlp.w1")),
        &param(model, "img.mlp.b1")[0],
    );
    let h: Mat = vec![h[0].iter().map(|&v| gelu(v)).collect()];
    let mu = add_row(
        &matmul(&h, &param(model, "img.head.w_mu")),
        &param(model, "img.head.b_mu")[0],
    );
    let lv = add_row(
        &matmul(&h, &param(model, "img.head.w_unc")),
        &param(model, "img.head.b_unc")[0],
    );
    (mu[0].clone(), lv[0].clone())
}

fn image_oracle_patch(model: &Model, features: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let ImageEncoderKind::PatchGrid { patches, patch_dim } = model.config.image_encoder else {
        panic!("expected patch config");
    };
    let toks: Mat = (0..patches)
        .map(|p| features[p * patch_dim..(p + 1) * patch_dim].to_vec())
        .collect();
    let t = add_row(
        &matmul(&toks, &param(model, "img.patch.w")),
        &param(model, "img.patch.b")[0],
    );
    let mut x = t;
    x.push(param(model, "img.cls")[0].clone());
    x.push(param(model, "img.unc")[0].clone());
    tower(
        model,
        "img",
        x,
        model.config.num_heads,
        model.config.num_layers,
        None,
        patches,
        patches + 1,
    )
}

fn assert_close(got: &[f64], want: &[f64], tol: f64, what: &str) {
    assert_eq!(got.len(), want.len(), "{what} length");
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert!(
            (g - w).abs() <= tol * (1.0 + w.abs()),
            "{what}[{i}]: got {g}, want {w}"
        );
    }
}

fn config() -> EncoderConfig {
    EncoderConfig {
        vocab_size: 24,
        ctx_len: 8,
        embed_dim: 16,
        num_layers: 2,
        num_heads: 4,
        out_dim: 6,
        image_input_dim: 20,
        mlp_hidden: 28,
        image_encoder: ImageEncoderKind::Mlp { hidden: 18 },
    }
}

fn sequence(real: &[usize], ctx: usize) -> TokenSequence {
    let mut ids = vec![0usize; ctx + 2];
    let mut mask = vec![false; ctx + 2];
    for (i, &t) in real.iter().enumerate() {
        ids[i] = t;
        mask[i] = true;
    }
    ids[ctx] = 2;
    ids[ctx + 1] = 3;
    mask[ctx] = true;
    mask[ctx + 1] = true;
    TokenSequence { ids, mask }
}

#[test]
fn text_forward_matches_independent_oracle() {
    for seed in [1u64, 2, 3] {
        let model = Model::init(config(), seed, 10.0, -10.0).unwrap();
        for toks in [vec![4usize, 9, 17], vec![5; 8], vec![23]] {
            let seq = sequence(&toks, 8);
            let got = model.encode_text(&seq).unwrap();
            let (mu, lv) = text_oracle(&model, &seq);
            assert_close(got.mu(), &mu, 1e-12, "mu");
            assert_close(got.log_var(), &lv, 1e-12, "log_var");
        }
    }
}

#[test]
fn mlp_image_forward_matches_independent_oracle() {
    for seed in [4u64, 5] {
        let model = Model::init(config(), seed, 10.0, -10.0).unwrap();
        let features: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
        let got = model.encode_image(&features).unwrap();
        let (mu, lv) = image_oracle_mlp(&model, &features);
        assert_close(got.mu(), &mu, 1e-12, "mu");
        assert_close(got.log_var(), &lv, 1e-12, "log_var");
    }
}

#[test]
fn patch_image_forward_matches_independent_oracle() {
    let cfg = EncoderConfig {
        image_input_dim: 24,
        image_encoder: ImageEncoderKind::PatchGrid {
            patches: 6,
            patch_dim: 4,
        },
        ..config()
    };
    for seed in [6u64, 7] {
        let model = Model::init(cfg.clone(), seed, 10.0, -10.0).unwrap();
        let features: Vec<f64> = (0..24).map(|i| (i as f64 * 0.21).cos()).collect();
        let got = model.encode_image(&features).unwrap();
        let (mu, lv) = image_oracle_patch(&model, &features);
        assert_close(got.mu(), &mu, 1e-12, "mu");
        assert_close(got.log_var(), &lv, 1e-12, "log_var");
    }
}
