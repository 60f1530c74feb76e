//! Retrieval metrics (recall at K in both directions, mAP at R), zero-shot
//! classification, and uncertainty statistics.
//!
//! All metrics are deterministic: ranking ties are broken by lower gallery
//! index. Scores are negative closed-form sampled distances, so any metric
//! that depends only on ranks is unaffected by the contrastive scale and
//! bias.

use thiserror::Error;

use crate::prob_geom::{self, GeomError, ProbEmbedding};

#[derive(Error, Debug)]
pub enum EvalError {
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("score matrix is {q}x{g} but relevance is {rq}x{rg}")]
    RelevanceShape {
        q: usize,
        g: usize,
        rq: usize,
        rg: usize,
    },
    #[error("k = {k} exceeds gallery size {g}")]
    KOutOfRange { k: usize, g: usize },
    #[error("query {0} has no relevant gallery item")]
    NoRelevant(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("need at least {want} samples for correlation, got {got}")]
    TooFewSamples { got: usize, want: usize },
    #[error("{0}")]
    Invalid(String),
}

/// Query-by-gallery relevance scores (higher = more relevant) plus the
/// ground-truth match matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    scores: Vec<Vec<f64>>,
    relevance: Vec<Vec<bool>>,
}

impl ScoreMatrix {
    pub fn new(scores: Vec<Vec<f64>>, relevance: Vec<Vec<bool>>) -> Result<Self, EvalError> {
        if scores.is_empty() || scores[0].is_empty() {
            return Err(EvalError::Empty("score matrix"));
        }
        let (q, g) = (scores.len(), scores[0].len());
        if scores.iter().any(|r| r.len() != g) {
            return Err(EvalError::Invalid("ragged score matrix".into()));
        }
        if relevance.len() != q || relevance.iter().any(|r| r.len() != g) {
            return Err(EvalError::RelevanceShape {
                q,
                g,
                rq: relevance.len(),
                rg: relevance.first().map_or(0, |r| r.len()),
            });
        }
        Ok(ScoreMatrix { scores, relevance })
    }

    pub fn queries(&self) -> usize {
        self.scores.len()
    }

    pub fn gallery(&self) -> usize {
        self.scores[0].len()
    }

    pub fn score(&self, q: usize, g: usize) -> f64 {
        self.scores[q][g]
    }

    /// The same matrix with queries and gallery swapped.
    pub fn transposed(&self) -> ScoreMatrix {
        let (q, g) = (self.queries(), self.gallery());
        ScoreMatrix {
            scores: (0..g)
                .map(|j| (0..q).map(|i| self.scores[i][j]).collect())
                .collect(),
            relevance: (0..g)
                .map(|j| (0..q).map(|i| self.relevance[i][j]).collect())
                .collect(),
        }
    }
}

/// Scores for paired lists: scores[i][j] = -csd(image_i, text_j), with
/// relevance on the diagonal (image i matches text i).
pub fn score_pairs(
    images: &[ProbEmbedding],
    texts: &[ProbEmbedding],
) -> Result<ScoreMatrix, EvalError> {
    if images.is_empty() || texts.is_empty() {
        return Err(EvalError::Empty("embedding list"));
    }
    if images.len() != texts.len() {
        return Err(EvalError::Invalid(format!(
            "paired scoring needs equal counts, got {} images and {} texts",
            images.len(),
            texts.len()
        )));
    }
    let mut scores = Vec::with_capacity(images.len());
    for img in images {
        let mut row = Vec::with_capacity(texts.len());
        for txt in texts {
            row.push(-prob_geom::csd(img, txt)?);
        }
        scores.push(row);
    }
    let n = images.len();
    let relevance = (0..n).map(|i| (0..n).map(|j| i == j).collect()).collect();
    ScoreMatrix::new(scores, relevance)
}

/// Gallery indices in ranking order: descending score, ties broken by lower
/// index.
fn ranked_indices(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Fraction of queries whose top-k ranked gallery items include at least one
/// relevant item.
pub fn recall_at_k(m: &ScoreMatrix, k: usize) -> Result<f64, EvalError> {
    if k == 0 || k > m.gallery() {
        return Err(EvalError::KOutOfRange { k, g: m.gallery() });
    }
    let mut hits = 0usize;
    for (row, rel) in m.scores.iter().zip(&m.relevance) {
        let ranked = ranked_indices(row);
        if ranked[..k].iter().any(|&j| rel[j]) {
            hits += 1;
        }
    }
    Ok(hits as f64 / m.queries() as f64)
}

/// Mean average precision at R: for each query with R relevant items,
/// precision is averaged over the relevant hits within the top-R ranked
/// results, then averaged over queries.
pub fn map_at_r(m: &ScoreMatrix) -> Result<f64, EvalError> {
    let mut total = 0.0;
    for (q, (row, rel)) in m.scores.iter().zip(&m.relevance).enumerate() {
        let r = rel.iter().filter(|&&x| x).count();
        if r == 0 {
            return Err(EvalError::NoRelevant(q));
        }
        let ranked = ranked_indices(row);
        let mut found = 0usize;
        let mut ap = 0.0;
        for (rank, &j) in ranked[..r].iter().enumerate() {
            if rel[j] {
                found += 1;
                ap += found as f64 / (rank + 1) as f64;
            }
        }
        total += ap / r as f64;
    }
    Ok(total / m.queries() as f64)
}

/// Distribution-level pooling of several prompts for one class: means are
/// averaged, variances pooled as the mean of variances.
pub fn pool_prompts(prompts: &[ProbEmbedding]) -> Result<ProbEmbedding, EvalError> {
    if prompts.is_empty() {
        return Err(EvalError::Empty("prompt list"));
    }
    let d = prompts[0].dim();
    let n = prompts.len() as f64;
    let mut mu = vec![0.0; d];
    let mut var = vec![0.0; d];
    for p in prompts {
        if p.dim() != d {
            return Err(EvalError::Invalid("prompt dimension mismatch".into()));
        }
        for j in 0..d {
            mu[j] += p.mu()[j] / n;
            var[j] += p.log_var()[j].exp() / n;
        }
    }
    let log_var = var.into_iter().map(f64::ln).collect();
    Ok(ProbEmbedding::new(mu, log_var)?)
}

/// Predicted class per image: argmin over classes of csd, ties broken by
/// lower class index.
pub fn predict_classes(
    images: &[ProbEmbedding],
    classes: &[ProbEmbedding],
) -> Result<Vec<usize>, EvalError> {
    if images.is_empty() {
        return Err(EvalError::Empty("image list"));
    }
    if classes.len() < 2 {
        return Err(EvalError::Invalid(format!(
            "need >= 2 classes, got {}",
            classes.len()
        )));
    }
    let mut preds = Vec::with_capacity(images.len());
    for img in images {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (c, class) in classes.iter().enumerate() {
            let d = prob_geom::csd(img, class)?;
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        preds.push(best);
    }
    Ok(preds)
}

/// Zero-shot classification accuracy.
pub fn zeroshot_classify(
    images: &[ProbEmbedding],
    classes: &[ProbEmbedding],
    labels: &[usize],
) -> Result<f64, EvalError> {
    if labels.len() != images.len() {
        return Err(EvalError::Invalid(format!(
            "{} labels for {} images",
            labels.len(),
            images.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes.len()) {
        return Err(EvalError::LabelOutOfRange {
            label: bad,
            classes: classes.len(),
        });
    }
    let preds = predict_classes(images, classes)?;
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / images.len() as f64)
}

/// Ranks with tie averaging (1-based; tied values share the mean of the
/// positions they occupy).
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

pub const MIN_CORRELATION_SAMPLES: usize = 10;

/// Spearman rank correlation with tie averaging. Requires at least 10
/// samples.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, EvalError> {
    if xs.len() != ys.len() {
        return Err(EvalError::Invalid(format!(
            "length mismatch: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < MIN_CORRELATION_SAMPLES {
        return Err(EvalError::TooFewSamples {
            got: xs.len(),
            want: MIN_CORRELATION_SAMPLES,
        });
    }
    Ok(pearson(&ranks(xs), &ranks(ys)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SourceStats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyStats {
    /// Per source tag, sorted by tag.
    pub per_source: Vec<(String, SourceStats)>,
    /// Spearman correlation between specificity and uncertainty.
    pub spearman_specificity: f64,
    pub samples: usize,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Aggregates (source tag, specificity score, uncertainty scalar) triples
/// into per-source statistics plus the specificity/uncertainty rank
/// correlation.
pub fn uncertainty_report(
    items: &[(String, f64, f64)],
) -> Result<UncertaintyStats, EvalError> {
    if items.len() < MIN_CORRELATION_SAMPLES {
        return Err(EvalError::TooFewSamples {
            got: items.len(),
            want: MIN_CORRELATION_SAMPLES,
        });
    }
    let mut tags: Vec<&String> = items.iter().map(|(t, _, _)| t).collect();
    tags.sort_unstable();
    tags.dedup();
    let per_source = tags
        .into_iter()
        .map(|tag| {
            let mut us: Vec<f64> = items
                .iter()
                .filter(|(t, _, _)| t == tag)
                .map(|&(_, _, u)| u)
                .collect();
            us.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            let stats = SourceStats {
                count: us.len(),
                mean: us.iter().sum::<f64>() / us.len() as f64,
                median: median(&us),
            };
            (tag.clone(), stats)
        })
        .collect();
    let specs: Vec<f64> = items.iter().map(|&(_, s, _)| s).collect();
    let uncs: Vec<f64> = items.iter().map(|&(_, _, u)| u).collect();
    Ok(UncertaintyStats {
        per_source,
        spearman_specificity: spearman(&specs, &uncs)?,
        samples: items.len(),
    })
}

/// Full evaluation report. Serialized as key=value lines in a fixed key
/// order; absent sections are omitted entirely.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub r_at_k: Vec<(usize, f64, f64)>, // (k, i2t, t2i)
    pub map_i2t: Option<f64>,
    pub map_t2i: Option<f64>,
    pub zeroshot_accuracy: Option<f64>,
    pub uncertainty: Option<UncertaintyStats>,
}

impl EvalReport {
    pub fn i2t_r1(&self) -> Option<f64> {
        self.r_at_k.iter().find(|(k, _, _)| *k == 1).map(|&(_, v, _)| v)
    }

    pub fn t2i_r1(&self) -> Option<f64> {
        self.r_at_k.iter().find(|(k, _, _)| *k == 1).map(|&(_, _, v)| v)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for &(k, i2t, t2i) in &self.r_at_k {
            s.push_str(&format!("retrieval.i2t.r@{k}={i2t}\n"));
            s.push_str(&format!("retrieval.t2i.r@{k}={t2i}\n"));
        }
        if let Some(v) = self.map_i2t {
            s.push_str(&format!("retrieval.i2t.map@r={v}\n"));
        }
        if let Some(v) = self.map_t2i {
            s.push_str(&format!("retrieval.t2i.map@r={v}\n"));
        }
        if let Some(v) = self.zeroshot_accuracy {
            s.push_str(&format!("zeroshot.accuracy={v}\n"));
        }
        if let Some(u) = &self.uncertainty {
            for (tag, st) in &u.per_source {
                s.push_str(&format!("uncertainty.source.{tag}.count={}\n", st.count));
                s.push_str(&format!("uncertainty.source.{tag}.mean={}\n", st.mean));
                s.push_str(&format!("uncertainty.source.{tag}.median={}\n", st.median));
            }
            s.push_str(&format!(
                "uncertainty.spearman_specificity={}\n",
                u.spearman_specificity
            ));
            s.push_str(&format!("uncertainty.samples={}\n", u.samples));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn diag_matrix(scores: Vec<Vec<f64>>) -> ScoreMatrix {
        let n = scores.len();
        let rel = (0..n).map(|i| (0..n).map(|j| i == j).collect()).collect();
        ScoreMatrix::new(scores, rel).unwrap()
    }

    fn random_embedding(rng: &mut ChaCha8Rng, d: usize) -> ProbEmbedding {
        let mu = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lv = (0..d).map(|_| rng.gen_range(-3.0..0.0)).collect();
        ProbEmbedding::new(mu, lv).unwrap()
    }

    #[test]
    fn score_pairs_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_embedding(&mut rng, 4);
        let b = random_embedding(&mut rng, 4);
        let m = score_pairs(&[a.clone()], &[b.clone()]).unwrap();
        assert_eq!(m.queries(), 1);
        assert_eq!(m.score(0, 0), -prob_geom::csd(&a, &b).unwrap());

        // identical embeddings everywhere give a constant matrix
        let same = vec![a.clone(); 3];
        let m = score_pairs(&same, &same).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.score(i, j), m.score(0, 0));
            }
        }

        // spot checks against direct csd calls
        let images: Vec<_> = (0..3).map(|_| random_embedding(&mut rng, 4)).collect();
        let texts: Vec<_> = (0..3).map(|_| random_embedding(&mut rng, 4)).collect();
        let m = score_pairs(&images, &texts).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = -prob_geom::csd(&images[i], &texts[j]).unwrap();
                assert_eq!(m.score(i, j), want);
            }
        }

        assert!(matches!(score_pairs(&[], &[]), Err(EvalError::Empty(_))));
    }

    #[test]
    fn recall_trivial_cases() {
        let m = diag_matrix(vec![
            vec![9.0, 1.0, 1.0],
            vec![1.0, 9.0, 1.0],
            vec![1.0, 1.0, 9.0],
        ]);
        assert_eq!(recall_at_k(&m, 1).unwrap(), 1.0);

        let m = diag_matrix(vec![
            vec![1.0, 2.0, 9.0],
            vec![1.0, 9.0, 2.0],
            vec![9.0, 2.0, 1.0],
        ]);
        assert_eq!(recall_at_k(&m, 1).unwrap(), 1.0 / 3.0); // middle query only
        assert!(matches!(
            recall_at_k(&m, 4),
            Err(EvalError::KOutOfRange { k: 4, g: 3 })
        ));
    }

    /// Repeated-argmax oracle: ranks by scanning for the max score,
    /// preferring the lowest index among ties.
    fn recall_oracle(m: &ScoreMatrix, k: usize) -> f64 {
        let mut hits = 0;
        for q in 0..m.queries() {
            let mut taken = vec![false; m.gallery()];
            let mut hit = false;
            for _ in 0..k {
                let mut best = usize::MAX;
                for j in 0..m.gallery() {
                    if !taken[j] && (best == usize::MAX || m.score(q, j) > m.score(q, best)) {
                        best = j;
                    }
                }
                taken[best] = true;
                if m.relevance[q][best] {
                    hit = true;
                }
            }
            if hit {
                hits += 1;
            }
        }
        hits as f64 / m.queries() as f64
    }

    fn map_oracle(m: &ScoreMatrix) -> f64 {
        let mut total = 0.0;
        for q in 0..m.queries() {
            let r = m.relevance[q].iter().filter(|&&x| x).count();
            let mut taken = vec![false; m.gallery()];
            let mut found = 0;
            let mut ap = 0.0;
            for rank in 1..=r {
                let mut best = usize::MAX;
                for j in 0..m.gallery() {
                    if !taken[j] && (best == usize::MAX || m.score(q, j) > m.score(q, best)) {
                        best = j;
                    }
                }
                taken[best] = true;
                if m.relevance[q][best] {
                    found += 1;
                    ap += found as f64 / rank as f64;
                }
            }
            total += ap / r as f64;
        }
        total / m.queries() as f64
    }

    #[test]
    fn recall_and_map_match_brute_force_on_random_matrices_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            // quantized scores force plenty of exact ties
            let scores: Vec<Vec<f64>> = (0..20)
                .map(|_| (0..20).map(|_| rng.gen_range(0..6) as f64 / 2.0).collect())
                .collect();
            let relevance: Vec<Vec<bool>> = (0..20)
                .map(|i| (0..20).map(|j| i == j || rng.gen_bool(0.15)).collect())
                .collect();
            let m = ScoreMatrix::new(scores, relevance).unwrap();
            for k in [1, 3, 10, 20] {
                assert_eq!(recall_at_k(&m, k).unwrap(), recall_oracle(&m, k));
            }
            assert!((map_at_r(&m).unwrap() - map_oracle(&m)).abs() < 1e-12);
        }
    }

    #[test]
    fn map_definition_examples() {
        // all relevant items ranked first
        let m = ScoreMatrix::new(
            vec![vec![9.0, 8.0, 1.0, 0.5], vec![0.5, 9.0, 8.0, 1.0]],
            vec![
                vec![true, true, false, false],
                vec![false, true, true, false],
            ],
        )
        .unwrap();
        assert_eq!(map_at_r(&m).unwrap(), 1.0);

        // R = 2, relevant at ranks 1 and 3: only rank 1 is inside the window
        let m = ScoreMatrix::new(
            vec![vec![9.0, 5.0, 4.0]],
            vec![vec![true, false, true]],
        )
        .unwrap();
        assert_eq!(map_at_r(&m).unwrap(), 0.5);

        let m = ScoreMatrix::new(vec![vec![1.0, 2.0]], vec![vec![false, false]]).unwrap();
        assert!(matches!(map_at_r(&m), Err(EvalError::NoRelevant(0))));
    }

    #[test]
    fn rank_metrics_invariant_under_monotone_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let scores: Vec<Vec<f64>> = (0..8)
                .map(|_| (0..8).map(|_| rng.gen_range(-3.0..0.0)).collect())
                .collect();
            let relevance: Vec<Vec<bool>> = (0..8)
                .map(|i| (0..8).map(|j| i == j || rng.gen_bool(0.2)).collect())
                .collect();
            let m = ScoreMatrix::new(scores.clone(), relevance.clone()).unwrap();
            // strictly monotone: 2x + 1 and exp
            for f in [|x: f64| 2.0 * x + 1.0, |x: f64| x.exp()] {
                let t = ScoreMatrix::new(
                    scores.iter().map(|r| r.iter().map(|&x| f(x)).collect()).collect(),
                    relevance.clone(),
                )
                .unwrap();
                for k in [1, 4] {
                    assert_eq!(recall_at_k(&m, k).unwrap(), recall_at_k(&t, k).unwrap());
                }
                assert_eq!(map_at_r(&m).unwrap(), map_at_r(&t).unwrap());
            }
        }
    }

    #[test]
    fn transposed_swaps_directions() {
        let m = ScoreMatrix::new(
            vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]],
            vec![vec![true, false, true], vec![false, true, false]],
        )
        .unwrap();
        let t = m.transposed();
        assert_eq!(t.queries(), 3);
        assert_eq!(t.score(2, 1), 6.0);
        assert_eq!(t.transposed(), m);
    }

    fn point(mu: Vec<f64>) -> ProbEmbedding {
        let d = mu.len();
        ProbEmbedding::new(mu, vec![-60.0; d]).unwrap()
    }

    #[test]
    fn zeroshot_trivial_cases() {
        let classes = vec![
            point(vec![1.0, 0.0, 0.0]),
            point(vec![0.0, 1.0, 0.0]),
            point(vec![0.0, 0.0, 1.0]),
        ];
        let images = classes.clone();
        assert_eq!(
            zeroshot_classify(&images, &classes, &[0, 1, 2]).unwrap(),
            1.0
        );
        assert_eq!(
            zeroshot_classify(&images, &classes, &[1, 2, 0]).unwrap(),
            0.0
        );
        assert!(matches!(
            zeroshot_classify(&images, &classes, &[0, 1, 3]),
            Err(EvalError::LabelOutOfRange {
                label: 3,
                classes: 3
            })
        ));
    }

    #[test]
    fn zeroshot_matches_loop_oracle_and_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let classes: Vec<_> = (0..5).map(|_| random_embedding(&mut rng, 6)).collect();
        let images: Vec<_> = (0..12).map(|_| random_embedding(&mut rng, 6)).collect();
        let preds = predict_classes(&images, &classes).unwrap();
        for (i, img) in images.iter().enumerate() {
            let mut best = 0;
            for c in 1..classes.len() {
                if prob_geom::csd(img, &classes[c]).unwrap()
                    < prob_geom::csd(img, &classes[best]).unwrap()
                {
                    best = c;
                }
            }
            assert_eq!(preds[i], best);
        }

        // inflating every image variance by a constant shifts each row of
        // csd by a constant: predictions unchanged
        let shifted: Vec<_> = images
            .iter()
            .map(|z| {
                let lv = z.log_var().iter().map(|&l| (l.exp() + 3.0).ln()).collect();
                ProbEmbedding::new(z.mu().to_vec(), lv).unwrap()
            })
            .collect();
        assert_eq!(predict_classes(&shifted, &classes).unwrap(), preds);
    }

    #[test]
    fn prompt_pooling_averages_means_and_variances() {
        let a = ProbEmbedding::new(vec![1.0, 0.0], vec![0.0, 0.0]).unwrap();
        let b = ProbEmbedding::new(vec![3.0, 0.0], vec![(3.0f64).ln(), 0.0]).unwrap();
        let pooled = pool_prompts(&[a, b]).unwrap();
        assert_eq!(pooled.mu(), &[2.0, 0.0]);
        assert!((pooled.log_var()[0] - 2.0f64.ln()).abs() < 1e-12);
        assert!((pooled.log_var()[1] - 0.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_sanity_and_tie_oracle() {
        let xs: Vec<f64> = (0..12).map(|i| i as f64).collect();
        assert_eq!(spearman(&xs, &xs).unwrap(), 1.0);
        let rev: Vec<f64> = xs.iter().rev().copied().collect();
        assert_eq!(spearman(&xs, &rev).unwrap(), -1.0);
        assert!(matches!(
            spearman(&xs[..5], &xs[..5]),
            Err(EvalError::TooFewSamples { got: 5, want: 10 })
        ));

        // fixture with ties, against an independent rank computation
        let a = vec![1.0, 2.0, 2.0, 3.0, 5.0, 5.0, 5.0, 7.0, 8.0, 9.0];
        let b = vec![2.0, 1.0, 4.0, 4.0, 6.0, 5.0, 9.0, 7.0, 7.0, 10.0];
        // hand-computed tie-averaged ranks
        let ra = [1.0, 2.5, 2.5, 4.0, 6.0, 6.0, 6.0, 8.0, 9.0, 10.0];
        let rb = [2.0, 1.0, 3.5, 3.5, 6.0, 5.0, 9.0, 7.5, 7.5, 10.0];
        assert_eq!(ranks(&a), ra);
        assert_eq!(ranks(&b), rb);
        let want = pearson(&ra, &rb);
        assert_eq!(spearman(&a, &b).unwrap(), want);
    }

    #[test]
    fn uncertainty_report_statistics() {
        let items: Vec<(String, f64, f64)> = (0..12)
            .map(|i| {
                let tag = if i < 6 { "short" } else { "long" };
                // specificity up, uncertainty down: perfect anticorrelation
                (tag.to_string(), i as f64, 12.0 - i as f64)
            })
            .collect();
        let stats = uncertainty_report(&items).unwrap();
        assert_eq!(stats.samples, 12);
        assert_eq!(stats.spearman_specificity, -1.0);
        assert_eq!(stats.per_source.len(), 2);
        assert_eq!(stats.per_source[0].0, "long");
        let long = stats.per_source[0].1;
        // uncertainties 6..=1, mean 3.5, median 3.5
        assert_eq!(long.count, 6);
        assert!((long.mean - 3.5).abs() < 1e-12);
        assert!((long.median - 3.5).abs() < 1e-12);

        assert!(matches!(
            uncertainty_report(&items[..4]),
            Err(EvalError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn report_text_is_stable_and_complete() {
        let report = EvalReport {
            r_at_k: vec![(1, 0.5, 0.25), (5, 1.0, 0.75)],
            map_i2t: Some(0.5),
            map_t2i: Some(0.25),
            zeroshot_accuracy: Some(0.8),
            uncertainty: None,
        };
        let text = report.to_text();
        assert_eq!(
            text,
            "retrieval.i2t.r@1=0.5\nretrieval.t2i.r@1=0.25\nretrieval.i2t.r@5=1\n\
             retrieval.t2i.r@5=0.75\nretrieval.i2t.map@r=0.5\nretrieval.t2i.map@r=0.25\n\
             zeroshot.accuracy=0.8\n"
        );
        assert_eq!(report.i2t_r1(), Some(0.5));
        assert_eq!(report.t2i_r1(), Some(0.25));
        assert_eq!(report.to_text(), text);
    }
}
