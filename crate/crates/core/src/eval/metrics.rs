use std::collections::HashMap;

use crate::error::{Error, Result};

/// Query-by-gallery scores with the gallery columns that count as correct
/// for every query.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub rows: usize,
    pub cols: usize,
    pub scores: Vec<f64>,
    pub truth: Vec<Vec<usize>>,
}

impl SimilarityMatrix {
    pub fn new(rows: usize, cols: usize, scores: Vec<f64>, truth: Vec<Vec<usize>>) -> Result<Self> {
        if scores.len() != rows * cols || truth.len() != rows {
            return Err(Error::shape("SimilarityMatrix", &[rows, cols], &[scores.len(), truth.len()]));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("similarity matrix".into()));
        }
        for (q, t) in truth.iter().enumerate() {
            if t.is_empty() || t.iter().any(|&c| c >= cols) {
                return Err(Error::invalid(format!("query {q} needs ground truth within 0..{cols}")));
            }
        }
        Ok(SimilarityMatrix {
            rows,
            cols,
            scores,
            truth,
        })
    }

    /// Cosine-style scores from row-major embeddings `[q, d]` and `[g, d]`.
    pub fn from_embeddings(queries: &[f64], gallery: &[f64], d: usize, truth: Vec<Vec<usize>>) -> Result<Self> {
        if d == 0 || queries.len() % d != 0 || gallery.len() % d != 0 {
            return Err(Error::invalid("embedding length is not a multiple of the width"));
        }
        let (q, g) = (queries.len() / d, gallery.len() / d);
        let mut scores = Vec::with_capacity(q * g);
        for a in queries.chunks_exact(d) {
            for b in gallery.chunks_exact(d) {
                scores.push(a.iter().zip(b).map(|(x, y)| x * y).sum());
            }
        }
        Self::new(q, g, scores, truth)
    }

    pub fn row(&self, q: usize) -> &[f64] {
        &self.scores[q * self.cols..(q + 1) * self.cols]
    }

    /// Gallery-as-query view: column `c` becomes a query whose truth is
    /// every row listing `c`.
    pub fn transposed(&self) -> Result<Self> {
        let mut scores = Vec::with_capacity(self.scores.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                scores.push(self.scores[r * self.cols + c]);
            }
        }
        let mut truth = vec![Vec::new(); self.cols];
        for (r, t) in self.truth.iter().enumerate() {
            for &c in t {
                truth[c].push(r);
            }
        }
        Self::new(self.cols, self.rows, scores, truth)
    }
}

/// Position of `col` when `row` is sorted by descending score, ties by lower index.
pub fn rank_of(row: &[f64], col: usize) -> usize {
    let s = row[col];
    row.iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (x == s && j < col))
        .count()
}

/// Column indices of the `k` best scores, ties by lower index.
pub fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Fraction of queries with any correct column among the top `k`.
pub fn recall_at_k(sim: &SimilarityMatrix, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("recall@k needs k >= 1"));
    }
    let hits = (0..sim.rows)
        .filter(|&q| {
            let row = sim.row(q);
            sim.truth[q].iter().any(|&c| rank_of(row, c) < k)
        })
        .count();
    Ok(hits as f64 / sim.rows as f64)
}

/// Text-to-video and video-to-text recall@k for a text-by-video matrix.
pub fn bidirectional_recall(text_to_video: &SimilarityMatrix, k: usize) -> Result<(f64, f64)> {
    Ok((recall_at_k(text_to_video, k)?, recall_at_k(&text_to_video.transposed()?, k)?))
}

/// Class-wise mean average precision. `scores` is `[q, classes]`, row-major;
/// `truth[q]` lists the positive classes of query `q`.
pub fn mean_average_precision(scores: &[f64], classes: usize, truth: &[Vec<usize>]) -> Result<f64> {
    if classes == 0 || scores.len() != truth.len() * classes {
        return Err(Error::shape("mean_average_precision", &[scores.len()], &[truth.len(), classes]));
    }
    let q = truth.len();
    let mut total = 0.0;
    for k in 0..classes {
        let column: Vec<f64> = (0..q).map(|i| scores[i * classes + k]).collect();
        let positive: Vec<bool> = truth.iter().map(|t| t.contains(&k)).collect();
        let n_pos = positive.iter().filter(|&&p| p).count();
        if n_pos == 0 {
            return Err(Error::invalid(format!("class {k} has no positive queries")));
        }
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (rank, &i) in top_k(&column, q).iter().enumerate() {
            if positive[i] {
                hits += 1;
                ap += hits as f64 / (rank + 1) as f64;
            }
        }
        total += ap / n_pos as f64;
    }
    Ok(total / classes as f64)
}

/// Outcome of embedding-similarity classification.
#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    /// Best `k` classes per video, best first.
    pub predictions: Vec<Vec<usize>>,
    pub top1: f64,
    pub top5: f64,
}

/// Cosine-similarity classification of `[n, d]` video embeddings against
/// `[classes, d]` class embeddings. Top-5 uses `min(5, classes)`.
pub fn zero_shot_classify(videos: &[f64], class_emb: &[f64], d: usize, labels: &[usize], k: usize) -> Result<Classification> {
    if d == 0 || videos.len() % d != 0 || class_emb.len() % d != 0 {
        return Err(Error::invalid("embedding length is not a multiple of the width"));
    }
    let n_classes = class_emb.len() / d;
    if k == 0 || k > n_classes {
        return Err(Error::invalid(format!("k = {k} but there are {n_classes} classes")));
    }
    if videos.len() / d != labels.len() || labels.is_empty() {
        return Err(Error::shape("zero_shot_classify", &[videos.len() / d], &[labels.len()]));
    }
    let five = 5.min(n_classes);
    let mut predictions = Vec::with_capacity(labels.len());
    let (mut top1, mut top5) = (0usize, 0usize);
    for (v, &label) in videos.chunks_exact(d).zip(labels) {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let scores: Vec<f64> = class_emb
            .chunks_exact(d)
            .map(|c| {
                let cn = c.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.iter().zip(c).map(|(a, b)| a * b).sum::<f64>() / (norm * cn)
            })
            .collect();
        let ranked = top_k(&scores, n_classes);
        top1 += usize::from(ranked[0] == label);
        top5 += usize::from(ranked[..five].contains(&label));
        predictions.push(ranked[..k].to_vec());
    }
    let n = labels.len() as f64;
    Ok(Classification {
        predictions,
        top1: top1 as f64 / n,
        top5: top5 as f64 / n,
    })
}

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Clipped n-gram matches and the candidate's n-gram count.
pub fn modified_precision(candidate: &[usize], reference: &[usize], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let matched = cand
        .iter()
        .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

fn bleu_from_counts(matched: [usize; 4], total: [usize; 4], cand_len: usize, ref_len: usize) -> f64 {
    if cand_len == 0 || matched.contains(&0) || total.contains(&0) {
        return 0.0;
    }
    let log_p: f64 = (0..4).map(|n| (matched[n] as f64 / total[n] as f64).ln()).sum::<f64>() / 4.0;
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    bp * log_p.exp()
}

/// Unsmoothed sentence BLEU-4. Candidates shorter than four tokens score 0.
pub fn bleu4(candidate: &[usize], reference: &[usize]) -> f64 {
    if candidate.len() < 4 || reference.is_empty() {
        return 0.0;
    }
    let mut matched = [0; 4];
    let mut total = [0; 4];
    for n in 1..=4 {
        (matched[n - 1], total[n - 1]) = modified_precision(candidate, reference, n);
    }
    bleu_from_counts(matched, total, candidate.len(), reference.len())
}

/// Corpus BLEU-4: clipped counts and lengths are summed over all pairs
/// before the precisions and brevity penalty are formed.
pub fn corpus_bleu4(pairs: &[(Vec<usize>, Vec<usize>)]) -> f64 {
    let mut matched = [0; 4];
    let mut total = [0; 4];
    let (mut c, mut r) = (0, 0);
    for (cand, reference) in pairs {
        for n in 1..=4 {
            let (m, t) = modified_precision(cand, reference, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
        c += cand.len();
        r += reference.len();
    }
    bleu_from_counts(matched, total, c, r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_similarity_has_perfect_recall() {
        let n = 4;
        let scores = (0..n * n).map(|i| if i % (n + 1) == 0 { 1.0 } else { 0.0 }).collect();
        let sim = SimilarityMatrix::new(n, n, scores, (0..n).map(|i| vec![i]).collect()).unwrap();
        assert_eq!(recall_at_k(&sim, 1).unwrap(), 1.0);
        assert_eq!(bidirectional_recall(&sim, 1).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn second_place_truth() {
        let sim = SimilarityMatrix::new(2, 3, vec![0.9, 0.5, 0.1, 0.2, 0.3, 0.8], vec![vec![1], vec![1]]).unwrap();
        assert_eq!(recall_at_k(&sim, 1).unwrap(), 0.0);
        assert_eq!(recall_at_k(&sim, 2).unwrap(), 1.0);
    }

    #[test]
    fn ties_prefer_lower_index() {
        assert_eq!(top_k(&[1.0, 2.0, 2.0, 0.0], 3), vec![1, 2, 0]);
        assert_eq!(rank_of(&[1.0, 1.0], 1), 1);
    }

    #[test]
    fn hand_computed_average_precision() {
        // Positives at ranks 1 and 3 of 4.
        let scores = [0.9, 0.8, 0.7, 0.6];
        let truth = vec![vec![0], vec![], vec![0], vec![]];
        let ap = mean_average_precision(&scores, 1, &truth).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!(mean_average_precision(&scores, 1, &[vec![], vec![], vec![], vec![]]).is_err());
    }

    #[test]
    fn bleu_examples() {
        let (the, cat, sat, down) = (10, 11, 12, 13);
        let r = [the, cat, sat, down];
        assert_eq!(bleu4(&r, &r), 1.0);
        assert_eq!(bleu4(&[1, 2, 3, 4], &[5, 6, 7, 8]), 0.0);
        assert_eq!(modified_precision(&[the, the, the, cat], &r, 1), (2, 4));
        assert_eq!(bleu4(&[the, cat, sat], &[the, cat, sat]), 0.0);
    }

    #[test]
    fn classification_basics() {
        let eye = [1.0, 0.0, 0.0, 1.0];
        let c = zero_shot_classify(&eye, &eye, 2, &[0, 1], 1).unwrap();
        assert_eq!(c.top1, 1.0);
        assert!(zero_shot_classify(&eye, &eye, 2, &[0, 1], 3).is_err());
    }
}
