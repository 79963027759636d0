//! Evaluation: edit distance, word accuracy, Frechet distance on recognizer
//! embeddings, and CTC decoding (greedy and lexicon-constrained beam).

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::linalg::{eigh, Mat};
use crate::math;
use crate::net::{Recognizer, RecognizerMode};
use crate::tensor::Tensor;

/// Unit-cost edit distance by dynamic programming over two rows.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Fraction of exact matches.
pub fn word_accuracy(preds: &[String], refs: &[String]) -> Result<f64> {
    if preds.len() != refs.len() {
        return Err(CoreError::DimensionMismatch {
            expected: refs.len().to_string(),
            got: preds.len().to_string(),
        });
    }
    if preds.is_empty() {
        return Err(CoreError::EmptyInput);
    }
    let hits = preds.iter().zip(refs).filter(|(p, r)| p == r).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Raw per-pair edit distance averaged over the set.
pub fn average_levenshtein(preds: &[String], refs: &[String]) -> Result<f64> {
    if preds.len() != refs.len() {
        return Err(CoreError::DimensionMismatch {
            expected: refs.len().to_string(),
            got: preds.len().to_string(),
        });
    }
    if preds.is_empty() {
        return Err(CoreError::EmptyInput);
    }
    let total: usize = preds.iter().zip(refs).map(|(p, r)| levenshtein(p, r)).sum();
    Ok(total as f64 / preds.len() as f64)
}

/// Sample mean and covariance (denominator n-1) of a feature set.
#[derive(Clone, Debug)]
pub struct GaussianStats {
    pub mu: Vec<f64>,
    pub sigma: Mat,
    pub n: usize,
}

pub fn gaussian_stats(features: &Mat) -> Result<GaussianStats> {
    let n = features.rows;
    let d = features.cols;
    if n < 2 {
        return Err(CoreError::InvalidArgument(alloc::format!(
            "need at least 2 samples for a covariance, got {n}"
        )));
    }
    let mut mu = vec![0.0; d];
    for r in 0..n {
        for c in 0..d {
            mu[c] += features.at(r, c);
        }
    }
    for m in &mut mu {
        *m /= n as f64;
    }
    let mut sigma = Mat::zeros(d, d);
    for r in 0..n {
        for i in 0..d {
            let di = features.at(r, i) - mu[i];
            for j in i..d {
                let dj = features.at(r, j) - mu[j];
                sigma.data[i * d + j] += di * dj;
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = sigma.at(i, j) / denom;
            sigma.data[i * d + j] = v;
            sigma.data[j * d + i] = v;
        }
    }
    Ok(GaussianStats { mu, sigma, n })
}

/// Symmetric PSD square root via eigendecomposition with negative-eigenvalue
/// clamping.
fn sqrtm_psd(a: &Mat) -> Mat {
    let d = a.rows;
    let (w, v) = eigh(a);
    let mut out = Mat::zeros(d, d);
    for k in 0..d {
        let s = math::sqrt(w[k].max(0.0));
        if s == 0.0 {
            continue;
        }
        for i in 0..d {
            let vik = v.at(i, k) * s;
            for j in 0..d {
                out.data[i * d + j] += vik * v.at(j, k);
            }
        }
    }
    out
}

/// Frechet distance between Gaussian summaries:
/// ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)), where the matrix square
/// root is evaluated as sqrt(sqrt(S1) S2 sqrt(S1)) so only symmetric
/// eigenproblems appear. Slight negative results from finite samples clamp
/// to zero.
pub fn frechet_distance(s1: &GaussianStats, s2: &GaussianStats) -> Result<f64> {
    let d = s1.mu.len();
    if s2.mu.len() != d {
        return Err(CoreError::DimensionMismatch {
            expected: d.to_string(),
            got: s2.mu.len().to_string(),
        });
    }
    let mean_term: f64 = s1
        .mu
        .iter()
        .zip(&s2.mu)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let trace = |m: &Mat| -> f64 { (0..m.rows).map(|i| m.at(i, i)).sum() };

    let root1 = sqrtm_psd(&s1.sigma);
    let inner = root1.matmul(&s2.sigma).matmul(&root1);
    // symmetrize against round-off before the eigensolve
    let inner = inner.add(&inner.transpose()).scale(0.5);
    let (w, _) = eigh(&inner);
    let tr_sqrt: f64 = w.iter().map(|&e| math::sqrt(e.max(0.0))).sum();

    let fd = mean_term + trace(&s1.sigma) + trace(&s2.sigma) - 2.0 * tr_sqrt;
    Ok(fd.max(0.0))
}

/// Embeds an image batch through a single-path recognizer (eval mode) and
/// summarizes the time-pooled BiLSTM features.
pub fn embedding_stats(images: &Tensor, rec: &mut Recognizer) -> Result<GaussianStats> {
    if rec.mode == RecognizerMode::Joint {
        return Err(CoreError::InvalidArgument(
            "embedding statistics need a single-path recognizer".into(),
        ));
    }
    let (n, _c, h, w) = images.dims4("embedding_stats");
    if n < 2 {
        return Err(CoreError::InvalidArgument("need at least 2 images".into()));
    }
    let chunk = 64usize;
    let mut rows: Vec<f64> = Vec::new();
    let mut dim = 0usize;
    let mut start = 0usize;
    while start < n {
        let len = chunk.min(n - start);
        let batch = images.slice_axis(0, start, len).detach();
        debug_assert_eq!(batch.shape(), &[len, 1, h, w]);
        let out = match rec.mode {
            RecognizerMode::HandwrittenOnly => rec.forward(Some(&batch), None, false)?,
            RecognizerMode::GeneratedOnly => rec.forward(None, Some(&batch), false)?,
            RecognizerMode::Joint => unreachable!(),
        };
        dim = out.embedding.shape()[1];
        rows.extend_from_slice(out.embedding.data());
        start += len;
    }
    gaussian_stats(&Mat::from_rows(n, dim, rows)?)
}

/// Frechet distance between a real and a generated image set under the
/// recognizer's embedding. Symmetric in its two image arguments.
pub fn fhd(real: &Tensor, generated: &Tensor, rec: &mut Recognizer) -> Result<f64> {
    let s1 = embedding_stats(real, rec)?;
    let s2 = embedding_stats(generated, rec)?;
    frechet_distance(&s1, &s2)
}

// ---- CTC decoding ----

/// Greedy decode: per-step argmax (first index wins ties), collapse repeats,
/// drop blanks. `log_probs` is [T, classes] with the blank last.
pub fn ctc_decode_greedy(log_probs: &Tensor) -> Vec<usize> {
    let (t_steps, classes) = log_probs.dims2("ctc_decode_greedy");
    let blank = classes - 1;
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for t in 0..t_steps {
        let row = &log_probs.data()[t * classes..(t + 1) * classes];
        let mut best = 0usize;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        if best != prev && best != blank {
            out.push(best);
        }
        prev = best;
    }
    out
}

/// Lexicon-constrained prefix beam search ("Words" mode): beams only over
/// prefixes of lexicon entries; the result is the complete lexicon word with
/// the highest total CTC probability found. With a beam wide enough to hold
/// every reachable prefix the search is exact.
pub fn ctc_decode_lexicon(
    log_probs: &Tensor,
    lexicon: &[Vec<usize>],
    beam_width: usize,
) -> Result<Vec<usize>> {
    if lexicon.is_empty() {
        return Err(CoreError::EmptyInput);
    }
    if beam_width == 0 {
        return Err(CoreError::InvalidArgument("beam width must be >= 1".into()));
    }
    let (t_steps, classes) = log_probs.dims2("ctc_decode_lexicon");
    let blank = classes - 1;

    let mut prefixes: BTreeSet<Vec<usize>> = BTreeSet::new();
    let mut words: BTreeSet<Vec<usize>> = BTreeSet::new();
    for word in lexicon {
        for end in 0..=word.len() {
            prefixes.insert(word[..end].to_vec());
        }
        words.insert(word.clone());
    }

    const NEG: f64 = f64::NEG_INFINITY;
    // prefix -> (log p ending in blank, log p ending in non-blank)
    let mut beam: BTreeMap<Vec<usize>, (f64, f64)> = BTreeMap::new();
    beam.insert(Vec::new(), (0.0, NEG));

    for t in 0..t_steps {
        let row = &log_probs.data()[t * classes..(t + 1) * classes];
        let mut next: BTreeMap<Vec<usize>, (f64, f64)> = BTreeMap::new();
        let mut bump = |key: Vec<usize>, is_blank_slot: bool, lp: f64| {
            let entry = next.entry(key).or_insert((NEG, NEG));
            let slot = if is_blank_slot {
                &mut entry.0
            } else {
                &mut entry.1
            };
            *slot = math::logsumexp2(*slot, lp);
        };
        for (prefix, &(pb, pnb)) in &beam {
            let total = math::logsumexp2(pb, pnb);
            // stay on the prefix via blank
            bump(prefix.clone(), true, total + row[blank]);
            // repeat the last symbol without a blank (keeps the prefix)
            if let Some(&last) = prefix.last() {
                if pnb > NEG {
                    bump(prefix.clone(), false, pnb + row[last]);
                }
            }
            // extend by one symbol while staying a lexicon prefix
            for c in 0..blank {
                let mut ext = prefix.clone();
                ext.push(c);
                if !prefixes.contains(&ext) {
                    continue;
                }
                let src = if Some(&c) == prefix.last() { pb } else { total };
                if src > NEG {
                    bump(ext, false, src + row[c]);
                }
            }
        }
        // prune deterministically: by score, ties by prefix order
        if next.len() > beam_width {
            let mut scored: Vec<(Vec<usize>, (f64, f64))> = next.into_iter().collect();
            scored.sort_by(|a, b| {
                let sa = math::logsumexp2(a.1 .0, a.1 .1);
                let sb = math::logsumexp2(b.1 .0, b.1 .1);
                sb.partial_cmp(&sa).unwrap().then_with(|| a.0.cmp(&b.0))
            });
            scored.truncate(beam_width);
            next = scored.into_iter().collect();
        }
        beam = next;
    }

    let mut best: Option<(&Vec<usize>, f64)> = None;
    for word in &words {
        let score = beam
            .get(word)
            .map(|&(pb, pnb)| math::logsumexp2(pb, pnb))
            .unwrap_or(NEG);
        let better = match best {
            None => true,
            Some((bw, bs)) => score > bs || (score == bs && word < bw),
        };
        if better {
            best = Some((word, score));
        }
    }
    Ok(best.expect("non-empty lexicon").0.clone())
}
