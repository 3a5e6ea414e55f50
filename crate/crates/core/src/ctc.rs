//! Connectionist temporal classification with a trailing blank label.
//!
//! For an alphabet of `K` symbols, logits have `K + 1` columns and the blank
//! is index `K`. A frame path maps to a labelling by merging consecutive
//! repeats and then dropping blanks.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stand-in for `ln 0` in the recursions. Finite so that sums stay free of
/// `inf - inf`; anything at or below half of it is treated as zero mass.
pub const LOG_ZERO: f64 = -1e30;

/// Paths enumerated by [`ctc_brute_force`] at most.
pub const BRUTE_FORCE_BUDGET: f64 = 1e7;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSeq {
    labels: Vec<usize>,
    alphabet_size: usize,
}

impl LabelSeq {
    pub fn new(labels: Vec<usize>, alphabet_size: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= alphabet_size) {
            return Err(Error::Domain {
                op: "label_seq",
                detail: format!("label {bad} outside alphabet of size {alphabet_size}"),
            });
        }
        Ok(LabelSeq { labels, alphabet_size })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn alphabet_size(&self) -> usize {
        self.alphabet_size
    }

    pub fn blank(&self) -> usize {
        self.alphabet_size
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Fewest frames that can emit this labelling: one per label plus one
    /// blank between each pair of equal neighbours.
    pub fn min_frames(&self) -> usize {
        let repeats = self.labels.windows(2).filter(|w| w[0] == w[1]).count();
        self.labels.len() + repeats
    }
}

/// `Tseq×(K+1)` unnormalized frame scores.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitSeq {
    logits: Tensor,
}

impl LogitSeq {
    pub fn new(frames: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if classes < 1 {
            return Err(Error::dim("logit_seq", "at least the blank class is required"));
        }
        Ok(LogitSeq { logits: Tensor::new(vec![frames, classes], data)? })
    }

    pub fn frames(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.logits.shape()[1]
    }

    pub fn data(&self) -> &[f64] {
        self.logits.data()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let c = self.classes();
        &self.data()[t * c..(t + 1) * c]
    }

    /// Row-wise log-softmax.
    pub fn log_probs(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.data().len());
        for t in 0..self.frames() {
            let row = self.frame(t);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        out
    }
}

#[inline]
fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if hi <= LOG_ZERO / 2.0 {
        LOG_ZERO
    } else {
        hi + (lo - hi).exp().ln_1p()
    }
}

fn check_pair(logits: &LogitSeq, target: &LabelSeq) -> Result<()> {
    if logits.classes() != target.alphabet_size() + 1 {
        return Err(Error::dim(
            "ctc",
            format!(
                "logits have {} classes but the alphabet has {} symbols plus blank",
                logits.classes(),
                target.alphabet_size()
            ),
        ));
    }
    Ok(())
}

/// Negative log-likelihood of `target` and its exact gradient with respect
/// to the pre-softmax logits.
pub fn ctc_loss(logits: &LogitSeq, target: &LabelSeq) -> Result<(f64, Vec<f64>)> {
    check_pair(logits, target)?;
    let (frames, classes) = (logits.frames(), logits.classes());
    let min_len = target.min_frames();
    if frames < min_len {
        return Err(Error::Infeasible { seq_len: frames, min_len });
    }
    let blank = target.blank();
    let ext: Vec<usize> = std::iter::once(blank)
        .chain(target.labels().iter().flat_map(|&l| [l, blank]))
        .collect();
    let s_len = ext.len();
    let lp = logits.log_probs();
    let emit = |t: usize, s: usize| lp[t * classes + ext[s]];
    let skip_ok = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let mut alpha = vec![LOG_ZERO; frames * s_len];
    alpha[0] = emit(0, 0);
    if s_len > 1 {
        alpha[1] = emit(0, 1);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if skip_ok(s) {
                acc = log_add(acc, prev[s - 2]);
            }
            alpha[t * s_len + s] = if acc <= LOG_ZERO / 2.0 { LOG_ZERO } else { acc + emit(t, s) };
        }
    }
    let last = (frames - 1) * s_len;
    let log_p = if s_len > 1 {
        log_add(alpha[last + s_len - 1], alpha[last + s_len - 2])
    } else {
        alpha[last]
    };
    if log_p <= LOG_ZERO / 2.0 {
        return Err(Error::Infeasible { seq_len: frames, min_len });
    }

    let mut beta = vec![LOG_ZERO; frames * s_len];
    beta[last + s_len - 1] = emit(frames - 1, s_len - 1);
    if s_len > 1 {
        beta[last + s_len - 2] = emit(frames - 1, s_len - 2);
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut acc = next[s];
            if s + 1 < s_len {
                acc = log_add(acc, next[s + 1]);
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                acc = log_add(acc, next[s + 2]);
            }
            beta[t * s_len + s] = if acc <= LOG_ZERO / 2.0 { LOG_ZERO } else { acc + emit(t, s) };
        }
    }

    // grad = softmax − occupancy, occupancy_k = Σ_{s: ext[s]=k} α·β / (p·y_k)
    let mut grad = vec![0.0; frames * classes];
    for t in 0..frames {
        let row = &mut grad[t * classes..(t + 1) * classes];
        for (k, g) in row.iter_mut().enumerate() {
            *g = lp[t * classes + k].exp();
        }
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if ab <= LOG_ZERO / 2.0 {
                continue;
            }
            row[ext[s]] -= (ab - emit(t, s) - log_p).exp();
        }
    }
    // rounding in the normalizer can push log p a hair above zero
    Ok(((-log_p).max(0.0), grad))
}

/// Sums path probabilities by enumerating all `(K+1)^Tseq` frame paths.
/// Returns `+∞` when the target is unreachable.
pub fn ctc_brute_force(logits: &LogitSeq, target: &LabelSeq) -> Result<f64> {
    check_pair(logits, target)?;
    let (frames, classes) = (logits.frames(), logits.classes());
    let paths = (classes as f64).powi(frames as i32);
    if paths > BRUTE_FORCE_BUDGET {
        return Err(Error::SearchSpace { paths, budget: BRUTE_FORCE_BUDGET });
    }
    if target.len() > frames {
        return Ok(f64::INFINITY);
    }
    let probs: Vec<f64> = logits.log_probs().iter().map(|v| v.exp()).collect();
    let blank = target.blank();
    let mut path = vec![0usize; frames];
    let mut decoded = Vec::with_capacity(frames);
    let mut total = 0.0;
    loop {
        decoded.clear();
        let mut prev = None;
        for &k in &path {
            if Some(k) != prev && k != blank {
                decoded.push(k);
            }
            prev = Some(k);
        }
        if decoded == target.labels() {
            total += path.iter().enumerate().map(|(t, &k)| probs[t * classes + k]).product::<f64>();
        }
        // odometer increment
        let mut i = 0;
        loop {
            if i == frames {
                return Ok(if total > 0.0 { -total.ln() } else { f64::INFINITY });
            }
            path[i] += 1;
            if path[i] < classes {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Per-frame argmax (ties go to the lowest index), merge repeats, drop blanks.
pub fn best_path_decode(logits: &LogitSeq) -> LabelSeq {
    let blank = logits.classes() - 1;
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..logits.frames() {
        let row = logits.frame(t);
        let mut best = 0;
        for (k, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = k;
            }
        }
        if Some(best) != prev && best != blank {
            out.push(best);
        }
        prev = Some(best);
    }
    LabelSeq { labels: out, alphabet_size: blank }
}

/// Sum of independent losses, segment `t` scored against line `t`.
pub fn ctc_per_line(segments: &[LogitSeq], targets: &[LabelSeq]) -> Result<(f64, Vec<Vec<f64>>)> {
    if segments.len() != targets.len() {
        return Err(Error::Pairing { segments: segments.len(), targets: targets.len() });
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(segments.len());
    for (seg, tgt) in segments.iter().zip(targets) {
        let (loss, g) = ctc_loss(seg, tgt)?;
        total += loss;
        grads.push(g);
    }
    Ok((total, grads))
}
