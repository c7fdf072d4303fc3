//! Detection, selection and generation metrics.
//!
//! Text metrics share one tokenizer: lowercase, alphanumeric runs are words,
//! every other non-space character is a token of its own.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("hypothesis has no tokens")]
    EmptyHypothesis,
    #[error("no references given")]
    NoReference,
    #[error("BLEU order must be in 1..=4, got {0}")]
    InvalidOrder(usize),
}

/// Smoothing value substituted for a zero n-gram match count.
pub const BLEU_EPSILON: f64 = 1e-9;

pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.to_lowercase().chars() {
        if c.is_alphanumeric() {
            word.push(c);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1 of boolean predictions. Each value is 0 when its
/// denominator is 0, except that all three are 1 when there are neither gold
/// nor predicted positives.
pub fn detection_prf(preds: &[bool], golds: &[bool]) -> Result<Prf, MetricsError> {
    if preds.len() != golds.len() {
        return Err(MetricsError::LengthMismatch {
            left: preds.len(),
            right: golds.len(),
        });
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &g) in preds.iter().zip(golds) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp + fp == 0 && tp + fn_ == 0 {
        return Ok(Prf {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        });
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Prf {
        precision,
        recall,
        f1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionScores {
    pub mrr5: f64,
    pub recall1: f64,
    pub recall5: f64,
}

/// Mean reciprocal rank cut at 5 and recall@1/5 of one gold id per instance.
/// An empty ranking scores 0 on all three.
pub fn selection_metrics(
    rankings: &[Vec<usize>],
    golds: &[usize],
) -> Result<SelectionScores, MetricsError> {
    if rankings.len() != golds.len() {
        return Err(MetricsError::LengthMismatch {
            left: rankings.len(),
            right: golds.len(),
        });
    }
    if rankings.is_empty() {
        return Ok(SelectionScores {
            mrr5: 0.0,
            recall1: 0.0,
            recall5: 0.0,
        });
    }
    let (mut rr, mut r1, mut r5) = (0.0, 0.0, 0.0);
    for (ranking, gold) in rankings.iter().zip(golds) {
        if let Some(pos) = ranking.iter().take(5).position(|c| c == gold) {
            rr += 1.0 / (pos + 1) as f64;
            r5 += 1.0;
            if pos == 0 {
                r1 += 1.0;
            }
        }
    }
    let n = rankings.len() as f64;
    Ok(SelectionScores {
        mrr5: rr / n,
        recall1: r1 / n,
        recall5: r5 / n,
    })
}

/// Sentence BLEU-`n` with uniform weights, clipped n-gram precision (clip at
/// the maximum count over references), [`BLEU_EPSILON`] for zero matches and
/// brevity penalty against the closest reference length.
pub fn bleu(hypothesis: &str, references: &[&str], n: usize) -> Result<f64, MetricsError> {
    if !(1..=4).contains(&n) {
        return Err(MetricsError::InvalidOrder(n));
    }
    if references.is_empty() {
        return Err(MetricsError::NoReference);
    }
    let hyp = tokenize(hypothesis);
    if hyp.is_empty() {
        return Err(MetricsError::EmptyHypothesis);
    }
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokenize(r)).collect();
    let mut log_sum = 0.0;
    for order in 1..=n {
        let hyp_counts = ngram_counts(&hyp, order);
        let ref_counts: Vec<_> = refs.iter().map(|r| ngram_counts(r, order)).collect();
        let total = hyp.len().saturating_sub(order - 1);
        let mut matched = 0usize;
        for (gram, &c) in &hyp_counts {
            let max_ref = ref_counts
                .iter()
                .map(|rc| rc.get(gram).copied().unwrap_or(0))
                .max()
                .unwrap_or(0);
            matched += c.min(max_ref);
        }
        let numerator = if matched == 0 { BLEU_EPSILON } else { matched as f64 };
        log_sum += (numerator / total.max(1) as f64).ln();
    }
    let h = hyp.len();
    let r = refs
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(h), len))
        .expect("at least one reference");
    let bp = if h < r {
        (1.0 - r as f64 / h as f64).exp()
    } else {
        1.0
    };
    Ok(bp * (log_sum / n as f64).exp())
}

fn f1(overlap: f64, hyp_total: f64, ref_total: f64) -> f64 {
    if overlap == 0.0 {
        return 0.0;
    }
    let p = overlap / hyp_total;
    let r = overlap / ref_total;
    2.0 * p * r / (p + r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RougeVariant {
    One,
    Two,
    L,
}

/// ROUGE F1. When neither side has an n-gram of the requested order the
/// score is 1 for identical token sequences and 0 otherwise.
pub fn rouge(hypothesis: &str, reference: &str, variant: RougeVariant) -> Result<f64, MetricsError> {
    let hyp = tokenize(hypothesis);
    if hyp.is_empty() {
        return Err(MetricsError::EmptyHypothesis);
    }
    let refr = tokenize(reference);
    let n = match variant {
        RougeVariant::One => 1,
        RougeVariant::Two => 2,
        RougeVariant::L => {
            let l = lcs_len(&hyp, &refr) as f64;
            return Ok(f1(l, hyp.len() as f64, refr.len() as f64));
        }
    };
    let hc = ngram_counts(&hyp, n);
    let rc = ngram_counts(&refr, n);
    let ht: usize = hc.values().sum();
    let rt: usize = rc.values().sum();
    if ht == 0 && rt == 0 {
        return Ok(if hyp == refr { 1.0 } else { 0.0 });
    }
    let overlap: usize = hc
        .iter()
        .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
        .sum();
    Ok(f1(overlap as f64, ht as f64, rt as f64))
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Suffix-stripping stemmer: removes the first of `ing, es, ed, ly, s` that
/// leaves at least three characters.
pub fn stem(word: &str) -> &str {
    for suffix in ["ing", "es", "ed", "ly", "s"] {
        if let Some(base) = word.strip_suffix(suffix) {
            if base.chars().count() >= 3 {
                return base;
            }
        }
    }
    word
}

/// Unigram METEOR without synonym tables. Alignment is greedy: each
/// hypothesis token, left to right, takes the leftmost unaligned reference
/// token that matches exactly; a second pass does the same on stems.
pub fn meteor_lite(hypothesis: &str, reference: &str) -> Result<f64, MetricsError> {
    let hyp = tokenize(hypothesis);
    if hyp.is_empty() {
        return Err(MetricsError::EmptyHypothesis);
    }
    let refr = tokenize(reference);
    let mut hyp_to_ref: Vec<Option<usize>> = vec![None; hyp.len()];
    let mut ref_used = vec![false; refr.len()];
    let stages: [fn(&str) -> &str; 2] = [|w| w, stem];
    for key in stages {
        for (i, h) in hyp.iter().enumerate() {
            if hyp_to_ref[i].is_some() {
                continue;
            }
            let hk = key(h);
            if let Some(j) = (0..refr.len()).find(|&j| !ref_used[j] && key(&refr[j]) == hk) {
                hyp_to_ref[i] = Some(j);
                ref_used[j] = true;
            }
        }
    }
    let pairs: Vec<(usize, usize)> = hyp_to_ref
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| (i, j)))
        .collect();
    let m = pairs.len();
    if m == 0 {
        return Ok(0.0);
    }
    let chunks = 1 + pairs
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count();
    let p = m as f64 / hyp.len() as f64;
    let r = m as f64 / refr.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    Ok(fmean * (1.0 - penalty))
}

/// Names of the response metrics in report order.
pub const RESPONSE_METRICS: [&str; 8] = [
    "bleu1",
    "bleu2",
    "bleu3",
    "bleu4",
    "rouge1",
    "rouge2",
    "rougeL",
    "meteor_lite",
];

/// All response metrics of one hypothesis against one reference.
pub fn response_scores(hypothesis: &str, reference: &str) -> Result<[f64; 8], MetricsError> {
    let refs = [reference];
    Ok([
        bleu(hypothesis, &refs, 1)?,
        bleu(hypothesis, &refs, 2)?,
        bleu(hypothesis, &refs, 3)?,
        bleu(hypothesis, &refs, 4)?,
        rouge(hypothesis, reference, RougeVariant::One)?,
        rouge(hypothesis, reference, RougeVariant::Two)?,
        rouge(hypothesis, reference, RougeVariant::L)?,
        meteor_lite(hypothesis, reference)?,
    ])
}

/// Metric name to value for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: u8,
    pub metrics: BTreeMap<String, f64>,
    pub count: usize,
}

impl EvalReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    pub fn detection(preds: &[bool], golds: &[bool]) -> Result<Self, MetricsError> {
        let prf = detection_prf(preds, golds)?;
        Ok(Self {
            task: 1,
            metrics: [
                ("precision", prf.precision),
                ("recall", prf.recall),
                ("f1", prf.f1),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
            count: golds.len(),
        })
    }

    pub fn selection(rankings: &[Vec<usize>], golds: &[usize]) -> Result<Self, MetricsError> {
        let s = selection_metrics(rankings, golds)?;
        Ok(Self {
            task: 2,
            metrics: [("mrr@5", s.mrr5), ("recall@1", s.recall1), ("recall@5", s.recall5)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            count: golds.len(),
        })
    }

    /// Sentence-level means. A missing or token-less hypothesis scores 0 on
    /// every metric.
    pub fn generation(hypotheses: &[Option<String>], references: &[String]) -> Result<Self, MetricsError> {
        if hypotheses.len() != references.len() {
            return Err(MetricsError::LengthMismatch {
                left: hypotheses.len(),
                right: references.len(),
            });
        }
        let mut sums = [0.0; 8];
        for (h, r) in hypotheses.iter().zip(references) {
            let scores = match h {
                Some(h) if !tokenize(h).is_empty() => response_scores(h, r)?,
                _ => [0.0; 8],
            };
            for (s, v) in sums.iter_mut().zip(scores) {
                *s += v;
            }
        }
        let n = references.len().max(1) as f64;
        Ok(Self {
            task: 3,
            metrics: RESPONSE_METRICS
                .iter()
                .zip(sums)
                .map(|(k, s)| (k.to_string(), s / n))
                .collect(),
            count: references.len(),
        })
    }
}
