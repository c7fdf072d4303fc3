//! Knowledge-turn detection, snippet ranking and ensemble combiners.
//!
//! Schema-guided detection compares the best knowledge-snippet probability
//! with the best schema-description probability: the turn is knowledge
//! seeking iff `max_K p >= max_S p`.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::corpus::{word_normalize, Candidate, DialogueContext, KnowledgeBase, SchemaCatalog};
use crate::sampler::mentioned_entities;
use crate::scorer::{assemble_context_only, EncodedContext, ScorerError, ScorerModel};
use crate::tokenizer::Vocab;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("candidate set is empty")]
    EmptyCatalog,
    #[error("ensemble has no members")]
    EmptyEnsemble,
    #[error("ensemble member {member} scores a different candidate set")]
    CandidateMismatch { member: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error(transparent)]
    Scorer(#[from] ScorerError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredCandidate {
    pub candidate: Candidate,
    pub probability: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionResult {
    pub knowledge_seeking: bool,
    pub best_knowledge: ScoredCandidate,
    pub best_schema: ScoredCandidate,
}

/// The decision inequality; ties favor knowledge access.
pub fn decide(max_knowledge: f64, max_schema: f64) -> bool {
    max_knowledge >= max_schema
}

fn best(scores: &[ScoredCandidate]) -> Option<ScoredCandidate> {
    scores.iter().copied().reduce(|a, b| if b.probability > a.probability { b } else { a })
}

/// Applies the decision rule to already computed scores. The first maximum
/// of each pool is reported.
pub fn detect_from_scores(
    knowledge: &[ScoredCandidate],
    schema: &[ScoredCandidate],
) -> Result<DetectionResult, InferenceError> {
    let bk = best(knowledge).ok_or(InferenceError::EmptyCatalog)?;
    let bs = best(schema).ok_or(InferenceError::EmptyCatalog)?;
    Ok(DetectionResult {
        knowledge_seeking: decide(bk.probability, bs.probability),
        best_knowledge: bk,
        best_schema: bs,
    })
}

/// Context-only rule: knowledge seeking iff `p >= 0.5`.
pub fn context_only_decision(probability: f64) -> bool {
    probability >= 0.5
}

/// Tokenized candidate texts, built once per knowledge base and catalog.
#[derive(Debug, Clone)]
pub struct CandidatePool {
    pub snippets: Vec<Vec<u32>>,
    pub schemas: Vec<Vec<u32>>,
}

impl CandidatePool {
    pub fn new(vocab: &Vocab, kb: &KnowledgeBase, schema: &SchemaCatalog) -> Self {
        Self {
            snippets: (0..kb.len())
                .map(|i| vocab.encode(&Candidate::Snippet(i).text(kb, schema)))
                .collect(),
            schemas: (0..schema.len())
                .map(|i| vocab.encode(&Candidate::Schema(i).text(kb, schema)))
                .collect(),
        }
    }

    pub fn ids(&self, c: Candidate) -> &[u32] {
        match c {
            Candidate::Snippet(i) => &self.snippets[i],
            Candidate::Schema(i) => &self.schemas[i],
        }
    }
}

/// Snippet ids to score for a context. `None` scores everything. With
/// `Some`, snippets of mentioned entities (plus their domains' entity-less
/// documents) are kept; failing that, snippets of mentioned domains; failing
/// that, everything.
pub fn prefilter_snippets(ctx: &DialogueContext, kb: &KnowledgeBase) -> Vec<usize> {
    let mentioned = mentioned_entities(ctx, kb);
    if !mentioned.is_empty() {
        return (0..kb.len())
            .filter(|&i| {
                let s = kb.get(i);
                mentioned.iter().any(|(d, e)| {
                    *d == s.domain && s.entity_id.as_ref().is_none_or(|id| id == e)
                })
            })
            .collect();
    }
    let hay = format!(" {} ", word_normalize(&ctx.joined_text()));
    let domains: Vec<&String> = kb
        .domain_index()
        .keys()
        .filter(|d| hay.contains(&format!(" {} ", word_normalize(d))))
        .collect();
    if !domains.is_empty() {
        return (0..kb.len())
            .filter(|&i| domains.contains(&&kb.get(i).domain))
            .collect();
    }
    (0..kb.len()).collect()
}

/// Probability of each candidate, in the given order.
pub fn score_candidates(
    model: &ScorerModel,
    ctx: &EncodedContext,
    pool: &CandidatePool,
    candidates: &[Candidate],
) -> Result<Vec<ScoredCandidate>, InferenceError> {
    let ids: Vec<Vec<u32>> = candidates.iter().map(|&c| pool.ids(c).to_vec()).collect();
    let probs = model.score_candidates(ctx, &ids)?;
    Ok(candidates
        .iter()
        .zip(probs)
        .map(|(&candidate, probability)| ScoredCandidate {
            candidate,
            probability,
        })
        .collect())
}

/// Scores `snippets` and every schema description, then applies the
/// decision rule.
pub fn detect_schema_guided(
    model: &ScorerModel,
    ctx: &EncodedContext,
    pool: &CandidatePool,
    snippets: &[usize],
) -> Result<DetectionResult, InferenceError> {
    let ks: Vec<Candidate> = snippets.iter().map(|&i| Candidate::Snippet(i)).collect();
    let ss: Vec<Candidate> = (0..pool.schemas.len()).map(Candidate::Schema).collect();
    let k = score_candidates(model, ctx, pool, &ks)?;
    let s = score_candidates(model, ctx, pool, &ss)?;
    detect_from_scores(&k, &s)
}

/// Single forward on `[CLS] context [SEP]`.
pub fn detect_context_only(model: &ScorerModel, ctx: &EncodedContext) -> Result<(bool, f64), InferenceError> {
    let p = model.score(&assemble_context_only(ctx, model.max_len())?)?;
    Ok((context_only_decision(p), p))
}

/// Snippet ids with scores, best first. Equal scores keep the input order.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub entries: Vec<(usize, f64)>,
}

impl Ranking {
    /// Sorts `(snippet, score)` pairs in knowledge-base order by descending
    /// score (stable).
    pub fn from_scores(mut scores: Vec<(usize, f64)>) -> Self {
        scores.sort_by(|a, b| b.1.total_cmp(&a.1));
        Self { entries: scores }
    }

    pub fn ids(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.0).collect()
    }

    pub fn top(&self) -> Option<usize> {
        self.entries.first().map(|e| e.0)
    }

    pub fn truncated(mut self, k: usize) -> Self {
        self.entries.truncate(k);
        self
    }

    pub fn score_map(&self) -> BTreeMap<usize, f64> {
        self.entries.iter().copied().collect()
    }
}

/// Full ranking of `snippets` (given in knowledge-base order).
pub fn rank_snippets(
    model: &ScorerModel,
    ctx: &EncodedContext,
    pool: &CandidatePool,
    snippets: &[usize],
) -> Result<Ranking, InferenceError> {
    if snippets.is_empty() {
        return Err(InferenceError::EmptyCatalog);
    }
    let cands: Vec<Candidate> = snippets.iter().map(|&i| Candidate::Snippet(i)).collect();
    let scored = score_candidates(model, ctx, pool, &cands)?;
    Ok(Ranking::from_scores(
        snippets
            .iter()
            .zip(scored)
            .map(|(&i, s)| (i, s.probability))
            .collect(),
    ))
}

/// The `k` best snippets; the first is the argmax snippet.
pub fn select_topk(
    model: &ScorerModel,
    ctx: &EncodedContext,
    pool: &CandidatePool,
    snippets: &[usize],
    k: usize,
) -> Result<Ranking, InferenceError> {
    if k == 0 {
        return Err(InferenceError::ZeroK);
    }
    Ok(rank_snippets(model, ctx, pool, snippets)?.truncated(k))
}

/// Majority vote; an exact tie counts as knowledge seeking.
pub fn ensemble_vote(decisions: &[bool]) -> Result<bool, InferenceError> {
    if decisions.is_empty() {
        return Err(InferenceError::EmptyEnsemble);
    }
    let yes = decisions.iter().filter(|&&d| d).count();
    Ok(2 * yes >= decisions.len())
}

/// Per-candidate arithmetic mean of member probabilities, summed in member
/// order, ranked with ties in candidate-id order.
pub fn ensemble_average(members: &[BTreeMap<usize, f64>]) -> Result<Ranking, InferenceError> {
    let first = members.first().ok_or(InferenceError::EmptyEnsemble)?;
    for (m, member) in members.iter().enumerate().skip(1) {
        if member.len() != first.len() || !member.keys().eq(first.keys()) {
            return Err(InferenceError::CandidateMismatch { member: m });
        }
    }
    let n = members.len() as f64;
    let means: Vec<(usize, f64)> = first
        .keys()
        .map(|&c| (c, members.iter().map(|m| m[&c]).sum::<f64>() / n))
        .collect();
    Ok(Ranking::from_scores(means))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sc(c: Candidate, p: f64) -> ScoredCandidate {
        ScoredCandidate {
            candidate: c,
            probability: p,
        }
    }

    #[test]
    fn decision_rule_cases() {
        let r = detect_from_scores(&[sc(Candidate::Snippet(0), 0.8)], &[sc(Candidate::Schema(0), 0.7)]).unwrap();
        assert!(r.knowledge_seeking);
        assert!(decide(0.5, 0.5));
        assert!(!decide(0.3, 0.9));
        assert!(matches!(detect_from_scores(&[], &[]), Err(InferenceError::EmptyCatalog)));
        assert!(context_only_decision(0.7));
        assert!(context_only_decision(0.5));
        assert!(!context_only_decision(0.4999));
    }

    #[test]
    fn ranking_cases() {
        let r = Ranking::from_scores(vec![(1, 0.2), (2, 0.9), (3, 0.5)]);
        assert_eq!(r.ids(), vec![2, 3, 1]);
        assert_eq!(r.clone().truncated(7).ids().len(), 3);
        let tied = Ranking::from_scores(vec![(4, 0.5), (1, 0.5), (9, 0.5)]);
        assert_eq!(tied.ids(), vec![4, 1, 9]);
    }

    #[test]
    fn vote_cases() {
        assert!(ensemble_vote(&[true, true, false]).unwrap());
        assert!(ensemble_vote(&[true, false]).unwrap());
        assert!(ensemble_vote(&[true, true, true, true, false, false, false]).unwrap());
        assert!(!ensemble_vote(&[false, false, true]).unwrap());
        assert!(matches!(ensemble_vote(&[]), Err(InferenceError::EmptyEnsemble)));
    }

    #[test]
    fn average_cases() {
        let a: BTreeMap<usize, f64> = [(0, 0.2), (1, 0.8)].into();
        let b: BTreeMap<usize, f64> = [(0, 0.6), (1, 0.4)].into();
        let r = ensemble_average(&[a.clone(), b]).unwrap();
        assert_eq!(r.ids(), vec![1, 0]);
        assert!((r.entries[0].1 - 0.6).abs() < 1e-12);
        assert!((r.entries[1].1 - 0.4).abs() < 1e-12);
        let single = ensemble_average(std::slice::from_ref(&a)).unwrap();
        assert_eq!(single, Ranking::from_scores(a.clone().into_iter().collect()));
        let missing: BTreeMap<usize, f64> = [(0, 0.5)].into();
        assert!(matches!(
            ensemble_average(&[a, missing]),
            Err(InferenceError::CandidateMismatch { member: 1 })
        ));
    }

    proptest! {
        #[test]
        fn decision_invariant_under_monotone_transform(
            k in prop::collection::vec(0.001f64..0.999, 1..8),
            s in prop::collection::vec(0.001f64..0.999, 1..8),
            a in 0.1f64..5.0,
            b in -2.0f64..2.0,
        ) {
            let f = |p: f64| (a * p + b).tanh();
            let ks: Vec<_> = k.iter().enumerate().map(|(i, &p)| sc(Candidate::Snippet(i), p)).collect();
            let ss: Vec<_> = s.iter().enumerate().map(|(i, &p)| sc(Candidate::Schema(i), p)).collect();
            let kt: Vec<_> = ks.iter().map(|c| sc(c.candidate, f(c.probability))).collect();
            let st: Vec<_> = ss.iter().map(|c| sc(c.candidate, f(c.probability))).collect();
            prop_assert_eq!(
                detect_from_scores(&ks, &ss).unwrap().knowledge_seeking,
                detect_from_scores(&kt, &st).unwrap().knowledge_seeking
            );
        }

        #[test]
        fn full_ranking_is_permutation(scores in prop::collection::vec(0.0f64..1.0, 1..20)) {
            let r = Ranking::from_scores(scores.iter().copied().enumerate().collect());
            let mut ids = r.ids();
            ids.sort_unstable();
            prop_assert_eq!(ids, (0..scores.len()).collect::<Vec<_>>());
            prop_assert!(r.entries.windows(2).all(|w| w[0].1 >= w[1].1));
        }

        #[test]
        fn identical_members_average_to_member(scores in prop::collection::vec(0.0f64..1.0, 1..10), n in 1usize..6) {
            let m: BTreeMap<usize, f64> = scores.iter().copied().enumerate().collect();
            let members = vec![m.clone(); n];
            let avg = ensemble_average(&members).unwrap();
            prop_assert_eq!(avg.ids(), Ranking::from_scores(m.into_iter().collect()).ids());
        }

        #[test]
        fn vote_matches_count(bits in prop::collection::vec(any::<bool>(), 1..9)) {
            let yes = bits.iter().filter(|&&b| b).count();
            prop_assert_eq!(ensemble_vote(&bits).unwrap(), yes * 2 >= bits.len());
        }
    }
}
