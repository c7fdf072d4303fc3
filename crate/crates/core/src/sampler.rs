//! Training-instance construction: mixed positive/negative candidates for the
//! decision loss and multi-scale hard negatives for the selection loss.
//!
//! Every builder is a pure function of its inputs and an [`InstanceSeed`], so
//! instance streams are reproducible and can be built in parallel.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{word_normalize, Candidate, DialogueContext, KnowledgeBase, SchemaCatalog};
use crate::neural::SeededRng;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SamplerError {
    #[error("turn {turn} has no positive candidate")]
    NoPositive { turn: usize },
    #[error("knowledge base of size {size} cannot supply negatives (need at least 2)")]
    InsufficientKnowledge { size: usize },
}

/// Negatives per positive.
pub const NEGATIVES_PER_POSITIVE: usize = 4;

/// Identifies the random stream of one instance: `(seed, epoch, turn)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceSeed {
    pub seed: u64,
    pub epoch: u32,
    pub turn: u32,
}

impl InstanceSeed {
    pub fn new(seed: u64, epoch: usize, turn: usize) -> Self {
        Self {
            seed,
            epoch: epoch as u32,
            turn: turn as u32,
        }
    }

    pub fn rng(self) -> SeededRng {
        let mut rng = SeededRng::seed_from_u64(self.seed);
        rng.set_stream((u64::from(self.epoch) << 32) | u64::from(self.turn));
        rng
    }
}

/// Draws up to `k` distinct items of `pool` uniformly, in draw order.
fn draw(pool: &[usize], k: usize, rng: &mut SeededRng) -> Vec<usize> {
    let k = k.min(pool.len());
    index::sample(rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i])
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecisionInstance {
    pub turn: usize,
    pub positives: Vec<Candidate>,
    pub negatives: Vec<Candidate>,
}

/// Positives plus, per positive, two negatives from the positives' own pool
/// and two from the opposite pool, drawn uniformly without replacement.
/// Knowledge turns carry snippet positives, API turns schema positives.
pub fn build_decision_samples(
    turn: usize,
    positives: &[Candidate],
    kb: &KnowledgeBase,
    schema: &SchemaCatalog,
    seed: InstanceSeed,
) -> Result<DecisionInstance, SamplerError> {
    if positives.is_empty() {
        return Err(SamplerError::NoPositive { turn });
    }
    let pos: BTreeSet<Candidate> = positives.iter().copied().collect();
    let snippet_pool: Vec<usize> = (0..kb.len())
        .filter(|&i| !pos.contains(&Candidate::Snippet(i)))
        .collect();
    let schema_pool: Vec<usize> = (0..schema.len())
        .filter(|&i| !pos.contains(&Candidate::Schema(i)))
        .collect();
    let per_pool = NEGATIVES_PER_POSITIVE / 2 * pos.len();
    let mut rng = seed.rng();
    let snippets = draw(&snippet_pool, per_pool, &mut rng);
    let schemas = draw(&schema_pool, per_pool, &mut rng);
    let mut negatives: Vec<Candidate> = Vec::with_capacity(2 * per_pool);
    let mut it_s = snippets.into_iter().map(Candidate::Snippet);
    let mut it_d = schemas.into_iter().map(Candidate::Schema);
    let knowledge_turn = matches!(positives[0], Candidate::Snippet(_));
    loop {
        let (a, b) = if knowledge_turn {
            (it_s.next(), it_d.next())
        } else {
            (it_d.next(), it_s.next())
        };
        if a.is_none() && b.is_none() {
            break;
        }
        negatives.extend(a);
        negatives.extend(b);
    }
    Ok(DecisionInstance {
        turn,
        positives: pos.into_iter().collect(),
        negatives,
    })
}

/// Granularity of a selection negative, coarse to fine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NegativeScale {
    Random,
    InDomain,
    InEntity,
    CrossEntity,
}

/// A selection negative. `scale` is the slot it fills; `source` is the pool
/// it was drawn from, which differs from `scale` after a fallback.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaggedNegative {
    pub snippet: usize,
    pub scale: NegativeScale,
    pub source: NegativeScale,
}

impl TaggedNegative {
    pub fn is_fallback(&self) -> bool {
        self.scale != self.source
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionInstance {
    pub turn: usize,
    pub positive: usize,
    pub negatives: Vec<TaggedNegative>,
}

/// How selection negatives are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeStrategy {
    /// One negative per scale with fallback chains.
    #[default]
    MultiScale,
    /// Four uniformly random negatives.
    RandomOnly,
}

/// `(domain, entity_id)` of every named entity mentioned verbatim in the
/// context (case-insensitive, on word boundaries).
pub fn mentioned_entities(ctx: &DialogueContext, kb: &KnowledgeBase) -> Vec<(String, String)> {
    let hay = format!(" {} ", word_normalize(&ctx.joined_text()));
    kb.entities()
        .into_iter()
        .filter(|(_, _, name)| {
            let needle = word_normalize(name);
            !needle.is_empty() && hay.contains(&format!(" {needle} "))
        })
        .map(|(d, e, _)| (d, e))
        .collect()
}

/// Candidate pool of each scale for `positive`, in knowledge-base order.
pub fn scale_pool(
    scale: NegativeScale,
    positive: usize,
    mentioned: &[(String, String)],
    kb: &KnowledgeBase,
) -> Vec<usize> {
    let p = kb.get(positive);
    let base: Vec<usize> = match scale {
        NegativeScale::Random => (0..kb.len()).collect(),
        NegativeScale::InDomain => kb.in_domain(&p.domain).to_vec(),
        NegativeScale::InEntity => match &p.entity_id {
            Some(e) => kb.in_entity(&p.domain, Some(e)).to_vec(),
            None => Vec::new(),
        },
        NegativeScale::CrossEntity => (0..kb.len())
            .filter(|&i| {
                let s = kb.get(i);
                let Some(e) = &s.entity_id else { return false };
                let own = s.domain == p.domain && Some(e) == p.entity_id.as_ref();
                !own && mentioned.iter().any(|(d, m)| *d == s.domain && m == e)
            })
            .collect(),
    };
    base.into_iter().filter(|&i| i != positive).collect()
}

fn fallback_chain(scale: NegativeScale) -> &'static [NegativeScale] {
    use NegativeScale::*;
    match scale {
        CrossEntity => &[CrossEntity, InDomain, Random],
        InEntity => &[InEntity, InDomain, Random],
        InDomain => &[InDomain, Random],
        Random => &[Random],
    }
}

/// One negative per scale, finest first, with fallback chains
/// InEntity/CrossEntity -> InDomain -> Random. Never repeats a snippet or
/// returns the positive; returns fewer than four only when the knowledge base
/// is too small.
pub fn build_selection_negatives(
    positive: usize,
    ctx: &DialogueContext,
    kb: &KnowledgeBase,
    seed: InstanceSeed,
) -> Result<Vec<TaggedNegative>, SamplerError> {
    if kb.len() < 2 {
        return Err(SamplerError::InsufficientKnowledge { size: kb.len() });
    }
    let mentioned = mentioned_entities(ctx, kb);
    let mut rng = seed.rng();
    let mut chosen: BTreeSet<usize> = BTreeSet::new();
    let mut out = Vec::with_capacity(NEGATIVES_PER_POSITIVE);
    use NegativeScale::*;
    for scale in [CrossEntity, InEntity, InDomain, Random] {
        for &source in fallback_chain(scale) {
            let pool: Vec<usize> = scale_pool(source, positive, &mentioned, kb)
                .into_iter()
                .filter(|i| !chosen.contains(i))
                .collect();
            if let Some(&snippet) = draw(&pool, 1, &mut rng).first() {
                chosen.insert(snippet);
                out.push(TaggedNegative {
                    snippet,
                    scale,
                    source,
                });
                break;
            }
        }
    }
    Ok(out)
}

/// Four uniformly random negatives, all tagged [`NegativeScale::Random`].
pub fn build_random_negatives(
    positive: usize,
    kb: &KnowledgeBase,
    seed: InstanceSeed,
) -> Result<Vec<TaggedNegative>, SamplerError> {
    if kb.len() < 2 {
        return Err(SamplerError::InsufficientKnowledge { size: kb.len() });
    }
    let pool: Vec<usize> = (0..kb.len()).filter(|&i| i != positive).collect();
    let mut rng = seed.rng();
    Ok(draw(&pool, NEGATIVES_PER_POSITIVE, &mut rng)
        .into_iter()
        .map(|snippet| TaggedNegative {
            snippet,
            scale: NegativeScale::Random,
            source: NegativeScale::Random,
        })
        .collect())
}

pub fn build_selection_instance(
    turn: usize,
    positive: usize,
    ctx: &DialogueContext,
    kb: &KnowledgeBase,
    strategy: NegativeStrategy,
    seed: InstanceSeed,
) -> Result<SelectionInstance, SamplerError> {
    let negatives = match strategy {
        NegativeStrategy::MultiScale => build_selection_negatives(positive, ctx, kb, seed)?,
        NegativeStrategy::RandomOnly => build_random_negatives(positive, kb, seed)?,
    };
    Ok(SelectionInstance {
        turn,
        positive,
        negatives,
    })
}
