use std::collections::HashSet;

use super::KgeModel;
use crate::corpus::Triple;
use crate::error::{Error, Result};

/// Averages over both ranking directions of every evaluated triple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkPredReport {
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub mean_rank: f64,
    pub mrr: f64,
    /// Number of rankings averaged (two per triple).
    pub rankings: usize,
}

impl LinkPredReport {
    /// Builds a report from individual ranks.
    pub fn from_ranks(ranks: &[f64]) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::Undefined("no rankings to average".into()));
        }
        let n = ranks.len() as f64;
        let hits = |k: f64| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        Ok(LinkPredReport {
            hits1: hits(1.0),
            hits3: hits(3.0),
            hits10: hits(10.0),
            mean_rank: ranks.iter().sum::<f64>() / n,
            mrr: ranks.iter().map(|r| 1.0 / r).sum::<f64>() / n,
            rankings: ranks.len(),
        })
    }
}

/// Rank of `true_score` among `candidate_scores` (which exclude the true
/// entity). Ties take the mean position of their group.
pub fn rank_of(true_score: f64, candidate_scores: impl IntoIterator<Item = f64>) -> f64 {
    let mut greater = 0usize;
    let mut ties = 0usize;
    for s in candidate_scores {
        if s > true_score {
            greater += 1;
        } else if s == true_score {
            ties += 1;
        }
    }
    1.0 + greater as f64 + ties as f64 / 2.0
}

/// Filtered link prediction: for each triple the true tail is ranked
/// against every entity `e` with `(h, r, e)` not known true, and likewise
/// the true head.
pub fn link_prediction_eval(
    model: &KgeModel,
    eval_triples: &[Triple],
    all_known_triples: &[Triple],
) -> Result<LinkPredReport> {
    for &t in eval_triples {
        model.check(t)?;
    }
    let known: HashSet<Triple> = all_known_triples.iter().copied().collect();
    let n = model.num_entities();
    let mut ranks = Vec::with_capacity(eval_triples.len() * 2);
    for &t in eval_triples {
        let (h, r, tl) = (t.head as usize, t.relation as usize, t.tail as usize);
        let true_score = model.score_unchecked(h, r, tl);

        let tails = (0..n)
            .filter(|&e| e != tl && !known.contains(&Triple::new(t.head, t.relation, e as u32)))
            .map(|e| model.score_unchecked(h, r, e));
        ranks.push(rank_of(true_score, tails));

        let heads = (0..n)
            .filter(|&e| e != h && !known.contains(&Triple::new(e as u32, t.relation, t.tail)))
            .map(|e| model.score_unchecked(e, r, tl));
        ranks.push(rank_of(true_score, heads));
    }
    LinkPredReport::from_ranks(&ranks)
}
