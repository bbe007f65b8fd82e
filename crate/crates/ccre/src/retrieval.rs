//! Scenario retrieval: dynamic query construction, Jaccard and positional
//! match similarity, combined scoring, top-N selection, and temperature
//! softmax weights.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::Port;
use crate::history::HistoryDb;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("positional match rate needs equal lengths, got {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error("retrieval temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("cannot normalize an empty score list")]
    EmptyScores,
    #[error("mixing weight alpha must lie in [0, 1], got {0}")]
    BadAlpha(f64),
}

/// Retrieval hyperparameters: the Jaccard/positional mixing weight, the
/// softmax temperature for diagnostic weights, and the candidate count.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct RetrievalParams {
    pub alpha: f64,
    pub tau_r: f64,
    pub top_n: usize,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            tau_r: 1.0,
            top_n: 3,
        }
    }
}

/// The evolving decoding context: observed history concatenated with the
/// ports decoded so far. Its length is `K + step - 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryContext {
    pub tokens: Vec<Port>,
    pub origin: Port,
    pub step: usize,
}

impl QueryContext {
    pub fn compose(hist: &[Port], decoded: &[Port], origin: Port, step: usize) -> Self {
        debug_assert_eq!(decoded.len(), step - 1);
        let mut tokens = Vec::with_capacity(hist.len() + decoded.len());
        tokens.extend_from_slice(hist);
        tokens.extend_from_slice(decoded);
        Self {
            tokens,
            origin,
            step,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Set-level overlap of the unique non-sentinel ports of both sequences.
/// Returns 0 when both valid sets are empty.
pub fn jaccard(p: &[Port], c: &[Port], sentinel: Port) -> f64 {
    let mut pu: Vec<Port> = p.iter().copied().filter(|t| *t != sentinel).collect();
    let mut cu: Vec<Port> = c.iter().copied().filter(|t| *t != sentinel).collect();
    pu.sort_unstable();
    pu.dedup();
    cu.sort_unstable();
    cu.dedup();
    if pu.is_empty() && cu.is_empty() {
        return 0.0;
    }
    let inter = pu.iter().filter(|t| cu.binary_search(t).is_ok()).count();
    let union = pu.len() + cu.len() - inter;
    inter as f64 / union as f64
}

/// Positional match rate: matched positions where both tokens are valid,
/// over the count of positions where both are valid (clamped to 1).
pub fn pmr(p: &[Port], c: &[Port], sentinel: Port) -> Result<f64, RetrievalError> {
    if p.len() != c.len() {
        return Err(RetrievalError::LengthMismatch(p.len(), c.len()));
    }
    let mut matched = 0usize;
    let mut valid = 0usize;
    for (a, b) in p.iter().zip(c.iter()) {
        if *a != sentinel && *b != sentinel {
            valid += 1;
            if a == b {
                matched += 1;
            }
        }
    }
    Ok(matched as f64 / valid.max(1) as f64)
}

/// Aligns a stored prefix to the query length: keep the most recent `u`
/// entries, left-padding with the sentinel when the prefix is shorter.
pub fn align_prefix(prefix: &[Port], u: usize, sentinel: Port) -> Vec<Port> {
    if prefix.len() >= u {
        prefix[prefix.len() - u..].to_vec()
    } else {
        let mut out = vec![sentinel; u - prefix.len()];
        out.extend_from_slice(prefix);
        out
    }
}

/// One scored retrieval candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredScenario {
    /// Index into the database scenario table.
    pub scenario_idx: usize,
    pub id: u64,
    pub jac: f64,
    pub pmr: f64,
    pub score: f64,
    pub weight: f64,
}

/// Scores every scenario in the query origin's bucket, sorts by combined
/// score descending (ties by ascending insertion id), keeps the top N, and
/// attaches temperature-softmax weights over the kept set.
pub fn retrieve_top_n(
    db: &HistoryDb,
    query: &QueryContext,
    params: &RetrievalParams,
    sentinel: Port,
) -> Result<Vec<ScoredScenario>, RetrievalError> {
    if !(0.0..=1.0).contains(&params.alpha) {
        return Err(RetrievalError::BadAlpha(params.alpha));
    }
    let u = query.tokens.len();
    let mut scored: Vec<ScoredScenario> = db
        .bucket(query.origin)
        .iter()
        .map(|&idx| {
            let sc = db.scenario(idx);
            let aligned = align_prefix(&sc.prefix, u, sentinel);
            let jac = jaccard(&aligned, &query.tokens, sentinel);
            let pm = pmr(&aligned, &query.tokens, sentinel).expect("aligned lengths match");
            ScoredScenario {
                scenario_idx: idx,
                id: sc.id,
                jac,
                pmr: pm,
                score: params.alpha * jac + (1.0 - params.alpha) * pm,
                weight: 0.0,
            }
        })
        .collect();
    scored.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("scores are finite")
            .then(a.id.cmp(&b.id))
    });
    scored.truncate(params.top_n);
    if !scored.is_empty() {
        let weights =
            retrieval_weights(&scored.iter().map(|s| s.score).collect::<Vec<_>>(), params.tau_r)?;
        for (s, w) in scored.iter_mut().zip(weights) {
            s.weight = w;
        }
    }
    Ok(scored)
}

/// Softmax of `scores / tau_r`; max-shifted so the result is invariant to
/// adding a constant to every score.
pub fn retrieval_weights(scores: &[f64], tau_r: f64) -> Result<Vec<f64>, RetrievalError> {
    if tau_r <= 0.0 {
        return Err(RetrievalError::BadTemperature(tau_r));
    }
    if scores.is_empty() {
        return Err(RetrievalError::EmptyScores);
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - max) / tau_r).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}
