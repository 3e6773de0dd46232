//! Brute-force reference implementations for tests only, compiled behind the
//! `oracles` feature. Each oracle recomputes its answer from first principles
//! and shares no code path with the implementation it checks.

use thiserror::Error;

use crate::gateway::Embedding;
use crate::memory::MemoryBank;
use crate::scene::{Action, DecisionDistribution, N_ACTIONS};

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("epsilon must be positive")]
    ZeroEpsilon,
    #[error("parameter index {index} out of range for {len} parameters")]
    IndexOutOfRange { index: usize, len: usize },
}

/// Comparison summary between an oracle and the checked implementation.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub cases: usize,
    pub max_abs_deviation: f64,
    pub first_failure: Option<String>,
}

impl OracleReport {
    pub fn new() -> OracleReport {
        OracleReport { cases: 0, max_abs_deviation: 0.0, first_failure: None }
    }

    /// Record one case; `dump` is kept only for the first deviation past
    /// `tolerance`.
    pub fn record(&mut self, deviation: f64, tolerance: f64, dump: impl FnOnce() -> String) {
        self.cases += 1;
        if deviation > self.max_abs_deviation {
            self.max_abs_deviation = deviation;
        }
        if deviation > tolerance && self.first_failure.is_none() {
            self.first_failure = Some(dump());
        }
    }

    pub fn passed(&self) -> bool {
        self.first_failure.is_none()
    }
}

impl Default for OracleReport {
    fn default() -> Self {
        OracleReport::new()
    }
}

/// Confidence-weighted vote tally as the literal double sum with an explicit
/// indicator. Zero or negative total confidence degrades to a uniform
/// distribution over the voted actions.
pub fn oracle_aggregate(votes: &[Action], confidences: &[f64]) -> DecisionDistribution {
    assert_eq!(votes.len(), confidences.len(), "one confidence per vote");
    let mut z = 0.0;
    for &c in confidences {
        z += c;
    }
    let mut probs = [0.0f64; N_ACTIONS];
    if z > 0.0 {
        for a in 0..N_ACTIONS {
            let mut numerator = 0.0;
            for (vote, &c) in votes.iter().zip(confidences) {
                let indicator = if vote.index() == a { 1.0 } else { 0.0 };
                numerator += c * indicator;
            }
            probs[a] = numerator / z;
        }
    } else {
        let mut voted = [false; N_ACTIONS];
        for vote in votes {
            voted[vote.index()] = true;
        }
        let count = voted.iter().filter(|&&v| v).count();
        for a in 0..N_ACTIONS {
            if voted[a] {
                probs[a] = 1.0 / count as f64;
            }
        }
    }
    DecisionDistribution::from_probs(probs).expect("tally normalizes")
}

fn cosine_f64(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na <= 0.0 || nb <= 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Top-k retrieval via a fully materialized sort of every cosine similarity,
/// ties broken toward the lower index.
pub fn oracle_topk(bank: &MemoryBank, query: &Embedding, k: usize) -> Vec<usize> {
    let sims: Vec<f64> = bank
        .items()
        .iter()
        .map(|item| cosine_f64(&query.values, &item.embedding.values))
        .collect();
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&i, &j| sims[j].partial_cmp(&sims[i]).expect("finite sims").then(i.cmp(&j)));
    order.truncate(k.min(sims.len()));
    order
}

/// Central finite differences over the listed parameter coordinates. The
/// divisor uses the realized parameter deltas, so float-rounded steps stay
/// consistent with the evaluated points.
pub fn oracle_finite_diff<F>(
    mut loss: F,
    params: &mut [f32],
    indices: &[usize],
    epsilon: f32,
) -> Result<Vec<f64>, OracleError>
where
    F: FnMut(&[f32]) -> f64,
{
    if !(epsilon > 0.0) {
        return Err(OracleError::ZeroEpsilon);
    }
    let mut out = Vec::with_capacity(indices.len());
    for &index in indices {
        if index >= params.len() {
            return Err(OracleError::IndexOutOfRange { index, len: params.len() });
        }
        let original = params[index];
        let plus = original + epsilon;
        let minus = original - epsilon;
        params[index] = plus;
        let loss_plus = loss(params);
        params[index] = minus;
        let loss_minus = loss(params);
        params[index] = original;
        let realized = plus as f64 - minus as f64;
        out.push((loss_plus - loss_minus) / realized);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::enumerate_actions;
    use crate::workflow::{MemoryItem, MemoryMeta};

    fn action(i: usize) -> Action {
        enumerate_actions()[i]
    }

    #[test]
    fn single_vote_is_one_hot() {
        let dist = oracle_aggregate(&[action(4)], &[0.4]);
        for (i, &p) in dist.probs().iter().enumerate() {
            assert_eq!(p, if i == 4 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn zero_confidence_gives_uniform_over_voted() {
        let dist = oracle_aggregate(&[action(0), action(3), action(0)], &[0.0, 0.0, 0.0]);
        assert_eq!(dist.probs()[0], 0.5);
        assert_eq!(dist.probs()[3], 0.5);
    }

    #[test]
    fn permutation_invariance_harness() {
        let votes = [action(1), action(5), action(1), action(9)];
        let confs = [0.3, 0.9, 0.2, 0.6];
        let base = oracle_aggregate(&votes, &confs);
        let perms: [[usize; 4]; 3] = [[3, 2, 1, 0], [1, 0, 3, 2], [2, 3, 0, 1]];
        for perm in perms {
            let v: Vec<Action> = perm.iter().map(|&i| votes[i]).collect();
            let c: Vec<f64> = perm.iter().map(|&i| confs[i]).collect();
            let permuted = oracle_aggregate(&v, &c);
            for (a, b) in base.probs().iter().zip(permuted.probs()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    fn bank_of(embeddings: Vec<Vec<f32>>) -> MemoryBank {
        let mut bank = MemoryBank::new(embeddings[0].len());
        for (i, values) in embeddings.into_iter().enumerate() {
            let mut probs = [0.0; N_ACTIONS];
            probs[0] = 1.0;
            bank.insert(MemoryItem {
                q_md: format!("q{i}"),
                embedding: Embedding { values },
                distribution: DecisionDistribution::from_probs(probs).unwrap(),
                rationale: "r".to_string(),
                meta: MemoryMeta { scenario_id: "t".to_string(), timestamp: i as f64 },
            })
            .unwrap();
        }
        bank
    }

    #[test]
    fn full_ranking_at_k_equals_n() {
        let bank = bank_of(vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 0.2],
            vec![-1.0, 0.0],
        ]);
        let query = Embedding { values: vec![1.0, 0.0] };
        let order = oracle_topk(&bank, &query, 4);
        assert_eq!(order, vec![0, 2, 1, 3]);
    }

    #[test]
    fn duplicate_embeddings_break_toward_lower_index() {
        let bank = bank_of(vec![
            vec![0.0, 1.0],
            vec![1.0, 1.0],
            vec![1.0, 1.0],
            vec![1.0, 1.0],
        ]);
        let query = Embedding { values: vec![2.0, 2.0] };
        assert_eq!(oracle_topk(&bank, &query, 2), vec![1, 2]);
    }

    #[test]
    fn quadratic_toy_gradient() {
        let mut params = vec![0.5f32, -1.25, 2.0];
        let grads = oracle_finite_diff(
            |p| p.iter().map(|&x| (x as f64) * (x as f64)).sum(),
            &mut params,
            &[0, 1, 2],
            1e-3,
        )
        .unwrap();
        for (g, &x) in grads.iter().zip(&[0.5f32, -1.25, 2.0]) {
            assert!((g - 2.0 * x as f64).abs() < 1e-5, "{g} vs {}", 2.0 * x);
        }
        assert_eq!(params, vec![0.5, -1.25, 2.0]);
    }

    #[test]
    fn zero_epsilon_rejected() {
        let mut params = vec![1.0f32];
        let err = oracle_finite_diff(|_| 0.0, &mut params, &[0], 0.0).unwrap_err();
        assert_eq!(err, OracleError::ZeroEpsilon);
    }

    #[test]
    fn out_of_range_index_rejected() {
        let mut params = vec![1.0f32];
        let err = oracle_finite_diff(|_| 0.0, &mut params, &[3], 1e-3).unwrap_err();
        assert_eq!(err, OracleError::IndexOutOfRange { index: 3, len: 1 });
    }
}
