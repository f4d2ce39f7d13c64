//! Reference matchers: a random baseline and a length-informed ranker, both
//! aligning diagonally via Bresenham paths.

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::align::{bresenham_path, AlignmentPath};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    Random,
    LengthInformed,
}

/// Candidate view the baselines need: id and sylphone count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimpleCandidate {
    pub id: String,
    pub length: usize,
}

/// One baseline hit with its diagonal alignment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineResult {
    pub candidate_id: String,
    pub method: BaselineMethod,
    /// Absolute length difference to the query; the length-informed
    /// ranking criterion (absent for the random method).
    pub length_diff: Option<usize>,
    pub path: AlignmentPath,
}

/// Uniformly select one candidate and align it diagonally with the query.
pub fn random_baseline(
    query_length: usize,
    candidates: &[SimpleCandidate],
    rng: &mut StdRng,
) -> BaselineResult {
    assert!(!candidates.is_empty(), "random baseline needs candidates");
    let pick = &candidates[rng.gen_range(0..candidates.len())];
    BaselineResult {
        candidate_id: pick.id.clone(),
        method: BaselineMethod::Random,
        length_diff: None,
        path: bresenham_path(query_length, pick.length),
    }
}

/// Uniform random permutation of all candidates, for ranked evaluation of
/// the random baseline.
pub fn random_rank(
    query_length: usize,
    candidates: &[SimpleCandidate],
    rng: &mut StdRng,
) -> Vec<BaselineResult> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.shuffle(rng);
    order
        .into_iter()
        .map(|idx| {
            let c = &candidates[idx];
            BaselineResult {
                candidate_id: c.id.clone(),
                method: BaselineMethod::Random,
                length_diff: None,
                path: bresenham_path(query_length, c.length),
            }
        })
        .collect()
}

/// Rank candidates by ascending absolute length difference to the query,
/// ties by id, each with its Bresenham path.
pub fn length_informed_rank(
    query_length: usize,
    candidates: &[SimpleCandidate],
) -> Vec<BaselineResult> {
    let mut order: Vec<&SimpleCandidate> = candidates.iter().collect();
    order.sort_by(|a, b| {
        let da = (query_length as i64 - a.length as i64).unsigned_abs();
        let db = (query_length as i64 - b.length as i64).unsigned_abs();
        da.cmp(&db).then_with(|| a.id.cmp(&b.id))
    });
    order
        .into_iter()
        .map(|c| BaselineResult {
            candidate_id: c.id.clone(),
            method: BaselineMethod::LengthInformed,
            length_diff: Some((query_length as i64 - c.length as i64).unsigned_abs() as usize),
            path: bresenham_path(query_length, c.length),
        })
        .collect()
}
