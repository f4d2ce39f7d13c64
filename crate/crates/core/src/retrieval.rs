//! Candidate indexing and ranking: embed candidates once, pre-filter by
//! length difference, score with soft-DTW plus the length penalty, and
//! decode the reported alignment path with classical DTW.

use rand::rngs::StdRng;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{cost_matrix, dtw, sdtw_forward, AlignmentPath};
use crate::encoder::{encode, EmbeddingSequence, ParameterSet, Side};
use crate::error::{CoreError, Result};
use crate::matrix::Matrix;
use crate::phonetics::Sylphone;
use crate::scalar::{real, Scalar};
use crate::training::regularized_cost;

/// Whether a candidate is real lyrics or a sampled plain-text distractor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Original,
    Plain,
}

/// Retrieval direction. The index holds the target side's candidates; the
/// query comes from the other side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    MelodyToLyrics,
    LyricsToMelody,
}

impl Direction {
    pub fn query_side(&self) -> Side {
        match self {
            Direction::MelodyToLyrics => Side::Melody,
            Direction::LyricsToMelody => Side::Lyrics,
        }
    }

    pub fn candidate_side(&self) -> Side {
        match self {
            Direction::MelodyToLyrics => Side::Lyrics,
            Direction::LyricsToMelody => Side::Melody,
        }
    }
}

/// A candidate ready for indexing: featurized, with its line structure.
#[derive(Debug, Clone)]
pub struct CandidateSource<T> {
    pub id: String,
    pub features: Matrix<T>,
    pub line_ends: Vec<usize>,
    pub provenance: Provenance,
}

/// One indexed candidate with its cached embedding.
#[derive(Debug, Clone)]
pub struct IndexedCandidate<T> {
    pub id: String,
    pub embedding: EmbeddingSequence<T>,
    pub length: usize,
    pub line_ends: Vec<usize>,
    pub provenance: Provenance,
}

/// Immutable candidate index for one retrieval direction.
#[derive(Debug, Clone)]
pub struct CandidateIndex<T> {
    side: Side,
    items: Vec<IndexedCandidate<T>>,
}

impl<T: Scalar> CandidateIndex<T> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[IndexedCandidate<T>] {
        &self.items
    }

    pub fn candidate_side(&self) -> Side {
        self.side
    }

    pub fn get(&self, id: &str) -> Option<&IndexedCandidate<T>> {
        self.items
            .binary_search_by(|c| c.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.items[i])
    }
}

/// Embed every candidate with the checkpointed encoder for `side` and cache
/// the results, sorted by id. Ids must be unique.
pub fn build_index<T: Scalar>(
    params: &ParameterSet<T>,
    side: Side,
    candidates: Vec<CandidateSource<T>>,
) -> Result<CandidateIndex<T>> {
    let mut items: Vec<IndexedCandidate<T>> = candidates
        .into_par_iter()
        .map(|c| {
            let embedding = encode(params, &c.features, side)?;
            Ok(IndexedCandidate {
                id: c.id,
                length: embedding.rows(),
                embedding,
                line_ends: c.line_ends,
                provenance: c.provenance,
            })
        })
        .collect::<Result<_>>()?;
    items.sort_by(|a, b| a.id.cmp(&b.id));
    for w in items.windows(2) {
        if w[0].id == w[1].id {
            return Err(CoreError::Evaluation(format!(
                "duplicate candidate id {:?}",
                w[0].id
            )));
        }
    }
    Ok(CandidateIndex { side, items })
}

/// Keep the `ceil(keep_fraction · N)` candidates with the smallest absolute
/// length difference to the query; ties break by ascending id. Returns
/// indices into the index's item list.
pub fn prefilter<T: Scalar>(
    query_length: usize,
    index: &CandidateIndex<T>,
    keep_fraction: f64,
) -> Vec<usize> {
    assert!(
        keep_fraction > 0.0 && keep_fraction <= 1.0,
        "keep_fraction must be in (0, 1]"
    );
    if index.is_empty() {
        return Vec::new();
    }
    let keep = ((keep_fraction * index.len() as f64).ceil() as usize).max(1);
    let mut order: Vec<usize> = (0..index.len()).collect();
    let diff = |i: usize| {
        (query_length as i64 - index.items[i].length as i64).unsigned_abs()
    };
    order.sort_by(|&a, &b| diff(a).cmp(&diff(b)).then(index.items[a].id.cmp(&index.items[b].id)));
    order.truncate(keep);
    order
}

/// One ranked retrieval hit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankedMatch {
    pub candidate_id: String,
    pub regularized_cost: f64,
    pub raw_sdtw: f64,
    pub length_penalty: f64,
    /// Classical-DTW path over (query position, candidate position),
    /// 1-based.
    pub path: AlignmentPath,
    pub provenance: Provenance,
}

/// Score a query against the pre-filtered candidate subset: soft-DTW raw
/// cost (smoothing from the checkpoint config), the length penalty computed
/// over the evaluated subset, and a classical-DTW path on the same
/// embeddings. Sorted ascending by regularized cost, ties by id.
pub fn rank<T: Scalar>(
    params: &ParameterSet<T>,
    query_features: &Matrix<T>,
    direction: Direction,
    index: &CandidateIndex<T>,
    gamma: f64,
    alpha: f64,
    epsilon: f64,
    keep_fraction: f64,
) -> Result<Vec<RankedMatch>> {
    if index.candidate_side() != direction.candidate_side() {
        return Err(CoreError::Evaluation(
            "index side does not match retrieval direction".into(),
        ));
    }
    let query = encode(params, query_features, direction.query_side())?;
    let n = query.rows();
    let kept = prefilter(n, index, keep_fraction);
    if kept.is_empty() {
        return Ok(Vec::new());
    }
    let gamma_t: T = real(gamma);

    struct Scored<T> {
        idx: usize,
        raw: T,
        path: AlignmentPath,
    }
    let scored: Vec<Scored<T>> = kept
        .par_iter()
        .map(|&idx| {
            let cand = &index.items[idx];
            let cost = cost_matrix(&query, &cand.embedding)?;
            let (raw, _) = sdtw_forward(&cost, gamma_t)?;
            let (_, path) = dtw(&cost);
            Ok(Scored { idx, raw, path })
        })
        .collect::<Result<_>>()?;

    let raws: Vec<T> = scored.iter().map(|s| s.raw).collect();
    let diffs: Vec<T> = scored
        .iter()
        .map(|s| {
            let m = index.items[s.idx].length;
            real((n as i64 - m as i64).abs() as f64)
        })
        .collect();
    let reg = regularized_cost(&raws, &diffs, real(alpha), real(epsilon));

    let mut out: Vec<RankedMatch> = scored
        .into_iter()
        .zip(reg)
        .map(|(s, reg_cost)| {
            let cand = &index.items[s.idx];
            let raw: f64 = num_traits::NumCast::from(s.raw).expect("finite cost");
            let regc: f64 = num_traits::NumCast::from(reg_cost).expect("finite cost");
            RankedMatch {
                candidate_id: cand.id.clone(),
                regularized_cost: regc,
                raw_sdtw: raw,
                length_penalty: regc - (1.0 - alpha) * raw,
                path: s.path,
                provenance: cand.provenance,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        a.regularized_cost
            .total_cmp(&b.regularized_cost)
            .then_with(|| a.candidate_id.cmp(&b.candidate_id))
    });
    Ok(out)
}

/// Empirical sylphone distribution of a dataset: a flat bag of occurrences,
/// so uniform index draws reproduce corpus frequencies.
#[derive(Debug, Clone, Default)]
pub struct SylphonePool {
    bag: Vec<Sylphone>,
}

impl SylphonePool {
    pub fn from_segments<'a>(segments: impl IntoIterator<Item = &'a [Sylphone]>) -> Self {
        let mut bag = Vec::new();
        for s in segments {
            bag.extend_from_slice(s);
        }
        Self { bag }
    }

    pub fn len(&self) -> usize {
        self.bag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bag.is_empty()
    }

    pub fn draw(&self, rng: &mut StdRng) -> &Sylphone {
        &self.bag[rng.gen_range(0..self.bag.len())]
    }
}

/// Length-preserving plain-text distractor: same sylphone count and the
/// same line-end structure as the source, with each position drawn
/// independently from the pool's occurrence distribution.
pub fn make_plain_variant(
    source: &[Sylphone],
    pool: &SylphonePool,
    rng: &mut StdRng,
) -> Vec<Sylphone> {
    assert!(!pool.is_empty(), "sylphone pool must be nonempty");
    source.iter().map(|_| pool.draw(rng).clone()).collect()
}

/// Conventional id for the plain variant of a candidate.
pub fn plain_id(id: &str) -> String {
    format!("{id}~plain")
}
