//! Objective evaluation metrics: retrieval Hit@K%, stress matching rates
//! over long notes, rhyme density / strength / distance from line-ending
//! sylphones, and the frequency of extreme matches in alignment paths.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::align::AlignmentPath;
use crate::corpus::Segment;
use crate::error::{CoreError, Result};
use crate::phonetics::{Consonant, Sylphone, Vowel, LONG_VOWELS};

/// Compensated (Kahan) accumulator so aggregation is robust to summation
/// order.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanMean {
    sum: f64,
    comp: f64,
    count: usize,
}

impl KahanMean {
    pub fn add(&mut self, value: f64) {
        let y = value - self.comp;
        let t = self.sum + y;
        self.comp = (t - self.sum) - y;
        self.sum = t;
        self.count += 1;
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }

    pub fn count(&self) -> usize {
        self.count
    }
}

/// One query's ranked candidate list for Hit@K evaluation.
#[derive(Debug, Clone)]
pub struct RankedPool {
    /// Candidate ids in rank order (best first).
    pub ranked_ids: Vec<String>,
    /// Number of original (non-distractor) candidates in the pool. The
    /// top-K% cutoff is taken against this count, so augmenting the pool
    /// with plain distractors enlarges the ranking without inflating the
    /// cutoff.
    pub original_count: usize,
    /// The query's own paired candidate.
    pub reference_id: String,
}

/// Fraction of queries whose reference lands within the top `k_percent`%
/// cutoff (`ceil(k/100 · original pool size)`, at least 1).
pub fn hit_at_k(pools: &[RankedPool], k_percent: f64) -> Result<f64> {
    if pools.is_empty() {
        return Err(CoreError::Evaluation("hit_at_k over zero queries".into()));
    }
    let mut hits = 0usize;
    for pool in pools {
        let rank = pool
            .ranked_ids
            .iter()
            .position(|id| *id == pool.reference_id)
            .ok_or_else(|| {
                CoreError::Evaluation(format!(
                    "reference {:?} missing from its candidate pool",
                    pool.reference_id
                ))
            })?;
        let cutoff = ((k_percent / 100.0) * pool.original_count as f64).ceil() as usize;
        if rank < cutoff.max(1) {
            hits += 1;
        }
    }
    Ok(hits as f64 / pools.len() as f64)
}

/// Third quartile with linear interpolation between order statistics.
fn quartile3(durations: &[f64]) -> f64 {
    assert!(!durations.is_empty());
    let mut sorted = durations.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = 0.75 * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 < sorted.len() {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[lo]
    }
}

/// Stress-matching ratios over the sylphones aligned to long notes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmrValues {
    pub longvowel: f64,
    pub stress: f64,
    pub nonstop: f64,
}

/// Long notes are those whose duration strictly exceeds the third quartile
/// of the segment's durations. Returns `None` when no duration exceeds it
/// (constant-duration segments), which callers exclude from aggregation.
pub fn stress_matching_rate(segment: &Segment, path: &AlignmentPath) -> Option<SmrValues> {
    stress_matching_rate_parts(&segment.notes, &segment.sylphones, path)
}

/// [`stress_matching_rate`] over explicit parts, for scoring a query melody
/// against a retrieved candidate's sylphones.
pub fn stress_matching_rate_parts(
    notes: &[crate::corpus::NoteEvent],
    sylphones: &[Sylphone],
    path: &AlignmentPath,
) -> Option<SmrValues> {
    let durations: Vec<f64> = notes.iter().map(|n| n.duration).collect();
    let q3 = quartile3(&durations);
    let long_notes: BTreeSet<usize> = durations
        .iter()
        .enumerate()
        .filter(|&(_, &d)| d > q3)
        .map(|(i, _)| i)
        .collect();
    if long_notes.is_empty() {
        return None;
    }
    let matched: BTreeSet<usize> = path
        .pairs
        .iter()
        .filter(|(i, _)| long_notes.contains(&(i - 1)))
        .map(|&(_, j)| j - 1)
        .collect();
    if matched.is_empty() {
        return None;
    }
    let total = matched.len() as f64;
    let mut longvowel = 0usize;
    let mut stress = 0usize;
    let mut nonstop = 0usize;
    for &j in &matched {
        let s = &sylphones[j];
        if LONG_VOWELS.contains(&s.vowel) {
            longvowel += 1;
        }
        if s.stress >= 1 {
            stress += 1;
        }
        if !s.is_stopword {
            nonstop += 1;
        }
    }
    Some(SmrValues {
        longvowel: longvowel as f64 / total,
        stress: stress as f64 / total,
        nonstop: nonstop as f64 / total,
    })
}

/// Rhyming elements of each line's last sylphone plus the rhyme-position
/// indicator (a position rhymes when its ending vowel appears at least
/// twice across endings).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineEndings {
    pub endings: Vec<(Vowel, Vec<Consonant>)>,
    pub positions: Vec<bool>,
}

impl LineEndings {
    pub fn from_lyrics(sylphones: &[Sylphone], line_ends: &[usize]) -> Self {
        let endings: Vec<(Vowel, Vec<Consonant>)> = line_ends
            .iter()
            .map(|&e| {
                let s = &sylphones[e];
                (s.vowel, s.end_consonants.clone())
            })
            .collect();
        Self::from_endings(endings)
    }

    pub fn from_endings(endings: Vec<(Vowel, Vec<Consonant>)>) -> Self {
        let mut vowel_counts: BTreeMap<Vowel, usize> = BTreeMap::new();
        for (v, _) in &endings {
            *vowel_counts.entry(*v).or_default() += 1;
        }
        let positions = endings
            .iter()
            .map(|(v, _)| vowel_counts[v] >= 2)
            .collect();
        Self { endings, positions }
    }

    pub fn line_count(&self) -> usize {
        self.endings.len()
    }

    /// Number of rhyme positions.
    pub fn rhyme_count(&self) -> usize {
        self.positions.iter().filter(|&&p| p).count()
    }
}

/// Ratio of rhyme positions to lines.
pub fn rhyme_density(endings: &LineEndings) -> f64 {
    assert!(endings.line_count() >= 1, "rhyme density needs >= 1 line");
    endings.rhyme_count() as f64 / endings.line_count() as f64
}

/// Simplified rhyme strength `(u/K + w/S)/2`: `u` unique vowels among the
/// K rhyming endings; groups are same-vowel endings, `S` their total count
/// and `w` the summed count of unique end-consonant sequences per group.
/// `None` when no position rhymes. Lower values indicate stronger (more
/// repetitive) rhymes under this formula.
pub fn rhyme_strength(endings: &LineEndings) -> Option<f64> {
    let rhyming: Vec<&(Vowel, Vec<Consonant>)> = endings
        .endings
        .iter()
        .zip(&endings.positions)
        .filter(|(_, &p)| p)
        .map(|(e, _)| e)
        .collect();
    let k = rhyming.len();
    if k == 0 {
        return None;
    }
    let mut groups: BTreeMap<Vowel, BTreeSet<Vec<Consonant>>> = BTreeMap::new();
    let mut group_sizes: BTreeMap<Vowel, usize> = BTreeMap::new();
    for (v, ends) in rhyming {
        groups.entry(*v).or_default().insert(ends.clone());
        *group_sizes.entry(*v).or_default() += 1;
    }
    let u = groups.len();
    let w: usize = groups.values().map(|set| set.len()).sum();
    let s: usize = group_sizes.values().sum();
    Some(0.5 * (u as f64 / k as f64 + w as f64 / s as f64))
}

/// Normalized disagreement of rhyme-position indicators: L1 distance over
/// the indicator vectors divided by the size of their union, with 0/0
/// defined as 0.
pub fn rhyme_distance(reference: &LineEndings, matched: &LineEndings) -> Result<f64> {
    if reference.line_count() != matched.line_count() {
        return Err(CoreError::Evaluation(format!(
            "rhyme distance line-count mismatch: {} vs {}",
            reference.line_count(),
            matched.line_count()
        )));
    }
    let mut l1 = 0usize;
    let mut union = 0usize;
    for (&p, &q) in reference.positions.iter().zip(&matched.positions) {
        if p != q {
            l1 += 1;
        }
        if p || q {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(0.0);
    }
    Ok(l1 as f64 / union as f64)
}

/// Per-path extreme-match maxima: the largest number of notes aligned to a
/// single sylphone and of sylphones aligned to a single note.
pub fn fem_of_path(path: &AlignmentPath) -> (usize, usize) {
    let mut per_sylphone: BTreeMap<usize, usize> = BTreeMap::new();
    let mut per_note: BTreeMap<usize, usize> = BTreeMap::new();
    for &(i, j) in &path.pairs {
        *per_sylphone.entry(j).or_default() += 1;
        *per_note.entry(i).or_default() += 1;
    }
    let max_notes_per_sylphone = per_sylphone.values().copied().max().unwrap_or(0);
    let max_sylphones_per_note = per_note.values().copied().max().unwrap_or(0);
    (max_notes_per_sylphone, max_sylphones_per_note)
}

/// Mean of the per-segment extreme-match maxima:
/// `(mean max notes per sylphone, mean max sylphones per note)`.
pub fn fem(paths: &[AlignmentPath]) -> (f64, f64) {
    let mut notes = KahanMean::default();
    let mut sylphones = KahanMean::default();
    for p in paths {
        let (n, s) = fem_of_path(p);
        notes.add(n as f64);
        sylphones.add(s as f64);
    }
    (
        notes.mean().unwrap_or(f64::NAN),
        sylphones.mean().unwrap_or(f64::NAN),
    )
}

/// Alignment-quality metrics of one query (already averaged over its top
/// matches by the caller).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub id: String,
    pub smr: Option<SmrValues>,
    pub rhyme_density: f64,
    pub rhyme_strength: Option<f64>,
    pub rhyme_distance: f64,
    pub fem_notes: f64,
    pub fem_sylphones: f64,
}

/// Per-query arrays backing the aggregate values; `null` marks queries
/// whose metric was undefined.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PerQueryMetrics {
    pub ids: Vec<String>,
    pub smr_longvowel: Vec<Option<f64>>,
    pub smr_stress: Vec<Option<f64>>,
    pub smr_nonstop: Vec<Option<f64>>,
    pub rhyme_density: Vec<f64>,
    pub rhyme_strength: Vec<Option<f64>>,
    pub rhyme_distance: Vec<f64>,
    pub fem_notes: Vec<f64>,
    pub fem_sylphones: Vec<f64>,
}

/// Aggregate evaluation report. Undefined per-query values are excluded
/// from the means and counted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub queries: usize,
    pub pool_size: usize,
    pub original_pool_size: usize,
    pub hit_at_1_percent: f64,
    pub hit_at_3_percent: f64,
    pub hit_at_5_percent: f64,
    pub smr_longvowel: Option<f64>,
    pub smr_stress: Option<f64>,
    pub smr_nonstop: Option<f64>,
    pub smr_undefined: usize,
    pub rhyme_density: Option<f64>,
    pub rhyme_strength: Option<f64>,
    pub rhyme_strength_undefined: usize,
    pub rhyme_distance: Option<f64>,
    pub fem_notes: Option<f64>,
    pub fem_sylphones: Option<f64>,
    pub per_query: PerQueryMetrics,
}

impl MetricsReport {
    /// Fold per-query metrics and Hit@K values into the aggregate report.
    pub fn aggregate(
        method: impl Into<String>,
        hits: (f64, f64, f64),
        pool_size: usize,
        original_pool_size: usize,
        queries: &[QueryMetrics],
    ) -> Self {
        let mut per_query = PerQueryMetrics::default();
        let mut smr_lv = KahanMean::default();
        let mut smr_st = KahanMean::default();
        let mut smr_ns = KahanMean::default();
        let mut rden = KahanMean::default();
        let mut rstr = KahanMean::default();
        let mut rdis = KahanMean::default();
        let mut femn = KahanMean::default();
        let mut fems = KahanMean::default();
        let mut smr_undef = 0usize;
        let mut rstr_undef = 0usize;
        for q in queries {
            per_query.ids.push(q.id.clone());
            match q.smr {
                Some(v) => {
                    smr_lv.add(v.longvowel);
                    smr_st.add(v.stress);
                    smr_ns.add(v.nonstop);
                    per_query.smr_longvowel.push(Some(v.longvowel));
                    per_query.smr_stress.push(Some(v.stress));
                    per_query.smr_nonstop.push(Some(v.nonstop));
                }
                None => {
                    smr_undef += 1;
                    per_query.smr_longvowel.push(None);
                    per_query.smr_stress.push(None);
                    per_query.smr_nonstop.push(None);
                }
            }
            rden.add(q.rhyme_density);
            per_query.rhyme_density.push(q.rhyme_density);
            match q.rhyme_strength {
                Some(v) => {
                    rstr.add(v);
                    per_query.rhyme_strength.push(Some(v));
                }
                None => {
                    rstr_undef += 1;
                    per_query.rhyme_strength.push(None);
                }
            }
            rdis.add(q.rhyme_distance);
            per_query.rhyme_distance.push(q.rhyme_distance);
            femn.add(q.fem_notes);
            per_query.fem_notes.push(q.fem_notes);
            fems.add(q.fem_sylphones);
            per_query.fem_sylphones.push(q.fem_sylphones);
        }
        MetricsReport {
            method: method.into(),
            queries: queries.len(),
            pool_size,
            original_pool_size,
            hit_at_1_percent: hits.0,
            hit_at_3_percent: hits.1,
            hit_at_5_percent: hits.2,
            smr_longvowel: smr_lv.mean(),
            smr_stress: smr_st.mean(),
            smr_nonstop: smr_ns.mean(),
            smr_undefined: smr_undef,
            rhyme_density: rden.mean(),
            rhyme_strength: rstr.mean(),
            rhyme_strength_undefined: rstr_undef,
            rhyme_distance: rdis.mean(),
            fem_notes: femn.mean(),
            fem_sylphones: fems.mean(),
            per_query,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::bresenham_path;
    use crate::corpus::NoteEvent;

    fn syl(
        front: &[Consonant],
        vowel: Vowel,
        stress: u8,
        end: &[Consonant],
        stop: bool,
        word: &str,
    ) -> Sylphone {
        Sylphone {
            front_consonants: front.to_vec(),
            vowel,
            stress,
            end_consonants: end.to_vec(),
            is_stopword: stop,
            word: word.into(),
        }
    }

    fn pool_of(ranks: Vec<&str>, original: usize, reference: &str) -> RankedPool {
        RankedPool {
            ranked_ids: ranks.into_iter().map(String::from).collect(),
            original_count: original,
            reference_id: reference.into(),
        }
    }

    #[test]
    fn hit_at_k_cutoff_is_definitional() {
        // Reference at rank 2 of 200 originals: cutoff ceil(1% of 200) = 2.
        let ids: Vec<String> = (0..200).map(|i| format!("c{i}")).collect();
        let pool = RankedPool {
            ranked_ids: ids.clone(),
            original_count: 200,
            reference_id: "c1".into(),
        };
        assert_eq!(hit_at_k(&[pool], 1.0).unwrap(), 1.0);
        let miss = RankedPool {
            ranked_ids: ids,
            original_count: 200,
            reference_id: "c2".into(),
        };
        assert_eq!(hit_at_k(&[miss], 1.0).unwrap(), 0.0);
    }

    #[test]
    fn hit_at_k_always_hits_rank_one() {
        let pools: Vec<RankedPool> = (0..10)
            .map(|_| pool_of(vec!["ref", "b", "c", "d"], 4, "ref"))
            .collect();
        for k in [1.0, 3.0, 5.0] {
            assert_eq!(hit_at_k(&pools, k).unwrap(), 1.0);
        }
    }

    #[test]
    fn hit_at_k_missing_reference_errors() {
        let pool = pool_of(vec!["a", "b"], 2, "zz");
        assert!(hit_at_k(&[pool], 5.0).is_err());
    }

    #[test]
    fn hit_at_k_monotone_in_k() {
        let pools: Vec<RankedPool> = (0..50)
            .map(|q| {
                let mut ids: Vec<String> = (0..100).map(|i| format!("c{i}")).collect();
                ids.rotate_left(q % 100);
                RankedPool {
                    ranked_ids: ids,
                    original_count: 100,
                    reference_id: "c7".into(),
                }
            })
            .collect();
        let mut last = 0.0;
        for k in [1.0, 3.0, 5.0, 10.0, 50.0, 100.0] {
            let h = hit_at_k(&pools, k).unwrap();
            assert!(h >= last);
            last = h;
        }
        assert_eq!(last, 1.0);
    }

    fn smr_segment() -> Segment {
        // Durations {1,1,1,4}: Q3 = 1.75, only the 4 s note is long.
        let notes: Vec<NoteEvent> = [1.0, 1.0, 1.0, 4.0]
            .iter()
            .scan(0.0, |onset, &d| {
                let n = NoteEvent {
                    pitch: 60,
                    onset: *onset,
                    duration: d,
                };
                *onset += d;
                Some(n)
            })
            .collect();
        let sylphones = vec![
            syl(&[Consonant::Dh], Vowel::Ah, 0, &[], true, "the"),
            syl(&[Consonant::Dh], Vowel::Ah, 0, &[], true, "the"),
            syl(&[Consonant::Dh], Vowel::Ah, 0, &[], true, "the"),
            syl(&[Consonant::S, Consonant::N], Vowel::Ow, 1, &[], false, "snow"),
        ];
        Segment {
            song_id: "s".into(),
            segment_id: "s:0".into(),
            n: notes.len(),
            m: sylphones.len(),
            notes,
            sylphones,
            melody_line_ends: vec![3],
            lyrics_line_ends: vec![3],
        }
    }

    #[test]
    fn smr_quartile_golden_case() {
        let seg = smr_segment();
        let path = AlignmentPath::new(vec![(1, 1), (2, 2), (3, 3), (4, 4)]);
        let smr = stress_matching_rate(&seg, &path).unwrap();
        assert_eq!(smr.longvowel, 1.0);
        assert_eq!(smr.stress, 1.0);
        assert_eq!(smr.nonstop, 1.0);
    }

    #[test]
    fn smr_stopword_unstressed_case() {
        let mut seg = smr_segment();
        // Align the long note to "the" instead.
        seg.sylphones.swap(2, 3);
        let path = AlignmentPath::new(vec![(1, 1), (2, 2), (3, 3), (4, 4)]);
        let smr = stress_matching_rate(&seg, &path).unwrap();
        assert_eq!(smr.longvowel, 0.0);
        assert_eq!(smr.stress, 0.0);
        assert_eq!(smr.nonstop, 0.0);
    }

    #[test]
    fn smr_constant_durations_undefined() {
        let mut seg = smr_segment();
        for n in &mut seg.notes {
            n.duration = 1.0;
        }
        let path = AlignmentPath::new(vec![(1, 1), (2, 2), (3, 3), (4, 4)]);
        assert!(stress_matching_rate(&seg, &path).is_none());
    }

    fn endings_of(vowels: &[(Vowel, &[Consonant])]) -> LineEndings {
        LineEndings::from_endings(
            vowels
                .iter()
                .map(|(v, cs)| (*v, cs.to_vec()))
                .collect(),
        )
    }

    #[test]
    fn rhyme_density_cases() {
        let full = endings_of(&[
            (Vowel::Ow, &[]),
            (Vowel::Iy, &[]),
            (Vowel::Ow, &[]),
            (Vowel::Iy, &[]),
        ]);
        assert_eq!(rhyme_density(&full), 1.0);
        let none = endings_of(&[(Vowel::Ow, &[]), (Vowel::Iy, &[]), (Vowel::Ah, &[])]);
        assert_eq!(rhyme_density(&none), 0.0);
        let single = endings_of(&[(Vowel::Ow, &[])]);
        assert_eq!(rhyme_density(&single), 0.0);
    }

    #[test]
    fn rhyme_strength_golden_cases() {
        // Perfect rhyme: all four endings identical.
        let perfect = endings_of(&[
            (Vowel::Ow, &[]),
            (Vowel::Ow, &[]),
            (Vowel::Ow, &[]),
            (Vowel::Ow, &[]),
        ]);
        assert_eq!(rhyme_strength(&perfect).unwrap(), 0.25);

        // Two perfect-rhyme groups.
        let two_groups = endings_of(&[
            (Vowel::Ow, &[]),
            (Vowel::Ow, &[]),
            (Vowel::Iy, &[Consonant::T]),
            (Vowel::Iy, &[Consonant::T]),
        ]);
        assert_eq!(rhyme_strength(&two_groups).unwrap(), 0.5);

        // Shared vowel, four distinct end-consonant sequences.
        let weak = endings_of(&[
            (Vowel::Ow, &[]),
            (Vowel::Ow, &[Consonant::T]),
            (Vowel::Ow, &[Consonant::K]),
            (Vowel::Ow, &[Consonant::S]),
        ]);
        assert_eq!(rhyme_strength(&weak).unwrap(), 0.625);

        // No rhyme at all -> undefined.
        let none = endings_of(&[(Vowel::Ow, &[]), (Vowel::Iy, &[])]);
        assert!(rhyme_strength(&none).is_none());
    }

    #[test]
    fn rhyme_distance_golden_case() {
        // p = [1,0,1,0], p_hat = [1,1,0,0] -> L1 2, union 3.
        let reference = endings_of(&[
            (Vowel::Ow, &[]),
            (Vowel::Ah, &[]),
            (Vowel::Ow, &[]),
            (Vowel::Eh, &[]),
        ]);
        assert_eq!(reference.positions, vec![true, false, true, false]);
        let matched = endings_of(&[
            (Vowel::Iy, &[]),
            (Vowel::Iy, &[]),
            (Vowel::Ah, &[]),
            (Vowel::Eh, &[]),
        ]);
        assert_eq!(matched.positions, vec![true, true, false, false]);
        let d = rhyme_distance(&reference, &matched).unwrap();
        assert!((d - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rhyme_distance(&reference, &reference).unwrap(), 0.0);
    }

    #[test]
    fn rhyme_distance_degenerate_zero_over_zero() {
        let a = endings_of(&[(Vowel::Ow, &[]), (Vowel::Iy, &[])]);
        let b = endings_of(&[(Vowel::Ah, &[]), (Vowel::Eh, &[])]);
        assert_eq!(rhyme_distance(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn rhyme_distance_length_mismatch_errors() {
        let a = endings_of(&[(Vowel::Ow, &[])]);
        let b = endings_of(&[(Vowel::Ow, &[]), (Vowel::Ow, &[])]);
        assert!(rhyme_distance(&a, &b).is_err());
    }

    #[test]
    fn rhyme_metrics_ignore_front_consonants() {
        let base = vec![
            syl(&[], Vowel::Ow, 1, &[Consonant::T], false, "oat"),
            syl(&[], Vowel::Ow, 1, &[Consonant::T], false, "oat"),
        ];
        let mut mutated = base.clone();
        mutated[0].front_consonants = vec![Consonant::G, Consonant::R];
        mutated[1].front_consonants = vec![Consonant::B];
        let ends_a = LineEndings::from_lyrics(&base, &[0, 1]);
        let ends_b = LineEndings::from_lyrics(&mutated, &[0, 1]);
        assert_eq!(rhyme_density(&ends_a), rhyme_density(&ends_b));
        assert_eq!(rhyme_strength(&ends_a), rhyme_strength(&ends_b));
        assert_eq!(rhyme_distance(&ends_a, &ends_b).unwrap(), 0.0);
    }

    #[test]
    fn fem_counts_incidences() {
        let path = AlignmentPath::new(vec![(1, 1), (1, 2), (2, 3), (3, 3)]);
        assert_eq!(fem_of_path(&path), (2, 2));
        let diagonal = AlignmentPath::new(vec![(1, 1), (2, 2), (3, 3)]);
        assert_eq!(fem_of_path(&diagonal), (1, 1));
        let forced = AlignmentPath::new(vec![(1, 1), (1, 2), (1, 3), (1, 4)]);
        assert_eq!(fem_of_path(&forced), (1, 4));
    }

    #[test]
    fn equal_length_bresenham_paths_give_unit_fem() {
        let paths: Vec<AlignmentPath> =
            (1..20).map(|n| bresenham_path(n, n)).collect();
        let (fn_, fs) = fem(&paths);
        assert_eq!(fn_, 1.0);
        assert_eq!(fs, 1.0);
    }

    #[test]
    fn metric_ranges_hold_on_random_endings() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(61);
        for _ in 0..200 {
            let lines = rng.gen_range(1..=8);
            let endings: Vec<(Vowel, Vec<Consonant>)> = (0..lines)
                .map(|_| {
                    let v = Vowel::ALL[rng.gen_range(0..Vowel::ALL.len())];
                    let ends: Vec<Consonant> = (0..rng.gen_range(0..3))
                        .map(|_| Consonant::ALL[rng.gen_range(0..Consonant::ALL.len())])
                        .collect();
                    (v, ends)
                })
                .collect();
            let le = LineEndings::from_endings(endings.clone());
            let den = rhyme_density(&le);
            assert!((0.0..=1.0).contains(&den));
            if let Some(s) = rhyme_strength(&le) {
                assert!(s > 0.0 && s <= 1.0, "strength {s} out of (0,1]");
            }
            let other = LineEndings::from_endings(endings);
            let dis = rhyme_distance(&le, &other).unwrap();
            assert!((0.0..=1.0).contains(&dis));
        }
        // FEM components are at least 1 for any valid path.
        let mut rng = StdRng::seed_from_u64(62);
        for _ in 0..100 {
            let n = rng.gen_range(1..=12);
            let m = rng.gen_range(1..=12);
            let (a, b) = fem_of_path(&crate::align::bresenham_path(n, m));
            assert!(a >= 1 && b >= 1);
        }
    }

    #[test]
    fn report_aggregation_excludes_undefined() {
        let queries = vec![
            QueryMetrics {
                id: "a".into(),
                smr: Some(SmrValues {
                    longvowel: 1.0,
                    stress: 0.5,
                    nonstop: 1.0,
                }),
                rhyme_density: 0.5,
                rhyme_strength: Some(0.25),
                rhyme_distance: 0.0,
                fem_notes: 1.0,
                fem_sylphones: 2.0,
            },
            QueryMetrics {
                id: "b".into(),
                smr: None,
                rhyme_density: 1.0,
                rhyme_strength: None,
                rhyme_distance: 0.5,
                fem_notes: 3.0,
                fem_sylphones: 1.0,
            },
        ];
        let report = MetricsReport::aggregate("test", (0.5, 0.5, 1.0), 10, 5, &queries);
        assert_eq!(report.queries, 2);
        assert_eq!(report.smr_undefined, 1);
        assert_eq!(report.rhyme_strength_undefined, 1);
        assert_eq!(report.smr_longvowel, Some(1.0));
        assert_eq!(report.rhyme_strength, Some(0.25));
        assert_eq!(report.rhyme_density, Some(0.75));
        assert_eq!(report.fem_notes, Some(2.0));
        assert_eq!(report.per_query.smr_longvowel, vec![Some(1.0), None]);
    }
}
