//! Neutral song corpus: JSONL parsing, line-based segmentation, vocabulary
//! and line-length filters, and the song-level train/validation split.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::BufRead;
use std::path::Path;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::melody::{featurize_melody, fit_quantizers, NoteKey};
use crate::phonetics::{
    text_to_sylphones, PronouncingDictionary, StopwordList, Sylphone, SylphoneKey,
};

/// One melody note.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoteEvent {
    /// MIDI pitch number in `[0, 127]`.
    pub pitch: u8,
    /// Onset time in seconds, non-decreasing within a song.
    pub onset: f64,
    /// Duration in seconds, strictly positive.
    pub duration: f64,
}

/// One lyric line paired with its melody notes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SongLine {
    pub notes: Vec<NoteEvent>,
    pub text: String,
}

/// A song with line-level melody/lyrics granularity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SongRecord {
    pub song_id: String,
    pub language: String,
    pub lines: Vec<SongLine>,
}

impl SongRecord {
    /// Schema validation: every line has at least one note and non-empty
    /// text, durations are positive, pitches in range, and onsets are
    /// non-decreasing across the song.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.song_id.is_empty() {
            return Err("empty song_id".into());
        }
        let mut last_onset = f64::NEG_INFINITY;
        for (i, line) in self.lines.iter().enumerate() {
            if line.notes.is_empty() {
                return Err(format!("line {i} has zero notes"));
            }
            if line.text.trim().is_empty() {
                return Err(format!("line {i} has empty text"));
            }
            for n in &line.notes {
                if n.pitch > 127 {
                    return Err(format!("line {i} pitch {} out of range", n.pitch));
                }
                if !n.duration.is_finite() || n.duration <= 0.0 {
                    return Err(format!("line {i} has non-positive duration"));
                }
                if n.onset < 0.0 {
                    return Err(format!("line {i} has negative onset"));
                }
                if n.onset < last_onset {
                    return Err(format!("line {i} breaks onset ordering"));
                }
                last_onset = n.onset;
            }
        }
        Ok(())
    }
}

/// One melody paired with one lyrics side over a fixed number of lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub song_id: String,
    pub segment_id: String,
    pub notes: Vec<NoteEvent>,
    pub sylphones: Vec<Sylphone>,
    /// 0-based index of the last note of each line; the final entry is `n-1`.
    pub melody_line_ends: Vec<usize>,
    /// 0-based index of the last sylphone of each line; the final entry is `m-1`.
    pub lyrics_line_ends: Vec<usize>,
    /// Note count.
    pub n: usize,
    /// Sylphone count.
    pub m: usize,
}

impl Segment {
    /// Note counts per line, recovered from the line-end indices.
    pub fn melody_line_lengths(&self) -> Vec<usize> {
        line_lengths(&self.melody_line_ends)
    }

    /// Sylphone counts per line.
    pub fn lyrics_line_lengths(&self) -> Vec<usize> {
        line_lengths(&self.lyrics_line_ends)
    }
}

fn line_lengths(ends: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(ends.len());
    let mut start = 0;
    for &e in ends {
        out.push(e + 1 - start);
        start = e + 1;
    }
    out
}

/// Parse a JSONL corpus from a file, or from every `*.jsonl` file of a
/// directory. Records failing schema validation are skipped with a warning;
/// an unreadable path is fatal.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<SongRecord>> {
    let path = path.as_ref();
    let mut files = Vec::new();
    if path.is_dir() {
        let entries =
            std::fs::read_dir(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
        for entry in entries {
            let entry = entry.map_err(|e| CoreError::io(path.display().to_string(), e))?;
            let p = entry.path();
            if p.extension().is_some_and(|ext| ext == "jsonl") {
                files.push(p);
            }
        }
        files.sort();
    } else {
        files.push(path.to_path_buf());
    }

    let mut songs = Vec::new();
    for file in files {
        let f = std::fs::File::open(&file)
            .map_err(|e| CoreError::io(file.display().to_string(), e))?;
        for (lineno, line) in std::io::BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| CoreError::io(file.display().to_string(), e))?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<SongRecord>(&line) {
                Ok(song) => match song.validate() {
                    Ok(()) => songs.push(song),
                    Err(reason) => {
                        log::warn!(
                            "{}:{}: skipping song {:?}: {reason}",
                            file.display(),
                            lineno + 1,
                            song.song_id
                        );
                    }
                },
                Err(e) => {
                    log::warn!(
                        "{}:{}: skipping malformed record: {e}",
                        file.display(),
                        lineno + 1
                    );
                }
            }
        }
    }
    Ok(songs)
}

/// Cut a song into consecutive non-overlapping windows of exactly
/// `lines_per_segment` lines; the trailing partial window is dropped.
/// Segments containing any out-of-vocabulary word are dropped and logged.
pub fn segment_song(
    song: &SongRecord,
    lines_per_segment: usize,
    dict: &PronouncingDictionary,
    stopwords: &StopwordList,
) -> Vec<Segment> {
    assert!(lines_per_segment >= 1, "lines_per_segment must be >= 1");
    let mut segments = Vec::new();
    for (k, window) in song.lines.chunks_exact(lines_per_segment).enumerate() {
        let mut notes = Vec::new();
        let mut sylphones = Vec::new();
        let mut melody_line_ends = Vec::with_capacity(lines_per_segment);
        let mut lyrics_line_ends = Vec::with_capacity(lines_per_segment);
        let mut dropped = false;
        for line in window {
            match text_to_sylphones(&line.text, dict, stopwords) {
                Ok(line_sylphones) if !line_sylphones.is_empty() => {
                    notes.extend_from_slice(&line.notes);
                    sylphones.extend(line_sylphones);
                    melody_line_ends.push(notes.len() - 1);
                    lyrics_line_ends.push(sylphones.len() - 1);
                }
                Ok(_) => {
                    log::info!(
                        "dropping segment {}:{k}: line {:?} has no sylphones",
                        song.song_id,
                        line.text
                    );
                    dropped = true;
                    break;
                }
                Err(oov) => {
                    log::info!(
                        "dropping segment {}:{k}: out-of-vocabulary token {:?}",
                        song.song_id,
                        oov.token
                    );
                    dropped = true;
                    break;
                }
            }
        }
        if dropped {
            continue;
        }
        let (n, m) = (notes.len(), sylphones.len());
        segments.push(Segment {
            song_id: song.song_id.clone(),
            segment_id: format!("{}:{k}", song.song_id),
            notes,
            sylphones,
            melody_line_ends,
            lyrics_line_ends,
            n,
            m,
        });
    }
    segments
}

/// Occurrence statistics produced by the rare-vocabulary filter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VocabularyReport {
    pub distinct_note_identities: usize,
    pub distinct_sylphone_identities: usize,
    pub rare_note_identities: usize,
    pub rare_sylphone_identities: usize,
    pub segments_removed: usize,
    pub min_count: usize,
}

/// Remove segments containing any note-feature or sylphone identity that
/// occurs fewer than `min_count` times across the given development-set
/// segments. Counting is single-pass: identities are counted once on the
/// input and the filter is applied once, with no re-iteration.
///
/// Note identities are quantized with ranges fitted on these same segments;
/// this binning is internal to the filter and separate from the training
/// quantizers fitted later on the train split alone.
pub fn filter_rare_vocabulary(
    segments: Vec<Segment>,
    min_count: usize,
) -> Result<(Vec<Segment>, VocabularyReport)> {
    assert!(min_count >= 1, "min_count must be >= 1");
    if segments.is_empty() {
        return Ok((
            Vec::new(),
            VocabularyReport {
                distinct_note_identities: 0,
                distinct_sylphone_identities: 0,
                rare_note_identities: 0,
                rare_sylphone_identities: 0,
                segments_removed: 0,
                min_count,
            },
        ));
    }

    let stats = fit_quantizers(&segments)?;
    let note_keys: Vec<Vec<NoteKey>> = segments
        .iter()
        .map(|s| {
            featurize_melody(&s.notes, &stats)
                .iter()
                .map(|f| f.identity())
                .collect()
        })
        .collect();

    let mut note_counts: HashMap<NoteKey, usize> = HashMap::new();
    let mut syl_counts: HashMap<SylphoneKey, usize> = HashMap::new();
    for (seg, keys) in segments.iter().zip(&note_keys) {
        for &k in keys {
            *note_counts.entry(k).or_default() += 1;
        }
        for s in &seg.sylphones {
            *syl_counts.entry(s.encoded_key()).or_default() += 1;
        }
    }

    let rare_notes: HashSet<NoteKey> = note_counts
        .iter()
        .filter(|&(_, &c)| c < min_count)
        .map(|(&k, _)| k)
        .collect();
    let rare_syls: HashSet<SylphoneKey> = syl_counts
        .iter()
        .filter(|&(_, &c)| c < min_count)
        .map(|(&k, _)| k)
        .collect();

    let report = VocabularyReport {
        distinct_note_identities: note_counts.len(),
        distinct_sylphone_identities: syl_counts.len(),
        rare_note_identities: rare_notes.len(),
        rare_sylphone_identities: rare_syls.len(),
        segments_removed: 0,
        min_count,
    };

    let before = segments.len();
    let kept: Vec<Segment> = segments
        .into_iter()
        .zip(note_keys)
        .filter(|(seg, keys)| {
            keys.iter().all(|k| !rare_notes.contains(k))
                && seg
                    .sylphones
                    .iter()
                    .all(|s| !rare_syls.contains(&s.encoded_key()))
        })
        .map(|(seg, _)| seg)
        .collect();

    let mut report = report;
    report.segments_removed = before - kept.len();
    Ok((kept, report))
}

/// Keep a segment iff every melody line's note count and every lyrics
/// line's sylphone count fall inside the given inclusive ranges.
pub fn filter_line_lengths(
    segments: Vec<Segment>,
    melody_range: (usize, usize),
    lyrics_range: (usize, usize),
) -> Vec<Segment> {
    segments
        .into_iter()
        .filter(|seg| {
            seg.melody_line_lengths()
                .iter()
                .all(|&l| l >= melody_range.0 && l <= melody_range.1)
                && seg
                    .lyrics_line_lengths()
                    .iter()
                    .all(|&l| l >= lyrics_range.0 && l <= lyrics_range.1)
        })
        .collect()
}

/// Default line-length filter bounds (5th-95th percentile intervals).
pub const MELODY_LINE_RANGE: (usize, usize) = (3, 11);
pub const LYRICS_LINE_RANGE: (usize, usize) = (2, 10);

/// Split segments into train/validation at song level so no song appears on
/// both sides. Deterministic for a fixed seed.
pub fn split_dev(
    segments: Vec<Segment>,
    ratio: f64,
    seed: u64,
) -> Result<(Vec<Segment>, Vec<Segment>)> {
    assert!(ratio > 0.0 && ratio < 1.0, "split ratio must be in (0,1)");
    let mut song_ids: Vec<String> = segments
        .iter()
        .map(|s| s.song_id.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    if song_ids.len() < 2 {
        return Err(CoreError::Corpus(format!(
            "song-level split needs at least 2 songs, got {}",
            song_ids.len()
        )));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    song_ids.shuffle(&mut rng);
    let n_train = ((song_ids.len() as f64 * ratio).round() as usize)
        .clamp(1, song_ids.len() - 1);
    let train_ids: HashSet<&String> = song_ids[..n_train].iter().collect();

    let (mut train, mut val) = (Vec::new(), Vec::new());
    for seg in segments {
        if train_ids.contains(&seg.song_id) {
            train.push(seg);
        } else {
            val.push(seg);
        }
    }
    sort_segments(&mut train);
    sort_segments(&mut val);
    Ok((train, val))
}

/// Deterministic segment ordering: song id, then numeric segment index.
pub fn sort_segments(segments: &mut [Segment]) {
    segments.sort_by(|a, b| {
        (a.song_id.as_str(), segment_index(a)).cmp(&(b.song_id.as_str(), segment_index(b)))
    });
}

fn segment_index(seg: &Segment) -> usize {
    seg.segment_id
        .rsplit(':')
        .next()
        .and_then(|s| s.parse().ok())
        .unwrap_or(0)
}

/// Per-split segment counts, keyed for the ingest summary.
pub fn count_by_song(segments: &[Segment]) -> BTreeMap<String, usize> {
    let mut map = BTreeMap::new();
    for s in segments {
        *map.entry(s.song_id.clone()).or_default() += 1;
    }
    map
}
