//! Per-note melody features: 177 binary dimensions per note, built from
//! pitch change relative to the first note, quantized log duration, and
//! quantized log inter-onset interval.

use serde::{Deserialize, Serialize};

use crate::corpus::{NoteEvent, Segment};
use crate::error::{CoreError, Result};
use crate::scalar::Scalar;

/// Width of the melody input vector: pitch-change one-hot (128) ++ sign
/// bit (1) ++ duration one-hot (24) ++ onset-shift one-hot (24).
pub const MELODY_DIM: usize = 177;

/// Number of quantization bins for durations and inter-onset intervals.
pub const QUANT_BINS: usize = 24;

/// Seconds floor applied before taking logs; zero-length intervals clamp
/// here.
pub const MIN_SECONDS: f64 = 1e-3;

/// 177-dimensional binary feature vector for one note.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MelodyFeature(pub [u8; MELODY_DIM]);

impl MelodyFeature {
    pub fn to_scalar_row<T: Scalar>(&self) -> Vec<T> {
        self.0
            .iter()
            .map(|&b| if b != 0 { T::one() } else { T::zero() })
            .collect()
    }

    pub fn pitch_change_index(&self) -> usize {
        (0..128).find(|&i| self.0[i] != 0).expect("pitch bit set")
    }

    pub fn sign_bit(&self) -> bool {
        self.0[128] != 0
    }

    pub fn duration_bin(&self) -> usize {
        (0..QUANT_BINS)
            .find(|&i| self.0[129 + i] != 0)
            .expect("duration bit set")
    }

    pub fn onset_bin(&self) -> usize {
        (0..QUANT_BINS)
            .find(|&i| self.0[153 + i] != 0)
            .expect("onset bit set")
    }

    /// Identity key for vocabulary counting: the information content of the
    /// whole 177-D vector.
    pub fn identity(&self) -> NoteKey {
        NoteKey {
            pitch_change: self.pitch_change_index() as u8,
            sign: self.sign_bit(),
            duration_bin: self.duration_bin() as u8,
            onset_bin: self.onset_bin() as u8,
        }
    }
}

/// Compact note-feature identity used by the rare-vocabulary filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NoteKey {
    pub pitch_change: u8,
    pub sign: bool,
    pub duration_bin: u8,
    pub onset_bin: u8,
}

/// Log-scale normalization ranges for duration and inter-onset-interval
/// quantization, fitted on the training set and frozen into checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizerStats {
    pub log_duration_min: f64,
    pub log_duration_max: f64,
    pub log_ioi_min: f64,
    pub log_ioi_max: f64,
    pub bins: usize,
}

impl QuantizerStats {
    fn bin(&self, log_value: f64, min: f64, max: f64) -> usize {
        let normalized = ((log_value - min) / (max - min)).clamp(0.0, 1.0);
        ((normalized * self.bins as f64).floor() as usize).min(self.bins - 1)
    }

    pub fn duration_bin(&self, duration_secs: f64) -> usize {
        let v = duration_secs.max(MIN_SECONDS).ln();
        self.bin(v, self.log_duration_min, self.log_duration_max)
    }

    pub fn ioi_bin(&self, ioi_secs: f64) -> usize {
        let v = ioi_secs.max(MIN_SECONDS).ln();
        self.bin(v, self.log_ioi_min, self.log_ioi_max)
    }
}

fn log_clamped(secs: f64) -> f64 {
    secs.max(MIN_SECONDS).ln()
}

/// Inter-onset intervals for a note sequence; the first note's interval is
/// defined as 0 s (which clamps to the floor).
fn iois(notes: &[NoteEvent]) -> Vec<f64> {
    notes
        .iter()
        .enumerate()
        .map(|(i, n)| {
            if i == 0 {
                0.0
            } else {
                n.onset - notes[i - 1].onset
            }
        })
        .collect()
}

/// Fit quantization ranges over every note of the training segments. A
/// degenerate range (all values equal) widens to `[v - 0.5, v + 0.5]` so
/// every note still maps to a valid bin.
pub fn fit_quantizers(train_segments: &[Segment]) -> Result<QuantizerStats> {
    let mut dur = (f64::INFINITY, f64::NEG_INFINITY);
    let mut ioi = (f64::INFINITY, f64::NEG_INFINITY);
    let mut saw_note = false;
    for seg in train_segments {
        for n in &seg.notes {
            saw_note = true;
            let d = log_clamped(n.duration);
            dur = (dur.0.min(d), dur.1.max(d));
        }
        for v in iois(&seg.notes) {
            let x = log_clamped(v);
            ioi = (ioi.0.min(x), ioi.1.max(x));
        }
    }
    if !saw_note {
        return Err(CoreError::Corpus(
            "cannot fit quantizers on an empty training set".into(),
        ));
    }
    let widen = |(lo, hi): (f64, f64)| {
        if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, hi + 0.5)
        }
    };
    let (dlo, dhi) = widen(dur);
    let (ilo, ihi) = widen(ioi);
    Ok(QuantizerStats {
        log_duration_min: dlo,
        log_duration_max: dhi,
        log_ioi_min: ilo,
        log_ioi_max: ihi,
        bins: QUANT_BINS,
    })
}

/// Stack the 177-D note features of a sequence into an encoder input matrix.
pub fn melody_feature_matrix<T: Scalar>(
    notes: &[NoteEvent],
    stats: &QuantizerStats,
) -> crate::matrix::Matrix<T> {
    let feats = featurize_melody(notes, stats);
    let data: Vec<T> = feats.iter().flat_map(|f| f.to_scalar_row::<T>()).collect();
    crate::matrix::Matrix::from_vec(feats.len(), MELODY_DIM, data)
}

/// Featurize a note sequence. Pitch change is the magnitude of the MIDI
/// offset from the first note (sign carried separately, with zero change
/// taking sign 1); duration and onset-shift bins come from the fitted
/// quantizers.
pub fn featurize_melody(notes: &[NoteEvent], stats: &QuantizerStats) -> Vec<MelodyFeature> {
    assert!(!notes.is_empty(), "featurize_melody needs at least one note");
    let first_pitch = notes[0].pitch as i32;
    let intervals = iois(notes);
    notes
        .iter()
        .zip(intervals)
        .map(|(n, ioi)| {
            let mut bits = [0u8; MELODY_DIM];
            let delta = n.pitch as i32 - first_pitch;
            let magnitude = delta.unsigned_abs().min(127) as usize;
            bits[magnitude] = 1;
            if delta >= 0 {
                bits[128] = 1;
            }
            bits[129 + stats.duration_bin(n.duration)] = 1;
            bits[153 + stats.ioi_bin(ioi)] = 1;
            MelodyFeature(bits)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn notes_from(pitches: &[u8], durations: &[f64]) -> Vec<NoteEvent> {
        let mut onset = 0.0;
        pitches
            .iter()
            .zip(durations)
            .map(|(&pitch, &duration)| {
                let n = NoteEvent {
                    pitch,
                    onset,
                    duration,
                };
                onset += duration;
                n
            })
            .collect()
    }

    fn segment_of(notes: Vec<NoteEvent>) -> Segment {
        let n = notes.len();
        Segment {
            song_id: "s".into(),
            segment_id: "s:0".into(),
            notes,
            sylphones: Vec::new(),
            melody_line_ends: vec![n - 1],
            lyrics_line_ends: vec![0],
            n,
            m: 1,
        }
    }

    #[test]
    fn fit_widen_degenerate_ranges() {
        let seg = segment_of(notes_from(&[60, 62, 64], &[1.0, 1.0, 1.0]));
        let stats = fit_quantizers(std::slice::from_ref(&seg)).unwrap();
        assert!(stats.log_duration_max > stats.log_duration_min);
        // Every note must land in a valid bin.
        for f in featurize_melody(&seg.notes, &stats) {
            assert!(f.duration_bin() < QUANT_BINS);
            assert!(f.onset_bin() < QUANT_BINS);
        }
    }

    #[test]
    fn fit_captures_duration_extremes() {
        let seg = segment_of(notes_from(&[60, 62], &[0.25, 2.0]));
        let stats = fit_quantizers(&[seg]).unwrap();
        assert!((stats.log_duration_min - 0.25f64.ln()).abs() < 1e-12);
        assert!((stats.log_duration_max - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_ioi_clamps_to_floor() {
        let notes = vec![
            NoteEvent {
                pitch: 60,
                onset: 0.0,
                duration: 1.0,
            },
            NoteEvent {
                pitch: 62,
                onset: 0.0,
                duration: 1.0,
            },
            NoteEvent {
                pitch: 64,
                onset: 1.0,
                duration: 1.0,
            },
        ];
        let stats = fit_quantizers(&[segment_of(notes)]).unwrap();
        assert!((stats.log_ioi_min - MIN_SECONDS.ln()).abs() < 1e-12);
        assert!((stats.log_ioi_max - 0.0).abs() < 1e-12);
    }

    #[test]
    fn fit_rejects_empty_input() {
        assert!(fit_quantizers(&[]).is_err());
    }

    #[test]
    fn first_note_is_zero_change_positive_sign() {
        let notes = notes_from(&[72, 70], &[0.5, 0.5]);
        let stats = fit_quantizers(&[segment_of(notes.clone())]).unwrap();
        let fs = featurize_melody(&notes, &stats);
        assert_eq!(fs[0].pitch_change_index(), 0);
        assert!(fs[0].sign_bit());
    }

    #[test]
    fn pitch_change_hand_arithmetic() {
        let up = notes_from(&[60, 67], &[0.5, 0.5]);
        let stats = fit_quantizers(&[segment_of(up.clone())]).unwrap();
        let fs = featurize_melody(&up, &stats);
        assert_eq!(fs[1].pitch_change_index(), 7);
        assert!(fs[1].sign_bit());

        let down = notes_from(&[60, 55], &[0.5, 0.5]);
        let fs = featurize_melody(&down, &stats);
        assert_eq!(fs[1].pitch_change_index(), 5);
        assert!(!fs[1].sign_bit());
    }

    #[test]
    fn features_are_transposition_invariant() {
        let mut rng = StdRng::seed_from_u64(41);
        for _ in 0..50 {
            let len = rng.gen_range(2..10);
            let pitches: Vec<u8> = (0..len).map(|_| rng.gen_range(30..90)).collect();
            let durations: Vec<f64> = (0..len).map(|_| rng.gen_range(0.1..2.0)).collect();
            let notes = notes_from(&pitches, &durations);
            let stats = fit_quantizers(&[segment_of(notes.clone())]).unwrap();
            let base = featurize_melody(&notes, &stats);
            let shift = rng.gen_range(-20i32..20);
            let shifted: Vec<u8> = pitches
                .iter()
                .map(|&p| (p as i32 + shift).clamp(0, 127) as u8)
                .collect();
            if shifted
                .iter()
                .zip(&pitches)
                .any(|(&s, &p)| s as i32 - p as i32 != shift)
            {
                continue; // clamped out of range; invariance not expected
            }
            let transposed = featurize_melody(&notes_from(&shifted, &durations), &stats);
            assert_eq!(base, transposed);
        }
    }

    #[test]
    fn duration_bins_monotone_under_tempo_scaling() {
        let mut rng = StdRng::seed_from_u64(43);
        for _ in 0..30 {
            let len = rng.gen_range(2..8);
            let pitches: Vec<u8> = (0..len).map(|_| rng.gen_range(40..80)).collect();
            let durations: Vec<f64> = (0..len).map(|_| rng.gen_range(0.05..3.0)).collect();
            let notes = notes_from(&pitches, &durations);
            let stats = fit_quantizers(&[segment_of(notes.clone())]).unwrap();
            let base = featurize_melody(&notes, &stats);
            let c = rng.gen_range(1.0..4.0);
            let scaled: Vec<f64> = durations.iter().map(|&d| d * c).collect();
            let slow = featurize_melody(&notes_from(&pitches, &scaled), &stats);
            for (b, s) in base.iter().zip(&slow) {
                assert!(s.duration_bin() >= b.duration_bin());
            }
        }
    }

    #[test]
    fn every_vector_has_three_onehot_groups() {
        let notes = notes_from(&[60, 64, 55, 60], &[0.2, 0.4, 0.8, 1.6]);
        let stats = fit_quantizers(&[segment_of(notes.clone())]).unwrap();
        let fs = featurize_melody(&notes, &stats);
        assert_eq!(fs.len(), notes.len());
        for f in fs {
            assert_eq!((0..128).filter(|&i| f.0[i] != 0).count(), 1);
            assert_eq!((129..153).filter(|&i| f.0[i] != 0).count(), 1);
            assert_eq!((153..177).filter(|&i| f.0[i] != 0).count(), 1);
        }
    }
}
