//! Shared fixtures for the integration suites: a CMU-format dictionary
//! snippet and a synthetic corpus whose sylphones are a deterministic
//! function of each note's pitch-change sign and duration class, so the
//! melody-to-lyrics mapping is learnable by construction.

use mlmatch_core::corpus::{NoteEvent, SongLine, SongRecord};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Dictionary entries for the lyric example sentence.
pub const TABLE_DICT: &str = "\
WE'RE  W IY1 R
DRIVING  D R AY1 V IH0 NG
SLOW  S L OW1
THROUGH  TH R UW1
THE  DH AH0
SNOW  S N OW1
";

/// Eight single-syllable words, one per (sign, duration-class) pair, with
/// distinct vowels and a spread of stresses and end consonants.
pub const SYNTH_DICT: &str = "\
BAH  B AA1
BEE  B IY0
BOE  B OW1
BOO  B UW2
KAY  K EY1
KED  K EH0 D
KITE  K AY1 T
KAW  K AW0
";

pub const CLASS_WORDS: [&str; 8] = ["bah", "bee", "boe", "boo", "kay", "ked", "kite", "kaw"];

/// Duration palette chosen so log-quantization never lands on a bin edge.
pub const DUR_CLASSES: [f64; 4] = [0.25, 0.6, 1.3, 2.6];

/// Word class of one note: pitch-change sign picks the word family,
/// duration class the member.
pub fn note_word(pitch: u8, first_pitch: u8, dur_class: usize) -> &'static str {
    let sign = usize::from(pitch >= first_pitch);
    CLASS_WORDS[sign * 4 + dur_class]
}

/// Generate songs of `lines_per_song` lines (4-7 notes each) whose lyric
/// words are the deterministic image of the melody, one word per note.
pub fn synth_songs(count: usize, lines_per_song: usize, seed: u64) -> Vec<SongRecord> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..count)
        .map(|song_idx| {
            let mut onset = 0.0f64;
            let first_pitch = 60u8;
            let mut next_pitch = first_pitch;
            let lines: Vec<SongLine> = (0..lines_per_song)
                .map(|_| {
                    let notes_in_line = rng.gen_range(4..=7);
                    let mut notes = Vec::with_capacity(notes_in_line);
                    let mut words = Vec::with_capacity(notes_in_line);
                    for _ in 0..notes_in_line {
                        let pitch = next_pitch;
                        let dur_class = rng.gen_range(0..DUR_CLASSES.len());
                        let duration = DUR_CLASSES[dur_class];
                        notes.push(NoteEvent {
                            pitch,
                            onset,
                            duration,
                        });
                        words.push(note_word(pitch, first_pitch, dur_class));
                        onset += duration;
                        next_pitch = rng.gen_range(48..=72);
                    }
                    SongLine {
                        notes,
                        text: words.join(" "),
                    }
                })
                .collect();
            SongRecord {
                song_id: format!("synth{song_idx:04}"),
                language: "en".into(),
                lines,
            }
        })
        .collect()
}

/// Guarded relative error used by the gradient suites: relative for values
/// above the floor, absolute below it.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}
