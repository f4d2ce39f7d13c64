//! Fixed-width text rendering of a note-sylphone alignment: three tiers
//! (notes, words, sylphones), one column per note, wrapped into banks.

use mlmatch_core::align::AlignmentPath;
use mlmatch_core::corpus::NoteEvent;
use mlmatch_core::phonetics::Sylphone;

const NOTES_PER_BANK: usize = 8;

/// Render an alignment grid. `path` pairs are (note, sylphone), 1-based.
/// Each note column shows its MIDI pitch, the word starting at the first
/// sylphone newly aligned there, and every sylphone aligned to it.
pub fn alignment_grid(
    notes: &[NoteEvent],
    sylphones: &[Sylphone],
    path: &AlignmentPath,
) -> String {
    let n = notes.len();
    let mut per_note_sylphones: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(i, j) in &path.pairs {
        per_note_sylphones[i - 1].push(j - 1);
    }

    let mut seen = vec![false; sylphones.len()];
    let mut note_cells = Vec::with_capacity(n);
    let mut word_cells = Vec::with_capacity(n);
    let mut syl_cells = Vec::with_capacity(n);
    for (idx, note) in notes.iter().enumerate() {
        note_cells.push(note.pitch.to_string());
        let mut words = Vec::new();
        let mut syls = Vec::new();
        for &j in &per_note_sylphones[idx] {
            let s = &sylphones[j];
            syls.push(s.to_string());
            if !seen[j] {
                seen[j] = true;
                // A word label appears where its first sylphone lands.
                if j == 0 || sylphones[j - 1].word != s.word || !seen[j - 1] {
                    words.push(s.word.clone());
                }
            }
        }
        word_cells.push(words.join(" "));
        syl_cells.push(syls.join(" "));
    }

    let mut out = String::new();
    for bank in (0..n).step_by(NOTES_PER_BANK) {
        let end = (bank + NOTES_PER_BANK).min(n);
        let widths: Vec<usize> = (bank..end)
            .map(|i| {
                note_cells[i]
                    .len()
                    .max(word_cells[i].len())
                    .max(syl_cells[i].len())
            })
            .collect();
        let mut row = |label: &str, cells: &[String]| {
            out.push_str(&format!("{label:<10}"));
            for (w, i) in widths.iter().zip(bank..end) {
                out.push_str(&format!(" {:<width$}", cells[i], width = w));
            }
            out.push('\n');
        };
        row("notes", &note_cells);
        row("words", &word_cells);
        row("sylphones", &syl_cells);
        out.push('\n');
    }
    out
}
