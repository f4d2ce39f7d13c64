//! Sylphone phonetics: pronouncing-dictionary lookup, syllabification, and
//! the 43-dimensional syllable encoding consumed by the lyrics encoder.
//!
//! A sylphone is one syllable's phonetic content: front consonants, one
//! vowel with a stress level, end consonants, plus a stopword flag for the
//! source word. Only the rhyming elements (vowel + end consonants), stress,
//! and the stopword flag are encoded; front consonants are kept on the
//! struct for display and analysis but deliberately left out of the vector.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;

/// Embedded English stopword list, one word per line. Includes the common
/// pronoun/auxiliary contractions so that surface tokens like "we're" are
/// classified by direct membership.
pub const STOPWORDS_TEXT: &str = include_str!("stopwords.txt");

/// Width of the sylphone input vector: 15 vowels + 3 stress levels +
/// 24 end consonants + 1 stopword bit.
pub const SYLPHONE_DIM: usize = 43;

macro_rules! arpabet_symbols {
    ($name:ident, $count:expr, [$(($variant:ident, $text:expr)),+ $(,)?]) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: [$name; $count] = [$($name::$variant),+];

            pub fn as_str(&self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }

            pub fn from_symbol(s: &str) -> Option<Self> {
                match s {
                    $($text => Some($name::$variant),)+
                    _ => None,
                }
            }

            /// Stable index into [`Self::ALL`].
            pub fn index(&self) -> usize {
                Self::ALL.iter().position(|v| v == self).unwrap()
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

arpabet_symbols!(Vowel, 15, [
    (Aa, "AA"), (Ae, "AE"), (Ah, "AH"), (Ao, "AO"), (Aw, "AW"),
    (Ay, "AY"), (Eh, "EH"), (Er, "ER"), (Ey, "EY"), (Ih, "IH"),
    (Iy, "IY"), (Ow, "OW"), (Oy, "OY"), (Uh, "UH"), (Uw, "UW"),
]);

arpabet_symbols!(Consonant, 24, [
    (B, "B"), (Ch, "CH"), (D, "D"), (Dh, "DH"), (F, "F"), (G, "G"),
    (Hh, "HH"), (Jh, "JH"), (K, "K"), (L, "L"), (M, "M"), (N, "N"),
    (Ng, "NG"), (P, "P"), (R, "R"), (S, "S"), (Sh, "SH"), (T, "T"),
    (Th, "TH"), (V, "V"), (W, "W"), (Y, "Y"), (Z, "Z"), (Zh, "ZH"),
]);

/// Vowels treated as long for the stress-matching metrics.
pub const LONG_VOWELS: [Vowel; 9] = [
    Vowel::Aa,
    Vowel::Ao,
    Vowel::Aw,
    Vowel::Ay,
    Vowel::Ey,
    Vowel::Iy,
    Vowel::Ow,
    Vowel::Oy,
    Vowel::Uw,
];

/// One ARPABET phoneme; vowels carry their lexical stress digit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phoneme {
    Vowel(Vowel, u8),
    Consonant(Consonant),
}

impl Phoneme {
    /// Parse a dictionary symbol such as `AY1`, `NG`, or a bare vowel
    /// (treated as stress 0).
    pub fn parse(symbol: &str) -> Option<Self> {
        let symbol = symbol.trim();
        if let Some(last) = symbol.chars().last() {
            if let Some(stress) = last.to_digit(10) {
                if stress <= 2 {
                    let base = &symbol[..symbol.len() - 1];
                    return Vowel::from_symbol(base).map(|v| Phoneme::Vowel(v, stress as u8));
                }
                return None;
            }
        }
        if let Some(v) = Vowel::from_symbol(symbol) {
            return Some(Phoneme::Vowel(v, 0));
        }
        Consonant::from_symbol(symbol).map(Phoneme::Consonant)
    }
}

/// Syllable-level phonetic unit.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sylphone {
    pub front_consonants: Vec<Consonant>,
    pub vowel: Vowel,
    /// Lexical stress of the vowel: 0 (none), 1 (primary), 2 (secondary).
    pub stress: u8,
    pub end_consonants: Vec<Consonant>,
    pub is_stopword: bool,
    /// Surface word the syllable came from.
    pub word: String,
}

impl fmt::Display for Sylphone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |cs: &[Consonant]| {
            if cs.is_empty() {
                "-".to_string()
            } else {
                cs.iter().map(|c| c.as_str()).collect::<Vec<_>>().join(",")
            }
        };
        write!(
            f,
            "{}|{}{}|{}",
            join(&self.front_consonants),
            self.vowel,
            self.stress,
            join(&self.end_consonants)
        )
    }
}

/// Encoded identity of a sylphone: everything the 43-D vector sees. Two
/// sylphones with the same key are indistinguishable to the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SylphoneKey {
    pub vowel: u8,
    pub stress: u8,
    pub end_mask: u32,
    pub is_stopword: bool,
}

impl Sylphone {
    pub fn encoded_key(&self) -> SylphoneKey {
        let mut mask = 0u32;
        for c in &self.end_consonants {
            mask |= 1 << c.index();
        }
        SylphoneKey {
            vowel: self.vowel.index() as u8,
            stress: self.stress,
            end_mask: mask,
            is_stopword: self.is_stopword,
        }
    }
}

/// 43-dimensional multi-hot sylphone vector: vowel one-hot (15) ++ stress
/// one-hot (3) ++ end-consonant multi-hot (24) ++ stopword bit (1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SylphoneFeature(pub [u8; SYLPHONE_DIM]);

impl SylphoneFeature {
    pub fn bits_set(&self) -> usize {
        self.0.iter().filter(|&&b| b != 0).count()
    }

    pub fn to_scalar_row<T: Scalar>(&self) -> Vec<T> {
        self.0
            .iter()
            .map(|&b| if b != 0 { T::one() } else { T::zero() })
            .collect()
    }
}

/// Stack the 43-D sylphone features of a sequence into an encoder input
/// matrix.
pub fn sylphone_feature_matrix<T: Scalar>(sylphones: &[Sylphone]) -> crate::matrix::Matrix<T> {
    let data: Vec<T> = sylphones
        .iter()
        .flat_map(|s| encode_sylphone(s).to_scalar_row::<T>())
        .collect();
    crate::matrix::Matrix::from_vec(sylphones.len(), SYLPHONE_DIM, data)
}

/// Encode the rhyming elements, stress, and stopword flag of a sylphone.
/// Front consonants are not encoded.
pub fn encode_sylphone(s: &Sylphone) -> SylphoneFeature {
    let mut bits = [0u8; SYLPHONE_DIM];
    bits[s.vowel.index()] = 1;
    bits[15 + s.stress.min(2) as usize] = 1;
    for c in &s.end_consonants {
        bits[18 + c.index()] = 1;
    }
    if s.is_stopword {
        bits[42] = 1;
    }
    SylphoneFeature(bits)
}

/// Recover `(vowel, stress, end consonants, stopword)` from a 43-D vector.
/// End consonants come back in inventory order (the multi-hot encoding keeps
/// membership, not ordering).
pub fn decode_sylphone_feature(
    f: &SylphoneFeature,
) -> Result<(Vowel, u8, Vec<Consonant>, bool)> {
    let vowels: Vec<usize> = (0..15).filter(|&i| f.0[i] != 0).collect();
    let stresses: Vec<usize> = (15..18).filter(|&i| f.0[i] != 0).collect();
    if vowels.len() != 1 || stresses.len() != 1 {
        return Err(CoreError::Phonetics(format!(
            "malformed sylphone vector: {} vowel bits, {} stress bits",
            vowels.len(),
            stresses.len()
        )));
    }
    let vowel = Vowel::ALL[vowels[0]];
    let stress = (stresses[0] - 15) as u8;
    let ends: Vec<Consonant> = (0..24)
        .filter(|&i| f.0[18 + i] != 0)
        .map(|i| Consonant::ALL[i])
        .collect();
    Ok((vowel, stress, ends, f.0[42] != 0))
}

/// Case-insensitive pronouncing dictionary in the CMU plain-text format.
#[derive(Debug, Clone)]
pub struct PronouncingDictionary {
    entries: HashMap<String, Vec<Phoneme>>,
}

impl PronouncingDictionary {
    /// Parse CMU-format text: `WORD  PH1 PH2 ...` per line. Comment lines
    /// (`;;;` or `;`) are skipped, alternate pronunciations `WORD(2)` are
    /// ignored in favor of the first entry, and lines containing symbols
    /// outside the ARPABET inventory are dropped.
    pub fn parse(text: &str) -> Self {
        let mut entries = HashMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with(';') {
                continue;
            }
            // cmudict.dict-style trailing comments.
            let line = line.split(" #").next().unwrap_or(line);
            let mut tokens = line.split_whitespace();
            let Some(word) = tokens.next() else { continue };
            let word = word.split('(').next().unwrap_or(word).to_lowercase();
            if word.is_empty() {
                continue;
            }
            let phonemes: Option<Vec<Phoneme>> = tokens.map(Phoneme::parse).collect();
            match phonemes {
                Some(ph) if !ph.is_empty() => {
                    entries.entry(word).or_insert(ph);
                }
                _ => {
                    log::debug!("skipping unparseable dictionary line: {line}");
                }
            }
        }
        Self { entries }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::io(path.display().to_string(), e))?;
        Ok(Self::parse(&text))
    }

    pub fn lookup(&self, word: &str) -> Option<&[Phoneme]> {
        self.entries.get(&word.to_lowercase()).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Parse a pronouncing dictionary file. Missing file is fatal.
pub fn parse_pronouncing_dictionary(path: impl AsRef<Path>) -> Result<PronouncingDictionary> {
    PronouncingDictionary::load(path)
}

/// Embedded English stopword list.
#[derive(Debug, Clone)]
pub struct StopwordList {
    words: HashSet<String>,
}

impl Default for StopwordList {
    fn default() -> Self {
        Self {
            words: STOPWORDS_TEXT
                .lines()
                .map(|w| w.trim().to_string())
                .filter(|w| !w.is_empty())
                .collect(),
        }
    }
}

impl StopwordList {
    pub fn contains(&self, token: &str) -> bool {
        self.words.contains(&token.to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// A token that could not be resolved to phonemes; the whole line it came
/// from is treated as out-of-vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutOfVocabulary {
    pub token: String,
}

impl fmt::Display for OutOfVocabulary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "out-of-vocabulary token: {}", self.token)
    }
}

impl std::error::Error for OutOfVocabulary {}

/// Group a word's phonemes into sylphones: one sylphone per vowel.
/// Word-initial consonants attach to the first syllable's front,
/// intervocalic consonant runs attach entirely to the following syllable's
/// front, and word-final consonants attach to the last syllable's end.
///
/// The returned sylphones carry an empty `word` and a cleared stopword flag;
/// [`text_to_sylphones`] stamps both.
pub fn syllabify(phonemes: &[Phoneme]) -> std::result::Result<Vec<Sylphone>, OutOfVocabulary> {
    let mut sylphones: Vec<Sylphone> = Vec::new();
    let mut pending: Vec<Consonant> = Vec::new();
    for ph in phonemes {
        match *ph {
            Phoneme::Consonant(c) => pending.push(c),
            Phoneme::Vowel(v, stress) => {
                sylphones.push(Sylphone {
                    front_consonants: std::mem::take(&mut pending),
                    vowel: v,
                    stress,
                    end_consonants: Vec::new(),
                    is_stopword: false,
                    word: String::new(),
                });
            }
        }
    }
    let Some(last) = sylphones.last_mut() else {
        return Err(OutOfVocabulary {
            token: "<vowelless pronunciation>".into(),
        });
    };
    last.end_consonants = pending;
    Ok(sylphones)
}

/// Normalize a raw token for dictionary lookup: lowercase and strip
/// everything except letters, digits, and apostrophes. Returns `None` when
/// nothing remains (pure punctuation tokens contribute no sylphones).
fn normalize_token(raw: &str) -> Option<String> {
    let cleaned: String = raw
        .to_lowercase()
        .chars()
        .filter(|c| c.is_ascii_alphanumeric() || *c == '\'')
        .collect();
    let cleaned = cleaned.trim_matches('\'').to_string();
    if cleaned.is_empty() {
        None
    } else {
        Some(cleaned)
    }
}

/// Convert one line of lyric text into its sylphone sequence. Any token that
/// cannot be resolved through the dictionary flags the whole line as
/// out-of-vocabulary.
pub fn text_to_sylphones(
    line_text: &str,
    dict: &PronouncingDictionary,
    stopwords: &StopwordList,
) -> std::result::Result<Vec<Sylphone>, OutOfVocabulary> {
    let mut out = Vec::new();
    for raw in line_text.split_whitespace() {
        let Some(token) = normalize_token(raw) else {
            continue;
        };
        let Some(phonemes) = dict.lookup(&token) else {
            return Err(OutOfVocabulary { token });
        };
        let mut sylphones = syllabify(phonemes).map_err(|_| OutOfVocabulary {
            token: token.clone(),
        })?;
        let is_stop = stopwords.contains(&token);
        for s in &mut sylphones {
            s.is_stopword = is_stop;
            s.word = token.clone();
        }
        out.extend(sylphones);
    }
    Ok(out)
}
