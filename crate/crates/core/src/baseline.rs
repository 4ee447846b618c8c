//! ASR-defined SNR₉₀ baseline.
//!
//! A token counts as recognized at an SNR when some word of the backend's
//! transcript is pronounced with the target consonant immediately followed by
//! a non-high vowel. The ASR SNR₉₀ is the lowest ladder level where that
//! happens, scanning upward from the quietest level.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{AudioClip, Consonant};
use crate::error::{Error, Result};
use crate::noise::{measured_snr_db, mix_at_snr, SnrLadder};

/// Attempts per ladder level before a backend error is fatal.
pub const BACKEND_ATTEMPTS: usize = 3;

const DEFAULT_LEXICON: &str = include_str!("../data/lexicon.txt");

/// Any speech-to-text service. An empty transcript means nothing was recognized.
pub trait AsrBackend {
    fn transcribe(&mut self, clip: &AudioClip) -> Result<String>;
}

const VOWELS: [&str; 19] = [
    "AA", "AE", "AH", "AO", "AW", "AX", "AXR", "AY", "EH", "ER", "EY", "IH", "IX", "IY", "OW",
    "OY", "UH", "UW", "UX",
];
const HIGH_VOWELS: [&str; 6] = ["IY", "IH", "IX", "UW", "UH", "UX"];

pub fn is_non_high_vowel(phone: &str) -> bool {
    VOWELS.contains(&phone) && !HIGH_VOWELS.contains(&phone)
}

/// Word to pronunciations, ARPAbet without stress marks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Lexicon {
    entries: HashMap<String, Vec<Vec<String>>>,
}

impl Lexicon {
    /// One `WORD PH PH ...` entry per line; `#` starts a comment. Alternate
    /// pronunciations use the `WORD(2)` convention.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: HashMap<String, Vec<Vec<String>>> = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let word = fields.next().expect("non-empty line");
            let phones: Vec<String> = fields
                .map(|p| {
                    p.trim_end_matches(|c: char| c.is_ascii_digit())
                        .to_ascii_uppercase()
                })
                .collect();
            if phones.is_empty() {
                return Err(Error::InvalidParameter(format!(
                    "lexicon line {}: '{word}' has no pronunciation",
                    n + 1
                )));
            }
            let word = match word.find('(') {
                Some(i) if word.ends_with(')') => &word[..i],
                _ => word,
            };
            entries.entry(word.to_lowercase()).or_default().push(phones);
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Small built-in English lexicon covering the CV syllables and common
    /// confusions.
    pub fn builtin() -> Self {
        Self::parse(DEFAULT_LEXICON).expect("built-in lexicon parses")
    }

    pub fn pronunciations(&self, word: &str) -> Option<&[Vec<String>]> {
        self.entries.get(&word.to_lowercase()).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn transcript_words(transcript: &str) -> impl Iterator<Item = String> + '_ {
    transcript
        .split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// True if some transcript word contains the consonant followed directly by a
/// non-high vowel. Words missing from the lexicon never match.
pub fn transcript_matches(transcript: &str, consonant: Consonant, lexicon: &Lexicon) -> bool {
    let target = consonant.arpabet();
    transcript_words(transcript).any(|word| match lexicon.pronunciations(&word) {
        Some(prons) => prons.iter().any(|p| {
            p.windows(2)
                .any(|w| w[0] == target && is_non_high_vowel(&w[1]))
        }),
        None => {
            log::warn!("'{word}' is not in the lexicon; treated as no match");
            false
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum MockShape {
    /// Recognizes exactly when the SNR is at or above the threshold.
    Step,
    /// Recognizes with probability `1 / (1 + exp(-slope (snr - threshold)))`.
    Logistic { slope: f64 },
}

/// A backend that "recognizes" a known clean token once the mixture is clean
/// enough. It recovers the SNR of each request by subtracting the reference.
#[derive(Debug, Clone)]
pub struct MockAsr {
    reference: AudioClip,
    pub threshold_db: f64,
    pub shape: MockShape,
    pub success_transcript: String,
    pub failure_transcript: String,
    rng: ChaCha8Rng,
}

/// SNRs this close below the threshold still count as reaching it, which
/// absorbs the single-precision rounding of a mixture.
pub const MOCK_SNR_TOLERANCE_DB: f64 = 1e-3;

impl MockAsr {
    pub fn new(reference: AudioClip, threshold_db: f64, shape: MockShape, seed: u64) -> Self {
        Self {
            reference,
            threshold_db,
            shape,
            success_transcript: String::new(),
            failure_transcript: String::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// A step mock that answers with the consonant's CV syllable.
    pub fn step(reference: AudioClip, consonant: Consonant, threshold_db: f64) -> Self {
        Self::new(reference, threshold_db, MockShape::Step, 0).answering(cv_word(consonant))
    }

    pub fn answering(mut self, transcript: impl Into<String>) -> Self {
        self.success_transcript = transcript.into();
        self
    }

    pub fn failing_with(mut self, transcript: impl Into<String>) -> Self {
        self.failure_transcript = transcript.into();
        self
    }

    fn snr_of(&self, clip: &AudioClip) -> Result<f64> {
        match measured_snr_db(&self.reference, clip, None) {
            Ok(v) => Ok(v),
            Err(Error::ZeroPower) => Ok(f64::INFINITY),
            Err(e) => Err(Error::Backend(format!(
                "mock cannot score '{}': {e}",
                clip.id()
            ))),
        }
    }
}

impl AsrBackend for MockAsr {
    fn transcribe(&mut self, clip: &AudioClip) -> Result<String> {
        let snr = self.snr_of(clip)?;
        let recognized = match self.shape {
            MockShape::Step => snr >= self.threshold_db - MOCK_SNR_TOLERANCE_DB,
            MockShape::Logistic { slope } => {
                let p = 1.0 / (1.0 + (-slope * (snr - self.threshold_db)).exp());
                self.rng.gen::<f64>() < p
            }
        };
        Ok(if recognized {
            self.success_transcript.clone()
        } else {
            self.failure_transcript.clone()
        })
    }
}

/// The CV syllable of a consonant with the vowel /ɑ/, as a lexicon word.
pub fn cv_word(consonant: Consonant) -> &'static str {
    match consonant {
        Consonant::P => "pa",
        Consonant::T => "ta",
        Consonant::K => "ka",
        Consonant::B => "ba",
        Consonant::D => "da",
        Consonant::G => "ga",
    }
}

fn transcribe_with_retries(backend: &mut dyn AsrBackend, clip: &AudioClip) -> Result<String> {
    let mut last = None;
    for attempt in 1..=BACKEND_ATTEMPTS {
        match backend.transcribe(clip) {
            Ok(t) => return Ok(t),
            Err(e) => {
                log::warn!("backend attempt {attempt} on '{}' failed: {e}", clip.id());
                last = Some(e);
            }
        }
    }
    Err(Error::Backend(format!(
        "'{}' failed after {BACKEND_ATTEMPTS} attempts: {}",
        clip.id(),
        last.expect("at least one attempt")
    )))
}

/// Lowest ladder level whose mixture is recognized, or `None` if no level is.
pub fn asr_snr90(
    token: &AudioClip,
    consonant: Consonant,
    noise: &AudioClip,
    ladder: &SnrLadder,
    backend: &mut dyn AsrBackend,
    lexicon: &Lexicon,
) -> Result<Option<f64>> {
    let mut levels = ladder.levels_db.clone();
    levels.sort_by(f64::total_cmp);
    for snr in levels {
        let mixture = mix_at_snr(token, noise, snr, None)?;
        let transcript = transcribe_with_retries(backend, &mixture)?;
        if transcript_matches(&transcript, consonant, lexicon) {
            return Ok(Some(snr));
        }
    }
    Ok(None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub token_id: String,
    pub consonant: Consonant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub talker: Option<String>,
    /// `None` when no ladder level was recognized.
    pub asr_snr90: Option<f64>,
    pub human_snr90: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasVariance {
    pub bias_db: f64,
    pub variance_db2: f64,
    pub n: usize,
    pub n_not_reached: usize,
}

impl fmt::Display for BiasVariance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "bias {:.2} dB, variance {:.2} dB² (n = {}, {} not reached)",
            self.bias_db, self.variance_db2, self.n, self.n_not_reached
        )
    }
}

/// Mean and population variance of `asr - human` over one consonant's results.
pub fn bias_variance(results: &[BaselineResult], consonant: Consonant) -> Result<BiasVariance> {
    let mut n_not_reached = 0;
    let diffs: Vec<f64> = results
        .iter()
        .filter(|r| r.consonant == consonant)
        .filter_map(|r| match r.asr_snr90 {
            Some(asr) => Some(asr - r.human_snr90),
            None => {
                log::warn!("{}: ASR never recognized the token; excluded", r.token_id);
                n_not_reached += 1;
                None
            }
        })
        .collect();
    if diffs.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} usable /{consonant}/ results; bias and variance need at least 2",
            diffs.len()
        )));
    }
    let n = diffs.len() as f64;
    let bias_db = diffs.iter().sum::<f64>() / n;
    let variance_db2 = diffs.iter().map(|d| (d - bias_db).powi(2)).sum::<f64>() / n;
    Ok(BiasVariance {
        bias_db,
        variance_db2,
        n: diffs.len(),
        n_not_reached,
    })
}
