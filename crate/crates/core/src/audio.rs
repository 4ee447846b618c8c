//! Audio container, WAV I/O, segment annotations and level utilities.
//!
//! Samples are stored as `f32` in nominal range `[-1, 1]`. PCM16 input is
//! normalized by `1/32768`, so full-scale `32767` reads back as `0.99997`.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;

/// Sample rate every pipeline stage expects.
pub const PIPELINE_SAMPLE_RATE: u32 = 16_000;

const PCM16_SCALE: f32 = 32768.0;

/// Mono PCM audio with an identifier.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
    id: String,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32, id: impl Into<String>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidClip("no samples".into()));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidClip("sample rate must be positive".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
            id: id.into(),
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// Build a clip with the same rate and id from new samples.
    pub fn with_samples(&self, samples: Vec<f32>) -> Result<Self> {
        Self::new(samples, self.sample_rate, self.id.clone())
    }

    /// Reject anything that is not at the pipeline rate.
    pub fn require_pipeline_rate(&self) -> Result<()> {
        if self.sample_rate != PIPELINE_SAMPLE_RATE {
            return Err(Error::SampleRate {
                found: self.sample_rate,
                required: PIPELINE_SAMPLE_RATE,
            });
        }
        Ok(())
    }

    /// Convert a `[t0, t1]` interval in seconds to a half-open sample range.
    pub fn sample_range(&self, t0: f64, t1: f64) -> Result<(usize, usize)> {
        let sr = self.sample_rate as f64;
        let half_sample = 0.5 / sr;
        if !(t0.is_finite() && t1.is_finite()) || t0 < 0.0 || t1 > self.duration_s() + half_sample {
            return Err(Error::InvalidParameter(format!(
                "interval [{t0}, {t1}] s outside clip of {:.4} s",
                self.duration_s()
            )));
        }
        let start = (t0 * sr).round() as usize;
        let end = ((t1 * sr).round() as usize).min(self.samples.len());
        if end <= start {
            return Err(Error::EmptyInterval);
        }
        Ok((start, end))
    }
}

/// One of the six stop consonants the toolkit models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Consonant {
    P,
    T,
    K,
    B,
    D,
    G,
}

impl Consonant {
    pub const ALL: [Consonant; 6] = [
        Consonant::P,
        Consonant::T,
        Consonant::K,
        Consonant::B,
        Consonant::D,
        Consonant::G,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Consonant::P => "p",
            Consonant::T => "t",
            Consonant::K => "k",
            Consonant::B => "b",
            Consonant::D => "d",
            Consonant::G => "g",
        }
    }

    /// ARPAbet phoneme symbol.
    pub fn arpabet(self) -> &'static str {
        match self {
            Consonant::P => "P",
            Consonant::T => "T",
            Consonant::K => "K",
            Consonant::B => "B",
            Consonant::D => "D",
            Consonant::G => "G",
        }
    }
}

impl fmt::Display for Consonant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Consonant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().trim_start_matches('/').trim_end_matches('/');
        let first = s.chars().next().map(|c| c.to_ascii_lowercase());
        match first {
            Some('p') => Ok(Consonant::P),
            Some('t') => Ok(Consonant::T),
            Some('k') => Ok(Consonant::K),
            Some('b') => Ok(Consonant::B),
            Some('d') => Ok(Consonant::D),
            Some('g') => Ok(Consonant::G),
            _ => Err(Error::InvalidParameter(format!("unknown consonant '{s}'"))),
        }
    }
}

/// Labeled CV token (vowel is always /ɑ/).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLabel {
    pub talker: String,
    pub consonant: Consonant,
    pub snr90_db: f64,
}

/// Manually segmented interval running from the consonant start to the end of
/// the vowel onset. Serialized in the annotation sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentAnnotation {
    pub token_id: String,
    #[serde(rename = "consonant_start_s")]
    pub consonant_start: f64,
    #[serde(rename = "vowel_onset_end_s")]
    pub vowel_onset_end: f64,
}

impl SegmentAnnotation {
    pub fn new(token_id: impl Into<String>, consonant_start: f64, vowel_onset_end: f64) -> Self {
        Self {
            token_id: token_id.into(),
            consonant_start,
            vowel_onset_end,
        }
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.consonant_start, self.vowel_onset_end)
    }

    pub fn duration_s(&self) -> f64 {
        self.vowel_onset_end - self.consonant_start
    }

    /// Check `0 <= start < end <= duration` against the clip it annotates.
    pub fn validate(&self, clip: &AudioClip) -> Result<()> {
        let bad = |message: String| Error::InvalidAnnotation {
            token_id: self.token_id.clone(),
            message,
        };
        if !(self.consonant_start.is_finite() && self.vowel_onset_end.is_finite()) {
            return Err(bad("non-finite bounds".into()));
        }
        if self.consonant_start < 0.0 {
            return Err(bad(format!("consonant start {} < 0", self.consonant_start)));
        }
        if self.consonant_start >= self.vowel_onset_end {
            return Err(bad(format!(
                "consonant start {} is not before vowel onset end {}",
                self.consonant_start, self.vowel_onset_end
            )));
        }
        let limit = clip.duration_s() + 0.5 / clip.sample_rate() as f64;
        if self.vowel_onset_end > limit {
            return Err(bad(format!(
                "vowel onset end {} beyond clip duration {:.4}",
                self.vowel_onset_end,
                clip.duration_s()
            )));
        }
        Ok(())
    }

    /// Sample range `[start, end)` of the annotated interval in `clip`.
    pub fn sample_range(&self, clip: &AudioClip) -> Result<(usize, usize)> {
        self.validate(clip)?;
        clip.sample_range(self.consonant_start, self.vowel_onset_end)
    }
}

/// A clip together with its segment annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedClip {
    pub clip: AudioClip,
    pub annotation: SegmentAnnotation,
}

impl AnnotatedClip {
    pub fn new(clip: AudioClip, annotation: SegmentAnnotation) -> Result<Self> {
        annotation.validate(&clip)?;
        Ok(Self { clip, annotation })
    }
}

/// Read the annotation sidecar (a JSON array) into a map keyed by token id.
pub fn read_annotations(path: &Path) -> Result<HashMap<String, SegmentAnnotation>> {
    let list: Vec<SegmentAnnotation> = jsonl::read_json(path)?;
    Ok(list.into_iter().map(|a| (a.token_id.clone(), a)).collect())
}

pub fn write_annotations(path: &Path, annotations: &[SegmentAnnotation]) -> Result<()> {
    jsonl::write_json(path, &annotations)
}

/// One row of the corpus manifest (JSON lines).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub path: PathBuf,
    pub talker: String,
    pub consonant: Consonant,
    pub snr90_db: f64,
}

impl CorpusEntry {
    /// Token id: the file stem of the audio path.
    pub fn token_id(&self) -> String {
        token_id_from_path(&self.path)
    }

    pub fn label(&self) -> TokenLabel {
        TokenLabel {
            talker: self.talker.clone(),
            consonant: self.consonant,
            snr90_db: self.snr90_db,
        }
    }
}

pub fn token_id_from_path(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Resolve a manifest path relative to the directory holding the manifest.
pub fn resolve_relative(manifest: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match manifest.parent() {
        Some(dir) => dir.join(path),
        None => path.to_path_buf(),
    }
}

pub fn read_corpus_manifest(path: &Path) -> Result<Vec<CorpusEntry>> {
    jsonl::read_jsonl(path)
}

pub fn write_corpus_manifest(path: &Path, rows: &[CorpusEntry]) -> Result<()> {
    jsonl::write_jsonl(path, rows)
}

/// Read a mono PCM16 or IEEE float32 WAV file.
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let malformed = |message: String| Error::MalformedWav {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => malformed(other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedChannelCount(spec.channels));
    }
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / PCM16_SCALE))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| malformed(e.to_string()))?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| malformed(e.to_string()))?,
        (format, bits) => {
            return Err(Error::UnsupportedEncoding(format!("{format:?} {bits}-bit")));
        }
    };
    AudioClip::new(samples, spec.sample_rate, token_id_from_path(path))
}

/// Write a clip as mono PCM16. Samples outside `[-1, 1)` are clamped.
pub fn write_wav(clip: &AudioClip, path: &Path) -> Result<()> {
    if clip.is_empty() {
        return Err(Error::InvalidClip("no samples".into()));
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_io = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::MalformedWav {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(to_io)?;
    let mut clipped = 0usize;
    for &x in clip.samples() {
        let scaled = (x * PCM16_SCALE).round();
        if !(-PCM16_SCALE..PCM16_SCALE).contains(&scaled) {
            clipped += 1;
        }
        writer
            .write_sample(scaled.clamp(-PCM16_SCALE, PCM16_SCALE - 1.0) as i16)
            .map_err(to_io)?;
    }
    writer.finalize().map_err(to_io)?;
    if clipped > 0 {
        log::warn!(
            "{}: clamped {clipped} samples outside the PCM16 range",
            path.display()
        );
    }
    Ok(())
}

/// Root-mean-square level, over `[t0, t1]` seconds if given.
pub fn rms(clip: &AudioClip, interval: Option<(f64, f64)>) -> Result<f64> {
    let (start, end) = match interval {
        Some((t0, t1)) => clip.sample_range(t0, t1)?,
        None => (0, clip.len()),
    };
    Ok(rms_of(&clip.samples()[start..end]))
}

pub(crate) fn rms_of(samples: &[f32]) -> f64 {
    mean_power(samples).sqrt()
}

pub(crate) fn mean_power(samples: &[f32]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples
        .iter()
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        / samples.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn tone(freq: f64, seconds: f64, amp: f64) -> AudioClip {
        let n = (seconds * 16_000.0) as usize;
        let samples = (0..n)
            .map(|i| (amp * (2.0 * PI * freq * i as f64 / 16_000.0).sin()) as f32)
            .collect();
        AudioClip::new(samples, 16_000, "tone").unwrap()
    }

    #[test]
    fn silence_reads_back_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("silence.wav");
        let clip = AudioClip::new(vec![0.0; 16_000], 16_000, "silence").unwrap();
        write_wav(&clip, &path).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.len(), 16_000);
        assert!(back.samples().iter().all(|&x| x == 0.0));
        assert_eq!(back.id(), "silence");
    }

    #[test]
    fn full_scale_pcm16_normalization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("full.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(32767i16).unwrap();
        w.write_sample(-32768i16).unwrap();
        w.finalize().unwrap();
        let clip = read_wav(&path).unwrap();
        assert!((clip.samples()[0] as f64 - 32767.0 / 32768.0).abs() < 1e-7);
        assert!((clip.samples()[0] - 0.99997).abs() < 1e-5);
        assert_eq!(clip.samples()[1], -1.0);
    }

    #[test]
    fn stereo_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for _ in 0..8 {
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        let err = read_wav(&path).unwrap_err();
        assert!(
            err.to_string().contains("unsupported channel count"),
            "{err}"
        );
    }

    #[test]
    fn float32_input_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("float.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for x in [0.25f32, -0.5, 0.125] {
            w.write_sample(x).unwrap();
        }
        w.finalize().unwrap();
        assert_eq!(read_wav(&path).unwrap().samples(), &[0.25, -0.5, 0.125]);
    }

    #[test]
    fn garbage_header_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.wav");
        std::fs::write(&path, b"definitely not a riff file").unwrap();
        assert!(matches!(read_wav(&path), Err(Error::MalformedWav { .. })));
    }

    #[test]
    fn tone_round_trip_within_one_quantization_step() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tone.wav");
        let clip = tone(440.0, 0.5, 0.8);
        write_wav(&clip, &path).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.len(), clip.len());
        let max_err = clip
            .samples()
            .iter()
            .zip(back.samples())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err <= 1.0 / 32768.0, "max error {max_err}");
    }

    #[test]
    fn empty_clip_is_rejected() {
        assert!(AudioClip::new(vec![], 16_000, "x").is_err());
        assert!(AudioClip::new(vec![0.0], 0, "x").is_err());
    }

    #[test]
    fn pipeline_rate_is_enforced() {
        let clip = AudioClip::new(vec![0.0; 10], 44_100, "x").unwrap();
        assert!(matches!(
            clip.require_pipeline_rate(),
            Err(Error::SampleRate { found: 44_100, .. })
        ));
    }

    #[test]
    fn rms_examples() {
        let constant = AudioClip::new(vec![0.5; 1000], 16_000, "c").unwrap();
        assert!((rms(&constant, None).unwrap() - 0.5).abs() < 1e-12);

        // 1 kHz at 16 kHz: 16 samples per period, 1 s = 1000 whole periods.
        let sine = tone(1000.0, 1.0, 1.0);
        assert!((rms(&sine, None).unwrap() - 1.0 / 2f64.sqrt()).abs() < 1e-6);

        let zero = AudioClip::new(vec![0.0; 100], 16_000, "z").unwrap();
        assert_eq!(rms(&zero, None).unwrap(), 0.0);
    }

    #[test]
    fn rms_over_interval() {
        let mut samples = vec![0.0f32; 16_000];
        samples[8000..].iter_mut().for_each(|x| *x = 1.0);
        let clip = AudioClip::new(samples, 16_000, "half").unwrap();
        assert_eq!(rms(&clip, Some((0.5, 1.0))).unwrap(), 1.0);
        assert_eq!(rms(&clip, Some((0.0, 0.5))).unwrap(), 0.0);
        assert!(matches!(
            rms(&clip, Some((0.25, 0.25))),
            Err(Error::EmptyInterval)
        ));
        assert!(rms(&clip, Some((0.5, 2.0))).is_err());
    }

    #[test]
    fn annotation_bounds() {
        let clip = AudioClip::new(vec![0.0; 16_000], 16_000, "t").unwrap();
        assert!(SegmentAnnotation::new("t", 0.1, 0.3)
            .validate(&clip)
            .is_ok());
        assert!(SegmentAnnotation::new("t", 0.3, 0.3)
            .validate(&clip)
            .is_err());
        assert!(SegmentAnnotation::new("t", -0.1, 0.3)
            .validate(&clip)
            .is_err());
        assert!(SegmentAnnotation::new("t", 0.1, 1.5)
            .validate(&clip)
            .is_err());
        assert_eq!(
            SegmentAnnotation::new("t", 0.1, 0.3)
                .sample_range(&clip)
                .unwrap(),
            (1600, 4800)
        );
    }

    #[test]
    fn consonant_parsing() {
        assert_eq!("p".parse::<Consonant>().unwrap(), Consonant::P);
        assert_eq!("/gA/".parse::<Consonant>().unwrap(), Consonant::G);
        assert!("x".parse::<Consonant>().is_err());
    }

    #[test]
    fn sidecar_and_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ann_path = dir.path().join("ann.json");
        let anns = vec![SegmentAnnotation::new("f101_ka", 0.12, 0.31)];
        write_annotations(&ann_path, &anns).unwrap();
        let text = std::fs::read_to_string(&ann_path).unwrap();
        assert!(text.contains("consonant_start_s") && text.contains("vowel_onset_end_s"));
        assert_eq!(read_annotations(&ann_path).unwrap()["f101_ka"], anns[0]);

        let man_path = dir.path().join("corpus.jsonl");
        let rows = vec![CorpusEntry {
            path: "wav/f101_ka.wav".into(),
            talker: "f101".into(),
            consonant: Consonant::K,
            snr90_db: -5.0,
        }];
        write_corpus_manifest(&man_path, &rows).unwrap();
        let line = std::fs::read_to_string(&man_path).unwrap();
        assert!(line.contains("\"consonant\":\"k\""), "{line}");
        let back = read_corpus_manifest(&man_path).unwrap();
        assert_eq!(back, rows);
        assert_eq!(back[0].token_id(), "f101_ka");
    }

    proptest::proptest! {
        #[test]
        fn rms_is_scale_equivariant(
            xs in proptest::collection::vec(-1.0f32..1.0, 1..200),
            a in -4.0f32..4.0,
        ) {
            let clip = AudioClip::new(xs.clone(), 16_000, "x").unwrap();
            let scaled = AudioClip::new(xs.iter().map(|x| a * x).collect(), 16_000, "x").unwrap();
            let lhs = rms(&scaled, None).unwrap();
            let rhs = a.abs() as f64 * rms(&clip, None).unwrap();
            proptest::prop_assert!((lhs - rhs).abs() <= 1e-6 * (1.0 + rhs));
        }
    }
}
