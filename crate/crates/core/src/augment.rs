//! Distortion continua for data augmentation.
//!
//! Each seed token is distorted along six single-distortion families
//! (consonant extension/compression, whole-token pitch shift up/down,
//! low/high-pass shelving filters). Every token on a continuum inherits an
//! SNR₉₀ label interpolated linearly between the seed's label and the
//! measured label of the family's most distorted token. A continuum whose most
//! distorted token measured above [`GATE_MAX_SNR90_DB`] is dropped entirely.

use std::collections::{HashMap, HashSet};
use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::audio::{AnnotatedClip, AudioClip, Consonant, SegmentAnnotation, TokenLabel};
use crate::dsp;
use crate::error::{Error, Result};
use crate::jsonl;

/// Continua whose most distorted token has SNR₉₀ above this are excluded.
pub const GATE_MAX_SNR90_DB: f64 = 6.0;

/// WSOLA frame length (25 ms at 16 kHz).
pub const WSOLA_FRAME: usize = 400;
/// WSOLA synthesis hop (6.25 ms).
pub const WSOLA_HOP: usize = 100;
/// WSOLA similarity search half-width (5 ms).
pub const WSOLA_TOLERANCE: usize = 80;

/// Order of the augmentation shelving filters.
pub const SHELF_FIR_ORDER: usize = 200;

pub const EXTEND_STEP: f64 = 0.003;
pub const EXTEND_MAX: f64 = 3.0;
pub const COMPRESS_STEP: f64 = 0.01;
pub const COMPRESS_MIN: f64 = 0.5;
pub const PITCH_MAX_HZ: f64 = 600.0;
pub const PITCH_MIN_HZ: f64 = 20.0;
pub const FILTER_GRID: usize = 20;
pub const ATTENUATION_MIN_DB: f64 = 0.6;
pub const ATTENUATION_MAX_DB: f64 = 12.0;
pub const HIGHPASS_CUTOFFS_HZ: (f64, f64) = (200.0, 3000.0);
pub const LOWPASS_CUTOFFS_HZ: (f64, f64) = (1000.0, 8000.0);

/// F0 search band for the autocorrelation pitch tracker.
pub const F0_SEARCH_HZ: (f64, f64) = (40.0, 500.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionFamily {
    Extend,
    Compress,
    PitchUp,
    PitchDown,
    Lowpass,
    Highpass,
}

impl DistortionFamily {
    pub const ALL: [DistortionFamily; 6] = [
        DistortionFamily::Extend,
        DistortionFamily::Compress,
        DistortionFamily::PitchUp,
        DistortionFamily::PitchDown,
        DistortionFamily::Lowpass,
        DistortionFamily::Highpass,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DistortionFamily::Extend => "extend",
            DistortionFamily::Compress => "compress",
            DistortionFamily::PitchUp => "pitch_up",
            DistortionFamily::PitchDown => "pitch_down",
            DistortionFamily::Lowpass => "lowpass",
            DistortionFamily::Highpass => "highpass",
        }
    }

    fn needs_f0(self) -> bool {
        matches!(
            self,
            DistortionFamily::PitchUp | DistortionFamily::PitchDown
        )
    }
}

impl fmt::Display for DistortionFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DistortionFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DistortionFamily::ALL
            .into_iter()
            .find(|f| f.as_str() == s.trim())
            .ok_or_else(|| Error::InvalidParameter(format!("unknown distortion family '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    Lowpass,
    Highpass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionParam {
    /// Consonant duration ratio.
    Ratio(f64),
    /// Target median F0 in Hz.
    TargetF0(f64),
    Filter {
        cutoff_hz: f64,
        attenuation_db: f64,
    },
}

/// One point on a distortion continuum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub family: DistortionFamily,
    pub param: DistortionParam,
    pub step_index: usize,
    /// 0 at the seed, 1 at the most distorted grid point.
    pub position: f64,
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64))
        .collect()
}

/// Extension ratios 1.000, 1.003, ... up to the last step not exceeding 3.0.
pub fn extend_ratios() -> Vec<f64> {
    let steps = ((EXTEND_MAX - 1.0) / EXTEND_STEP + 1e-9).floor() as usize;
    (0..=steps)
        .map(|k| (1000 + 3 * k) as f64 / 1000.0)
        .collect()
}

/// Compression ratios 1.00, 0.99, ..., 0.50.
pub fn compress_ratios() -> Vec<f64> {
    let steps = ((1.0 - COMPRESS_MIN) / COMPRESS_STEP).round() as usize;
    (0..=steps).map(|k| (100 - k) as f64 / 100.0).collect()
}

pub fn filter_cutoffs(kind: FilterKind) -> Vec<f64> {
    let (lo, hi) = match kind {
        FilterKind::Lowpass => LOWPASS_CUTOFFS_HZ,
        FilterKind::Highpass => HIGHPASS_CUTOFFS_HZ,
    };
    logspace(lo, hi, FILTER_GRID)
}

/// 0.6, 1.2, ..., 12.0 dB.
pub fn filter_attenuations() -> Vec<f64> {
    let step = (ATTENUATION_MAX_DB - ATTENUATION_MIN_DB) / (FILTER_GRID - 1) as f64;
    (0..FILTER_GRID)
        .map(|i| ((ATTENUATION_MIN_DB + step * i as f64) * 1e6).round() / 1e6)
        .collect()
}

/// Every non-identity grid point of `family`, ordered from mild to severe.
///
/// Pitch families need the seed's median F0 and step through whole-Hz targets
/// toward the family limit. Filter grid points have position
/// `(attenuation / 12 dB) * (cutoff rank / 20)`, with cutoffs ranked from the
/// least to the most destructive (falling for lowpass, rising for highpass).
pub fn continuum_specs(
    family: DistortionFamily,
    seed_f0_hz: Option<f64>,
) -> Result<Vec<DistortionSpec>> {
    let specs = match family {
        DistortionFamily::Extend | DistortionFamily::Compress => {
            let ratios = if family == DistortionFamily::Extend {
                extend_ratios()
            } else {
                compress_ratios()
            };
            let last = (ratios[ratios.len() - 1] - 1.0).abs();
            ratios
                .iter()
                .enumerate()
                .skip(1)
                .map(|(k, &r)| DistortionSpec {
                    family,
                    param: DistortionParam::Ratio(r),
                    step_index: k,
                    position: (r - 1.0).abs() / last,
                })
                .collect()
        }
        DistortionFamily::PitchUp | DistortionFamily::PitchDown => {
            let f0 = seed_f0_hz.ok_or_else(|| {
                Error::InvalidParameter("pitch continua need the seed's F0".into())
            })?;
            let targets: Vec<f64> = if family == DistortionFamily::PitchUp {
                ((f0.floor() as i64 + 1)..=PITCH_MAX_HZ as i64)
                    .map(|t| t as f64)
                    .collect()
            } else {
                ((PITCH_MIN_HZ as i64)..=(f0.ceil() as i64 - 1))
                    .rev()
                    .map(|t| t as f64)
                    .collect()
            };
            let limit = if family == DistortionFamily::PitchUp {
                PITCH_MAX_HZ
            } else {
                PITCH_MIN_HZ
            };
            targets
                .iter()
                .enumerate()
                .map(|(i, &t)| DistortionSpec {
                    family,
                    param: DistortionParam::TargetF0(t),
                    step_index: i + 1,
                    position: ((t - f0) / (limit - f0)).clamp(0.0, 1.0),
                })
                .collect()
        }
        DistortionFamily::Lowpass | DistortionFamily::Highpass => {
            let kind = if family == DistortionFamily::Lowpass {
                FilterKind::Lowpass
            } else {
                FilterKind::Highpass
            };
            let mut cutoffs = filter_cutoffs(kind);
            if kind == FilterKind::Lowpass {
                cutoffs.reverse();
            }
            let atts = filter_attenuations();
            let mut specs = Vec::with_capacity(FILTER_GRID * FILTER_GRID);
            for (ci, &cutoff_hz) in cutoffs.iter().enumerate() {
                for (ai, &attenuation_db) in atts.iter().enumerate() {
                    specs.push(DistortionSpec {
                        family,
                        param: DistortionParam::Filter {
                            cutoff_hz,
                            attenuation_db,
                        },
                        step_index: ci * FILTER_GRID + ai,
                        position: (attenuation_db / ATTENUATION_MAX_DB)
                            * ((ci + 1) as f64 / FILTER_GRID as f64),
                    });
                }
            }
            specs
        }
    };
    Ok(specs)
}

/// True if `spec` is exactly one of the grid points of its family.
pub fn is_on_grid(spec: &DistortionSpec, seed_f0_hz: Option<f64>) -> bool {
    continuum_specs(spec.family, seed_f0_hz)
        .map(|grid| {
            grid.iter()
                .any(|g| g.step_index == spec.step_index && g.param == spec.param)
        })
        .unwrap_or(false)
}

// ---------------------------------------------------------------------------
// Signal processing
// ---------------------------------------------------------------------------

/// Waveform-similarity overlap-add: time-scale `input` to exactly `out_len`
/// samples without changing its pitch.
pub fn wsola(input: &[f32], out_len: usize) -> Vec<f32> {
    if input.is_empty() || out_len == 0 {
        return vec![0.0; out_len];
    }
    if out_len == input.len() {
        return input.to_vec();
    }
    let n = WSOLA_FRAME;
    let half = n / 2;
    let tol = WSOLA_TOLERANCE;
    let analysis_hop = WSOLA_HOP as f64 * input.len() as f64 / out_len as f64;
    let window = dsp::hann_periodic(n);

    // Zero padding so every candidate frame is in range.
    let pad = half + tol;
    let mut padded = vec![0.0f64; pad];
    padded.extend(input.iter().map(|&x| x as f64));
    padded.resize(padded.len() + n + 2 * tol + WSOLA_HOP, 0.0);
    let max_start = padded.len() - n;

    let mut out = vec![0.0f64; out_len + n];
    let mut wsum = vec![0.0f64; out_len + n];
    let mut prev: Option<usize> = None;
    let frames = out_len / WSOLA_HOP + 2;
    for k in 0..frames {
        let nominal = ((k as f64 * analysis_hop).round() as usize + pad - half).min(max_start);
        let chosen = match prev {
            None => nominal,
            Some(p) => {
                let target = (p + WSOLA_HOP).min(max_start);
                let reference = &padded[target..target + n];
                let lo = nominal.saturating_sub(tol);
                let hi = (nominal + tol).min(max_start);
                let mut best = nominal;
                let mut best_score = f64::NEG_INFINITY;
                for c in lo..=hi {
                    let cand = &padded[c..c + n];
                    let (dot, energy) = reference
                        .iter()
                        .zip(cand)
                        .fold((0.0, 0.0), |(d, e), (r, x)| (d + r * x, e + x * x));
                    let score = dot / (energy + 1e-12).sqrt();
                    if score > best_score {
                        best_score = score;
                        best = c;
                    }
                }
                best
            }
        };
        let at = k * WSOLA_HOP;
        for i in 0..n {
            if at + i >= out.len() {
                break;
            }
            out[at + i] += window[i] * padded[chosen + i];
            wsum[at + i] += window[i];
        }
        prev = Some(chosen);
    }
    (0..out_len)
        .map(|p| {
            let w = wsum[p + half];
            if w > 1e-3 {
                (out[p + half] / w) as f32
            } else {
                0.0
            }
        })
        .collect()
}

/// Band-limited (Hann-windowed sinc) resampling of `input` to `out_len` samples
/// spanning the same time extent.
pub fn resample(input: &[f32], out_len: usize) -> Vec<f32> {
    if out_len == input.len() {
        return input.to_vec();
    }
    let step = input.len() as f64 / out_len as f64;
    let cutoff = (1.0 / step).min(1.0);
    let zero_crossings = 16.0;
    let half_width = zero_crossings / cutoff;
    let n_in = input.len() as isize;
    (0..out_len)
        .map(|m| {
            let t = m as f64 * step;
            let lo = (t - half_width).ceil() as isize;
            let hi = (t + half_width).floor() as isize;
            let mut acc = 0.0;
            for i in lo.max(0)..=hi.min(n_in - 1) {
                let d = t - i as f64;
                let u = d / half_width;
                let w = 0.5 * (1.0 + (PI * u).cos());
                let x = cutoff * d;
                let sinc = if x.abs() < 1e-12 {
                    1.0
                } else {
                    (PI * x).sin() / (PI * x)
                };
                acc += input[i as usize] as f64 * cutoff * sinc * w;
            }
            acc as f32
        })
        .collect()
}

/// Median F0 over voiced frames, by normalized autocorrelation within
/// [`F0_SEARCH_HZ`]. `None` if no frame is voiced.
pub fn estimate_median_f0(samples: &[f32], sample_rate: u32) -> Option<f64> {
    let sr = sample_rate as f64;
    let frame = (0.064 * sr) as usize;
    let hop = (0.010 * sr) as usize;
    let min_lag = (sr / F0_SEARCH_HZ.1).floor() as usize;
    let max_lag = (sr / F0_SEARCH_HZ.0).ceil() as usize;
    if samples.len() < frame || max_lag + 2 >= frame {
        return None;
    }
    let energies: Vec<f64> = (0..=(samples.len() - frame) / hop)
        .map(|i| {
            samples[i * hop..i * hop + frame]
                .iter()
                .map(|&x| (x as f64).powi(2))
                .sum()
        })
        .collect();
    let max_energy = energies.iter().cloned().fold(0.0, f64::max);
    if max_energy <= 1e-12 {
        return None;
    }
    let mut f0s = Vec::new();
    for (i, &e) in energies.iter().enumerate() {
        if e < max_energy * 1e-3 {
            continue;
        }
        let x: Vec<f64> = samples[i * hop..i * hop + frame]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let x: Vec<f64> = x.iter().map(|v| v - mean).collect();
        let nacf = |lag: usize| -> f64 {
            let (mut d, mut e0, mut e1) = (0.0, 0.0, 0.0);
            for j in 0..frame - lag {
                d += x[j] * x[j + lag];
                e0 += x[j] * x[j];
                e1 += x[j + lag] * x[j + lag];
            }
            d / (e0 * e1).sqrt().max(1e-12)
        };
        let values: Vec<f64> = (min_lag - 1..=max_lag + 1).map(nacf).collect();
        let at = |lag: usize| values[lag + 1 - min_lag];
        let peak = (min_lag..=max_lag)
            .map(at)
            .fold(f64::NEG_INFINITY, f64::max);
        if peak < 0.5 {
            continue;
        }
        // Shortest lag that is a local maximum close to the global peak, to
        // avoid locking onto multiples of the period.
        let Some(lag) = (min_lag..=max_lag)
            .find(|&l| at(l) >= 0.9 * peak && at(l) >= at(l - 1) && at(l) >= at(l + 1))
        else {
            continue;
        };
        let (a, b, c) = (at(lag - 1), at(lag), at(lag + 1));
        let denom = a - 2.0 * b + c;
        let offset = if denom.abs() > 1e-12 {
            (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
        } else {
            0.0
        };
        f0s.push(sr / (lag as f64 + offset));
    }
    if f0s.is_empty() {
        return None;
    }
    f0s.sort_by(f64::total_cmp);
    let mid = f0s.len() / 2;
    Some(if f0s.len() % 2 == 1 {
        f0s[mid]
    } else {
        0.5 * (f0s[mid - 1] + f0s[mid])
    })
}

/// Time-scale the annotated interval by `ratio` with WSOLA, leaving the rest of
/// the token untouched. The returned annotation covers the scaled interval.
pub fn stretch_consonant(
    clip: &AudioClip,
    annotation: &SegmentAnnotation,
    ratio: f64,
) -> Result<AnnotatedClip> {
    if !(COMPRESS_MIN..=EXTEND_MAX).contains(&ratio) {
        return Err(Error::InvalidParameter(format!(
            "duration ratio {ratio} outside [{COMPRESS_MIN}, {EXTEND_MAX}]"
        )));
    }
    let (start, end) = annotation.sample_range(clip)?;
    if ratio == 1.0 {
        return AnnotatedClip::new(clip.clone(), annotation.clone());
    }
    let segment = &clip.samples()[start..end];
    let new_len = ((segment.len() as f64) * ratio).round().max(1.0) as usize;
    let mut samples = Vec::with_capacity(clip.len() - segment.len() + new_len);
    samples.extend_from_slice(&clip.samples()[..start]);
    samples.extend(wsola(segment, new_len));
    samples.extend_from_slice(&clip.samples()[end..]);
    let sr = clip.sample_rate() as f64;
    let new_annotation = SegmentAnnotation::new(
        annotation.token_id.clone(),
        annotation.consonant_start,
        (start + new_len) as f64 / sr,
    );
    AnnotatedClip::new(clip.with_samples(samples)?, new_annotation)
}

/// Shift the whole token so its median F0 becomes `target_f0_hz`, keeping its
/// duration (resample, then WSOLA back to the original length).
pub fn pitch_shift(clip: &AudioClip, target_f0_hz: f64) -> Result<AudioClip> {
    if !(PITCH_MIN_HZ..=PITCH_MAX_HZ).contains(&target_f0_hz) {
        return Err(Error::InvalidParameter(format!(
            "target F0 {target_f0_hz} Hz outside [{PITCH_MIN_HZ}, {PITCH_MAX_HZ}]"
        )));
    }
    let f0 = estimate_median_f0(clip.samples(), clip.sample_rate())
        .ok_or_else(|| Error::NoF0(clip.id().to_string()))?;
    pitch_shift_from(clip, f0, target_f0_hz)
}

fn pitch_shift_from(clip: &AudioClip, source_f0_hz: f64, target_f0_hz: f64) -> Result<AudioClip> {
    let factor = target_f0_hz / source_f0_hz;
    if (factor - 1.0).abs() < 1e-12 {
        return Ok(clip.clone());
    }
    let squeezed_len = ((clip.len() as f64) / factor).round().max(1.0) as usize;
    let squeezed = resample(clip.samples(), squeezed_len);
    clip.with_samples(wsola(&squeezed, clip.len()))
}

/// Linear-phase shelving FIR: unity passband, `attenuation_db` shelf beyond the cutoff.
pub fn shelving_fir(
    kind: FilterKind,
    cutoff_hz: f64,
    attenuation_db: f64,
    sample_rate: u32,
) -> Vec<f64> {
    let n = SHELF_FIR_ORDER + 1;
    let m = SHELF_FIR_ORDER / 2;
    let fc = (2.0 * cutoff_hz / sample_rate as f64).min(1.0);
    let window = dsp::hamming(n);
    let mut lowpass: Vec<f64> = (0..n)
        .map(|i| {
            let x = i as f64 - m as f64;
            let sinc = if x == 0.0 {
                1.0
            } else {
                (PI * fc * x).sin() / (PI * fc * x)
            };
            fc * sinc * window[i]
        })
        .collect();
    let dc: f64 = lowpass.iter().sum();
    lowpass.iter_mut().for_each(|h| *h /= dc);
    let shelf = 10f64.powf(-attenuation_db / 20.0);
    let mut taps: Vec<f64> = match kind {
        // g + (1 - g) LP
        FilterKind::Lowpass => lowpass.iter().map(|h| (1.0 - shelf) * h).collect(),
        // 1 - (1 - g) LP
        FilterKind::Highpass => lowpass.iter().map(|h| -(1.0 - shelf) * h).collect(),
    };
    taps[m] += match kind {
        FilterKind::Lowpass => shelf,
        FilterKind::Highpass => 1.0,
    };
    taps
}

/// Filter with an order-200 shelving FIR, delay-compensated.
pub fn apply_fir(
    clip: &AudioClip,
    kind: FilterKind,
    cutoff_hz: f64,
    attenuation_db: f64,
) -> Result<AudioClip> {
    let (lo, hi) = match kind {
        FilterKind::Lowpass => LOWPASS_CUTOFFS_HZ,
        FilterKind::Highpass => HIGHPASS_CUTOFFS_HZ,
    };
    if !(lo * (1.0 - 1e-9)..=hi * (1.0 + 1e-9)).contains(&cutoff_hz) {
        return Err(Error::InvalidParameter(format!(
            "{kind:?} cutoff {cutoff_hz} Hz outside [{lo}, {hi}]"
        )));
    }
    if !(0.0..=ATTENUATION_MAX_DB).contains(&attenuation_db) {
        return Err(Error::InvalidParameter(format!(
            "attenuation {attenuation_db} dB outside [0, {ATTENUATION_MAX_DB}]"
        )));
    }
    let taps = shelving_fir(kind, cutoff_hz, attenuation_db, clip.sample_rate());
    clip.with_samples(dsp::filter_zero_delay(clip.samples(), &taps))
}

/// Render one grid point of a continuum.
pub fn apply_distortion(
    seed: &AnnotatedClip,
    spec: &DistortionSpec,
    seed_f0_hz: Option<f64>,
) -> Result<AnnotatedClip> {
    match spec.param {
        DistortionParam::Ratio(r) => stretch_consonant(&seed.clip, &seed.annotation, r),
        DistortionParam::TargetF0(t) => {
            let clip = match seed_f0_hz {
                Some(f0) => pitch_shift_from(&seed.clip, f0, t)?,
                None => pitch_shift(&seed.clip, t)?,
            };
            AnnotatedClip::new(clip, seed.annotation.clone())
        }
        DistortionParam::Filter {
            cutoff_hz,
            attenuation_db,
        } => {
            let kind = if spec.family == DistortionFamily::Lowpass {
                FilterKind::Lowpass
            } else {
                FilterKind::Highpass
            };
            let clip = apply_fir(&seed.clip, kind, cutoff_hz, attenuation_db)?;
            AnnotatedClip::new(clip, seed.annotation.clone())
        }
    }
}

// ---------------------------------------------------------------------------
// Labels, gates, continua
// ---------------------------------------------------------------------------

/// Linear interpolation between the seed label and the most distorted label.
pub fn interpolate_label(seed_snr90_db: f64, most_distorted_snr90_db: f64, position: f64) -> f64 {
    (1.0 - position) * seed_snr90_db + position * most_distorted_snr90_db
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuumGate {
    pub most_distorted_snr90: f64,
    pub valid: bool,
}

impl ContinuumGate {
    pub fn new(most_distorted_snr90: f64) -> Self {
        Self {
            most_distorted_snr90,
            valid: most_distorted_snr90 <= GATE_MAX_SNR90_DB,
        }
    }
}

/// One row of the gate file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub token_id: String,
    pub family: DistortionFamily,
    pub most_distorted_snr90_db: f64,
}

/// Measured most-distorted SNR₉₀ per (seed token, family).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GateTable {
    entries: HashMap<(String, DistortionFamily), f64>,
}

impl GateTable {
    pub fn from_records(records: impl IntoIterator<Item = GateRecord>) -> Self {
        Self {
            entries: records
                .into_iter()
                .map(|r| ((r.token_id, r.family), r.most_distorted_snr90_db))
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let records: Vec<GateRecord> = jsonl::read_json(path)?;
        Ok(Self::from_records(records))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut records: Vec<GateRecord> = self
            .entries
            .iter()
            .map(|((token_id, family), &v)| GateRecord {
                token_id: token_id.clone(),
                family: *family,
                most_distorted_snr90_db: v,
            })
            .collect();
        records.sort_by(|a, b| (&a.token_id, a.family).cmp(&(&b.token_id, b.family)));
        jsonl::write_json(path, &records)
    }

    pub fn insert(&mut self, token_id: impl Into<String>, family: DistortionFamily, snr90_db: f64) {
        self.entries.insert((token_id.into(), family), snr90_db);
    }

    pub fn get(&self, token_id: &str, family: DistortionFamily) -> Option<f64> {
        self.entries.get(&(token_id.to_string(), family)).copied()
    }
}

/// A labeled, annotated seed token.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedToken {
    pub token_id: String,
    pub label: TokenLabel,
    pub audio: AnnotatedClip,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuumEntry {
    pub audio: AnnotatedClip,
    pub spec: DistortionSpec,
    pub label_snr90: f64,
    pub position: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ContinuumOutcome {
    Valid(Vec<ContinuumEntry>),
    /// No measurement, or the most distorted token measured above the gate.
    GatedOut {
        most_distorted_snr90: Option<f64>,
    },
}

fn seed_f0_for(seed: &SeedToken, family: DistortionFamily) -> Result<Option<f64>> {
    if !family.needs_f0() {
        return Ok(None);
    }
    estimate_median_f0(seed.audio.clip.samples(), seed.audio.clip.sample_rate())
        .map(Some)
        .ok_or_else(|| Error::NoF0(seed.token_id.clone()))
}

/// Every grid step of `family` for `seed`, or gated out.
pub fn build_continuum(
    seed: &SeedToken,
    family: DistortionFamily,
    most_distorted_snr90: Option<f64>,
) -> Result<ContinuumOutcome> {
    let mut entries = Vec::new();
    let outcome = for_each_continuum_entry(seed, family, most_distorted_snr90, |e| {
        entries.push(e);
        Ok(())
    })?;
    Ok(match outcome {
        Some(gate) => ContinuumOutcome::GatedOut {
            most_distorted_snr90: gate,
        },
        None => ContinuumOutcome::Valid(entries),
    })
}

/// Streaming form of [`build_continuum`]; returns `Some(gate value)` when gated out.
fn for_each_continuum_entry(
    seed: &SeedToken,
    family: DistortionFamily,
    most_distorted_snr90: Option<f64>,
    mut emit: impl FnMut(ContinuumEntry) -> Result<()>,
) -> Result<Option<Option<f64>>> {
    let Some(most) = most_distorted_snr90 else {
        return Ok(Some(None));
    };
    if !ContinuumGate::new(most).valid {
        return Ok(Some(Some(most)));
    }
    let f0 = seed_f0_for(seed, family)?;
    for spec in continuum_specs(family, f0)? {
        let audio = apply_distortion(&seed.audio, &spec, f0)?;
        emit(ContinuumEntry {
            audio,
            spec,
            label_snr90: interpolate_label(seed.label.snr90_db, most, spec.position),
            position: spec.position,
        })?;
    }
    Ok(None)
}

/// Family name used in the manifest for unmodified seed tokens.
pub const ORIGINAL_FAMILY: &str = "original";

/// One row of the augmented manifest (JSON lines).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedRow {
    pub path: PathBuf,
    pub token_id: String,
    pub seed_token_id: String,
    pub family: String,
    pub step_index: usize,
    pub position: f64,
    pub label_snr90_db: f64,
    pub talker: String,
    pub consonant: Consonant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param: Option<DistortionParam>,
}

pub fn augmented_token_id(
    seed_token_id: &str,
    family: DistortionFamily,
    step_index: usize,
) -> String {
    format!("{seed_token_id}__{family}_{step_index:03}")
}

/// Expand seeds into the union of their valid continua.
///
/// `sink` persists each token (seeds included) and returns the path recorded
/// in its manifest row. Families without a gate entry are skipped.
pub fn augment_corpus(
    seeds: &[SeedToken],
    gates: &GateTable,
    families: &[DistortionFamily],
    mut sink: impl FnMut(&str, &AnnotatedClip) -> Result<PathBuf>,
) -> Result<Vec<AugmentedRow>> {
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for seed in seeds {
        if !seen.insert(seed.token_id.clone()) {
            log::warn!("duplicate seed token {} skipped", seed.token_id);
            continue;
        }
        let path = sink(&seed.token_id, &seed.audio)?;
        rows.push(AugmentedRow {
            path,
            token_id: seed.token_id.clone(),
            seed_token_id: seed.token_id.clone(),
            family: ORIGINAL_FAMILY.into(),
            step_index: 0,
            position: 0.0,
            label_snr90_db: seed.label.snr90_db,
            talker: seed.label.talker.clone(),
            consonant: seed.label.consonant,
            param: None,
        });
        for &family in families {
            let gate = gates.get(&seed.token_id, family);
            let outcome = for_each_continuum_entry(seed, family, gate, |entry| {
                let token_id = augmented_token_id(&seed.token_id, family, entry.spec.step_index);
                if !seen.insert(token_id.clone()) {
                    return Ok(());
                }
                let audio = AnnotatedClip {
                    annotation: SegmentAnnotation {
                        token_id: token_id.clone(),
                        ..entry.audio.annotation
                    },
                    clip: entry.audio.clip.with_id(token_id.clone()),
                };
                let path = sink(&token_id, &audio)?;
                rows.push(AugmentedRow {
                    path,
                    token_id,
                    seed_token_id: seed.token_id.clone(),
                    family: family.as_str().into(),
                    step_index: entry.spec.step_index,
                    position: entry.position,
                    label_snr90_db: entry.label_snr90,
                    talker: seed.label.talker.clone(),
                    consonant: seed.label.consonant,
                    param: Some(entry.spec.param),
                });
                Ok(())
            })?;
            if let Some(gate) = outcome {
                match gate {
                    Some(v) => log::info!("{} / {family}: gated out (SNR90 {v} dB)", seed.token_id),
                    None => {
                        log::info!("{} / {family}: no gate measurement, skipped", seed.token_id)
                    }
                }
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SR: u32 = 16_000;

    fn tone(freq: f64, len: usize) -> AudioClip {
        let s = (0..len)
            .map(|i| (0.5 * (2.0 * PI * freq * i as f64 / SR as f64).sin()) as f32)
            .collect();
        AudioClip::new(s, SR, "tone").unwrap()
    }

    fn pulse_train(f0: f64, seconds: f64) -> AudioClip {
        let len = (seconds * SR as f64) as usize;
        let period = SR as f64 / f0;
        // Smoothed pulses so the train is band-limited.
        let s = (0..len)
            .map(|i| {
                let phase = (i as f64 % period) / period;
                let d = phase.min(1.0 - phase) * period;
                (0.8 * (-(d * d) / 4.0).exp()) as f32
            })
            .collect();
        AudioClip::new(s, SR, "pulses").unwrap()
    }

    fn central_rms(x: &[f32]) -> f64 {
        let lo = x.len() / 4;
        let hi = 3 * x.len() / 4;
        crate::audio::rms_of(&x[lo..hi])
    }

    #[test]
    fn grid_cardinalities() {
        let ext = extend_ratios();
        assert_eq!(ext.len(), 667);
        assert_eq!(ext[1], 1.003);
        assert!(*ext.last().unwrap() <= 3.0);
        let comp = compress_ratios();
        assert_eq!(comp.len(), 51);
        assert_eq!(*comp.last().unwrap(), 0.5);
        assert_eq!(
            continuum_specs(DistortionFamily::Compress, None)
                .unwrap()
                .len(),
            50
        );
        assert_eq!(
            continuum_specs(DistortionFamily::Lowpass, None)
                .unwrap()
                .len(),
            400
        );
        let atts = filter_attenuations();
        assert_eq!(atts.first(), Some(&0.6));
        assert_eq!(atts.last(), Some(&12.0));
        let hp = filter_cutoffs(FilterKind::Highpass);
        assert!((hp[0] - 200.0).abs() < 1e-9 && (hp[19] - 3000.0).abs() < 1e-9);
        let ratio = hp[1] / hp[0];
        assert!(hp.windows(2).all(|w| (w[1] / w[0] - ratio).abs() < 1e-9));
    }

    #[test]
    fn pitch_grid_runs_to_the_limits() {
        let up = continuum_specs(DistortionFamily::PitchUp, Some(210.4)).unwrap();
        assert_eq!(up[0].param, DistortionParam::TargetF0(211.0));
        assert_eq!(up.last().unwrap().param, DistortionParam::TargetF0(600.0));
        assert_eq!(up.last().unwrap().position, 1.0);
        let down = continuum_specs(DistortionFamily::PitchDown, Some(210.4)).unwrap();
        assert_eq!(down[0].param, DistortionParam::TargetF0(210.0));
        assert_eq!(down.last().unwrap().param, DistortionParam::TargetF0(20.0));
        assert!(continuum_specs(DistortionFamily::PitchUp, None).is_err());
    }

    #[test]
    fn positions_end_at_one_and_rise() {
        for family in [
            DistortionFamily::Extend,
            DistortionFamily::Compress,
            DistortionFamily::Lowpass,
            DistortionFamily::Highpass,
        ] {
            let specs = continuum_specs(family, None).unwrap();
            let max = specs.iter().map(|s| s.position).fold(0.0, f64::max);
            assert_eq!(max, 1.0, "{family}");
            assert!(specs.iter().all(|s| s.position > 0.0 && s.position <= 1.0));
        }
    }

    #[test]
    fn stretch_identity_and_length() {
        let clip = tone(220.0, 8000);
        let ann = SegmentAnnotation::new("tone", 0.1, 0.2);
        let same = stretch_consonant(&clip, &ann, 1.0).unwrap();
        assert_eq!(same.clip.samples(), clip.samples());

        let longer = stretch_consonant(&clip, &ann, 2.0).unwrap();
        let added = (longer.clip.len() as f64 - clip.len() as f64) / SR as f64;
        assert!((added - 0.1).abs() <= 0.00625, "added {added}");
        assert!((longer.annotation.duration_s() - 0.2).abs() <= 0.00625);
        // Outside the interval the token is untouched.
        assert_eq!(&longer.clip.samples()[..1600], &clip.samples()[..1600]);
        assert_eq!(
            &longer.clip.samples()[longer.clip.len() - 4800..],
            &clip.samples()[3200..]
        );

        assert!(stretch_consonant(&clip, &ann, 0.4).is_err());
        assert!(stretch_consonant(&clip, &ann, 3.1).is_err());
    }

    #[test]
    fn wsola_keeps_pitch() {
        let x = tone(250.0, 8000);
        let y = wsola(x.samples(), 12_000);
        assert_eq!(y.len(), 12_000);
        let f0 = estimate_median_f0(&y, SR).unwrap();
        assert!((f0 - 250.0).abs() / 250.0 < 0.02, "f0 {f0}");
    }

    #[test]
    fn f0_of_pulse_train_and_noise() {
        let f0 = estimate_median_f0(pulse_train(200.0, 0.5).samples(), SR).unwrap();
        assert!((f0 - 200.0).abs() < 2.0, "f0 {f0}");
        let noise =
            crate::noise::synth_noise(&crate::noise::LtassProfile::flat(64), 0.5, 1).unwrap();
        let err = pitch_shift(&noise, 300.0).unwrap_err();
        assert!(err.to_string().contains("no F0"), "{err}");
    }

    #[test]
    fn pitch_shift_pulse_train_up_an_octave() {
        let clip = pulse_train(200.0, 0.6);
        let shifted = pitch_shift(&clip, 400.0).unwrap();
        assert_eq!(shifted.len(), clip.len());
        let f0 = estimate_median_f0(shifted.samples(), SR).unwrap();
        assert!((f0 - 400.0).abs() <= 8.0, "f0 {f0}");
    }

    #[test]
    fn pitch_shift_to_own_f0_is_identity() {
        let clip = pulse_train(180.0, 0.4);
        let f0 = estimate_median_f0(clip.samples(), SR).unwrap();
        let same = pitch_shift(&clip, f0).unwrap();
        assert_eq!(same.samples(), clip.samples());
    }

    #[test]
    fn shelf_filters_hit_their_attenuation() {
        let gain_db = |kind, cutoff, att, f| {
            let x = tone(f, 16_000);
            let y = apply_fir(&x, kind, cutoff, att).unwrap();
            20.0 * (central_rms(y.samples()) / central_rms(x.samples())).log10()
        };
        assert!((gain_db(FilterKind::Lowpass, 1000.0, 12.0, 4000.0) + 12.0).abs() <= 0.5);
        assert!(gain_db(FilterKind::Lowpass, 1000.0, 12.0, 250.0).abs() <= 0.5);
        assert!((gain_db(FilterKind::Highpass, 3000.0, 6.0, 500.0) + 6.0).abs() <= 0.5);
    }

    #[test]
    fn zero_attenuation_is_identity() {
        let x = pulse_train(150.0, 0.3);
        for kind in [FilterKind::Lowpass, FilterKind::Highpass] {
            let y = apply_fir(&x, kind, 2000.0, 0.0).unwrap();
            let err = x
                .samples()
                .iter()
                .zip(y.samples())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(err <= 1e-6, "{kind:?}: {err}");
        }
        assert!(apply_fir(&x, FilterKind::Highpass, 5000.0, 3.0).is_err());
        assert!(apply_fir(&x, FilterKind::Lowpass, 2000.0, 13.0).is_err());
    }

    #[test]
    fn label_interpolation_examples() {
        assert_eq!(interpolate_label(-11.0, -5.0, 0.5), -8.0);
        assert_eq!(interpolate_label(-11.0, -5.0, 0.0), -11.0);
        assert_eq!(interpolate_label(-11.0, -5.0, 1.0), -5.0);
    }

    #[test]
    fn gate_threshold() {
        assert!(ContinuumGate::new(6.0).valid);
        assert!(!ContinuumGate::new(7.0).valid);
        assert!(ContinuumGate::new(-3.0).valid);
    }

    fn seed(id: &str) -> SeedToken {
        let clip = pulse_train(200.0, 0.4).with_id(id);
        SeedToken {
            token_id: id.into(),
            label: TokenLabel {
                talker: "f101".into(),
                consonant: Consonant::B,
                snr90_db: -11.0,
            },
            audio: AnnotatedClip::new(clip, SegmentAnnotation::new(id, 0.05, 0.2)).unwrap(),
        }
    }

    #[test]
    fn gated_continuum() {
        let s = seed("f101_ba");
        assert_eq!(
            build_continuum(&s, DistortionFamily::Compress, Some(7.0)).unwrap(),
            ContinuumOutcome::GatedOut {
                most_distorted_snr90: Some(7.0)
            }
        );
        assert_eq!(
            build_continuum(&s, DistortionFamily::Compress, None).unwrap(),
            ContinuumOutcome::GatedOut {
                most_distorted_snr90: None
            }
        );
    }

    #[test]
    fn augment_with_everything_gated_keeps_only_seed() {
        let s = seed("f101_ba");
        let mut gates = GateTable::default();
        for f in DistortionFamily::ALL {
            gates.insert("f101_ba", f, 9.5);
        }
        let rows = augment_corpus(&[s], &gates, &DistortionFamily::ALL, |id, _| {
            Ok(PathBuf::from(id))
        })
        .unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].family, ORIGINAL_FAMILY);
    }

    #[test]
    fn augment_compress_only() {
        let s = seed("f101_ba");
        let mut gates = GateTable::default();
        gates.insert("f101_ba", DistortionFamily::Compress, -5.0);
        let rows = augment_corpus(&[s], &gates, &DistortionFamily::ALL, |id, _| {
            Ok(PathBuf::from(id))
        })
        .unwrap();
        assert_eq!(rows.len(), 51);
        let last = rows.last().unwrap();
        assert_eq!(last.param, Some(DistortionParam::Ratio(0.5)));
        assert_eq!(last.label_snr90_db, -5.0);
        let labels: Vec<f64> = rows.iter().map(|r| r.label_snr90_db).collect();
        assert!(labels.windows(2).all(|w| w[1] >= w[0]));
        for r in &rows[1..] {
            let spec = DistortionSpec {
                family: DistortionFamily::Compress,
                param: r.param.unwrap(),
                step_index: r.step_index,
                position: r.position,
            };
            assert!(is_on_grid(&spec, None));
        }
    }

    #[test]
    fn gate_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gates.json");
        let mut gates = GateTable::default();
        gates.insert("f101_ka", DistortionFamily::PitchDown, 8.0);
        gates.insert("f101_ka", DistortionFamily::Extend, -2.0);
        gates.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"most_distorted_snr90_db\"") && text.contains("\"pitch_down\""));
        assert_eq!(GateTable::load(&path).unwrap(), gates);
    }
}
