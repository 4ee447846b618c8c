//! Speech-weighted noise: long-term average speech spectrum estimation,
//! spectrally shaped Gaussian noise, and speech/noise mixing at a target SNR.

use std::f64::consts::PI;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{mean_power, AudioClip, PIPELINE_SAMPLE_RATE};
use crate::dsp;
use crate::error::{Error, Result};
use crate::jsonl;

/// Default number of one-sided bin intervals for LTASS estimation.
pub const DEFAULT_LTASS_BINS: usize = 512;

/// Minimum order of the noise-shaping FIR.
pub const SHAPING_FIR_ORDER: usize = 512;

/// FIR taps per profile bin interval.
pub const SHAPING_TAPS_PER_BIN: usize = 4;

/// Power floor applied to the normalized profile.
pub const PROFILE_FLOOR_DB: f64 = -120.0;

/// RMS level of synthesized noise before mixing.
pub const NOISE_RMS: f64 = 0.1;

/// Long-term average power spectrum on a uniform 0..Nyquist grid, 0 dB at its peak.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LtassProfile {
    pub freqs_hz: Vec<f64>,
    pub power_db: Vec<f64>,
    pub source_corpus_hash: String,
}

impl LtassProfile {
    /// Flat (white) profile with `bins + 1` points from 0 to 8 kHz.
    pub fn flat(bins: usize) -> Self {
        let nyquist = PIPELINE_SAMPLE_RATE as f64 / 2.0;
        Self {
            freqs_hz: (0..=bins)
                .map(|k| k as f64 * nyquist / bins as f64)
                .collect(),
            power_db: vec![0.0; bins + 1],
            source_corpus_hash: "flat".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.freqs_hz.len() < 2 || self.freqs_hz.len() != self.power_db.len() {
            return Err(Error::InvalidParameter(
                "LTASS profile needs matching frequency and power grids of length >= 2".into(),
            ));
        }
        if self.freqs_hz.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter(
                "LTASS frequencies must be strictly increasing".into(),
            ));
        }
        if self.power_db.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidParameter("LTASS power must be finite".into()));
        }
        Ok(())
    }

    /// Power in dB at `freq_hz`, linearly interpolated, held constant past the ends.
    pub fn power_db_at(&self, freq_hz: f64) -> f64 {
        let f = &self.freqs_hz;
        if freq_hz <= f[0] {
            return self.power_db[0];
        }
        if freq_hz >= f[f.len() - 1] {
            return self.power_db[f.len() - 1];
        }
        let i = f.partition_point(|&x| x <= freq_hz) - 1;
        let t = (freq_hz - f[i]) / (f[i + 1] - f[i]);
        self.power_db[i] + t * (self.power_db[i + 1] - self.power_db[i])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let profile: Self = jsonl::read_json(path)?;
        profile.validate()?;
        Ok(profile)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        jsonl::write_json(path, self)
    }
}

/// Ordered list of presentation SNRs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrLadder {
    pub levels_db: Vec<f64>,
}

impl Default for SnrLadder {
    fn default() -> Self {
        Self {
            levels_db: vec![-22.0, -18.0, -12.0, -6.0, 0.0, 6.0, 12.0, 18.0, 22.0],
        }
    }
}

impl SnrLadder {
    pub fn new(levels_db: Vec<f64>) -> Result<Self> {
        if levels_db.is_empty() || levels_db.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter(
                "SNR ladder must be non-empty and strictly increasing".into(),
            ));
        }
        Ok(Self { levels_db })
    }

    pub fn len(&self) -> usize {
        self.levels_db.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels_db.is_empty()
    }

    pub fn level(&self, index: usize) -> f64 {
        self.levels_db[index]
    }

    pub fn top(&self) -> usize {
        self.levels_db.len() - 1
    }

    pub fn index_of(&self, snr_db: f64) -> Option<usize> {
        self.levels_db.iter().position(|&l| l == snr_db)
    }
}

/// Welch-average the power spectra of every clip (Hann, 50 % overlap,
/// `2 * fft_bins`-point segments) and normalize to 0 dB at the peak.
pub fn estimate_ltass(clips: &[AudioClip], fft_bins: usize) -> Result<LtassProfile> {
    if clips.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if fft_bins < 2 {
        return Err(Error::InvalidParameter("fft_bins must be >= 2".into()));
    }
    let nfft = 2 * fft_bins;
    let mut acc = vec![0.0f64; fft_bins + 1];
    let mut segments = 0usize;
    let mut hasher = Sha256::new();
    for clip in clips {
        clip.require_pipeline_rate()?;
        segments += dsp::welch_accumulate(clip.samples(), nfft, nfft / 2, &mut acc);
        hasher.update(clip.id().as_bytes());
        hasher.update(clip.sample_rate().to_le_bytes());
        for &x in clip.samples() {
            hasher.update(x.to_le_bytes());
        }
    }
    let peak = acc
        .iter()
        .map(|p| p / segments as f64)
        .fold(0.0f64, f64::max);
    if peak <= 0.0 {
        return Err(Error::ZeroPower);
    }
    let power_db = acc
        .iter()
        .map(|p| dsp::db(p / segments as f64 / peak).max(PROFILE_FLOOR_DB))
        .collect();
    let sr = PIPELINE_SAMPLE_RATE as f64;
    Ok(LtassProfile {
        freqs_hz: (0..=fft_bins)
            .map(|k| k as f64 * sr / nfft as f64)
            .collect(),
        power_db,
        source_corpus_hash: format!("{:x}", hasher.finalize()),
    })
}

/// Linear-phase shaping FIR of the given (even) order, designed by frequency
/// sampling the profile's amplitude response at `k * fs / (order + 1)`.
pub fn shaping_filter(profile: &LtassProfile, order: usize) -> Vec<f64> {
    let n = order + 1;
    let m = order / 2;
    let sr = PIPELINE_SAMPLE_RATE as f64;
    let amps: Vec<f64> = (0..=m)
        .map(|k| 10f64.powf(profile.power_db_at(k as f64 * sr / n as f64) / 20.0))
        .collect();
    (0..n)
        .map(|i| {
            let shift = i as f64 - m as f64;
            let sum: f64 = amps
                .iter()
                .enumerate()
                .skip(1)
                .map(|(k, a)| 2.0 * a * (2.0 * PI * k as f64 * shift / n as f64).cos())
                .sum();
            (amps[0] + sum) / n as f64
        })
        .collect()
}

/// Gaussian noise shaped to `profile`, scaled to [`NOISE_RMS`]. Deterministic in `seed`.
pub fn synth_noise(profile: &LtassProfile, duration_s: f64, seed: u64) -> Result<AudioClip> {
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "noise duration must be positive, got {duration_s}"
        )));
    }
    profile.validate()?;
    let len = (duration_s * PIPELINE_SAMPLE_RATE as f64).round() as usize;
    if len == 0 {
        return Err(Error::InvalidParameter(
            "noise duration below one sample".into(),
        ));
    }
    let intervals = profile.freqs_hz.len() - 1;
    let order = SHAPING_FIR_ORDER.max(SHAPING_TAPS_PER_BIN * intervals);
    let taps = shaping_filter(profile, order);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let white: Vec<f64> = (0..len + taps.len() - 1)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    // Valid part of the convolution only, so there is no start-up transient.
    let shaped: Vec<f64> = (0..len)
        .map(|i| {
            taps.iter()
                .zip(white[i..i + taps.len()].iter().rev())
                .map(|(h, x)| h * x)
                .sum()
        })
        .collect();
    let power = shaped.iter().map(|x| x * x).sum::<f64>() / len as f64;
    if power <= 0.0 {
        return Err(Error::ZeroPower);
    }
    let gain = NOISE_RMS / power.sqrt();
    let samples = shaped.iter().map(|x| (x * gain) as f32).collect();
    AudioClip::new(samples, PIPELINE_SAMPLE_RATE, format!("noise_seed{seed}"))
}

/// Gain `g` that puts `g * noise` at `snr_db` below the speech, powers measured
/// over `interval` (seconds, relative to the speech clip) or the full token.
pub fn mixing_gain(
    speech: &AudioClip,
    noise: &AudioClip,
    snr_db: f64,
    interval: Option<(f64, f64)>,
) -> Result<f64> {
    if speech.sample_rate() != noise.sample_rate() {
        return Err(Error::InvalidParameter(format!(
            "speech at {} Hz but noise at {} Hz",
            speech.sample_rate(),
            noise.sample_rate()
        )));
    }
    if noise.len() < speech.len() {
        return Err(Error::NoiseTooShort {
            speech: speech.len(),
            noise: noise.len(),
        });
    }
    if !snr_db.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "SNR must be finite, got {snr_db}"
        )));
    }
    let (start, end) = match interval {
        Some((t0, t1)) => speech.sample_range(t0, t1)?,
        None => (0, speech.len()),
    };
    let p_speech = mean_power(&speech.samples()[start..end]);
    let p_noise = mean_power(&noise.samples()[start..end]);
    if p_speech <= 0.0 || p_noise <= 0.0 {
        return Err(Error::ZeroPower);
    }
    Ok((p_speech / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt())
}

/// `speech + g * noise[..speech.len()]` at the requested SNR.
pub fn mix_at_snr(
    speech: &AudioClip,
    noise: &AudioClip,
    snr_db: f64,
    interval: Option<(f64, f64)>,
) -> Result<AudioClip> {
    let gain = mixing_gain(speech, noise, snr_db, interval)?;
    let samples = speech
        .samples()
        .iter()
        .zip(noise.samples())
        .map(|(&s, &n)| (s as f64 + gain * n as f64) as f32)
        .collect();
    speech.with_samples(samples)
}

/// SNR in dB of `mixture - speech` against `speech`, over `interval` if given.
pub fn measured_snr_db(
    speech: &AudioClip,
    mixture: &AudioClip,
    interval: Option<(f64, f64)>,
) -> Result<f64> {
    if speech.len() != mixture.len() {
        return Err(Error::InvalidParameter(
            "speech and mixture lengths differ".into(),
        ));
    }
    let (start, end) = match interval {
        Some((t0, t1)) => speech.sample_range(t0, t1)?,
        None => (0, speech.len()),
    };
    let s = &speech.samples()[start..end];
    let residual: Vec<f32> = mixture.samples()[start..end]
        .iter()
        .zip(s)
        .map(|(&m, &x)| m - x)
        .collect();
    let p_s = mean_power(s);
    let p_n = mean_power(&residual);
    if p_s <= 0.0 || p_n <= 0.0 {
        return Err(Error::ZeroPower);
    }
    Ok(dsp::db(p_s / p_n))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn white(len: usize, seed: u64) -> AudioClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = (0..len)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                (0.1 * v) as f32
            })
            .collect();
        AudioClip::new(s, 16_000, format!("white{seed}")).unwrap()
    }

    #[test]
    fn default_ladder_is_verbatim() {
        assert_eq!(
            SnrLadder::default().levels_db,
            vec![-22.0, -18.0, -12.0, -6.0, 0.0, 6.0, 12.0, 18.0, 22.0]
        );
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(matches!(estimate_ltass(&[], 512), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn white_noise_ltass_is_flat() {
        // 64 s of white noise: ~2000 Welch segments, per-bin spread ~0.1 dB.
        let clips: Vec<_> = (0..4).map(|s| white(16 * 16_000, s)).collect();
        let profile = estimate_ltass(&clips, 512).unwrap();
        profile.validate().unwrap();
        let in_band: Vec<f64> = profile
            .freqs_hz
            .iter()
            .zip(&profile.power_db)
            .filter(|(&f, _)| (100.0..=7000.0).contains(&f))
            .map(|(_, &p)| p)
            .collect();
        let mean = in_band.iter().sum::<f64>() / in_band.len() as f64;
        for p in in_band {
            assert!((p - mean).abs() <= 1.0, "bin {p} dB vs mean {mean}");
        }
    }

    #[test]
    fn tone_ltass_peaks_at_tone() {
        let samples = (0..32_000)
            .map(|i| (0.5 * (2.0 * PI * 1000.0 * i as f64 / 16_000.0).sin()) as f32)
            .collect();
        let clip = AudioClip::new(samples, 16_000, "tone").unwrap();
        let profile = estimate_ltass(&[clip], 512).unwrap();
        let peak = profile
            .power_db
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(profile.freqs_hz[peak], 1000.0);
        for (f, p) in profile.freqs_hz.iter().zip(&profile.power_db) {
            if (f - 1000.0).abs() > 500.0 {
                assert!(*p <= -40.0, "{f} Hz at {p} dB");
            }
        }
    }

    #[test]
    fn synth_noise_length_and_determinism() {
        let profile = LtassProfile::flat(512);
        let a = synth_noise(&profile, 10.0, 7).unwrap();
        assert_eq!(a.len(), 160_000);
        let b = synth_noise(&profile, 10.0, 7).unwrap();
        assert_eq!(a.samples(), b.samples());
        let c = synth_noise(&profile, 10.0, 8).unwrap();
        assert_ne!(a.samples(), c.samples());
        assert!(synth_noise(&profile, 0.0, 1).is_err());
        assert!(synth_noise(&profile, -1.0, 1).is_err());
    }

    #[test]
    fn synth_noise_is_gaussian_enough() {
        let noise = synth_noise(&LtassProfile::flat(512), 30.0, 3).unwrap();
        let x: Vec<f64> = noise.samples().iter().map(|&v| v as f64).collect();
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let m2 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let m4 = x.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
        let excess = m4 / (m2 * m2) - 3.0;
        assert!(m2.is_finite() && m2 > 0.0);
        assert!(excess.abs() < 0.5, "excess kurtosis {excess}");
    }

    #[test]
    fn flat_profile_shaping_filter_is_an_impulse() {
        let taps = shaping_filter(&LtassProfile::flat(512), 512);
        assert_eq!(taps.len(), 513);
        assert!((taps[256] - 1.0).abs() < 1e-12);
        assert!(taps
            .iter()
            .enumerate()
            .all(|(i, &h)| i == 256 || h.abs() < 1e-12));
    }

    #[test]
    fn mixing_gain_examples() {
        let speech = white(8000, 1);
        let mut noise = white(8000, 2);
        // Rescale noise to exactly the speech RMS.
        let k = (mean_power(speech.samples()) / mean_power(noise.samples())).sqrt();
        noise = noise
            .with_samples(
                noise
                    .samples()
                    .iter()
                    .map(|&x| (x as f64 * k) as f32)
                    .collect(),
            )
            .unwrap();
        assert!((mixing_gain(&speech, &noise, 0.0, None).unwrap() - 1.0).abs() < 1e-6);
        assert!((mixing_gain(&speech, &noise, 20.0, None).unwrap() - 0.1).abs() < 1e-6);
    }

    #[test]
    fn mixing_errors() {
        let silent = AudioClip::new(vec![0.0; 100], 16_000, "s").unwrap();
        let noise = white(100, 1);
        let err = mix_at_snr(&silent, &noise, 0.0, None).unwrap_err();
        assert_eq!(err.to_string(), "zero-power signal");
        let short = white(50, 1);
        assert!(matches!(
            mix_at_snr(&noise, &short, 0.0, None),
            Err(Error::NoiseTooShort { .. })
        ));
    }

    #[test]
    fn mix_hits_every_ladder_snr_over_interval() {
        let speech = white(16_000, 5);
        let noise = synth_noise(&LtassProfile::flat(64), 1.5, 9).unwrap();
        for &snr in &SnrLadder::default().levels_db {
            let interval = Some((0.2, 0.6));
            let mix = mix_at_snr(&speech, &noise, snr, interval).unwrap();
            let got = measured_snr_db(&speech, &mix, interval).unwrap();
            assert!((got - snr).abs() < 0.1, "{snr} -> {got}");
        }
    }
}
