//! Synthetic CV-like tokens with a known SNR₉₀ label.
//!
//! A token is a short noise burst, a consonant cue (band noise centred on a
//! consonant-specific frequency), and a formant-filtered pulse-train vowel,
//! over a faint noise floor. The SNR₉₀ label is an affine function of the cue
//! level plus bounded uniform label noise, so a regressor that reads the cue
//! band energy can recover it. Talkers differ in F0, vocal tract length,
//! overall level, and cue centre frequency.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::{
    AnnotatedClip, AudioClip, Consonant, SegmentAnnotation, TokenLabel, PIPELINE_SAMPLE_RATE,
};
use crate::error::{Error, Result};
use crate::psychometrics::derive_seed;

const SR: f64 = PIPELINE_SAMPLE_RATE as f64;
const TOKEN_SAMPLES: usize = 4096;
const VOWEL_RMS: f64 = 0.1;
const FLOOR_RMS: f64 = 0.01;
/// Cue RMS at a cue level of 0 dB.
const CUE_REFERENCE_RMS: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub tokens_per_class: usize,
    pub n_talkers: usize,
    /// Cue levels are drawn uniformly from this range (dB).
    pub cue_range_db: (f64, f64),
    /// label = intercept + slope * cue level + U(-noise, noise)
    pub label_intercept_db: f64,
    pub label_slope: f64,
    pub label_noise_db: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            tokens_per_class: 2000,
            n_talkers: 40,
            cue_range_db: (0.0, 20.0),
            label_intercept_db: -4.0,
            label_slope: -0.8,
            label_noise_db: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tokens_per_class == 0 || self.n_talkers == 0 {
            return Err(Error::InvalidParameter(
                "synthetic corpus needs tokens and talkers".into(),
            ));
        }
        if !(self.cue_range_db.0 <= self.cue_range_db.1) || !(self.label_noise_db >= 0.0) {
            return Err(Error::InvalidParameter(
                "bad synthetic cue or label-noise range".into(),
            ));
        }
        Ok(())
    }

    /// The noise-free label for a cue level.
    pub fn true_label(&self, cue_level_db: f64) -> f64 {
        self.label_intercept_db + self.label_slope * cue_level_db
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Talker {
    pub id: String,
    pub f0_hz: f64,
    /// Formant frequency multiplier.
    pub tract_scale: f64,
    pub gain_db: f64,
    /// Multiplier on the consonant cue centre frequency.
    pub cue_scale: f64,
}

pub fn talkers(n: usize, seed: u64) -> Vec<Talker> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "talkers", ""));
    (0..n)
        .map(|i| {
            let female = i % 2 == 0;
            Talker {
                id: format!("{}{:03}", if female { 'f' } else { 'm' }, 101 + i),
                f0_hz: if female {
                    rng.gen_range(170.0..250.0)
                } else {
                    rng.gen_range(95.0..150.0)
                },
                tract_scale: if female {
                    rng.gen_range(1.05..1.2)
                } else {
                    rng.gen_range(0.9..1.02)
                },
                gain_db: rng.gen_range(-1.5..1.5),
                cue_scale: rng.gen_range(0.95..1.05),
            }
        })
        .collect()
}

/// Centre frequency of each consonant's cue band.
pub fn cue_frequency_hz(consonant: Consonant) -> f64 {
    match consonant {
        Consonant::P => 900.0,
        Consonant::B => 700.0,
        Consonant::T => 4200.0,
        Consonant::D => 3300.0,
        Consonant::K => 1900.0,
        Consonant::G => 1500.0,
    }
}

fn voiceless(consonant: Consonant) -> bool {
    matches!(consonant, Consonant::P | Consonant::T | Consonant::K)
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn scale_to_rms(x: &mut [f64], target: f64) {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v *= target / rms);
    }
}

/// Gaussian noise band-limited to [lo, hi] Hz by FFT masking.
fn band_noise(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = gaussian(rng, n)
        .into_iter()
        .map(|v| Complex::new(v, 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * SR / n as f64;
        if f < lo || f > hi {
            *c = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.into_iter().map(|c| c.re).collect()
}

/// Unit impulses at `f0_hz` with 1 % period jitter.
fn pulses(rng: &mut ChaCha8Rng, len: usize, f0_hz: f64) -> Vec<f64> {
    let mut x = vec![0.0; len];
    let period = SR / f0_hz;
    let mut next = 0.0;
    while (next as usize) < len {
        x[next as usize] = 1.0;
        next += period * (1.0 + rng.gen_range(-0.01..0.01));
    }
    x
}

/// Two-pole resonator (digital formant filter) applied in place.
fn resonate(x: &mut [f64], freq: f64, bandwidth: f64) {
    let r = (-PI * bandwidth / SR).exp();
    let a1 = 2.0 * r * (2.0 * PI * freq / SR).cos();
    let a2 = -r * r;
    let gain = 1.0 - a1 - a2;
    let (mut y1, mut y2) = (0.0, 0.0);
    for v in x.iter_mut() {
        let y = gain * *v + a1 * y1 + a2 * y2;
        y2 = y1;
        y1 = y;
        *v = y;
    }
}

/// Flat envelope with raised-cosine ramps of `ramp` samples at both ends.
fn tukey_envelope(i: usize, len: usize, ramp: usize) -> f64 {
    let edge = i.min(len - 1 - i);
    if edge >= ramp {
        1.0
    } else {
        0.5 - 0.5 * (PI * (edge as f64 + 0.5) / ramp as f64).cos()
    }
}

/// Render one token. The annotated interval runs from the burst to the end
/// of the vowel onset and is between 150 and 175 ms long.
pub fn synthesize_token(
    consonant: Consonant,
    talker: &Talker,
    cue_level_db: f64,
    token_id: &str,
    seed: u64,
) -> Result<AnnotatedClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = TOKEN_SAMPLES;
    let start = rng.gen_range(480..800);
    let interval = rng.gen_range(2400..2800);
    let vot = rng.gen_range(1000..1120);
    let gain = 10f64.powf(talker.gain_db / 20.0);

    let mut signal = gaussian(&mut rng, n);
    scale_to_rms(&mut signal, FLOOR_RMS * gain);

    // Release burst: 8 ms of decaying broadband noise.
    let burst_len = 128;
    let burst = gaussian(&mut rng, burst_len);
    for (i, b) in burst.iter().enumerate() {
        signal[start + i] += 0.15 * gain * b * (-(i as f64) / 40.0).exp();
    }

    // Consonant cue: band noise filling the interval before voicing. Its
    // level is absolute, independent of the talker's overall gain.
    let fc = cue_frequency_hz(consonant) * talker.cue_scale;
    let mut cue = band_noise(&mut rng, n, fc / 1.2, fc * 1.2);
    cue.truncate(vot);
    for (i, c) in cue.iter_mut().enumerate() {
        *c *= tukey_envelope(i, vot, 80);
    }
    scale_to_rms(
        &mut cue,
        CUE_REFERENCE_RMS * 10f64.powf(cue_level_db / 20.0),
    );
    for (i, c) in cue.iter().enumerate() {
        signal[start + i] += c;
    }

    // Voiced stops carry a low-frequency voice bar under the cue.
    if !voiceless(consonant) {
        let mut bar = pulses(&mut rng, vot, talker.f0_hz);
        resonate(&mut bar, 180.0, 80.0);
        resonate(&mut bar, 180.0, 80.0);
        scale_to_rms(&mut bar, 0.2 * VOWEL_RMS * gain);
        for (i, b) in bar.iter().enumerate() {
            signal[start + i] += b;
        }
    }

    // Vowel: pulse train through three formant resonators, 20 ms onset ramp.
    let onset = start + vot;
    let mut vowel = pulses(&mut rng, n - onset, talker.f0_hz);
    for (f, bw) in [(730.0, 90.0), (1090.0, 110.0), (2440.0, 170.0)] {
        resonate(&mut vowel, f * talker.tract_scale, bw);
    }
    scale_to_rms(&mut vowel, VOWEL_RMS * gain);
    for (i, v) in vowel.iter().enumerate() {
        signal[onset + i] += v * (i as f64 / 320.0).min(1.0);
    }

    let clip = AudioClip::new(
        signal.into_iter().map(|v| v as f32).collect(),
        PIPELINE_SAMPLE_RATE,
        token_id,
    )?;
    let annotation =
        SegmentAnnotation::new(token_id, start as f64 / SR, (start + interval) as f64 / SR);
    AnnotatedClip::new(clip, annotation)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticToken {
    pub audio: AnnotatedClip,
    pub label: TokenLabel,
    pub cue_level_db: f64,
}

/// `tokens_per_class` tokens of one consonant spread evenly over the talkers.
pub fn generate_class(
    consonant: Consonant,
    config: &SyntheticConfig,
) -> Result<Vec<SyntheticToken>> {
    config.validate()?;
    let talkers = talkers(config.n_talkers, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "class", consonant.as_str()));
    (0..config.tokens_per_class)
        .map(|i| {
            let talker = &talkers[i % talkers.len()];
            let token_id = format!("{}_{}a_{:04}", talker.id, consonant, i);
            let (lo, hi) = config.cue_range_db;
            let cue_level_db = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
            let noise = if config.label_noise_db > 0.0 {
                rng.gen_range(-config.label_noise_db..=config.label_noise_db)
            } else {
                0.0
            };
            let audio = synthesize_token(consonant, talker, cue_level_db, &token_id, rng.gen())?;
            Ok(SyntheticToken {
                audio,
                label: TokenLabel {
                    talker: talker.id.clone(),
                    consonant,
                    snr90_db: config.true_label(cue_level_db) + noise,
                },
                cue_level_db,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::extract_features;

    fn small(seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            tokens_per_class: 12,
            n_talkers: 4,
            seed,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate_class(Consonant::K, &small(3)).unwrap();
        let b = generate_class(Consonant::K, &small(3)).unwrap();
        assert_eq!(a, b);
        let c = generate_class(Consonant::K, &small(4)).unwrap();
        assert_ne!(a[0].audio.clip, c[0].audio.clip);
    }

    #[test]
    fn labels_follow_the_cue() {
        let config = small(1);
        for t in generate_class(Consonant::D, &config).unwrap() {
            let err = t.label.snr90_db - config.true_label(t.cue_level_db);
            assert!(err.abs() <= 0.5);
            assert!((-20.5..=-3.5).contains(&t.label.snr90_db));
        }
    }

    #[test]
    fn interval_fits_the_deepest_network() {
        for t in generate_class(Consonant::T, &small(2)).unwrap() {
            let f = extract_features(&t.audio.clip, &t.audio.annotation).unwrap();
            assert!((21..=25).contains(&f.n_frames()), "{}", f.n_frames());
            assert!(f.as_slice().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn cue_level_raises_band_energy() {
        let talker = &talkers(1, 0)[0];
        let band_mean = |level: f64| {
            let a = synthesize_token(Consonant::T, talker, level, "x", 9).unwrap();
            let f = extract_features(&a.clip, &a.annotation).unwrap();
            let bin = (cue_frequency_hz(Consonant::T) * talker.cue_scale / 25.0).round() as usize;
            (0..4).map(|t| f.get(t, bin) as f64).sum::<f64>() / 4.0
        };
        // 20 dB is a factor of 10 in magnitude, ln(10) = 2.3 in the features.
        let diff = band_mean(20.0) - band_mean(0.0);
        assert!(diff > 1.5, "{diff}");
    }

    #[test]
    fn talker_pool_alternates() {
        let t = talkers(4, 0);
        assert_eq!(t[0].id, "f101");
        assert_eq!(t[1].id, "m102");
        assert!(t[1].f0_hz < 150.0);
    }
}
