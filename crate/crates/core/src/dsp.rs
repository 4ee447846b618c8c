//! Small DSP building blocks: windows, FFT power spectra, Welch averaging,
//! FIR convolution and fractional-octave band levels.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

/// Periodic Hann window (sums to a constant at 50 % and 75 % overlap).
pub fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Symmetric Hamming window.
pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let denom = (n - 1) as f64;
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / denom).cos())
        .collect()
}

/// Reusable forward real-input FFT of a fixed length.
pub struct RealFft {
    len: usize,
    fft: Arc<dyn Fft<f64>>,
    buf: Vec<Complex<f64>>,
    scratch: Vec<Complex<f64>>,
}

impl RealFft {
    pub fn new(len: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(len);
        let scratch = vec![Complex::default(); fft.get_inplace_scratch_len()];
        Self {
            len,
            fft,
            buf: vec![Complex::default(); len],
            scratch,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Transform `frame` (zero-padded to the FFT length) and return the full spectrum.
    pub fn process(&mut self, frame: &[f64]) -> &[Complex<f64>] {
        for (dst, i) in self.buf.iter_mut().zip(0..) {
            *dst = Complex::new(frame.get(i).copied().unwrap_or(0.0), 0.0);
        }
        self.fft
            .process_with_scratch(&mut self.buf, &mut self.scratch);
        &self.buf
    }
}

/// Welch power spectral density estimate, one-sided, `nfft/2 + 1` bins.
///
/// Segments of `nfft` samples with the given hop are Hann-windowed; a signal
/// shorter than one segment is zero-padded into a single segment. Returns the
/// summed per-bin power and the number of segments averaged so that several
/// signals can be pooled.
pub fn welch_accumulate(samples: &[f32], nfft: usize, hop: usize, acc: &mut [f64]) -> usize {
    debug_assert_eq!(acc.len(), nfft / 2 + 1);
    let window = hann_periodic(nfft);
    let win_power: f64 = window.iter().map(|w| w * w).sum();
    let mut fft = RealFft::new(nfft);
    let mut frame = vec![0.0f64; nfft];
    let mut count = 0usize;
    let mut start = 0usize;
    loop {
        for (i, f) in frame.iter_mut().enumerate() {
            *f = samples.get(start + i).map_or(0.0, |&x| x as f64) * window[i];
        }
        let spec = fft.process(&frame);
        for (k, a) in acc.iter_mut().enumerate() {
            let p = spec[k].norm_sqr() / win_power;
            *a += if k == 0 || k == nfft / 2 { p } else { 2.0 * p };
        }
        count += 1;
        start += hop;
        if start + nfft > samples.len() {
            break;
        }
    }
    count
}

pub fn welch_psd(samples: &[f32], nfft: usize) -> Vec<f64> {
    let mut acc = vec![0.0; nfft / 2 + 1];
    let n = welch_accumulate(samples, nfft, nfft / 2, &mut acc);
    acc.iter_mut().for_each(|a| *a /= n as f64);
    acc
}

/// Convolve with a linear-phase FIR of odd length and compensate its group
/// delay, so the output has the input's length and alignment.
pub fn filter_zero_delay(input: &[f32], taps: &[f64]) -> Vec<f32> {
    assert!(taps.len() % 2 == 1, "linear-phase FIR must have odd length");
    let delay = taps.len() / 2;
    let n = input.len() as isize;
    (0..n)
        .map(|i| {
            let mut acc = 0.0f64;
            for (k, &h) in taps.iter().enumerate() {
                let j = i + delay as isize - k as isize;
                if j >= 0 && j < n {
                    acc += h * input[j as usize] as f64;
                }
            }
            acc as f32
        })
        .collect()
}

/// Base-2 1/3-octave bands referenced to 1 kHz with centers in `[lo_hz, hi_hz]`,
/// as `(lower edge, center, upper edge)`.
pub fn third_octave_bands(lo_hz: f64, hi_hz: f64) -> Vec<(f64, f64, f64)> {
    (-20..=20)
        .map(|k| 1000.0 * 2f64.powf(k as f64 / 3.0))
        .filter(|&fc| fc >= lo_hz * 0.99 && fc <= hi_hz * 1.01)
        .map(|fc| {
            let edge = 2f64.powf(1.0 / 6.0);
            (fc / edge, fc, fc * edge)
        })
        .collect()
}

/// Sum of power over bins whose frequency lies in `[lo, hi)`.
pub fn band_power(freqs: &[f64], power: &[f64], lo: f64, hi: f64) -> f64 {
    freqs
        .iter()
        .zip(power)
        .filter(|(&f, _)| f >= lo && f < hi)
        .map(|(_, &p)| p)
        .sum()
}

pub fn db(power: f64) -> f64 {
    10.0 * power.log10()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hann_overlap_adds_to_constant() {
        let w = hann_periodic(400);
        for n in 0..100 {
            let s: f64 = (0..4).map(|k| w[n + 100 * k]).sum();
            assert!((s - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn welch_of_sine_peaks_at_its_bin() {
        let nfft = 512;
        let x: Vec<f32> = (0..16_000)
            .map(|i| (2.0 * PI * 1000.0 * i as f64 / 16_000.0).sin() as f32)
            .collect();
        let psd = welch_psd(&x, nfft);
        let peak = psd
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(peak, 32); // 1000 Hz / (16000/512)
    }

    #[test]
    fn zero_delay_filter_with_unit_impulse_is_identity() {
        let mut taps = vec![0.0; 9];
        taps[4] = 1.0;
        let x: Vec<f32> = (0..50).map(|i| (i as f32 * 0.37).sin()).collect();
        assert_eq!(filter_zero_delay(&x, &taps), x);
    }

    #[test]
    fn third_octave_grid() {
        let bands = third_octave_bands(100.0, 7000.0);
        assert!((bands[0].1 - 99.2).abs() < 0.1);
        assert!((bands.last().unwrap().1 - 6349.6).abs() < 0.1);
        assert_eq!(bands.len(), 19);
    }
}
