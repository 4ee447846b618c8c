#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use snr90::audio::{write_wav, AudioClip};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_snr90"))
}

/// Run the CLI in `dir` and return its output.
pub fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

/// Run the CLI in `dir`, panicking with its stderr unless it exits 0.
pub fn ok_in(dir: &Path, args: &[&str]) -> Output {
    let out = run_in(dir, args);
    assert!(
        out.status.success(),
        "snr90 {args:?} failed ({:?}):\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn sine(freq_hz: f64, rms: f64, seconds: f64, id: &str) -> AudioClip {
    let n = (seconds * 16_000.0) as usize;
    let amp = rms * 2f64.sqrt();
    let samples = (0..n)
        .map(|i| (amp * (2.0 * std::f64::consts::PI * freq_hz * i as f64 / 16_000.0).sin()) as f32)
        .collect();
    AudioClip::new(samples, 16_000, id).unwrap()
}

pub fn write_clip(dir: &Path, name: &str, clip: &AudioClip) -> PathBuf {
    let path = dir.join(name);
    write_wav(clip, &path).unwrap();
    path
}

/// Power ratio in dB of `speech` to `mixture - speech`.
pub fn snr_oracle(speech: &[f32], mixture: &[f32]) -> f64 {
    let ps: f64 = speech.iter().map(|&s| (s as f64).powi(2)).sum();
    let pn: f64 = speech
        .iter()
        .zip(mixture)
        .map(|(&s, &m)| (m as f64 - s as f64).powi(2))
        .sum();
    10.0 * (ps / pn).log10()
}
