//! Log-magnitude STFT features over the consonant-to-vowel-onset interval.
//!
//! 400-sample (25 ms) Hamming windows with a 100-sample hop are zero-padded to
//! a 640-point transform. Bins 0 to 319 (0 to 7975 Hz, Nyquist dropped) are
//! kept, so every frame has exactly [`N_BINS`] entries `ln(max(|X|, 1e-10))`.
//! No normalization is applied.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::audio::{AudioClip, SegmentAnnotation, PIPELINE_SAMPLE_RATE};
use crate::dsp::{self, RealFft};
use crate::error::{Error, Result};

pub const WINDOW: usize = 400;
pub const HOP: usize = 100;
pub const NFFT: usize = 640;
pub const N_BINS: usize = 320;
pub const MAGNITUDE_FLOOR: f64 = 1e-10;
pub const FRAME_HOP_S: f64 = HOP as f64 / PIPELINE_SAMPLE_RATE as f64;

/// A T×320 log-magnitude matrix, row-major by frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub token_id: String,
    n_frames: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(token_id: impl Into<String>, n_frames: usize, data: Vec<f32>) -> Result<Self> {
        let token_id = token_id.into();
        if n_frames == 0 || data.len() != n_frames * N_BINS {
            return Err(Error::FeatureCache(format!(
                "{token_id}: {} values for {n_frames} frames of {N_BINS} bins",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::FeatureCache(format!(
                "{token_id}: non-finite feature"
            )));
        }
        Ok(Self {
            token_id,
            n_frames,
            data,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn frame_hop_s(&self) -> f64 {
        FRAME_HOP_S
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * N_BINS..(t + 1) * N_BINS]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, t: usize, bin: usize) -> f32 {
        self.data[t * N_BINS + bin]
    }
}

/// Frame count for an interval of `samples`.
pub fn frame_count(samples: usize) -> Option<usize> {
    (samples >= WINDOW).then(|| 1 + (samples - WINDOW) / HOP)
}

pub fn extract_features(clip: &AudioClip, annotation: &SegmentAnnotation) -> Result<FeatureMatrix> {
    clip.require_pipeline_rate()?;
    let (start, end) = annotation.sample_range(clip)?;
    let segment = &clip.samples()[start..end];
    let n_frames = frame_count(segment.len()).ok_or(Error::IntervalTooShort {
        samples: segment.len(),
        window: WINDOW,
    })?;
    let window = dsp::hamming(WINDOW);
    let mut fft = RealFft::new(NFFT);
    let mut frame = vec![0.0f64; WINDOW];
    let mut data = Vec::with_capacity(n_frames * N_BINS);
    for t in 0..n_frames {
        let x = &segment[t * HOP..t * HOP + WINDOW];
        for ((f, &s), &w) in frame.iter_mut().zip(x).zip(&window) {
            *f = s as f64 * w;
        }
        let spectrum = fft.process(&frame);
        data.extend(
            spectrum[..N_BINS]
                .iter()
                .map(|c| c.norm().max(MAGNITUDE_FLOOR).ln() as f32),
        );
    }
    FeatureMatrix::new(clip.id(), n_frames, data)
}

const CACHE_MAGIC: &[u8; 8] = b"SNR90FT\0";
const CACHE_VERSION: u32 = 1;

/// Write the binary cache: magic, version, token id, T, bins, hop, f32 payload.
pub fn write_feature_cache(features: &FeatureMatrix, path: &Path) -> Result<()> {
    let id = features.token_id.as_bytes();
    let mut buf = Vec::with_capacity(40 + id.len() + features.data.len() * 4);
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
    buf.extend_from_slice(id);
    buf.extend_from_slice(&(features.n_frames as u32).to_le_bytes());
    buf.extend_from_slice(&(N_BINS as u32).to_le_bytes());
    buf.extend_from_slice(&FRAME_HOP_S.to_le_bytes());
    for v in &features.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_feature_cache(path: &Path) -> Result<FeatureMatrix> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |what: &str| Error::FeatureCache(format!("{}: {what}", path.display()));
    let mut cursor = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let slice = bytes
            .get(cursor..cursor + n)
            .ok_or_else(|| bad("truncated"))?;
        cursor += n;
        Ok(slice)
    };
    if take(8)? != CACHE_MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
    let version = u32_at(take(4)?);
    if version != CACHE_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let id_len = u32_at(take(4)?) as usize;
    let token_id =
        String::from_utf8(take(id_len)?.to_vec()).map_err(|_| bad("token id not UTF-8"))?;
    let n_frames = u32_at(take(4)?) as usize;
    let bins = u32_at(take(4)?) as usize;
    if bins != N_BINS {
        return Err(bad(&format!("{bins} bins, expected {N_BINS}")));
    }
    let _hop = f64::from_le_bytes(take(8)?.try_into().unwrap());
    let payload = take(n_frames * N_BINS * 4)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FeatureMatrix::new(token_id, n_frames, data)
}
