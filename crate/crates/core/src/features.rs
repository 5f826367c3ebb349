//! Fixed-length segmentation and normalized log-mel spectrograms.

use std::path::Path;
use std::sync::Arc;

use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio;
use crate::binfmt;
use crate::error::{Error, Result};

/// Window into a waveform. Times are derived from sample positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentWindow {
    pub start_sample: usize,
    pub len_samples: usize,
}

impl SegmentWindow {
    pub fn start_s(&self, sr: u32) -> f64 {
        self.start_sample as f64 / sr as f64
    }

    pub fn length_s(&self, sr: u32) -> f64 {
        self.len_samples as f64 / sr as f64
    }

    pub fn slice<'a>(&self, wave: &'a [f32]) -> &'a [f32] {
        &wave[self.start_sample..self.start_sample + self.len_samples]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentParams {
    pub length_s: f64,
    pub overlap: f64,
    pub max_segments: usize,
    pub silence_threshold_db: f64,
}

impl Default for SegmentParams {
    fn default() -> Self {
        Self {
            length_s: 3.0,
            overlap: 0.5,
            max_segments: 40,
            silence_threshold_db: crate::dataset::DEFAULT_SILENCE_DB,
        }
    }
}

impl SegmentParams {
    pub fn with_length(self, length_s: f64) -> Self {
        Self { length_s, ..self }
    }
}

/// Cuts `wave` into windows of `length_s` with the given overlap. Silent windows
/// are skipped before the `max_segments` cap is applied.
pub fn segment_waveform(wave: &[f32], sample_rate: u32, params: &SegmentParams) -> Result<Vec<SegmentWindow>> {
    if !(params.length_s > 0.0) {
        return Err(Error::param("segment length must be positive"));
    }
    if !(0.0..1.0).contains(&params.overlap) {
        return Err(Error::param(format!("overlap {} outside [0, 1)", params.overlap)));
    }
    let sr = sample_rate as f64;
    let len = (params.length_s * sr).round() as usize;
    let hop_s = params.length_s * (1.0 - params.overlap);
    let mut out = Vec::new();
    for k in 0.. {
        if out.len() >= params.max_segments {
            break;
        }
        let start = (k as f64 * hop_s * sr).round() as usize;
        if start + len > wave.len() {
            break;
        }
        let w = SegmentWindow {
            start_sample: start,
            len_samples: len,
        };
        if !audio::is_silent(w.slice(wave), params.silence_threshold_db) {
            out.push(w);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MelParams {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for MelParams {
    fn default() -> Self {
        Self {
            sample_rate: crate::dataset::DEFAULT_SAMPLE_RATE,
            n_fft: 1024,
            hop: 256,
            n_mels: 64,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: 1e-6,
        }
    }
}

impl MelParams {
    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate as f64 / 2.0;
        if self.fmax > nyquist {
            return Err(Error::param(format!("fmax {} exceeds Nyquist {nyquist}", self.fmax)));
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax) {
            return Err(Error::param("need 0 <= fmin < fmax"));
        }
        if self.n_fft < 2 || self.hop == 0 || self.n_mels == 0 || !(self.log_floor > 0.0) {
            return Err(Error::param("n_fft, hop, n_mels and log_floor must be positive"));
        }
        Ok(())
    }

    /// Frames produced for `n` samples (no padding).
    pub fn frame_count(&self, n: usize) -> usize {
        if n < self.n_fft {
            0
        } else {
            (n - self.n_fft) / self.hop + 1
        }
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filter over FFT bins `start..start + weights.len()`.
#[derive(Debug, Clone)]
pub struct MelFilter {
    pub center_hz: f64,
    pub start: usize,
    pub weights: Vec<f64>,
}

/// Area-normalized triangular filters: each has height `2 / (f_hi - f_lo)`.
pub fn mel_filterbank(params: &MelParams) -> Vec<MelFilter> {
    let n_bins = params.n_fft / 2 + 1;
    let bin_hz = params.sample_rate as f64 / params.n_fft as f64;
    let (lo, hi) = (hz_to_mel(params.fmin), hz_to_mel(params.fmax));
    let edges: Vec<f64> = (0..params.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (params.n_mels + 1) as f64))
        .collect();
    (0..params.n_mels)
        .map(|m| {
            let (f0, f1, f2) = (edges[m], edges[m + 1], edges[m + 2]);
            let height = 2.0 / (f2 - f0);
            let mut start = None;
            let mut weights = Vec::new();
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let w = if f > f0 && f <= f1 {
                    (f - f0) / (f1 - f0)
                } else if f > f1 && f < f2 {
                    (f2 - f) / (f2 - f1)
                } else {
                    0.0
                };
                if w > 0.0 {
                    start.get_or_insert(k);
                    weights.push(w * height);
                } else if start.is_some() {
                    break;
                }
            }
            MelFilter {
                center_hz: f1,
                start: start.unwrap_or(0),
                weights,
            }
        })
        .collect()
}

/// Log-mel matrix stored mel-major: `data[m * n_frames + t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelSegment {
    pub n_mels: usize,
    pub n_frames: usize,
    pub data: Vec<f32>,
    /// `(mean, std)` removed by [`normalize`], if applied.
    pub stats: Option<(f64, f64)>,
}

impl MelSegment {
    pub fn at(&self, m: usize, t: usize) -> f32 {
        self.data[m * self.n_frames + t]
    }
}

/// Reusable STFT plan, window and filterbank.
#[derive(Clone)]
pub struct MelExtractor {
    params: MelParams,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filters: Vec<MelFilter>,
}

impl std::fmt::Debug for MelExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelExtractor").field("params", &self.params).finish()
    }
}

impl MelExtractor {
    pub fn new(params: MelParams) -> Result<Self> {
        params.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(params.n_fft);
        let n = params.n_fft as f64;
        let window = (0..params.n_fft)
            .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / n).cos())
            .collect();
        Ok(Self {
            filters: mel_filterbank(&params),
            params,
            fft,
            window,
        })
    }

    pub fn params(&self) -> &MelParams {
        &self.params
    }

    pub fn filters(&self) -> &[MelFilter] {
        &self.filters
    }

    /// Magnitude STFT, mel projection, then `ln(x + log_floor)`.
    pub fn mel_spectrogram(&self, segment: &[f32]) -> MelSegment {
        let p = &self.params;
        let n_frames = p.frame_count(segment.len());
        let n_bins = p.n_fft / 2 + 1;
        let mut data = vec![0.0f32; p.n_mels * n_frames];
        let mut buf = vec![Complex::new(0.0, 0.0); p.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut mag = vec![0.0f64; n_bins];
        for t in 0..n_frames {
            let frame = &segment[t * p.hop..t * p.hop + p.n_fft];
            for ((b, &x), &w) in buf.iter_mut().zip(frame).zip(&self.window) {
                *b = Complex::new(x as f64 * w, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (m, b) in mag.iter_mut().zip(&buf) {
                *m = b.norm();
            }
            for (m, f) in self.filters.iter().enumerate() {
                let e: f64 = f
                    .weights
                    .iter()
                    .zip(&mag[f.start..])
                    .map(|(w, v)| w * v)
                    .sum();
                data[m * n_frames + t] = (e + p.log_floor).ln() as f32;
            }
        }
        MelSegment {
            n_mels: p.n_mels,
            n_frames,
            data,
            stats: None,
        }
    }

    /// Mel spectrogram followed by per-segment standardization.
    pub fn features(&self, segment: &[f32]) -> MelSegment {
        normalize(&self.mel_spectrogram(segment))
    }
}

pub fn mel_spectrogram(segment: &[f32], params: &MelParams) -> Result<MelSegment> {
    Ok(MelExtractor::new(*params)?.mel_spectrogram(segment))
}

/// Subtracts the mean and divides by the standard deviation over all entries.
/// Constant input maps to all zeros.
pub fn normalize(mel: &MelSegment) -> MelSegment {
    let n = mel.data.len().max(1) as f64;
    let mean = mel.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = mel.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let data = if std <= 1e-12 * mean.abs().max(1.0) {
        vec![0.0; mel.data.len()]
    } else {
        mel.data.iter().map(|&v| ((v as f64 - mean) / std) as f32).collect()
    };
    MelSegment {
        data,
        stats: Some((mean, std)),
        ..*mel
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureCacheHeader {
    /// `[segments, n_mels, n_frames]`
    pub shape: [usize; 3],
    pub params: MelParams,
    pub provenance: serde_json::Value,
}

/// Writes equally-shaped segments of one source into a single cache file.
pub fn write_feature_cache(path: &Path, segments: &[MelSegment], params: &MelParams, provenance: serde_json::Value) -> Result<()> {
    let (n_mels, n_frames) = segments
        .first()
        .map(|s| (s.n_mels, s.n_frames))
        .unwrap_or((params.n_mels, 0));
    if segments.iter().any(|s| s.n_mels != n_mels || s.n_frames != n_frames) {
        return Err(Error::shape("cached segments must share one shape"));
    }
    let payload: Vec<f32> = segments.iter().flat_map(|s| s.data.iter().copied()).collect();
    let header = FeatureCacheHeader {
        shape: [segments.len(), n_mels, n_frames],
        params: *params,
        provenance,
    };
    binfmt::write_file(path, binfmt::FEATURE_MAGIC, &header, &payload)
}

pub fn read_feature_cache(path: &Path) -> Result<(FeatureCacheHeader, Vec<MelSegment>)> {
    let (header, payload): (FeatureCacheHeader, Vec<f32>) = binfmt::read_file(path, binfmt::FEATURE_MAGIC)?;
    let [n, m, t] = header.shape;
    if payload.len() != n * m * t {
        return Err(Error::shape(format!("cache {} payload size mismatch", path.display())));
    }
    let segments = payload
        .chunks(m * t.max(1))
        .take(n)
        .map(|c| MelSegment {
            n_mels: m,
            n_frames: t,
            data: c.to_vec(),
            stats: None,
        })
        .collect();
    Ok((header, segments))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(n: usize) -> Vec<f32> {
        let mut x = 12345u32;
        (0..n)
            .map(|_| {
                x ^= x << 13;
                x ^= x >> 17;
                x ^= x << 5;
                (x as f32 / u32::MAX as f32 - 0.5) * 0.2
            })
            .collect()
    }

    #[test]
    fn thirty_seconds_gives_nineteen_windows() {
        let sr = 100;
        let wave = noise(30 * sr as usize);
        let w = segment_waveform(&wave, sr, &SegmentParams::default()).unwrap();
        assert_eq!(w.len(), 19);
        for (k, s) in w.iter().enumerate() {
            assert!((s.start_s(sr) - 1.5 * k as f64).abs() < 1e-12);
        }
        assert_eq!(w.last().unwrap().start_s(sr), 27.0);
    }

    #[test]
    fn long_wave_is_capped_at_forty() {
        let wave = noise(120 * 50);
        assert_eq!(segment_waveform(&wave, 50, &SegmentParams::default()).unwrap().len(), 40);
    }

    #[test]
    fn leading_silence_is_skipped() {
        let sr = 100u32;
        let mut wave = noise(20 * sr as usize);
        wave[..300].iter_mut().for_each(|v| *v = 0.0);
        let w = segment_waveform(&wave, sr, &SegmentParams::default()).unwrap();
        // windows starting at 0 and 1.5 s overlap audio; oracle: first window with non-silent RMS
        let first = (0..)
            .map(|k| (k as f64 * 1.5 * sr as f64).round() as usize)
            .find(|&s| audio::rms_dbfs(&wave[s..s + 300]) > -60.0)
            .unwrap();
        assert_eq!(w[0].start_sample, first);
        assert_eq!(first, 150);
    }

    #[test]
    fn short_wave_gives_no_windows() {
        assert!(segment_waveform(&noise(250), 100, &SegmentParams::default()).unwrap().is_empty());
        assert!(segment_waveform(&noise(250), 100, &SegmentParams { overlap: 1.0, ..Default::default() }).is_err());
    }

    #[test]
    fn default_frame_count_for_three_seconds() {
        let p = MelParams::default();
        assert_eq!(p.frame_count(48_000), 184);
        let mel = mel_spectrogram(&noise(48_000), &p).unwrap();
        assert_eq!((mel.n_mels, mel.n_frames), (64, 184));
        let ten = mel_spectrogram(&noise(160_000), &p).unwrap();
        assert_eq!(ten.n_frames, (160_000 - 1024) / 256 + 1);
    }

    #[test]
    fn sine_energy_lands_in_its_band() {
        let p = MelParams::default();
        let ex = MelExtractor::new(p).unwrap();
        for band in [5usize, 20, 40] {
            let f = ex.filters()[band].center_hz;
            // expected band from the filterbank itself: the filter with the largest weight at f's bin
            let k = (f / (p.sample_rate as f64 / p.n_fft as f64)).round() as usize;
            let expected = ex
                .filters()
                .iter()
                .enumerate()
                .map(|(m, fl)| {
                    let w = if k >= fl.start && k < fl.start + fl.weights.len() { fl.weights[k - fl.start] } else { 0.0 };
                    (m, w)
                })
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap()
                .0;
            let wave: Vec<f32> = (0..16_000)
                .map(|i| (std::f64::consts::TAU * f * i as f64 / 16_000.0).sin() as f32 * 0.5)
                .collect();
            let mel = ex.mel_spectrogram(&wave);
            let t = mel.n_frames / 2;
            let arg = (0..mel.n_mels).max_by(|&a, &b| mel.at(a, t).total_cmp(&mel.at(b, t))).unwrap();
            assert_eq!(arg, expected, "band {band}");
        }
    }

    #[test]
    fn silence_gives_log_floor() {
        let p = MelParams::default();
        let mel = mel_spectrogram(&vec![0.0; 4096], &p).unwrap();
        let floor = (p.log_floor).ln() as f32;
        assert!(mel.data.iter().all(|&v| v == floor));
        assert!(normalize(&mel).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fmax_above_nyquist_is_rejected() {
        let p = MelParams { fmax: 9000.0, ..MelParams::default() };
        assert!(matches!(mel_spectrogram(&[0.0; 2048], &p), Err(Error::Parameter(_))));
    }

    #[test]
    fn normalization_moments_and_idempotence() {
        let mel = mel_spectrogram(&noise(8000), &MelParams::default()).unwrap();
        let n = normalize(&mel);
        let len = n.data.len() as f64;
        let mean = n.data.iter().map(|&v| v as f64).sum::<f64>() / len;
        let std = (n.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / len).sqrt();
        assert!(mean.abs() < 1e-6 && (std - 1.0).abs() < 1e-6);
        let nn = normalize(&n);
        for (a, b) in n.data.iter().zip(&nn.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn feature_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = MelParams::default();
        let ex = MelExtractor::new(p).unwrap();
        let segs = vec![ex.features(&noise(4096)), ex.features(&noise(4096)[..].iter().rev().copied().collect::<Vec<_>>())];
        let path = dir.path().join("f.bin");
        write_feature_cache(&path, &segs, &p, serde_json::json!({"source": "mix-1"})).unwrap();
        let (h, back) = read_feature_cache(&path).unwrap();
        assert_eq!(h.shape, [2, 64, segs[0].n_frames]);
        assert_eq!(back[1].data, segs[1].data);
    }
}
