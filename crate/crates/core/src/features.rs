//! Log-Mel filterbank features, per-utterance CMVN and SpecAugment.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
pub const NUM_MEL_BINS: usize = 80;
pub const FRAME_LENGTH: usize = 400; // 25 ms
pub const FRAME_SHIFT: usize = 160; // 10 ms
pub const FFT_SIZE: usize = 512;
pub const PREEMPHASIS: f64 = 0.97;
pub const LOG_FLOOR: f64 = 1e-10;
pub const CMVN_VAR_FLOOR: f64 = 1e-8;

const FBNK_MAGIC: &[u8; 4] = b"FBNK";

/// Mono PCM audio. Samples keep the 16-bit integer scale.
#[derive(Clone, Debug)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Input("sample rate must be positive".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    /// Reads a 16-bit mono RIFF/WAV file.
    pub fn read_wav(path: &Path) -> Result<Self> {
        let reader = hound::WavReader::open(path)
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(Error::Input(format!(
                "{}: {} channels, only mono is supported",
                path.display(),
                spec.channels
            )));
        }
        if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
            return Err(Error::Input(format!(
                "{}: expected 16-bit integer PCM",
                path.display()
            )));
        }
        let samples = reader
            .into_samples::<i16>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        Self::new(samples, spec.sample_rate)
    }

    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec)
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        for &s in &self.samples {
            let v = s.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
            w.write_sample(v)
                .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        }
        w.finalize()
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))
    }
}

/// `T × 80` log-Mel features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    frames: Tensor,
}

impl FeatureMatrix {
    pub fn new(frames: Tensor) -> Result<Self> {
        let (t, d) = frames.dims2()?;
        if t == 0 || d != NUM_MEL_BINS {
            return Err(Error::Input(format!(
                "feature matrix must be T x {NUM_MEL_BINS} with T >= 1, got {t} x {d}"
            )));
        }
        if !frames.is_finite() {
            return Err(Error::Input("feature matrix contains non-finite values".into()));
        }
        Ok(Self { frames })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.frames
    }

    pub fn into_tensor(self) -> Tensor {
        self.frames
    }

    /// Reads the flat `FBNK` format: magic, `u32` T, `u32` D, then `T·D`
    /// little-endian `f32` values in row-major order.
    pub fn read_fbnk(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::decode_fbnk(&bytes).map_err(|e| match e {
            Error::Input(msg) => Error::Input(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn decode_fbnk(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != FBNK_MAGIC {
            return Err(Error::Input("missing FBNK header".into()));
        }
        let t = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() != t * d * 4 {
            return Err(Error::Input(format!(
                "FBNK body has {} bytes, header declares {t} x {d}",
                body.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Self::new(Tensor::new(vec![t, d], data)?)
    }

    pub fn encode_fbnk(&self) -> Vec<u8> {
        let (t, d) = (self.frames.rows(), self.frames.cols());
        let mut out = Vec::with_capacity(12 + t * d * 4);
        out.extend_from_slice(FBNK_MAGIC);
        out.extend_from_slice(&(t as u32).to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        for &v in self.frames.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn write_fbnk(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        w.write_all(&self.encode_fbnk())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}

/// Frames produced for `num_samples` samples.
pub fn num_frames(num_samples: usize) -> usize {
    if num_samples < FRAME_LENGTH {
        0
    } else {
        1 + (num_samples - FRAME_LENGTH) / FRAME_SHIFT
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

/// `80 × (FFT_SIZE/2 + 1)` triangular filters, equally spaced on the mel
/// scale between 0 Hz and Nyquist.
fn mel_filters() -> Vec<Vec<f64>> {
    let bins = FFT_SIZE / 2 + 1;
    let nyquist = SAMPLE_RATE as f64 / 2.0;
    let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(nyquist));
    let step = (hi - lo) / (NUM_MEL_BINS + 1) as f64;
    (0..NUM_MEL_BINS)
        .map(|m| {
            let left = lo + step * m as f64;
            let center = left + step;
            let right = center + step;
            (0..bins)
                .map(|k| {
                    let mel = hz_to_mel(k as f64 * SAMPLE_RATE as f64 / FFT_SIZE as f64);
                    if mel > left && mel < right {
                        if mel <= center {
                            (mel - left) / (center - left)
                        } else {
                            (right - mel) / (right - center)
                        }
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// 80-bin log-Mel filterbank with 25 ms windows every 10 ms.
pub fn compute_fbank(w: &Waveform) -> Result<FeatureMatrix> {
    if w.sample_rate != SAMPLE_RATE {
        return Err(Error::SampleRate(w.sample_rate));
    }
    let t = num_frames(w.samples.len());
    if t == 0 {
        return Err(Error::Input(format!(
            "audio has {} samples, need at least {FRAME_LENGTH}",
            w.samples.len()
        )));
    }
    let window: Vec<f64> = (0..FRAME_LENGTH)
        .map(|n| {
            0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / (FRAME_LENGTH - 1) as f64).cos()
        })
        .collect();
    let filters = mel_filters();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(FFT_SIZE);
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
    let mut frame = vec![0.0; FRAME_LENGTH];
    let mut power = vec![0.0; FFT_SIZE / 2 + 1];
    let mut out = Vec::with_capacity(t * NUM_MEL_BINS);
    for f in 0..t {
        let start = f * FRAME_SHIFT;
        frame.copy_from_slice(&w.samples[start..start + FRAME_LENGTH]);
        for i in (1..FRAME_LENGTH).rev() {
            frame[i] -= PREEMPHASIS * frame[i - 1];
        }
        frame[0] -= PREEMPHASIS * frame[0];
        for (i, c) in buf.iter_mut().enumerate() {
            let v = if i < FRAME_LENGTH { frame[i] * window[i] } else { 0.0 };
            *c = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for filt in &filters {
            let e: f64 = filt.iter().zip(&power).map(|(a, b)| a * b).sum();
            out.push(e.max(LOG_FLOOR).ln());
        }
    }
    FeatureMatrix::new(Tensor::new(vec![t, NUM_MEL_BINS], out)?)
}

/// Per-utterance mean and variance normalization of every bin.
pub fn apply_cmvn(f: &FeatureMatrix) -> FeatureMatrix {
    let x = f.as_tensor();
    let (t, d) = (x.rows(), x.cols());
    let means = x.col_means().expect("matrix");
    let mut vars = vec![0.0; d];
    for i in 0..t {
        for (j, v) in x.row(i).iter().enumerate() {
            vars[j] += (v - means[j]).powi(2);
        }
    }
    let inv: Vec<f64> = vars
        .iter()
        .map(|v| 1.0 / (v / t as f64).max(CMVN_VAR_FLOOR).sqrt())
        .collect();
    let mut out = x.clone();
    for i in 0..t {
        for (j, v) in out.row_mut(i).iter_mut().enumerate() {
            *v = (*v - means[j]) * inv[j];
        }
    }
    FeatureMatrix { frames: out }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpecAugmentConfig {
    pub num_freq_masks: usize,
    pub max_freq_bins: usize,
    pub num_time_masks: usize,
    pub max_time_frames: usize,
    pub seed: u64,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        Self {
            num_freq_masks: 2,
            max_freq_bins: 10,
            num_time_masks: 2,
            max_time_frames: 50,
            seed: 0,
        }
    }
}

/// Half-open rectangle of masked cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mask {
    pub axis: MaskAxis,
    pub start: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskAxis {
    Time,
    Frequency,
}

impl Mask {
    pub fn covers(&self, frame: usize, bin: usize) -> bool {
        let i = match self.axis {
            MaskAxis::Time => frame,
            MaskAxis::Frequency => bin,
        };
        i >= self.start && i < self.start + self.width
    }
}

pub fn spec_augment(f: &FeatureMatrix, cfg: &SpecAugmentConfig) -> FeatureMatrix {
    spec_augment_with_masks(f, cfg).0
}

/// Frequency masks first, then time masks. Widths are uniform in
/// `[0, max]` (clamped to the extent) and masked cells take the utterance mean.
pub fn spec_augment_with_masks(
    f: &FeatureMatrix,
    cfg: &SpecAugmentConfig,
) -> (FeatureMatrix, Vec<Mask>) {
    let x = f.as_tensor();
    let (t, d) = (x.rows(), x.cols());
    let fill = x.sum() / x.numel() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut masks = Vec::new();
    let mut draw = |axis, count: usize, max: usize, extent: usize, rng: &mut ChaCha8Rng| {
        for _ in 0..count {
            let width = rng.gen_range(0..=max.min(extent));
            let start = rng.gen_range(0..=extent - width);
            masks.push(Mask { axis, start, width });
        }
    };
    draw(MaskAxis::Frequency, cfg.num_freq_masks, cfg.max_freq_bins, d, &mut rng);
    draw(MaskAxis::Time, cfg.num_time_masks, cfg.max_time_frames, t, &mut rng);

    let mut out = x.clone();
    for m in &masks {
        for i in 0..t {
            let row = out.row_mut(i);
            for (j, v) in row.iter_mut().enumerate() {
                if m.covers(i, j) {
                    *v = fill;
                }
            }
        }
    }
    (FeatureMatrix { frames: out }, masks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn tone(len: usize) -> Waveform {
        let s = (0..len)
            .map(|i| (1000.0 * (i as f64 * 0.05).sin()).round())
            .collect();
        Waveform::new(s, SAMPLE_RATE).unwrap()
    }

    fn random_features(t: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = (0..t * NUM_MEL_BINS).map(|_| rng.gen_range(-3.0..5.0)).collect();
        FeatureMatrix::new(Tensor::new(vec![t, NUM_MEL_BINS], d).unwrap()).unwrap()
    }

    #[test]
    fn one_second_gives_98_frames() {
        let f = compute_fbank(&tone(16_000)).unwrap();
        assert_eq!(f.as_tensor().shape(), &[98, 80]);
    }

    #[test]
    fn single_window_boundary() {
        assert_eq!(compute_fbank(&tone(400)).unwrap().num_frames(), 1);
        assert!(matches!(compute_fbank(&tone(399)), Err(Error::Input(_))));
    }

    #[test]
    fn silence_hits_log_floor() {
        let w = Waveform::new(vec![0.0; 2000], SAMPLE_RATE).unwrap();
        let f = compute_fbank(&w).unwrap();
        let floor = LOG_FLOOR.ln();
        assert!(f.as_tensor().data().iter().all(|&v| v == floor));
    }

    #[test]
    fn rejects_other_rates() {
        let w = Waveform::new(vec![0.0; 2000], 8000).unwrap();
        assert!(matches!(compute_fbank(&w), Err(Error::SampleRate(8000))));
    }

    #[test]
    fn filters_cover_spectrum() {
        let filters = mel_filters();
        assert_eq!(filters.len(), 80);
        assert!(filters.iter().all(|f| f.iter().any(|&w| w > 0.0)));
    }

    #[test]
    fn silence_prefix_shifts_frames() {
        let base = tone(4000);
        let k = 3;
        let mut shifted = vec![0.0; FRAME_SHIFT * k];
        shifted.extend_from_slice(&base.samples);
        let a = compute_fbank(&base).unwrap();
        let b = compute_fbank(&Waveform::new(shifted, SAMPLE_RATE).unwrap()).unwrap();
        assert_eq!(b.num_frames(), a.num_frames() + k);
        for i in 0..a.num_frames() {
            assert_eq!(a.as_tensor().row(i), b.as_tensor().row(i + k));
        }
    }

    #[test]
    fn cmvn_zero_mean_unit_variance_and_idempotent() {
        let f = random_features(37, 1);
        let n = apply_cmvn(&f);
        for m in n.as_tensor().col_means().unwrap() {
            assert!(m.abs() <= 1e-9);
        }
        let twice = apply_cmvn(&n);
        assert!(twice.as_tensor().max_abs_diff(n.as_tensor()) <= 1e-9);

        let c = FeatureMatrix::new(Tensor::full(&[5, 80], 2.5)).unwrap();
        assert!(apply_cmvn(&c).as_tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spec_augment_identity_with_zero_widths() {
        let f = random_features(60, 2);
        let cfg = SpecAugmentConfig {
            max_freq_bins: 0,
            max_time_frames: 0,
            ..Default::default()
        };
        assert_eq!(spec_augment(&f, &cfg), f);
    }

    #[test]
    fn spec_augment_deterministic_and_bounded() {
        let f = random_features(120, 3);
        let cfg = SpecAugmentConfig {
            seed: 99,
            ..Default::default()
        };
        let (a, masks) = spec_augment_with_masks(&f, &cfg);
        let b = spec_augment(&f, &cfg);
        assert_eq!(a.as_tensor().data(), b.as_tensor().data());
        let masked_frames: usize = masks
            .iter()
            .filter(|m| m.axis == MaskAxis::Time)
            .map(|m| m.width)
            .sum();
        assert!(masked_frames <= cfg.num_time_masks * cfg.max_time_frames);
    }

    #[test]
    fn fbnk_round_trip() {
        let f = random_features(9, 4);
        let back = FeatureMatrix::decode_fbnk(&f.encode_fbnk()).unwrap();
        assert!(back.as_tensor().max_abs_diff(f.as_tensor()) < 1e-6);
        let mut bad = f.encode_fbnk();
        bad.truncate(bad.len() - 4);
        assert!(FeatureMatrix::decode_fbnk(&bad).is_err());
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = tone(1234);
        w.write_wav(&path).unwrap();
        let r = Waveform::read_wav(&path).unwrap();
        assert_eq!(r.samples, w.samples);
        assert_eq!(r.sample_rate, SAMPLE_RATE);
    }

    proptest! {
        #[test]
        fn frame_count_formula(len in 400usize..6000) {
            let w = Waveform::new(vec![1.0; len], SAMPLE_RATE).unwrap();
            let f = compute_fbank(&w).unwrap();
            prop_assert_eq!(f.num_frames(), 1 + (len - 400) / 160);
        }

        #[test]
        fn unmasked_cells_untouched(seed in any::<u64>(), t in 1usize..80) {
            let f = random_features(t, seed ^ 0x55);
            let cfg = SpecAugmentConfig { seed, ..Default::default() };
            let (out, masks) = spec_augment_with_masks(&f, &cfg);
            for i in 0..t {
                for j in 0..NUM_MEL_BINS {
                    if !masks.iter().any(|m| m.covers(i, j)) {
                        prop_assert_eq!(out.as_tensor().at(i, j), f.as_tensor().at(i, j));
                    }
                }
            }
        }
    }
}
