//! Waveform to log-mel spectrogram, aligned four rows per video frame.

use std::path::Path;
use std::sync::Arc;

use loconet_tensor::Tensor;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const VIDEO_FPS: u32 = 25;
/// Mel rows per video frame.
pub const ROWS_PER_FRAME: usize = 4;
pub const LOG_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Data("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite sample at index {i}")));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|v| v * v).sum::<f64>() / self.samples.len() as f64).sqrt()
    }

    /// Writes 16-bit PCM mono. Samples are clipped to [-1, 1].
    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).map_err(|e| Error::format(path, e))?;
        for &s in &self.samples {
            let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            w.write_sample(q).map_err(|e| Error::format(path, e))?;
        }
        w.finalize().map_err(|e| Error::format(path, e))
    }

    pub fn read_wav(path: &Path) -> Result<Self> {
        let mut r = hound::WavReader::open(path).map_err(|e| Error::format(path, e))?;
        let spec = r.spec();
        if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
            return Err(Error::format(path, "expected 16-bit PCM mono"));
        }
        let samples = r
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32767.0))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(path, e))?;
        Waveform::new(samples, spec.sample_rate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MelConfig {
    pub win_len: usize,
    pub hop_len: usize,
    pub fft_size: usize,
    pub mel_bins: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig { win_len: 400, hop_len: 160, fft_size: 512, mel_bins: 40, f_min: 0.0, f_max: 8000.0 }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Reflects an out-of-range index back into `[0, n)` without repeating the
/// edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Short-time Fourier magnitudes `[frames, fft_size/2 + 1]`. Frames are
/// centred on multiples of the hop over a reflect-padded signal, giving
/// `ceil(len / hop)` frames.
pub fn stft_magnitude(w: &Waveform, win_len: usize, hop_len: usize, fft_size: usize) -> Result<Tensor> {
    if w.is_empty() {
        return Err(Error::Data("empty waveform".into()));
    }
    if hop_len == 0 || win_len == 0 || win_len > fft_size {
        return Err(Error::Config(format!(
            "need 0 < win_len <= fft_size and hop > 0 (win {win_len}, hop {hop_len}, fft {fft_size})"
        )));
    }
    let n = w.len();
    let frames = n.div_ceil(hop_len);
    let bins = fft_size / 2 + 1;
    let window: Vec<f64> = (0..win_len)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win_len as f64).cos())
        .collect();
    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(fft_size);
    let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
    let mut out = Vec::with_capacity(frames * bins);
    let half = (win_len / 2) as isize;
    let s = w.samples();
    for f in 0..frames {
        let start = (f * hop_len) as isize - half;
        for (i, c) in buf.iter_mut().enumerate() {
            *c = if i < win_len { Complex::new(s[reflect(start + i as isize, n)] * window[i], 0.0) } else { Complex::new(0.0, 0.0) };
        }
        fft.process(&mut buf);
        out.extend(buf[..bins].iter().map(|c| c.norm()));
    }
    Ok(Tensor::new(vec![frames, bins], out)?)
}

/// Triangular HTK-mel filterbank `[mel_bins, fft_size/2 + 1]` with unit peaks.
pub fn mel_filterbank(cfg: &MelConfig, sample_rate: u32) -> Result<Tensor> {
    let nyquist = sample_rate as f64 / 2.0;
    if cfg.f_max > nyquist {
        return Err(Error::Config(format!("f_max {} Hz exceeds Nyquist {nyquist} Hz", cfg.f_max)));
    }
    if cfg.f_min < 0.0 || cfg.f_min >= cfg.f_max || cfg.mel_bins == 0 {
        return Err(Error::Config(format!("invalid mel range {}..{} with {} bins", cfg.f_min, cfg.f_max, cfg.mel_bins)));
    }
    let bins = cfg.fft_size / 2 + 1;
    let (m_lo, m_hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    let edges: Vec<f64> = (0..cfg.mel_bins + 2)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (cfg.mel_bins + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / cfg.fft_size as f64;
    let mut data = vec![0.0; cfg.mel_bins * bins];
    for m in 0..cfg.mel_bins {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for b in 0..bins {
            let f = b as f64 * bin_hz;
            let v = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            data[m * bins + b] = v;
        }
        if data[m * bins..(m + 1) * bins].iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!("mel filter {m} covers no FFT bin; use fewer mel bins or a larger FFT")));
        }
    }
    Ok(Tensor::new(vec![cfg.mel_bins, bins], data)?)
}

/// Centre frequency of every mel filter.
pub fn mel_centers(cfg: &MelConfig) -> Vec<f64> {
    let (m_lo, m_hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    (1..=cfg.mel_bins).map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (cfg.mel_bins + 1) as f64)).collect()
}

/// `ln(max(filterbank · |X|², floor))` per frame: `[frames, mel_bins]`.
pub fn mel_project(mag: &Tensor, filterbank: &Tensor) -> Result<Tensor> {
    let (frames, bins) = (mag.shape()[0], mag.shape()[1]);
    let (m, fb_bins) = (filterbank.shape()[0], filterbank.shape()[1]);
    if bins != fb_bins {
        return Err(Error::Shape(format!("magnitudes have {bins} bins, filterbank expects {fb_bins}")));
    }
    let fb = filterbank.data();
    let mut out = Vec::with_capacity(frames * m);
    for row in mag.data().chunks(bins) {
        for f in 0..m {
            let e: f64 = fb[f * bins..(f + 1) * bins].iter().zip(row).map(|(w, x)| w * x * x).sum();
            out.push(e.max(LOG_FLOOR).ln());
        }
    }
    Ok(Tensor::new(vec![frames, m], out)?)
}

/// Exactly `4T` rows: excess rows are dropped, a deficit of at most two rows is
/// filled by repeating the last row.
pub fn align_to_video(mel: &Tensor, t: usize) -> Result<Tensor> {
    let (rows, m) = (mel.shape()[0], mel.shape()[1]);
    let want = ROWS_PER_FRAME * t;
    if rows + 2 < want || rows == 0 {
        return Err(Error::Alignment(format!(
            "{rows} mel rows cannot cover {t} video frames ({want} rows); check hop length and frame rate"
        )));
    }
    let mut data = mel.data()[..rows.min(want) * m].to_vec();
    while data.len() < want * m {
        let last = data[data.len() - m..].to_vec();
        data.extend_from_slice(&last);
    }
    Ok(Tensor::new(vec![want, m], data)?)
}

/// Precomputed frontend for one configuration.
#[derive(Debug, Clone)]
pub struct MelFrontend {
    pub config: MelConfig,
    filterbank: Tensor,
}

impl MelFrontend {
    pub fn new(config: MelConfig) -> Result<Self> {
        Ok(MelFrontend { filterbank: mel_filterbank(&config, SAMPLE_RATE)?, config })
    }

    /// Log-mel spectrogram `[4T, M]` for a waveform spanning `t` video frames.
    pub fn spectrogram(&self, w: &Waveform, t: usize) -> Result<Tensor> {
        if w.sample_rate() != SAMPLE_RATE {
            return Err(Error::Data(format!("expected {SAMPLE_RATE} Hz audio, got {} Hz", w.sample_rate())));
        }
        let mag = stft_magnitude(w, self.config.win_len, self.config.hop_len, self.config.fft_size)?;
        let mel = mel_project(&mag, &self.filterbank)?;
        align_to_video(&mel, t)
    }
}
