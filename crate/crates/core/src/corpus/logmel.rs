//! Log Mel-filterbank energies.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::FeatureSequence;

/// Floor applied before the logarithm so silence maps to a finite value.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct LogMelConfig {
    pub sample_rate: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub num_mels: usize,
    pub low_hz: f64,
    /// Defaults to Nyquist when `None`.
    pub high_hz: Option<f64>,
}

impl Default for LogMelConfig {
    fn default() -> Self {
        LogMelConfig {
            sample_rate: 16_000,
            window_ms: 25.0,
            hop_ms: 10.0,
            num_mels: 80,
            low_hz: 0.0,
            high_hz: None,
        }
    }
}

impl LogMelConfig {
    pub fn window_samples(&self) -> usize {
        (self.sample_rate as f64 * self.window_ms / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.sample_rate as f64 * self.hop_ms / 1000.0).round() as usize
    }

    pub fn fft_size(&self) -> usize {
        self.window_samples().next_power_of_two()
    }

    /// `floor((len - window) / hop) + 1`, or 0 when shorter than one window.
    pub fn frame_count(&self, num_samples: usize) -> usize {
        let w = self.window_samples();
        if num_samples < w {
            0
        } else {
            (num_samples - w) / self.hop_samples() + 1
        }
    }

    fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::validation("sample_rate", "must be positive"));
        }
        if self.window_samples() == 0 {
            return Err(Error::validation("window_ms", "window has no samples"));
        }
        if self.hop_samples() == 0 {
            return Err(Error::validation("hop_ms", "hop has no samples"));
        }
        if self.num_mels == 0 {
            return Err(Error::validation("num_mels", "must be at least 1"));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        let high = self.high_hz.unwrap_or(nyquist);
        if !(self.low_hz >= 0.0 && high > self.low_hz && high <= nyquist) {
            return Err(Error::validation("high_hz", "band edges must satisfy 0 <= low < high <= nyquist"));
        }
        Ok(())
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-style filters, `num_mels x (fft_size / 2 + 1)`.
pub fn mel_filterbank(cfg: &LogMelConfig) -> Tensor {
    let n_fft = cfg.fft_size();
    let bins = n_fft / 2 + 1;
    let sr = cfg.sample_rate as f64;
    let high = cfg.high_hz.unwrap_or(sr / 2.0);
    let (lo, hi) = (hz_to_mel(cfg.low_hz), hz_to_mel(high));
    let edges: Vec<f64> = (0..cfg.num_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.num_mels + 1) as f64))
        .collect();
    let mut fb = Tensor::zeros(cfg.num_mels, bins);
    for m in 0..cfg.num_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let freq = k as f64 * sr / n_fft as f64;
            let w = if freq > left && freq <= center {
                (freq - left) / (center - left)
            } else if freq > center && freq < right {
                (right - freq) / (right - center)
            } else {
                0.0
            };
            fb.set(m, k, w);
        }
    }
    fb
}

pub fn extract_logmel(waveform: &[f32], cfg: &LogMelConfig) -> Result<FeatureSequence> {
    cfg.validate()?;
    if waveform.is_empty() {
        return Err(Error::validation("waveform", "no samples"));
    }
    let frames = cfg.frame_count(waveform.len());
    if frames == 0 {
        return Err(Error::validation(
            "waveform",
            format!(
                "{} samples is shorter than one {}-sample window",
                waveform.len(),
                cfg.window_samples()
            ),
        ));
    }
    let win = cfg.window_samples();
    let hop = cfg.hop_samples();
    let n_fft = cfg.fft_size();
    let bins = n_fft / 2 + 1;
    let hann: Vec<f64> = (0..win)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / win as f64).cos())
        .collect();
    let fb = mel_filterbank(cfg);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0; bins];
    let mut out = Tensor::zeros(frames, cfg.num_mels);
    for t in 0..frames {
        let start = t * hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < win {
                Complex::new(waveform[start + i] as f64 * hann[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        let row = out.row_mut(t);
        for (m, slot) in row.iter_mut().enumerate() {
            let e: f64 = fb.row(m).iter().zip(&power).map(|(w, p)| w * p).sum();
            *slot = e.max(LOG_FLOOR).ln();
        }
    }
    Ok(FeatureSequence {
        frames: out,
        frame_shift_ms: cfg.hop_ms,
        frame_length_ms: cfg.window_ms,
    })
}
