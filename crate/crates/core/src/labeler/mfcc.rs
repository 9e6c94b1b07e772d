//! 39-dimensional MFCC features: 13 cepstra plus first and second
//! differences.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::LabelError;
use crate::compute::Tensor;

pub const MIN_SAMPLE_RATE: u32 = 8000;

#[derive(Clone, Debug, PartialEq)]
pub struct MfccConfig {
    pub sample_rate: u32,
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub mel_filters: usize,
    pub cepstra: usize,
    pub pre_emphasis: f64,
    pub low_hz: f64,
    /// Upper band edge; `None` means Nyquist.
    pub high_hz: Option<f64>,
    pub log_floor: f64,
    /// Half-width of the regression window for differences.
    pub delta_window: usize,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            frame_ms: 25.0,
            hop_ms: 10.0,
            mel_filters: 26,
            cepstra: 13,
            pre_emphasis: 0.97,
            low_hz: 20.0,
            high_hz: None,
            log_floor: 1e-10,
            delta_window: 2,
        }
    }
}

impl MfccConfig {
    pub fn frame_len(&self) -> usize {
        (self.sample_rate as f64 * self.frame_ms / 1000.0).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (self.sample_rate as f64 * self.hop_ms / 1000.0).round() as usize
    }

    pub fn fft_len(&self) -> usize {
        self.frame_len().next_power_of_two()
    }

    pub fn feature_dim(&self) -> usize {
        self.cepstra * 3
    }

    fn high(&self) -> f64 {
        self.high_hz.unwrap_or(self.sample_rate as f64 / 2.0)
    }

    pub fn validate(&self) -> Result<(), LabelError> {
        if self.sample_rate < MIN_SAMPLE_RATE || self.high() > self.sample_rate as f64 / 2.0 || self.low_hz >= self.high() {
            return Err(LabelError::SampleRate(self.sample_rate));
        }
        if self.frame_len() == 0 || self.hop_len() == 0 || self.mel_filters == 0 || self.cepstra == 0 {
            return Err(LabelError::Config("frame, hop, filter and cepstrum counts must be positive".into()));
        }
        if self.cepstra > self.mel_filters {
            return Err(LabelError::Config("more cepstra than mel filters".into()));
        }
        Ok(())
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters over the `fft_len / 2 + 1` power bins, `[filters, bins]`.
pub fn mel_filterbank(cfg: &MfccConfig) -> Vec<Vec<f64>> {
    let n_fft = cfg.fft_len();
    let bins = n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(cfg.low_hz), hz_to_mel(cfg.high()));
    let points: Vec<f64> = (0..cfg.mel_filters + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.mel_filters + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / n_fft as f64;
    (0..cfg.mel_filters)
        .map(|m| {
            let (left, center, right) = (points[m], points[m + 1], points[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= left || f >= right {
                        0.0
                    } else if f <= center {
                        (f - left) / (center - left)
                    } else {
                        (right - f) / (right - center)
                    }
                })
                .collect()
        })
        .collect()
}

/// Center frequency of every mel filter in Hz.
pub fn filter_centers(cfg: &MfccConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.low_hz), hz_to_mel(cfg.high()));
    (1..=cfg.mel_filters)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.mel_filters + 1) as f64))
        .collect()
}

pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Pre-emphasized, windowed analysis frames, zero-padded to the FFT length.
pub fn analysis_frames(samples: &[f64], cfg: &MfccConfig) -> Result<Vec<Vec<f64>>, LabelError> {
    cfg.validate()?;
    let (len, hop) = (cfg.frame_len(), cfg.hop_len());
    if samples.len() < len {
        return Err(LabelError::TooShort {
            samples: samples.len(),
            frame: len,
        });
    }
    let emphasized: Vec<f64> = samples
        .iter()
        .enumerate()
        .map(|(i, &x)| if i == 0 { x } else { x - cfg.pre_emphasis * samples[i - 1] })
        .collect();
    let window = hamming(len);
    let count = 1 + (samples.len() - len) / hop;
    Ok((0..count)
        .map(|f| {
            let mut frame = vec![0.0; cfg.fft_len()];
            for (i, w) in window.iter().enumerate() {
                frame[i] = emphasized[f * hop + i] * w;
            }
            frame
        })
        .collect())
}

fn power_spectrum(fft: &Arc<dyn Fft<f64>>, frame: &[f64]) -> Vec<f64> {
    let n = frame.len();
    let mut buf: Vec<Complex<f64>> = frame.iter().map(|&x| Complex::new(x, 0.0)).collect();
    fft.process(&mut buf);
    buf[..n / 2 + 1].iter().map(|c| c.norm_sqr() / n as f64).collect()
}

/// Mel filterbank energies per frame, `[T, filters]`, before the log.
pub fn mel_energies(samples: &[f64], cfg: &MfccConfig) -> Result<Vec<Vec<f64>>, LabelError> {
    let frames = analysis_frames(samples, cfg)?;
    let fft = FftPlanner::new().plan_fft_forward(cfg.fft_len());
    let bank = mel_filterbank(cfg);
    Ok(frames
        .iter()
        .map(|frame| {
            let power = power_spectrum(&fft, frame);
            bank.iter()
                .map(|filter| filter.iter().zip(&power).map(|(w, p)| w * p).sum())
                .collect()
        })
        .collect())
}

/// Orthonormal DCT-II, first `k` coefficients.
pub fn dct2(x: &[f64], k: usize) -> Vec<f64> {
    let n = x.len() as f64;
    (0..k)
        .map(|q| {
            let scale = if q == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            scale
                * x.iter()
                    .enumerate()
                    .map(|(i, v)| v * (std::f64::consts::PI * q as f64 * (i as f64 + 0.5) / n).cos())
                    .sum::<f64>()
        })
        .collect()
}

/// Regression differences over `±window` frames, edges repeated.
pub fn deltas(rows: &[Vec<f64>], window: usize) -> Vec<Vec<f64>> {
    let t = rows.len();
    let denom: f64 = 2.0 * (1..=window).map(|n| (n * n) as f64).sum::<f64>();
    (0..t)
        .map(|i| {
            (0..rows[i].len())
                .map(|d| {
                    (1..=window)
                        .map(|n| {
                            let ahead = rows[(i + n).min(t - 1)][d];
                            let behind = rows[i.saturating_sub(n)][d];
                            n as f64 * (ahead - behind)
                        })
                        .sum::<f64>()
                        / denom
                })
                .collect()
        })
        .collect()
}

/// `[T, 3 * cepstra]` features from raw samples.
pub fn compute_mfcc(samples: &[f64], cfg: &MfccConfig) -> Result<Tensor, LabelError> {
    let energies = mel_energies(samples, cfg)?;
    let ceps: Vec<Vec<f64>> = energies
        .iter()
        .map(|e| {
            let logs: Vec<f64> = e.iter().map(|v| v.max(cfg.log_floor).ln()).collect();
            dct2(&logs, cfg.cepstra)
        })
        .collect();
    let d1 = deltas(&ceps, cfg.delta_window);
    let d2 = deltas(&d1, cfg.delta_window);
    let rows: Vec<Vec<f64>> = ceps
        .iter()
        .zip(&d1)
        .zip(&d2)
        .map(|((c, a), b)| c.iter().chain(a).chain(b).copied().collect())
        .collect();
    Ok(Tensor::from_rows(&rows).expect("uniform widths"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(hz: f64, seconds: f64, rate: u32) -> Vec<f64> {
        let n = (seconds * rate as f64) as usize;
        (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * hz * i as f64 / rate as f64).sin())
            .collect()
    }

    #[test]
    fn silence_gives_constant_frames() {
        let cfg = MfccConfig::default();
        let feats = compute_mfcc(&vec![0.0; 4000], &cfg).unwrap();
        assert_eq!(feats.cols(), 39);
        assert_eq!(feats.rows(), 1 + (4000 - 400) / 160);
        for t in 1..feats.rows() {
            assert_eq!(feats.row(t), feats.row(0));
        }
        assert!(feats.row(0)[13..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn rejects_short_input_and_low_rate() {
        let cfg = MfccConfig::default();
        assert!(matches!(compute_mfcc(&[0.0; 399], &cfg), Err(LabelError::TooShort { .. })));
        assert!(compute_mfcc(&[0.0; 400], &cfg).is_ok());
        let low = MfccConfig {
            sample_rate: 4000,
            ..MfccConfig::default()
        };
        assert!(matches!(compute_mfcc(&[0.0; 4000], &low), Err(LabelError::SampleRate(4000))));
    }

    #[test]
    fn tone_energy_matches_direct_dft_and_peaks_at_nearest_filter() {
        let cfg = MfccConfig::default();
        let centers = filter_centers(&cfg);
        for hz in [440.0, 1500.0, 3200.0] {
            let samples = tone(hz, 0.05, cfg.sample_rate);
            let energies = mel_energies(&samples, &cfg).unwrap();
            // naive DFT of the first analysis frame
            let frame = &analysis_frames(&samples, &cfg).unwrap()[0];
            let n = frame.len();
            let power: Vec<f64> = (0..=n / 2)
                .map(|k| {
                    let (mut re, mut im) = (0.0, 0.0);
                    for (i, x) in frame.iter().enumerate() {
                        let a = -2.0 * std::f64::consts::PI * (k * i) as f64 / n as f64;
                        re += x * a.cos();
                        im += x * a.sin();
                    }
                    (re * re + im * im) / n as f64
                })
                .collect();
            let bank = mel_filterbank(&cfg);
            for (m, filter) in bank.iter().enumerate() {
                let direct: f64 = filter.iter().zip(&power).map(|(w, p)| w * p).sum();
                assert!((direct - energies[0][m]).abs() <= 1e-9 * direct.max(1.0));
            }
            let peak = (0..bank.len())
                .max_by(|&a, &b| energies[0][a].total_cmp(&energies[0][b]))
                .unwrap();
            let nearest = (0..centers.len())
                .min_by(|&a, &b| (hz_to_mel(centers[a]) - hz_to_mel(hz)).abs().total_cmp(&(hz_to_mel(centers[b]) - hz_to_mel(hz)).abs()))
                .unwrap();
            assert!(peak.abs_diff(nearest) <= 1, "{hz} Hz: peak {peak}, nearest {nearest}");
        }
    }

    #[test]
    fn dct_matches_definition_and_is_orthonormal() {
        let x = [1.0, -2.0, 0.5, 3.0];
        let c = dct2(&x, 4);
        let energy: f64 = x.iter().map(|v| v * v).sum();
        assert!((c.iter().map(|v| v * v).sum::<f64>() - energy).abs() < 1e-12);
        assert!((c[0] - x.iter().sum::<f64>() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn deltas_of_linear_ramp() {
        let rows: Vec<Vec<f64>> = (0..10).map(|t| vec![2.0 * t as f64]).collect();
        let d = deltas(&rows, 2);
        for row in &d[2..8] {
            assert!((row[0] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn features_are_bit_stable() {
        let cfg = MfccConfig::default();
        let s = tone(700.0, 0.1, cfg.sample_rate);
        assert_eq!(compute_mfcc(&s, &cfg).unwrap(), compute_mfcc(&s, &cfg).unwrap());
    }
}
