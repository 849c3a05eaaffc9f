//! STFT framing and the log-mel spectrogram used as the audio modality.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::synth::{RenderConfig, Waveform};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpecConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub n_frames: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_scale: f64,
}

impl Default for SpecConfig {
    fn default() -> Self {
        Self {
            n_fft: 1024,
            hop: 256,
            n_frames: 64,
            n_mels: 64,
            f_min: 40.0,
            f_max: 8000.0,
            log_scale: 1000.0,
        }
    }
}

impl SpecConfig {
    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }
}

/// `n_mels x n_frames` log-mel magnitudes, mel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub n_mels: usize,
    pub n_frames: usize,
    pub data: Vec<f64>,
}

impl Spectrogram {
    pub fn get(&self, mel: usize, frame: usize) -> f64 {
        self.data[mel * self.n_frames + frame]
    }

    pub fn column(&self, frame: usize) -> Vec<f64> {
        (0..self.n_mels).map(|m| self.get(m, frame)).collect()
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Frame analysis shared by the mel spectrogram and the timbre descriptors.
pub struct Analyzer {
    cfg: SpecConfig,
    sample_rate: f64,
    window: Vec<f64>,
    window_sum: f64,
    fft: Arc<dyn Fft<f64>>,
    filters: Vec<Vec<(usize, f64)>>,
}

impl Analyzer {
    pub fn new(cfg: SpecConfig, sample_rate: f64) -> Self {
        let window = hann(cfg.n_fft);
        let window_sum = window.iter().sum();
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        let filters = mel_filterbank(&cfg, sample_rate);
        Self {
            cfg,
            sample_rate,
            window,
            window_sum,
            fft,
            filters,
        }
    }

    pub fn config(&self) -> &SpecConfig {
        &self.cfg
    }

    pub fn bin_frequency(&self, k: usize) -> f64 {
        k as f64 * self.sample_rate / self.cfg.n_fft as f64
    }

    /// Signal reflect-padded by half a window at both ends.
    pub fn padded(&self, samples: &[f64]) -> Vec<f64> {
        let pad = self.cfg.n_fft / 2;
        let n = samples.len();
        let reflect = |i: isize| -> f64 {
            if n == 1 {
                return samples[0];
            }
            let period = 2 * (n as isize - 1);
            let mut j = i.rem_euclid(period);
            if j >= n as isize {
                j = period - j;
            }
            samples[j as usize]
        };
        (0..n + 2 * pad)
            .map(|i| reflect(i as isize - pad as isize))
            .collect()
    }

    /// The time-domain frames (unwindowed) at each hop, truncated to
    /// `n_frames`.
    pub fn frames<'a>(&self, padded: &'a [f64]) -> Vec<&'a [f64]> {
        let available = if padded.len() >= self.cfg.n_fft {
            1 + (padded.len() - self.cfg.n_fft) / self.cfg.hop
        } else {
            0
        };
        (0..available.min(self.cfg.n_frames))
            .map(|f| &padded[f * self.cfg.hop..f * self.cfg.hop + self.cfg.n_fft])
            .collect()
    }

    /// Windowed magnitude spectrum divided by the window sum, so a
    /// full-scale sinusoid peaks near 0.5.
    pub fn magnitude(&self, frame: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = frame
            .iter()
            .zip(&self.window)
            .map(|(x, w)| Complex::new(x * w, 0.0))
            .collect();
        self.fft.process(&mut buf);
        buf[..self.cfg.n_bins()]
            .iter()
            .map(|c| c.norm() / self.window_sum)
            .collect()
    }

    /// Magnitude spectra of every frame.
    pub fn stft(&self, samples: &[f64]) -> Vec<Vec<f64>> {
        let padded = self.padded(samples);
        self.frames(&padded)
            .into_iter()
            .map(|f| self.magnitude(f))
            .collect()
    }

    pub fn mel(&self, waveform: &Waveform) -> Spectrogram {
        let mags = self.stft(&waveform.samples);
        let n_frames = self.cfg.n_frames;
        let mut data = vec![0.0; self.cfg.n_mels * n_frames];
        for (f, mag) in mags.iter().enumerate() {
            for (m, filter) in self.filters.iter().enumerate() {
                let energy: f64 = filter.iter().map(|&(k, w)| w * mag[k]).sum();
                data[m * n_frames + f] = (1.0 + self.cfg.log_scale * energy).ln();
            }
        }
        Spectrogram {
            n_mels: self.cfg.n_mels,
            n_frames,
            data,
        }
    }

    pub fn filters(&self) -> &[Vec<(usize, f64)>] {
        &self.filters
    }
}

/// Centre frequencies (Hz) of the mel filters.
pub fn mel_center_frequencies(cfg: &SpecConfig) -> Vec<f64> {
    mel_edges(cfg)[1..=cfg.n_mels].to_vec()
}

fn mel_edges(cfg: &SpecConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.f_min);
    let hi = hz_to_mel(cfg.f_max);
    (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Triangular filters with unit peak, as sparse `(bin, weight)` lists.
fn mel_filterbank(cfg: &SpecConfig, sample_rate: f64) -> Vec<Vec<(usize, f64)>> {
    let edges = mel_edges(cfg);
    let bin_hz = sample_rate / cfg.n_fft as f64;
    (0..cfg.n_mels)
        .map(|m| {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..cfg.n_bins())
                .filter_map(|k| {
                    let f = k as f64 * bin_hz;
                    let w = if f > l && f <= c {
                        (f - l) / (c - l)
                    } else if f > c && f < r {
                        (r - f) / (r - c)
                    } else {
                        0.0
                    };
                    (w > 0.0).then_some((k, w))
                })
                .collect()
        })
        .collect()
}

pub fn mel_spectrogram(waveform: &Waveform, spec: &SpecConfig, render: &RenderConfig) -> Result<Spectrogram> {
    if waveform.samples.len() != render.num_samples() {
        return Err(Error::Shape(format!(
            "waveform has {} samples, render config implies {}",
            waveform.samples.len(),
            render.num_samples()
        )));
    }
    Ok(Analyzer::new(*spec, render.sample_rate).mel(waveform))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, amp: f64) -> Waveform {
        let cfg = RenderConfig::default();
        Waveform {
            samples: (0..cfg.num_samples())
                .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / cfg.sample_rate).sin())
                .collect(),
            sample_rate: cfg.sample_rate,
        }
    }

    #[test]
    fn default_shape_is_64_by_64() {
        let s = mel_spectrogram(&tone(300.0, 0.5), &SpecConfig::default(), &RenderConfig::default()).unwrap();
        assert_eq!((s.n_mels, s.n_frames, s.data.len()), (64, 64, 4096));
        assert!(s.data.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn silence_maps_to_zero() {
        let s = mel_spectrogram(&tone(440.0, 0.0), &SpecConfig::default(), &RenderConfig::default()).unwrap();
        assert!(s.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn tone_argmax_sits_in_the_nearest_mel_band() {
        let cfg = SpecConfig::default();
        let s = mel_spectrogram(&tone(440.0, 0.8), &cfg, &RenderConfig::default()).unwrap();
        let centers = mel_center_frequencies(&cfg);
        let expected = (0..cfg.n_mels)
            .min_by(|&a, &b| {
                let da = (hz_to_mel(centers[a]) - hz_to_mel(440.0)).abs();
                let db = (hz_to_mel(centers[b]) - hz_to_mel(440.0)).abs();
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        for f in 0..cfg.n_frames {
            let col = s.column(f);
            let arg = (0..col.len()).max_by(|&a, &b| col[a].partial_cmp(&col[b]).unwrap()).unwrap();
            assert_eq!(arg, expected, "frame {f}");
        }
    }

    #[test]
    fn doubling_amplitude_never_decreases_entries() {
        let mut w = tone(523.0, 0.3);
        for (i, s) in w.samples.iter_mut().enumerate() {
            *s += 0.1 * ((i * 7919 % 1000) as f64 / 1000.0 - 0.5);
        }
        let double = Waveform {
            samples: w.samples.iter().map(|x| 2.0 * x).collect(),
            sample_rate: w.sample_rate,
        };
        let cfg = SpecConfig::default();
        let a = mel_spectrogram(&w, &cfg, &RenderConfig::default()).unwrap();
        let b = mel_spectrogram(&double, &cfg, &RenderConfig::default()).unwrap();
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| y >= x));
    }

    #[test]
    fn wrong_length_is_rejected() {
        let w = Waveform {
            samples: vec![0.0; 100],
            sample_rate: 16000.0,
        };
        assert!(mel_spectrogram(&w, &SpecConfig::default(), &RenderConfig::default()).is_err());
    }

    #[test]
    fn reflect_padding_matches_numpy_reflect() {
        let a = Analyzer::new(
            SpecConfig {
                n_fft: 4,
                ..SpecConfig::default()
            },
            16000.0,
        );
        assert_eq!(
            a.padded(&[1.0, 2.0, 3.0, 4.0]),
            vec![3.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 2.0]
        );
    }

    #[test]
    fn every_filter_covers_at_least_one_bin() {
        let a = Analyzer::new(SpecConfig::default(), 16000.0);
        assert!(a.filters().iter().all(|f| !f.is_empty()));
    }
}
