//! Timbre descriptors: framewise spectral shape statistics summarized by
//! median and IQR over frames, plus global temporal envelope descriptors.
//!
//! Hz-valued descriptors (centroid, spread, rolloff) are stored as
//! `log2(max(Hz, 40))`.

use crate::spectrum::{Analyzer, SpecConfig};
use crate::synth::Waveform;

pub const DESCRIPTORS: [&str; 12] = [
    "centroid",
    "spread",
    "skewness",
    "kurtosis",
    "rolloff",
    "flatness",
    "crest",
    "flux",
    "rms",
    "attack_time",
    "temporal_centroid",
    "effective_duration",
];

pub const NUM_FEATURES: usize = 2 * DESCRIPTORS.len();

/// Lower clamp for Hz-valued descriptors before taking log2.
pub const MIN_HZ: f64 = 40.0;
pub const ROLLOFF_FRACTION: f64 = 0.95;
/// Block length of the RMS envelope used by the temporal descriptors.
pub const ENVELOPE_BLOCK: usize = 64;

/// `descriptor_median`, `descriptor_iqr` for each descriptor in order.
pub fn feature_names() -> Vec<String> {
    DESCRIPTORS
        .iter()
        .flat_map(|d| [format!("{d}_median"), format!("{d}_iqr")])
        .collect()
}

/// Linear-interpolation percentile (the common "type 7" definition).
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => 0.0,
        1 => sorted[0],
        n => {
            let h = (n - 1) as f64 * q;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

fn median_iqr(values: &[f64]) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    (percentile(&v, 0.5), percentile(&v, 0.75) - percentile(&v, 0.25))
}

fn log_hz(f: f64) -> f64 {
    f.max(MIN_HZ).log2()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameDescriptors {
    pub centroid: f64,
    pub spread: f64,
    pub skewness: f64,
    pub kurtosis: f64,
    pub rolloff: f64,
    pub flatness: f64,
    pub crest: f64,
    pub rms: f64,
}

/// Spectral descriptors of one magnitude spectrum; `freqs[k]` is the
/// frequency of bin `k` and `frame` the time-domain samples.
pub fn frame_descriptors(magnitude: &[f64], freqs: &[f64], frame: &[f64]) -> FrameDescriptors {
    let rms = (frame.iter().map(|x| x * x).sum::<f64>() / frame.len().max(1) as f64).sqrt();
    let total: f64 = magnitude.iter().sum();
    if total <= 0.0 {
        return FrameDescriptors {
            centroid: log_hz(0.0),
            spread: log_hz(0.0),
            skewness: 0.0,
            kurtosis: 0.0,
            rolloff: log_hz(0.0),
            flatness: 1.0,
            crest: 1.0,
            rms,
        };
    }
    let p: Vec<f64> = magnitude.iter().map(|m| m / total).collect();
    let mu: f64 = p.iter().zip(freqs).map(|(p, f)| p * f).sum();
    let moment = |k: i32| -> f64 { p.iter().zip(freqs).map(|(p, f)| p * (f - mu).powi(k)).sum() };
    let var = moment(2);
    let sigma = var.sqrt();
    let (skewness, kurtosis) = if sigma > 0.0 {
        (moment(3) / (sigma * var), moment(4) / (var * var))
    } else {
        (0.0, 0.0)
    };

    let power: Vec<f64> = magnitude.iter().map(|m| m * m).collect();
    let energy: f64 = power.iter().sum();
    let mut cumulative = 0.0;
    let mut rolloff = freqs[freqs.len() - 1];
    for (e, f) in power.iter().zip(freqs) {
        cumulative += e;
        if cumulative >= ROLLOFF_FRACTION * energy {
            rolloff = *f;
            break;
        }
    }

    let n = power.len() as f64;
    let arithmetic = energy / n;
    let flatness = if power.iter().any(|&e| e <= 0.0) {
        0.0
    } else {
        (power.iter().map(|e| e.ln()).sum::<f64>() / n).exp() / arithmetic
    };
    let peak = magnitude.iter().cloned().fold(0.0, f64::max);
    let crest = peak / (total / magnitude.len() as f64);

    FrameDescriptors {
        centroid: log_hz(mu),
        spread: log_hz(sigma),
        skewness,
        kurtosis,
        rolloff: log_hz(rolloff),
        flatness,
        crest,
        rms,
    }
}

/// Euclidean distance between consecutive sum-normalized spectra; zero when
/// either frame is silent.
pub fn spectral_flux(previous: &[f64], current: &[f64]) -> f64 {
    let (sa, sb): (f64, f64) = (previous.iter().sum(), current.iter().sum());
    if sa <= 0.0 || sb <= 0.0 {
        return 0.0;
    }
    previous
        .iter()
        .zip(current)
        .map(|(a, b)| (b / sb - a / sa).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemporalDescriptors {
    pub attack_time: f64,
    pub temporal_centroid: f64,
    pub effective_duration: f64,
}

/// RMS of consecutive `ENVELOPE_BLOCK`-sample blocks.
pub fn rms_envelope(samples: &[f64]) -> Vec<f64> {
    samples
        .chunks(ENVELOPE_BLOCK)
        .map(|b| (b.iter().map(|x| x * x).sum::<f64>() / b.len() as f64).sqrt())
        .collect()
}

/// Attack: first block at 90% of the peak minus first block at 10%.
/// Temporal centroid: envelope-weighted mean block time. Effective
/// duration: total time the envelope is at least 40% of its peak. All in
/// seconds, and all zero for silence.
pub fn temporal_descriptors(samples: &[f64], sample_rate: f64) -> TemporalDescriptors {
    let env = rms_envelope(samples);
    let peak = env.iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return TemporalDescriptors {
            attack_time: 0.0,
            temporal_centroid: 0.0,
            effective_duration: 0.0,
        };
    }
    let block = ENVELOPE_BLOCK as f64 / sample_rate;
    let first_at = |frac: f64| env.iter().position(|&e| e >= frac * peak).expect("peak is reached");
    let attack_time = (first_at(0.9) - first_at(0.1)) as f64 * block;
    let weight: f64 = env.iter().sum();
    let temporal_centroid = env
        .iter()
        .enumerate()
        .map(|(i, e)| (i as f64 + 0.5) * block * e)
        .sum::<f64>()
        / weight;
    let effective_duration = env.iter().filter(|&&e| e >= 0.4 * peak).count() as f64 * block;
    TemporalDescriptors {
        attack_time,
        temporal_centroid,
        effective_duration,
    }
}

/// Reusable feature extractor; holds the FFT plan.
pub struct FeatureExtractor {
    analyzer: Analyzer,
    freqs: Vec<f64>,
    sample_rate: f64,
}

impl FeatureExtractor {
    pub fn new(sample_rate: f64) -> Self {
        let cfg = SpecConfig {
            n_frames: usize::MAX,
            ..SpecConfig::default()
        };
        let analyzer = Analyzer::new(cfg, sample_rate);
        let freqs = (0..cfg.n_bins()).map(|k| analyzer.bin_frequency(k)).collect();
        Self {
            analyzer,
            freqs,
            sample_rate,
        }
    }

    /// Bin spacing in Hz.
    pub fn bin_width(&self) -> f64 {
        self.freqs[1]
    }

    /// `NUM_FEATURES` values in `feature_names()` order.
    pub fn extract(&self, waveform: &Waveform) -> Vec<f64> {
        let padded = self.analyzer.padded(&waveform.samples);
        let frames = self.analyzer.frames(&padded);
        let mags: Vec<Vec<f64>> = frames.iter().map(|f| self.analyzer.magnitude(f)).collect();
        let per_frame: Vec<FrameDescriptors> = mags
            .iter()
            .zip(&frames)
            .map(|(m, f)| frame_descriptors(m, &self.freqs, f))
            .collect();
        let flux: Vec<f64> = mags.windows(2).map(|w| spectral_flux(&w[0], &w[1])).collect();
        let column = |get: fn(&FrameDescriptors) -> f64| -> Vec<f64> { per_frame.iter().map(get).collect() };
        let framewise = [
            column(|d| d.centroid),
            column(|d| d.spread),
            column(|d| d.skewness),
            column(|d| d.kurtosis),
            column(|d| d.rolloff),
            column(|d| d.flatness),
            column(|d| d.crest),
            flux,
            column(|d| d.rms),
        ];
        let temporal = temporal_descriptors(&waveform.samples, self.sample_rate);
        let mut out = Vec::with_capacity(NUM_FEATURES);
        for values in &framewise {
            let (m, iqr) = median_iqr(values);
            out.push(m);
            out.push(iqr);
        }
        for v in [temporal.attack_time, temporal.temporal_centroid, temporal.effective_duration] {
            let (m, iqr) = median_iqr(&[v]);
            out.push(m);
            out.push(iqr);
        }
        out
    }
}

pub fn extract_features(waveform: &Waveform) -> Vec<f64> {
    FeatureExtractor::new(waveform.sample_rate).extract(waveform)
}
