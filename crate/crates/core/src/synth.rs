//! Four-operator FM synthesizer.
//!
//! Operator `k` produces `env_k(t) * sin(2 pi r_k f0 t + I_k * sum_j op_j(t))`
//! where `j` ranges over the modulators of `k` given by the algorithm. The
//! output is the sum of carriers divided by `max(1, peak)`.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::schema::{ensure_valid, Preset, SynthDescriptor};

pub const NUM_OPERATORS: usize = 4;

/// Frequency ratios addressed by the 15-step ratio grid.
pub const RATIO_TABLE: [f64; 15] = [
    0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0, 5.5, 6.0, 6.5, 7.0, 8.0,
];

pub const MAX_MOD_INDEX: f64 = 7.0;
pub const MIN_ENV_TIME: f64 = 0.001;
pub const MAX_ENV_TIME: f64 = 0.5;
pub const LEVEL_RANGE_DB: f64 = 60.0;
/// Note-off position as a fraction of the render duration.
pub const NOTE_OFF_FRACTION: f64 = 0.75;

pub const OPERATOR_FIELDS: [&str; 7] = [
    "ratio",
    "level",
    "attack",
    "decay",
    "sustain",
    "release",
    "mod_index",
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderConfig {
    pub sample_rate: f64,
    pub duration: f64,
    pub note_frequency: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000.0,
            duration: 1.024,
            note_frequency: 261.63,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x > 0.0;
        if !ok(self.sample_rate) || !ok(self.duration) || !ok(self.note_frequency) {
            return Err(Error::Config(format!(
                "render config must be positive and finite: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        (self.sample_rate * self.duration).round() as usize
    }

    pub fn note_off(&self) -> f64 {
        NOTE_OFF_FRACTION * self.duration
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: f64,
}

impl Waveform {
    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// 16-bit PCM mono RIFF/WAVE bytes.
    pub fn to_wav_bytes(&self) -> Result<Vec<u8>> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate.round() as u32,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut cursor = Cursor::new(Vec::with_capacity(44 + 2 * self.samples.len()));
        {
            let mut w = hound::WavWriter::new(&mut cursor, spec)?;
            for &x in &self.samples {
                w.write_sample(pcm16(x))?;
            }
            w.finalize()?;
        }
        Ok(cursor.into_inner())
    }

    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let bytes = self.to_wav_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::file(path, e))
    }
}

pub fn pcm16(x: f64) -> i16 {
    (x.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16
}

/// Modulation routing of one algorithm. `modulators[k]` lists the operators
/// feeding the phase of operator `k`; all indices are 0-based.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlgorithmGraph {
    pub modulators: [Vec<usize>; NUM_OPERATORS],
    pub carriers: Vec<usize>,
}

pub const NUM_ALGORITHMS: usize = 8;

pub fn algorithm_graph(id: usize) -> Result<AlgorithmGraph> {
    let (modulators, carriers): ([&[usize]; 4], &[usize]) = match id {
        // all additive
        0 => ([&[], &[], &[], &[]], &[0, 1, 2, 3]),
        // 4 -> 3 -> 2 -> 1
        1 => ([&[1], &[2], &[3], &[]], &[0]),
        // 2 -> 1, 4 -> 3
        2 => ([&[1], &[], &[3], &[]], &[0, 2]),
        // (2, 3, 4) -> 1
        3 => ([&[1, 2, 3], &[], &[], &[]], &[0]),
        // 3 -> 2 -> 1, 4 -> 1
        4 => ([&[1, 3], &[2], &[], &[]], &[0]),
        // 4 -> (1, 2, 3)
        5 => ([&[3], &[3], &[3], &[]], &[0, 1, 2]),
        // 2 -> 1, with 3 and 4 as free carriers
        6 => ([&[1], &[], &[], &[]], &[0, 2, 3]),
        // (3, 4) -> 2 -> 1
        7 => ([&[1], &[2, 3], &[], &[]], &[0]),
        _ => {
            return Err(Error::OutOfRange {
                what: "algorithm id",
                value: id as f64,
            })
        }
    };
    Ok(AlgorithmGraph {
        modulators: modulators.map(|m| m.to_vec()),
        carriers: carriers.to_vec(),
    })
}

impl AlgorithmGraph {
    /// Operators ordered so every modulator precedes the operators it feeds.
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        let mut pending: Vec<usize> = self.modulators.iter().map(|m| m.len()).collect();
        let mut order = Vec::with_capacity(NUM_OPERATORS);
        let mut ready: Vec<usize> = (0..NUM_OPERATORS).filter(|&k| pending[k] == 0).collect();
        while let Some(j) = ready.pop() {
            order.push(j);
            for (k, count) in pending.iter_mut().enumerate() {
                if self.modulators[k].contains(&j) {
                    *count -= 1;
                    if *count == 0 {
                        ready.push(k);
                    }
                }
            }
        }
        if order.len() != NUM_OPERATORS {
            return Err(Error::Config("algorithm routing contains a cycle".into()));
        }
        order.sort_by_key(|&k| self.depth(k));
        Ok(order)
    }

    fn depth(&self, k: usize) -> usize {
        self.modulators[k]
            .iter()
            .map(|&j| 1 + self.depth(j))
            .max()
            .unwrap_or(0)
    }

    /// Operators whose phase `j` modulates.
    pub fn targets(&self, j: usize) -> Vec<usize> {
        (0..NUM_OPERATORS)
            .filter(|&k| self.modulators[k].contains(&j))
            .collect()
    }

    pub fn is_carrier(&self, k: usize) -> bool {
        self.carriers.contains(&k)
    }
}

/// Linear ADSR with a release ramp starting from the level at note-off.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Envelope {
    pub attack: f64,
    pub decay: f64,
    pub sustain: f64,
    pub release: f64,
    pub note_off: f64,
}

impl Envelope {
    fn held(&self, t: f64) -> f64 {
        if t < self.attack {
            t / self.attack
        } else if t < self.attack + self.decay {
            1.0 - (1.0 - self.sustain) * (t - self.attack) / self.decay
        } else {
            self.sustain
        }
    }

    pub fn level_at_note_off(&self) -> f64 {
        self.held(self.note_off)
    }

    pub fn level(&self, t: f64) -> f64 {
        if t < self.note_off {
            self.held(t)
        } else {
            let x = (t - self.note_off) / self.release;
            if x >= 1.0 {
                0.0
            } else {
                self.level_at_note_off() * (1.0 - x)
            }
        }
    }
}

pub fn envelope_time(v: f64) -> f64 {
    MIN_ENV_TIME * (MAX_ENV_TIME / MIN_ENV_TIME).powf(v)
}

pub fn level_amplitude(v: f64) -> f64 {
    if v <= 0.0 {
        0.0
    } else {
        10f64.powf(-LEVEL_RANGE_DB / 20.0 * (1.0 - v))
    }
}

pub fn ratio_value(v: f64) -> f64 {
    let i = (v * (RATIO_TABLE.len() - 1) as f64).round() as usize;
    RATIO_TABLE[i.min(RATIO_TABLE.len() - 1)]
}

/// Physical settings of one operator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Operator {
    pub ratio: f64,
    pub amplitude: f64,
    pub envelope: Envelope,
    pub mod_index: f64,
}

/// Preset indices of every operator field, resolved by name.
#[derive(Clone, Debug, PartialEq)]
pub struct FmLayout {
    pub algorithm: usize,
    /// `fields[k][f]` is the preset index of field `OPERATOR_FIELDS[f]` of operator `k`.
    pub fields: [[usize; 7]; NUM_OPERATORS],
}

impl FmLayout {
    pub fn new(descriptor: &SynthDescriptor) -> Result<Self> {
        if descriptor.num_algorithms != NUM_ALGORITHMS {
            return Err(Error::Descriptor(format!(
                "synth has {NUM_ALGORITHMS} algorithms, descriptor declares {}",
                descriptor.num_algorithms
            )));
        }
        let mut fields = [[0usize; 7]; NUM_OPERATORS];
        for (k, row) in fields.iter_mut().enumerate() {
            for (f, name) in OPERATOR_FIELDS.iter().enumerate() {
                let full = format!("op{}.{name}", k + 1);
                let idx = descriptor
                    .param_index(&full)
                    .ok_or_else(|| Error::Descriptor(format!("synth needs parameter `{full}`")))?;
                if descriptor.params[idx].is_categorical() {
                    return Err(Error::Descriptor(format!("`{full}` must be numerical")));
                }
                row[f] = idx;
            }
        }
        Ok(Self {
            algorithm: descriptor.algorithm_param,
            fields,
        })
    }

    pub fn field(&self, op: usize, name: &str) -> usize {
        let f = OPERATOR_FIELDS
            .iter()
            .position(|&n| n == name)
            .expect("known operator field");
        self.fields[op][f]
    }

    pub fn operators(&self, preset: &Preset, cfg: &RenderConfig) -> [Operator; NUM_OPERATORS] {
        std::array::from_fn(|k| {
            let v = |name| preset.get(self.field(k, name));
            Operator {
                ratio: ratio_value(v("ratio")),
                amplitude: level_amplitude(v("level")),
                envelope: Envelope {
                    attack: envelope_time(v("attack")),
                    decay: envelope_time(v("decay")),
                    sustain: v("sustain"),
                    release: envelope_time(v("release")),
                    note_off: cfg.note_off(),
                },
                mod_index: MAX_MOD_INDEX * v("mod_index"),
            }
        })
    }
}

pub fn render(descriptor: &SynthDescriptor, preset: &Preset, cfg: &RenderConfig) -> Result<Waveform> {
    ensure_valid(descriptor, preset)?;
    cfg.validate()?;
    let layout = FmLayout::new(descriptor)?;
    let graph = algorithm_graph(preset.class(layout.algorithm))?;
    let ops = layout.operators(preset, cfg);
    Ok(render_operators(&graph, &ops, cfg))
}

/// Renders explicit operator settings; `render` is a thin wrapper.
pub fn render_operators(graph: &AlgorithmGraph, ops: &[Operator; NUM_OPERATORS], cfg: &RenderConfig) -> Waveform {
    let order = graph.topological_order().expect("shipped algorithms are acyclic");
    let n = cfg.num_samples();
    let two_pi_f0 = 2.0 * std::f64::consts::PI * cfg.note_frequency;
    let mut samples = vec![0.0; n];
    let mut out = [0.0f64; NUM_OPERATORS];
    for (i, sample) in samples.iter_mut().enumerate() {
        let t = i as f64 / cfg.sample_rate;
        for &k in &order {
            let op = &ops[k];
            if op.amplitude == 0.0 {
                out[k] = 0.0;
                continue;
            }
            let modulation: f64 = graph.modulators[k].iter().map(|&j| out[j]).sum();
            let phase = two_pi_f0 * op.ratio * t + op.mod_index * modulation;
            out[k] = op.amplitude * op.envelope.level(t) * phase.sin();
        }
        *sample = graph.carriers.iter().map(|&k| out[k]).sum();
    }
    let peak = samples.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak > 1.0 {
        for s in &mut samples {
            *s /= peak;
        }
    }
    Waveform {
        samples,
        sample_rate: cfg.sample_rate,
    }
}

/// Numerical parameters whose one-step change is expected to alter the
/// rendered waveform: fields of operators that have nonzero level and a
/// modulation path to a carrier with nonzero index along the way.
pub fn active_parameters(descriptor: &SynthDescriptor, preset: &Preset, cfg: &RenderConfig) -> Result<Vec<usize>> {
    let layout = FmLayout::new(descriptor)?;
    let graph = algorithm_graph(preset.class(layout.algorithm))?;
    let ops = layout.operators(preset, cfg);
    let order = graph.topological_order()?;

    // Whether an operator's output reaches the mix, ignoring its own level.
    let mut reaches = [false; NUM_OPERATORS];
    let mut active = [false; NUM_OPERATORS];
    for &k in order.iter().rev() {
        reaches[k] = graph.is_carrier(k)
            || graph
                .targets(k)
                .iter()
                .any(|&t| active[t] && ops[t].mod_index > 0.0);
        active[k] = reaches[k] && ops[k].amplitude > 0.0;
    }

    let mut out = Vec::new();
    for k in 0..NUM_OPERATORS {
        if reaches[k] {
            out.push(layout.field(k, "level"));
        }
        if !active[k] {
            continue;
        }
        let env = ops[k].envelope;
        out.push(layout.field(k, "ratio"));
        out.push(layout.field(k, "attack"));
        out.push(layout.field(k, "sustain"));
        if env.sustain < 1.0 {
            out.push(layout.field(k, "decay"));
        }
        if env.level_at_note_off() > 0.0 {
            out.push(layout.field(k, "release"));
        }
        if graph.modulators[k].iter().any(|&j| ops[j].amplitude > 0.0) {
            out.push(layout.field(k, "mod_index"));
        }
    }
    out.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::sample_random_preset;

    #[test]
    fn routing_table_is_a_set_of_distinct_dags() {
        let graphs: Vec<_> = (0..NUM_ALGORITHMS).map(|i| algorithm_graph(i).unwrap()).collect();
        for (i, g) in graphs.iter().enumerate() {
            let order = g.topological_order().unwrap();
            for (pos, &k) in order.iter().enumerate() {
                for &j in &g.modulators[k] {
                    assert!(order[..pos].contains(&j), "alg {i}: {j} must precede {k}");
                }
            }
            assert!(!g.carriers.is_empty());
            for (j, other) in graphs.iter().enumerate().skip(i + 1) {
                assert_ne!(g, other, "algorithms {i} and {j} coincide");
            }
        }
        assert!(algorithm_graph(8).is_err());
    }

    #[test]
    fn algorithm_zero_is_additive_and_one_is_a_chain() {
        let g = algorithm_graph(0).unwrap();
        assert_eq!(g.carriers, vec![0, 1, 2, 3]);
        assert!(g.modulators.iter().all(|m| m.is_empty()));
        let g = algorithm_graph(1).unwrap();
        assert_eq!(g.carriers, vec![0]);
        assert_eq!(g.topological_order().unwrap(), vec![3, 2, 1, 0]);
    }

    #[test]
    fn cycles_are_detected() {
        let g = AlgorithmGraph {
            modulators: [vec![1], vec![0], vec![], vec![]],
            carriers: vec![0],
        };
        assert!(g.topological_order().is_err());
    }

    #[test]
    fn mappings() {
        assert_eq!(ratio_value(0.0), 0.5);
        assert_eq!(ratio_value(1.0 / 14.0), 1.0);
        assert_eq!(ratio_value(1.0), 8.0);
        assert_eq!(level_amplitude(0.0), 0.0);
        assert_eq!(level_amplitude(1.0), 1.0);
        assert!((envelope_time(0.0) - 0.001).abs() < 1e-15);
        assert!((envelope_time(1.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn envelope_segments() {
        let e = Envelope {
            attack: 0.1,
            decay: 0.2,
            sustain: 0.5,
            release: 0.1,
            note_off: 0.5,
        };
        assert!((e.level(0.05) - 0.5).abs() < 1e-12);
        assert!((e.level(0.2) - 0.75).abs() < 1e-12);
        assert_eq!(e.level(0.4), 0.5);
        assert!((e.level(0.55) - 0.25).abs() < 1e-12);
        assert_eq!(e.level(0.7), 0.0);
    }

    #[test]
    fn render_is_pure_and_bounded() {
        let d = SynthDescriptor::builtin();
        let cfg = RenderConfig::default();
        for seed in 0..20 {
            let p = sample_random_preset(&d, seed);
            let a = render(&d, &p, &cfg).unwrap();
            let b = render(&d, &p, &cfg).unwrap();
            assert_eq!(a.samples.len(), 16384);
            assert!(a.samples.iter().zip(&b.samples).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert!(a.peak() <= 1.0);
            assert!(a.samples.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn all_levels_zero_is_silent() {
        let d = SynthDescriptor::builtin();
        let layout = FmLayout::new(&d).unwrap();
        let mut p = sample_random_preset(&d, 1);
        for k in 0..NUM_OPERATORS {
            p = p.with(layout.field(k, "level"), 0.0);
        }
        let w = render(&d, &p, &RenderConfig::default()).unwrap();
        assert!(w.samples.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn invalid_preset_is_rejected() {
        let d = SynthDescriptor::builtin();
        let p = sample_random_preset(&d, 1).with(3, 0.123);
        assert!(render(&d, &p, &RenderConfig::default()).is_err());
    }

    #[test]
    fn wav_bytes_are_riff_pcm16() {
        let w = Waveform {
            samples: vec![0.0, 1.0, -1.0, 0.5],
            sample_rate: 16000.0,
        };
        let bytes = w.to_wav_bytes().unwrap();
        assert_eq!(&bytes[..4], b"RIFF");
        assert_eq!(&bytes[8..12], b"WAVE");
        assert_eq!(bytes.len(), 44 + 8);
        let data: Vec<i16> = bytes[44..]
            .chunks(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]))
            .collect();
        assert_eq!(data, vec![0, 32767, -32767, 16384]);
        assert_eq!(w.to_wav_bytes().unwrap(), bytes);
    }
}
