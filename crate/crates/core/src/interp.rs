//! Interpolation sequences between preset pairs: through the latent space,
//! or by independent per-parameter linear interpolation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Split};
use crate::error::{Error, Result};
use crate::model::{Batch, SpinVae};
use crate::schema::{ensure_valid, ParamKind, Preset, SynthDescriptor};
use crate::spectrum::Spectrogram;
use crate::synth::{render, RenderConfig, Waveform};

pub const DEFAULT_STEPS: usize = 9;
pub const MANIFEST_SCHEMA: &str = "spinterp-seq/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Latent,
    Reference,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Latent => "latent",
            Method::Reference => "reference",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latent" => Ok(Method::Latent),
            "reference" => Ok(Method::Reference),
            other => Err(Error::Config(format!("unknown interpolation method `{other}`"))),
        }
    }
}

/// Range of the interpolation coefficient. `0..1` joins the endpoints;
/// wider spans extrapolate and are not used for metrics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Span {
    pub start: f64,
    pub end: f64,
}

impl Default for Span {
    fn default() -> Self {
        Self { start: 0.0, end: 1.0 }
    }
}

fn check_steps(steps: usize) -> Result<()> {
    if steps < 3 {
        return Err(Error::Config(format!("interpolation needs at least 3 steps (got {steps})")));
    }
    Ok(())
}

/// Coefficient of step `t` (0-based) in a `steps`-long sequence.
pub fn coefficient(t: usize, steps: usize, span: Span) -> f64 {
    let u = t as f64 / (steps - 1) as f64;
    if span == Span::default() {
        u
    } else {
        span.start + (span.end - span.start) * u
    }
}

/// `(1 - c) a + c b`; exact at `c = 0` and `c = 1`.
fn lerp(a: f64, b: f64, c: f64) -> f64 {
    (1.0 - c) * a + c * b
}

pub fn latent_path(z_n: &[f64], z_m: &[f64], steps: usize) -> Result<Vec<Vec<f64>>> {
    latent_path_span(z_n, z_m, steps, Span::default())
}

pub fn latent_path_span(z_n: &[f64], z_m: &[f64], steps: usize, span: Span) -> Result<Vec<Vec<f64>>> {
    check_steps(steps)?;
    if z_n.len() != z_m.len() {
        return Err(Error::Shape(format!(
            "latent endpoints differ in dimension ({} vs {})",
            z_n.len(),
            z_m.len()
        )));
    }
    Ok((0..steps)
        .map(|t| {
            let c = coefficient(t, steps, span);
            z_n.iter().zip(z_m).map(|(&a, &b)| lerp(a, b, c)).collect()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterpStep {
    pub z: Option<Vec<f64>>,
    pub preset: Preset,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterpSequence {
    pub method: Method,
    pub start: Preset,
    pub end: Preset,
    pub steps: Vec<InterpStep>,
}

impl InterpSequence {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn presets(&self) -> Vec<Preset> {
        self.steps.iter().map(|s| s.preset.clone()).collect()
    }
}

/// Encodes both endpoints with `z = mu`, walks the straight latent path and
/// decodes every step onto the parameter grids.
pub fn interpolate_latent(
    model: &SpinVae,
    start: (&Preset, &Spectrogram),
    end: (&Preset, &Spectrogram),
    steps: usize,
) -> Result<InterpSequence> {
    interpolate_latent_span(model, start, end, steps, Span::default())
}

pub fn interpolate_latent_span(
    model: &SpinVae,
    start: (&Preset, &Spectrogram),
    end: (&Preset, &Spectrogram),
    steps: usize,
    span: Span,
) -> Result<InterpSequence> {
    check_steps(steps)?;
    let batch = Batch::new(vec![start.0.clone(), end.0.clone()], &[start.1, end.1])?;
    let codes = model.encode(&batch)?;
    let path = latent_path_span(&codes[0].mu, &codes[1].mu, steps, span)?;
    let decoded = model.decode_preset(&path)?;
    let desc = model.descriptor();
    Ok(InterpSequence {
        method: Method::Latent,
        start: start.0.clone(),
        end: end.0.clone(),
        steps: path
            .into_iter()
            .zip(&decoded)
            .map(|(z, d)| InterpStep {
                z: Some(z),
                preset: d.to_preset(desc),
            })
            .collect(),
    })
}

/// Per-parameter values before grid snapping; categorical entries already
/// follow the midpoint switch.
pub fn reference_trajectory(
    descriptor: &SynthDescriptor,
    start: &Preset,
    end: &Preset,
    steps: usize,
    span: Span,
) -> Result<Vec<Vec<f64>>> {
    check_steps(steps)?;
    ensure_valid(descriptor, start)?;
    ensure_valid(descriptor, end)?;
    // Steps 1..=ceil(T/2) (1-based) keep the start class.
    let switch = steps.div_ceil(2);
    Ok((0..steps)
        .map(|t| {
            let c = coefficient(t, steps, span);
            descriptor
                .params
                .iter()
                .map(|spec| {
                    let (a, b) = (start.get(spec.index), end.get(spec.index));
                    match spec.kind {
                        ParamKind::Categorical { .. } => {
                            if t < switch {
                                a
                            } else {
                                b
                            }
                        }
                        ParamKind::Numerical { .. } => lerp(a, b, c),
                    }
                })
                .collect()
        })
        .collect())
}

pub fn interpolate_reference(
    descriptor: &SynthDescriptor,
    start: &Preset,
    end: &Preset,
    steps: usize,
) -> Result<InterpSequence> {
    interpolate_reference_span(descriptor, start, end, steps, Span::default())
}

pub fn interpolate_reference_span(
    descriptor: &SynthDescriptor,
    start: &Preset,
    end: &Preset,
    steps: usize,
    span: Span,
) -> Result<InterpSequence> {
    let raw = reference_trajectory(descriptor, start, end, steps, span)?;
    Ok(InterpSequence {
        method: Method::Reference,
        start: start.clone(),
        end: end.clone(),
        steps: raw
            .into_iter()
            .map(|values| {
                let snapped = descriptor
                    .params
                    .iter()
                    .zip(values)
                    .map(|(spec, v)| match spec.grid() {
                        Some(grid) => grid.value(grid.nearest_index(v)),
                        None => v,
                    })
                    .collect();
                InterpStep {
                    z: None,
                    preset: Preset::new(snapped),
                }
            })
            .collect(),
    })
}

pub fn render_waveforms(descriptor: &SynthDescriptor, seq: &InterpSequence, cfg: &RenderConfig) -> Result<Vec<Waveform>> {
    seq.steps.iter().map(|s| render(descriptor, &s.preset, cfg)).collect()
}

pub fn wav_name(pair_id: usize, method: Method, t: usize) -> String {
    format!("{pair_id}_{}_{t}.wav", method.name())
}

pub fn manifest_name(pair_id: usize, method: Method) -> String {
    format!("{pair_id}_{}.json", method.name())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestStep {
    /// 1-based.
    pub t: usize,
    pub preset: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z: Option<Vec<f64>>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub pair_id: usize,
    pub method: Method,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub steps: Vec<ManifestStep>,
}

impl Manifest {
    pub fn new(pair_id: usize, seq: &InterpSequence) -> Self {
        Self {
            schema: MANIFEST_SCHEMA.to_string(),
            pair_id,
            method: seq.method,
            start: seq.start.values().to_vec(),
            end: seq.end.values().to_vec(),
            steps: seq
                .steps
                .iter()
                .enumerate()
                .map(|(i, s)| ManifestStep {
                    t: i + 1,
                    preset: s.preset.values().to_vec(),
                    z: s.z.clone(),
                    file: wav_name(pair_id, seq.method, i + 1),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialises")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text)?;
        if m.schema != MANIFEST_SCHEMA {
            return Err(Error::Config(format!(
                "manifest schema `{}`, expected `{MANIFEST_SCHEMA}`",
                m.schema
            )));
        }
        Ok(m)
    }
}

/// Writes one WAV per step plus the manifest into `out_dir`.
pub fn render_sequence(
    descriptor: &SynthDescriptor,
    pair_id: usize,
    seq: &InterpSequence,
    cfg: &RenderConfig,
    out_dir: &Path,
) -> Result<Manifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::file(out_dir, e))?;
    let manifest = Manifest::new(pair_id, seq);
    for (w, step) in render_waveforms(descriptor, seq, cfg)?.iter().zip(&manifest.steps) {
        w.write_wav(&out_dir.join(&step.file))?;
    }
    let path = out_dir.join(manifest_name(pair_id, seq.method));
    std::fs::write(&path, manifest.to_json()).map_err(|e| Error::file(&path, e))?;
    Ok(manifest)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub id: usize,
    /// Corpus item positions.
    pub start: usize,
    pub end: usize,
}

/// Shuffles the test split with `seed` and pairs consecutive items.
pub fn build_pair_set(corpus: &Corpus, count: usize, seed: u64) -> Result<Vec<Pair>> {
    let mut items = corpus.indices(Split::Test);
    if items.len() < 2 * count {
        return Err(Error::InsufficientData(format!(
            "{count} pairs need {} test items, the corpus has {}",
            2 * count,
            items.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    items.shuffle(&mut rng);
    Ok((0..count)
        .map(|id| Pair {
            id,
            start: items[2 * id],
            end: items[2 * id + 1],
        })
        .collect())
}
