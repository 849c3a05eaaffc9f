//! Candidate-versus-reference interpolation reports.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::interp::{interpolate_latent, interpolate_reference, render_sequence, render_waveforms, InterpSequence, Method, Pair};
use crate::model::SpinVae;
use crate::parallel::parallel_map;
use crate::stats::{nonlinearity, smoothness, wilcoxon_one_sided};
use crate::timbre::{feature_names, FeatureExtractor};

pub const SIGNIFICANCE: f64 = 0.05;
/// Fewer non-zero paired differences than this are never significant.
pub const MIN_TEST_SIZE: usize = 5;

/// Smoothness and nonlinearity of each feature along one sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub smoothness: Vec<f64>,
    pub nonlinearity: Vec<f64>,
}

/// `features[t][f]` is feature `f` at step `t`.
pub fn sequence_metrics(features: &[Vec<f64>]) -> Result<SequenceMetrics> {
    let nf = features.first().map_or(0, |r| r.len());
    let mut out = SequenceMetrics {
        smoothness: Vec::with_capacity(nf),
        nonlinearity: Vec::with_capacity(nf),
    };
    for f in 0..nf {
        let series: Vec<f64> = features.iter().map(|r| r[f]).collect();
        out.smoothness.push(smoothness(&series)?);
        out.nonlinearity.push(nonlinearity(&series)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub feature: String,
    pub candidate_mean: f64,
    pub reference_mean: f64,
    /// `None` when the reference mean is zero.
    pub variation_pct: Option<f64>,
    pub p_value: f64,
    pub improved: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub features: usize,
    pub improved: usize,
    /// Mean of the defined per-feature variations.
    pub average_variation_pct: f64,
    /// Features left out of the average because their reference mean is 0.
    pub excluded: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpReport {
    pub pairs: usize,
    pub smoothness: Vec<FeatureRow>,
    pub nonlinearity: Vec<FeatureRow>,
    pub smoothness_summary: MetricSummary,
    pub nonlinearity_summary: MetricSummary,
}

fn metric_rows(
    names: &[String],
    candidate: &[&[f64]],
    reference: &[&[f64]],
) -> Result<(Vec<FeatureRow>, MetricSummary)> {
    let n = candidate.len() as f64;
    let mut rows = Vec::with_capacity(names.len());
    for (f, name) in names.iter().enumerate() {
        let c_mean = candidate.iter().map(|v| v[f]).sum::<f64>() / n;
        let r_mean = reference.iter().map(|v| v[f]).sum::<f64>() / n;
        let diffs: Vec<f64> = candidate.iter().zip(reference).map(|(c, r)| c[f] - r[f]).collect();
        let nonzero = diffs.iter().filter(|&&d| d != 0.0).count();
        let p_value = if nonzero < MIN_TEST_SIZE { 1.0 } else { wilcoxon_one_sided(&diffs)? };
        let variation_pct = (r_mean != 0.0).then(|| 100.0 * (c_mean - r_mean) / r_mean);
        rows.push(FeatureRow {
            feature: name.clone(),
            candidate_mean: c_mean,
            reference_mean: r_mean,
            variation_pct,
            p_value,
            improved: p_value < SIGNIFICANCE,
        });
    }
    let defined: Vec<f64> = rows.iter().filter_map(|r| r.variation_pct).collect();
    let summary = MetricSummary {
        features: rows.len(),
        improved: rows.iter().filter(|r| r.improved).count(),
        average_variation_pct: if defined.is_empty() {
            0.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        },
        excluded: rows.iter().filter(|r| r.variation_pct.is_none()).map(|r| r.feature.clone()).collect(),
    };
    Ok((rows, summary))
}

/// Compares per-pair metrics of a candidate method with the reference.
/// Both slices are indexed by pair. Per-feature values are normalized by the
/// reference mean, so each variation is relative to the reference.
pub fn aggregate_report(
    names: &[String],
    candidate: &[SequenceMetrics],
    reference: &[SequenceMetrics],
) -> Result<InterpReport> {
    if candidate.len() != reference.len() || candidate.is_empty() {
        return Err(Error::Shape(format!(
            "candidate and reference need the same non-empty pair set ({} vs {})",
            candidate.len(),
            reference.len()
        )));
    }
    let width_ok = |m: &SequenceMetrics| m.smoothness.len() == names.len() && m.nonlinearity.len() == names.len();
    if !candidate.iter().chain(reference).all(width_ok) {
        return Err(Error::Shape(format!("every sequence needs {} feature metrics", names.len())));
    }
    let (smooth_rows, smooth_summary) = metric_rows(names, &smooth_of(candidate), &smooth_of(reference))?;
    let (nl_rows, nl_summary) = metric_rows(names, &nonlin_of(candidate), &nonlin_of(reference))?;
    Ok(InterpReport {
        pairs: candidate.len(),
        smoothness: smooth_rows,
        nonlinearity: nl_rows,
        smoothness_summary: smooth_summary,
        nonlinearity_summary: nl_summary,
    })
}

fn smooth_of(set: &[SequenceMetrics]) -> Vec<&[f64]> {
    set.iter().map(|m| m.smoothness.as_slice()).collect()
}

fn nonlin_of(set: &[SequenceMetrics]) -> Vec<&[f64]> {
    set.iter().map(|m| m.nonlinearity.as_slice()).collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

impl InterpReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,feature,candidate_mean,reference_mean,variation_pct,p_value,improved\n");
        for (metric, rows) in [("smoothness", &self.smoothness), ("nonlinearity", &self.nonlinearity)] {
            for r in rows {
                writeln!(
                    out,
                    "{metric},{},{:.9e},{:.9e},{},{:.9e},{}",
                    r.feature,
                    r.candidate_mean,
                    r.reference_mean,
                    fmt_opt(r.variation_pct),
                    r.p_value,
                    r.improved as u8
                )
                .expect("string write");
            }
        }
        out
    }

    /// Summary table (improved feature count and average variation per
    /// metric) followed by the per-feature breakdown.
    pub fn to_table(&self, candidate: &str) -> String {
        let s = &self.smoothness_summary;
        let n = &self.nonlinearity_summary;
        let mut out = String::new();
        writeln!(out, "Interpolation vs. reference ({} sequences)", self.pairs).unwrap();
        writeln!(out).unwrap();
        writeln!(
            out,
            "{:<12} | {:>18} {:>14} | {:>18} {:>14}",
            "model", "smooth. improved", "smooth. var %", "nonlin. improved", "nonlin. var %"
        )
        .unwrap();
        writeln!(out, "{}", "-".repeat(86)).unwrap();
        writeln!(
            out,
            "{:<12} | {:>18} {:>14} | {:>18} {:>14}",
            "reference",
            "-",
            "0.0",
            "-",
            "0.0"
        )
        .unwrap();
        writeln!(
            out,
            "{:<12} | {:>18} {:>14.1} | {:>18} {:>14.1}",
            candidate,
            format!("{}/{}", s.improved, s.features),
            s.average_variation_pct,
            format!("{}/{}", n.improved, n.features),
            n.average_variation_pct
        )
        .unwrap();
        for (metric, rows, summary) in [
            ("smoothness", &self.smoothness, s),
            ("nonlinearity", &self.nonlinearity, n),
        ] {
            writeln!(out).unwrap();
            writeln!(
                out,
                "{:<26} {:>13} {:>13} {:>10} {:>10} {:>4}",
                metric, "candidate", "reference", "var %", "p", "sig"
            )
            .unwrap();
            for r in rows {
                writeln!(
                    out,
                    "{:<26} {:>13.6e} {:>13.6e} {:>10} {:>10.4} {:>4}",
                    r.feature,
                    r.candidate_mean,
                    r.reference_mean,
                    r.variation_pct.map_or_else(|| "NA".to_string(), |v| format!("{v:.2}")),
                    r.p_value,
                    if r.improved { "*" } else { "" }
                )
                .unwrap();
            }
            if !summary.excluded.is_empty() {
                writeln!(out, "excluded from the average (zero reference mean): {}", summary.excluded.join(", ")).unwrap();
            }
        }
        out
    }
}

/// Feature rows of one rendered sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceFeatures {
    pub pair_id: usize,
    pub method: Method,
    /// `[t][feature]`.
    pub values: Vec<Vec<f64>>,
}

pub fn features_csv(rows: &[SequenceFeatures]) -> String {
    let mut out = format!("pair,method,t,{}\n", feature_names().join(","));
    for s in rows {
        for (t, v) in s.values.iter().enumerate() {
            write!(out, "{},{},{}", s.pair_id, s.method.name(), t + 1).unwrap();
            for x in v {
                write!(out, ",{x:?}").unwrap();
            }
            out.push('\n');
        }
    }
    out
}

/// Inverse of [`features_csv`].
pub fn parse_features_csv(text: &str) -> Result<Vec<SequenceFeatures>> {
    let mut lines = text.lines().enumerate();
    let expected = format!("pair,method,t,{}", feature_names().join(","));
    match lines.next() {
        Some((_, h)) if h == expected => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: "unexpected features header".into(),
            })
        }
    }
    let mut out: Vec<SequenceFeatures> = Vec::new();
    for (i, line) in lines {
        let err = |message: String| Error::Parse { line: i + 1, message };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 + feature_names().len() {
            return Err(err(format!("expected {} fields", 3 + feature_names().len())));
        }
        let pair_id: usize = fields[0].parse().map_err(|_| err("bad pair id".into()))?;
        let method: Method = fields[1].parse()?;
        let t: usize = fields[2].parse().map_err(|_| err("bad step".into()))?;
        let values = fields[3..]
            .iter()
            .map(|x| x.parse::<f64>().map_err(|_| err(format!("bad value `{x}`"))))
            .collect::<Result<Vec<_>>>()?;
        match out.last_mut() {
            Some(s) if s.pair_id == pair_id && s.method == method && s.values.len() + 1 == t => s.values.push(values),
            _ if t == 1 => out.push(SequenceFeatures {
                pair_id,
                method,
                values: vec![values],
            }),
            _ => return Err(err(format!("step {t} out of order"))),
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct EvalOptions<'a> {
    pub steps: usize,
    /// Method compared against the reference; `Reference` gives a
    /// self-comparison.
    pub candidate: Method,
    /// When set, WAVs and manifests for every sequence are written here.
    pub audio_dir: Option<&'a Path>,
}

pub struct EvalOutput {
    pub report: InterpReport,
    pub features: Vec<SequenceFeatures>,
    pub sequences: Vec<(Pair, InterpSequence, InterpSequence)>,
}

/// Builds both sequences for every pair, extracts features from the
/// rendered audio and compares latent against reference interpolation.
pub fn evaluate_interpolation(
    model: &SpinVae,
    corpus: &Corpus,
    pairs: &[Pair],
    opts: &EvalOptions<'_>,
) -> Result<EvalOutput> {
    model.check_descriptor_hash(&corpus.descriptor_hash)?;
    let desc = model.descriptor();
    let render_cfg = corpus.render;
    let sequences = parallel_map(pairs, |p| -> Result<(Pair, InterpSequence, InterpSequence)> {
        let (a, b) = (&corpus.records[p.start].preset, &corpus.records[p.end].preset);
        let (xa, xb) = (corpus.spectrogram(p.start), corpus.spectrogram(p.end));
        let latent = interpolate_latent(model, (a, &xa), (b, &xb), opts.steps)?;
        let reference = interpolate_reference(desc, a, b, opts.steps)?;
        Ok((*p, latent, reference))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let extractor = FeatureExtractor::new(render_cfg.sample_rate);
    let mut features = Vec::with_capacity(2 * pairs.len());
    for (pair, latent, reference) in &sequences {
        for seq in [latent, reference] {
            let waves = render_waveforms(desc, seq, &render_cfg)?;
            features.push(SequenceFeatures {
                pair_id: pair.id,
                method: seq.method,
                values: parallel_map(&waves, |w| extractor.extract(w)),
            });
            if let Some(dir) = opts.audio_dir {
                render_sequence(desc, pair.id, seq, &render_cfg, dir)?;
            }
        }
    }
    let report = report_from_features(&features, opts.candidate)?;
    Ok(EvalOutput {
        report,
        features,
        sequences,
    })
}

/// Aggregates the candidate-vs-reference report from feature tables.
pub fn report_from_features(features: &[SequenceFeatures], candidate_method: Method) -> Result<InterpReport> {
    let mut candidate = Vec::new();
    let mut reference = Vec::new();
    let mut cands: Vec<&SequenceFeatures> = features.iter().filter(|s| s.method == candidate_method).collect();
    let mut refs: Vec<&SequenceFeatures> = features.iter().filter(|s| s.method == Method::Reference).collect();
    cands.sort_by_key(|s| s.pair_id);
    refs.sort_by_key(|s| s.pair_id);
    if cands.len() != refs.len() || cands.iter().zip(&refs).any(|(a, b)| a.pair_id != b.pair_id) {
        return Err(Error::Shape(format!(
            "{} and reference sequences cover different pairs",
            candidate_method.name()
        )));
    }
    for (l, r) in cands.iter().zip(&refs) {
        candidate.push(sequence_metrics(&l.values)?);
        reference.push(sequence_metrics(&r.values)?);
    }
    aggregate_report(&feature_names(), &candidate, &reference)
}
