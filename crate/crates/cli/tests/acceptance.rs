//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if any
//! criterion fails.
//!
//! Runs without the libtest harness so the lines always reach the console:
//! `cargo test -p spinterp-cli --test acceptance`. The end-to-end run trains
//! for `SPINTERP_E2E_EPOCHS` epochs (default 10). `SPINTERP_ACCEPTANCE_ONLY` restricts the run to criteria
//! whose name contains the given text.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spinterp::corpus::{Corpus, Split};
use spinterp::dlm::{pmf, DlmNll, DlmParams};
use spinterp::interp::{interpolate_reference, reference_trajectory, Span};
use spinterp::model::{kl_divergence, reparameterize, standard_normal, Batch, EncoderMode, ModelConfig, SpinVae};
use spinterp::prior::sample_random_preset;
use spinterp::schema::{Preset, QuantGrid, SynthDescriptor};
use spinterp::spectrum::{mel_spectrogram, SpecConfig};
use spinterp::stats::{nonlinearity, signed_ranks, smoothness, wilcoxon_exact, wilcoxon_normal};
use spinterp::synth::{algorithm_graph, render, render_operators, Envelope, Operator, RenderConfig};
use spinterp::train::{evaluate_reconstruction, train, LrSchedule, RunOptions, TrainConfig};
use spinterp_nn::gradcheck::{relative_error_scaled, richardson_difference};
use spinterp_nn::gradsuite::{layer_suite, LAYER_TOL};
use spinterp_nn::{Graph, Tensor};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

struct Criterion {
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

fn batch(desc: &SynthDescriptor, seeds: &[u64]) -> Batch {
    let presets: Vec<Preset> = seeds.iter().map(|&s| sample_random_preset(desc, s)).collect();
    let rc = RenderConfig::default();
    let specs: Vec<_> = presets
        .iter()
        .map(|p| mel_spectrogram(&render(desc, p, &rc).unwrap(), &SpecConfig::default(), &rc).unwrap())
        .collect();
    let refs: Vec<_> = specs.iter().collect();
    Batch::new(presets, &refs).unwrap()
}

fn model(seed: u64) -> SpinVae {
    let cfg = ModelConfig {
        init_seed: seed,
        ..ModelConfig::default()
    };
    SpinVae::new(&SynthDescriptor::builtin(), cfg).unwrap()
}

fn dlm_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for q in [8usize, 15, 100] {
        let grid = QuantGrid::new(q).unwrap();
        for _ in 0..1000 {
            let k = rng.random_range(1..=4);
            let mut draw = |lo: f64, hi: f64| (0..k).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>();
            let (logits, means, scales) = (draw(-5.0, 5.0), draw(-1.0, 2.0), draw(-9.0, 1.0));
            let p = DlmParams::from_raw(&logits, &means, &scales).unwrap();
            worst = worst.max((pmf(&p, grid).iter().sum::<f64>() - 1.0).abs());
        }
    }
    outcome(worst <= 1e-6, format!("3000 mixtures, worst |sum - 1| = {worst:.2e}"))
}

/// Worst relative error of the DLM negative log-likelihood op inside a graph.
fn dlm_op_error(trial: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(2000 + trial);
    let q = [8usize, 15, 100][trial as usize % 3];
    let grid = QuantGrid::new(q).unwrap();
    let (b, k) = (4, 3);
    let mut mk = |lo: f64, hi: f64| Tensor::new(&[b, k], (0..b * k).map(|_| rng.random_range(lo..hi)).collect()).unwrap();
    let inputs = [mk(-2.0, 2.0), mk(-0.2, 1.2), mk(-4.0, -0.5)];
    let targets: Vec<usize> = (0..b).map(|_| rng.random_range(0..q)).collect();
    let run = |inputs: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let nll = g.custom(
            &vars,
            Box::new(DlmNll {
                grid,
                targets: targets.clone(),
            }),
        );
        let loss = g.sum(nll);
        (g, vars, loss)
    };
    let (g, vars, loss) = run(&inputs);
    let grads = g.backward_all(loss).unwrap();
    let value = g.value(loss).item();
    let mut worst: f64 = 0.0;
    for which in 0..3 {
        let analytic = grads.get(vars[which]).unwrap().clone();
        let numeric = richardson_difference(
            |x| {
                let mut ins = inputs.to_vec();
                ins[which] = Tensor::new(&[b, k], x.to_vec()).unwrap();
                let (g, _, l) = run(&ins);
                g.value(l).item()
            },
            inputs[which].data(),
            &(0..b * k).collect::<Vec<_>>(),
            1e-4,
        );
        for (a, n) in analytic.data().iter().zip(numeric) {
            worst = worst.max(relative_error_scaled(*a, n, value));
        }
    }
    worst
}

/// Worst relative error of the full training loss over random parameter
/// coordinates of a freshly initialized model.
fn full_loss_error(trial: u64) -> f64 {
    let desc = SynthDescriptor::builtin();
    let b = batch(&desc, &[100 + 2 * trial, 101 + 2 * trial]);
    let m = model(trial);
    let mut rng = ChaCha8Rng::seed_from_u64(3000 + trial);
    let eps = m.sample_eps(2, &mut rng);
    let beta = rng.random_range(0.1..1.0);
    let (loss, grads) = m.loss_and_grads(&b, Some(&eps), beta, 0).unwrap();
    let ids: Vec<_> = m.store().ids().collect();
    let mut worst: f64 = 0.0;
    for _ in 0..8 {
        let id = ids[rng.random_range(0..ids.len())];
        let t = m.store().get(id).clone();
        let i = rng.random_range(0..t.len());
        let mut probe = m.clone();
        let f = |x: &[f64]| {
            *probe.store_mut().get_mut(id) = Tensor::new(t.shape(), x.to_vec()).unwrap();
            probe.loss(&b, Some(&eps), beta).unwrap().total
        };
        let num = richardson_difference(f, t.data(), &[i], 1e-4)[0];
        worst = worst.max(relative_error_scaled(grads.get(id).data()[i], num, loss.total));
    }
    worst
}

fn gradient_suite() -> Outcome {
    let layers = layer_suite(10);
    let mut failed: Vec<String> = layers
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} {:.1e}", r.name, r.worst))
        .collect();
    let layer_worst = layers.iter().map(|r| r.worst).fold(0.0, f64::max);
    let dlm_worst = (0..10).map(dlm_op_error).fold(0.0, f64::max);
    if dlm_worst > LAYER_TOL {
        failed.push(format!("dlm_nll {dlm_worst:.1e}"));
    }
    let loss_worst = (0..10).map(full_loss_error).fold(0.0, f64::max);
    if loss_worst > 1e-4 {
        failed.push(format!("full loss {loss_worst:.1e}"));
    }
    outcome(
        failed.is_empty(),
        format!(
            "{} layer checks worst {layer_worst:.1e}, dlm op {dlm_worst:.1e}, full loss {loss_worst:.1e}{}",
            layers.len(),
            if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
        ),
    )
}

fn kl_monte_carlo(mu: &[f64], log_var: &[f64], n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let mut total = 0.0;
    let mut eps = vec![0.0; mu.len()];
    for _ in 0..n {
        for e in eps.iter_mut() {
            *e = standard_normal(rng);
        }
        let z = reparameterize(mu, log_var, &eps);
        total += (0..mu.len())
            .map(|d| -0.5 * log_var[d] - 0.5 * eps[d] * eps[d] + 0.5 * z[d] * z[d])
            .sum::<f64>();
    }
    total / n as f64
}

fn kl_oracle() -> Outcome {
    let mut exact_ok = kl_divergence(&[0.0; 8], &[0.0; 8]) == 0.0;
    exact_ok &= (kl_divergence(&[1.0, 0.0], &[0.0, 0.0]) - 0.5).abs() <= 1e-9;
    let expected = 0.5 * (4.0 - 1.0 - 4f64.ln());
    exact_ok &= (kl_divergence(&[0.0], &[4f64.ln()]) - expected).abs() <= 1e-9;
    exact_ok &= (expected - 0.80685).abs() < 1e-5;

    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let mu: Vec<f64> = (0..8).map(|_| rng.random_range(-1.5..1.5)).collect();
        let lv: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let exact = kl_divergence(&mu, &lv);
        let mc = kl_monte_carlo(&mu, &lv, 1_000_000, &mut rng);
        worst = worst.max((mc - exact).abs() / exact);
    }
    outcome(
        exact_ok && worst < 0.02,
        format!("closed-form cases {}, worst Monte Carlo deviation {:.3}%", if exact_ok { "exact" } else { "WRONG" }, 100.0 * worst),
    )
}

fn metric_oracles() -> Outcome {
    let alt: Vec<f64> = (0..9).map(|t| (t % 2) as f64).collect();
    let quad: Vec<f64> = (0..9).map(|t| (t * t) as f64).collect();
    let mut bump = vec![0.0; 9];
    bump[4] = 1.0;
    let affine: Vec<f64> = (0..9).map(|t| 1.5 - 0.25 * t as f64).collect();
    let checks = [
        ("smoothness alternating", smoothness(&alt).unwrap(), 2.0),
        ("smoothness quadratic", smoothness(&quad).unwrap(), 2.0),
        ("nonlinearity quadratic", nonlinearity(&quad).unwrap(), (1092.0f64 / 9.0).sqrt()),
        ("nonlinearity bump", nonlinearity(&bump).unwrap(), (1.0f64 / 9.0).sqrt()),
    ];
    let mut bad: Vec<&str> = checks.iter().filter(|c| (c.1 - c.2).abs() > 1e-9).map(|c| c.0).collect();
    if smoothness(&affine).unwrap() != 0.0 || nonlinearity(&affine).unwrap() != 0.0 {
        bad.push("affine");
    }
    let failed = if bad.is_empty() { String::new() } else { format!("; failed: {}", bad.join(", ")) };
    outcome(bad.is_empty(), format!("{} hand-derived values and the affine case{failed}", checks.len()))
}

fn brute_force_p(differences: &[f64]) -> f64 {
    let sr = signed_ranks(differences);
    let n = sr.n;
    let hits = (0u64..1 << n)
        .filter(|mask| (0..n).filter(|i| mask >> i & 1 == 1).map(|i| sr.ranks[i]).sum::<f64>() <= sr.w_plus + 1e-9)
        .count();
    hits as f64 / (1u64 << n) as f64
}

fn wilcoxon() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut exact_worst: f64 = 0.0;
    let mut datasets = 0;
    for n in 1..=12usize {
        for trial in 0..100 {
            let shift = rng.random_range(-1.0..1.0);
            let ties = trial % 3 == 0;
            let d: Vec<f64> = (0..n)
                .map(|_| {
                    let x: f64 = rng.random_range(-2.0..2.0) + shift;
                    if ties {
                        (x * 2.0).round() / 2.0
                    } else {
                        x
                    }
                })
                .collect();
            if d.iter().all(|&x| x == 0.0) {
                continue;
            }
            datasets += 1;
            exact_worst = exact_worst.max((wilcoxon_exact(&d).unwrap() - brute_force_p(&d)).abs());
        }
    }
    let mut normal_worst: f64 = 0.0;
    for trial in 0..100 {
        let shift = 0.02 * trial as f64 - 1.0;
        let d: Vec<f64> = (0..20).map(|_| rng.random_range(-1.5..1.5) + shift).collect();
        normal_worst = normal_worst.max((wilcoxon_exact(&d).unwrap() - wilcoxon_normal(&d).unwrap()).abs());
    }
    outcome(
        exact_worst < 1e-12 && normal_worst < 0.01,
        format!("{datasets} datasets n ≤ 12 worst {exact_worst:.1e}; normal at n = 20 worst {normal_worst:.4}"),
    )
}

fn encoder_ablation() -> Outcome {
    let desc = SynthDescriptor::builtin();
    let b = batch(&desc, &[1, 2, 3, 4]);
    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        let m = model(seed);
        let bi = m.encode_with_mode(&b, EncoderMode::Bimodal).unwrap();
        let po = m.encode_with_mode(&b, EncoderMode::PresetOnly).unwrap();
        let sm = m.encode_with_mode(&b, EncoderMode::SoundMatching).unwrap();
        for i in 0..b.len() {
            for d in 0..bi[i].mu.len() {
                worst = worst.max((bi[i].mu[d] - po[i].mu[d] - sm[i].mu[d]).abs());
                worst = worst.max((bi[i].log_var[d] - po[i].log_var[d] - sm[i].log_var[d]).abs());
            }
        }
    }
    outcome(worst <= 1e-9, format!("3 models x 4 items, worst deviation {worst:.1e}"))
}

fn reference_invariants() -> Outcome {
    let desc = SynthDescriptor::builtin();
    let mut endpoints_exact = true;
    let mut worst: f64 = 0.0;
    for pair in 0..50u64 {
        let a = sample_random_preset(&desc, 2 * pair);
        let b = sample_random_preset(&desc, 2 * pair + 1);
        let seq = interpolate_reference(&desc, &a, &b, 9).unwrap();
        endpoints_exact &= seq.steps[0].preset == a && seq.steps[8].preset == b;
        let raw = reference_trajectory(&desc, &a, &b, 9, Span::default()).unwrap();
        for p in desc.numerical_indices() {
            for t in 1..8 {
                worst = worst.max((raw[t + 1][p] - 2.0 * raw[t][p] + raw[t - 1][p]).abs());
            }
        }
    }
    outcome(
        endpoints_exact && worst < 1e-12,
        format!("50 pairs, endpoints {}, worst second difference {worst:.1e}", if endpoints_exact { "exact" } else { "DIFFER" }),
    )
}

fn bessel_j(n: u32, x: f64) -> f64 {
    let mut term = (x / 2.0).powi(n as i32) / (1..=n).map(f64::from).product::<f64>();
    let mut sum = 0.0;
    for k in 0..40u32 {
        sum += term;
        term *= -(x * x / 4.0) / (f64::from(k + 1) * f64::from(n + k + 1));
    }
    sum
}

fn steady_operator(ratio: f64, amplitude: f64, mod_index: f64, cfg: &RenderConfig) -> Operator {
    Operator {
        ratio,
        amplitude,
        envelope: Envelope {
            attack: 0.001,
            decay: 0.001,
            sustain: 1.0,
            release: 0.1,
            note_off: cfg.note_off(),
        },
        mod_index,
    }
}

/// Carrier at 4 f0 modulated by one operator at f0; operators 3 and 4 are
/// silent free carriers.
fn two_operator_fm(mod_index: f64, cfg: &RenderConfig) -> Vec<f64> {
    let ops = [
        steady_operator(4.0, 1.0, mod_index, cfg),
        steady_operator(1.0, 1.0, 0.0, cfg),
        steady_operator(1.0, 0.0, 0.0, cfg),
        steady_operator(1.0, 0.0, 0.0, cfg),
    ];
    let wave = render_operators(&algorithm_graph(6).unwrap(), &ops, cfg);
    let start = (0.05 * cfg.sample_rate) as usize;
    wave.samples[start..start + 8192].to_vec()
}

/// Amplitude of the sinusoid at `freq` from a Hann-weighted projection.
fn amplitude_at(x: &[f64], freq: f64, sample_rate: f64) -> f64 {
    let n = x.len();
    let (mut re, mut im, mut wsum) = (0.0, 0.0, 0.0);
    for (i, v) in x.iter().enumerate() {
        let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos();
        let ph = 2.0 * std::f64::consts::PI * freq * i as f64 / sample_rate;
        re += w * v * ph.cos();
        im += w * v * ph.sin();
        wsum += w;
    }
    2.0 * (re * re + im * im).sqrt() / wsum
}

fn fm_sidebands() -> Outcome {
    let cfg = RenderConfig::default();
    let f0 = cfg.note_frequency;
    let x = two_operator_fm(1.0, &cfg);
    let mut worst: f64 = 0.0;
    for n in 0..=3u32 {
        let expected = bessel_j(n, 1.0).abs();
        for side in [-1.0, 1.0] {
            let got = amplitude_at(&x, f0 * (4.0 + side * f64::from(n)), cfg.sample_rate);
            worst = worst.max((got - expected).abs() / expected);
        }
    }

    let pure = two_operator_fm(0.0, &cfg);
    let n = pure.len();
    let bins: Vec<f64> = (0..n / 2)
        .map(|k| amplitude_at(&pure, k as f64 * cfg.sample_rate / n as f64, cfg.sample_rate))
        .collect();
    let peak = (0..bins.len()).max_by(|&a, &b| bins[a].total_cmp(&bins[b])).unwrap();
    let spur = bins
        .iter()
        .enumerate()
        .filter(|(k, _)| k.abs_diff(peak) > 5)
        .map(|(_, v)| *v)
        .fold(0.0, f64::max);
    let spur_db = 20.0 * (spur / bins[peak]).log10();
    outcome(
        worst <= 0.10 && spur_db <= -40.0,
        format!("sidebands |n| ≤ 3 worst deviation {:.2}%; zero index largest off-peak bin {spur_db:.1} dB", 100.0 * worst),
    )
}

fn overfit_smoke() -> Outcome {
    let desc = SynthDescriptor::builtin();
    let corpus = Corpus::build(&desc, 64, 1).unwrap();
    let cfg = TrainConfig {
        epochs: 380,
        batch_size: 64,
        learning_rate: 3e-3,
        lr_schedule: LrSchedule::Cosine,
        adam_beta1: 0.5,
        weight_average: Some(0.95),
        seed: 0,
        ..TrainConfig::default()
    };
    let run = train(&desc, &corpus, &cfg, RunOptions::default()).unwrap();
    let m = evaluate_reconstruction(&run.last, &corpus, Split::Train).unwrap();
    let warmup = (cfg.warmup_fraction * cfg.epochs as f64).ceil() as usize;
    let after: Vec<_> = run.history.iter().filter(|r| r.epoch > warmup).collect();
    let improving = after.windows(2).filter(|w| w[1].train.total < w[0].train.total).count();
    let transitions = after.len() - 1;
    let rate = improving as f64 / transitions as f64;
    outcome(
        m.categorical_accuracy >= 0.9 && m.numerical_within_one_step >= 0.8 && rate >= 0.9,
        format!(
            "{} train items: categorical {:.3}, numerical within one step {:.3}, improving {improving}/{transitions}",
            m.items, m.categorical_accuracy, m.numerical_within_one_step
        ),
    )
}

fn spinterp(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_spinterp"))
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn pipeline(dir: &Path, epochs: &str) -> Result<String, String> {
    spinterp(dir, &["dataset", "--n", "2000", "--seed", "0", "--out", "corpus.bin"])?;
    spinterp(dir, &["train", "--corpus", "corpus.bin", "--epochs", epochs, "--seed", "0", "--out", "run"])?;
    spinterp(
        dir,
        &["eval-interp", "--checkpoint", "run/best.ckpt", "--corpus", "corpus.bin", "--pairs", "50", "--steps", "9", "--seed", "0", "--out", "eval"],
    )
}

fn end_to_end() -> Outcome {
    let epochs = std::env::var("SPINTERP_E2E_EPOCHS").unwrap_or_else(|_| "10".into());
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut summary = String::new();
    for d in &dirs {
        match pipeline(d.path(), &epochs) {
            Ok(s) => summary = s,
            Err(e) => return outcome(false, e),
        }
    }
    let read = |i: usize, f: &str| std::fs::read(dirs[i].path().join("eval").join(f)).unwrap();
    let identical = ["report.csv", "report.txt"].iter().all(|f| read(0, f) == read(1, f));

    let csv = String::from_utf8(read(0, "report.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let per_metric = |m: &str| rows.iter().filter(|r| r[0] == m).count();
    let text = String::from_utf8(read(0, "report.txt")).unwrap();
    let structured = csv.starts_with("metric,feature,candidate_mean,reference_mean,variation_pct,p_value,improved\n")
        && per_metric("smoothness") == 24
        && per_metric("nonlinearity") == 24
        && text.contains("smooth. improved")
        && text.contains("nonlin. var %");

    let candidate = text.lines().find(|l| l.starts_with("latent")).unwrap_or("").trim().to_string();
    println!("INFO end-to-end directional result ({epochs} epochs, not gated): {candidate}");
    outcome(
        identical && structured,
        format!(
            "{epochs} epochs, reports {}, structure {}; {}",
            if identical { "byte-identical" } else { "DIFFER" },
            if structured { "ok" } else { "BAD" },
            summary.lines().next().unwrap_or("")
        ),
    )
}

fn main() {
    let criteria = [
        Criterion { name: "dlm normalization", limit: Duration::from_secs(10), run: dlm_normalization },
        Criterion { name: "gradient suite", limit: Duration::from_secs(120), run: gradient_suite },
        Criterion { name: "kl oracle", limit: Duration::from_secs(60), run: kl_oracle },
        Criterion { name: "metric oracles", limit: Duration::from_secs(1), run: metric_oracles },
        Criterion { name: "wilcoxon", limit: Duration::from_secs(30), run: wilcoxon },
        Criterion { name: "encoder ablation identity", limit: Duration::from_secs(10), run: encoder_ablation },
        Criterion { name: "reference invariants", limit: Duration::from_secs(10), run: reference_invariants },
        Criterion { name: "fm sidebands", limit: Duration::from_secs(30), run: fm_sidebands },
        Criterion { name: "overfit smoke training", limit: Duration::from_secs(600), run: overfit_smoke },
        Criterion { name: "end-to-end determinism", limit: Duration::from_secs(3600), run: end_to_end },
    ];
    let only = std::env::var("SPINTERP_ACCEPTANCE_ONLY").unwrap_or_default();
    let mut failed = Vec::new();
    for c in criteria.iter().filter(|c| c.name.contains(only.as_str())) {
        let start = Instant::now();
        let o = (c.run)();
        let elapsed = start.elapsed();
        let in_time = elapsed <= c.limit;
        let pass = o.passed && in_time;
        println!(
            "{} {}: {} [{:.1} s, limit {} s{}]",
            if pass { "PASS" } else { "FAIL" },
            c.name,
            o.detail,
            elapsed.as_secs_f64(),
            c.limit.as_secs(),
            if in_time { "" } else { ", too slow" }
        );
        if !pass {
            failed.push(c.name);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
