//! Command-line interface: argument definitions and the command bodies.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use spinterp::corpus::{Corpus, Split, MIN_CORPUS_SIZE};
use spinterp::interp::{build_pair_set, Method, DEFAULT_STEPS};
use spinterp::model::{EncoderMode, NumericalHead, SpinVae};
use spinterp::report::{evaluate_interpolation, features_csv, parse_features_csv, report_from_features, EvalOptions, InterpReport};
use spinterp::schema::{parse_presets, PresetRecord, SynthDescriptor};
use spinterp::synth::render;
use spinterp::train::{evaluate_reconstruction, train, LrSchedule, OutputDir, RunOptions, TrainConfig};

use crate::error::{CliError, CliResult};
use crate::manifest::{sidecar, ManifestBuilder};

#[derive(Debug, Parser)]
#[command(name = "spinterp", version, about = "Preset interpolation with a bimodal VAE on a four-operator FM synth")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample, render and split a preset corpus.
    Dataset(DatasetArgs),
    /// Train a model on a corpus.
    Train(TrainArgs),
    /// Compare latent and reference interpolation on test-split pairs.
    EvalInterp(EvalArgs),
    /// Render presets to WAV files.
    Render(RenderArgs),
    /// Serve the interpolation HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// Synth descriptor (TOML); the built-in descriptor when omitted.
    #[arg(long)]
    pub descriptor: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Corpus file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Bimodal,
    PresetOnly,
    SoundMatching,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum HeadArg {
    Dlm,
    Softmax,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ScheduleArg {
    Constant,
    Cosine,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Directory for `best.ckpt`, `last.ckpt`, `history.csv` and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Training configuration (TOML, or JSON when the name ends in `.json`).
    /// Flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub descriptor: Option<PathBuf>,
    /// Continue from a `last.ckpt` of an interrupted run with the same
    /// configuration.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many epochs; the run can be resumed later.
    #[arg(long)]
    pub stop_after: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long, value_enum)]
    pub lr_schedule: Option<ScheduleArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub weight_average: Option<f64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    pub numerical_head: Option<HeadArg>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MethodArg {
    Latent,
    Reference,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Latent => Method::Latent,
            MethodArg::Reference => Method::Reference,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "from_features")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, required_unless_present = "from_features")]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub pairs: usize,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub steps: usize,
    /// Seed of the pair draw from the test split.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Method compared against the reference.
    #[arg(long, value_enum, default_value_t = MethodArg::Latent)]
    pub candidate: MethodArg,
    /// Skip writing WAV files and sequence manifests.
    #[arg(long)]
    pub no_audio: bool,
    /// Rebuild the report from a cached `features.csv` without the model.
    #[arg(long)]
    pub from_features: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Preset document, one `id seed values...` record per line.
    #[arg(long, conflicts_with = "corpus", required_unless_present = "corpus")]
    pub presets: Option<PathBuf>,
    /// Render presets of a corpus split instead.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub descriptor: Option<PathBuf>,
    /// Directory receiving `<id>.wav`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Where to write the run manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command. Returns
/// the summary line printed on success.
pub fn run_from<I, T>(args: I) -> CliResult<String>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage(first_line(&e.to_string())))?;
    run(cli)
}

pub fn first_line(text: &str) -> String {
    let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
    line.trim_start_matches("error: ").trim().to_string()
}

pub fn run(cli: Cli) -> CliResult<String> {
    match cli.command {
        Command::Dataset(a) => dataset(&a),
        Command::Train(a) => train_cmd(&a),
        Command::EvalInterp(a) => eval_interp(&a),
        Command::Render(a) => render_cmd(&a),
        Command::Serve(a) => crate::server::serve(&a),
    }
}

fn require(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::missing(path))
    }
}

fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write(path: &Path, data: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, data).map_err(|e| CliError::io(path, e))
}

pub fn load_descriptor(path: Option<&Path>) -> CliResult<SynthDescriptor> {
    match path {
        None => Ok(SynthDescriptor::builtin()),
        Some(p) => {
            require(p)?;
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            SynthDescriptor::load(&text).map_err(|e| CliError::Path {
                path: p.to_path_buf(),
                message: e.to_string(),
            })
        }
    }
}

pub fn read_corpus(descriptor: &SynthDescriptor, path: &Path) -> CliResult<Corpus> {
    require(path)?;
    Ok(Corpus::read(descriptor, path)?)
}

pub fn read_checkpoint(path: &Path) -> CliResult<SpinVae> {
    require(path)?;
    Ok(SpinVae::load(path)?.0)
}

fn dataset(a: &DatasetArgs) -> CliResult<String> {
    if a.n < MIN_CORPUS_SIZE {
        return Err(CliError::Usage(format!("n ≥ {MIN_CORPUS_SIZE} required (got {})", a.n)));
    }
    let desc = load_descriptor(a.descriptor.as_deref())?;
    let config = json!({ "n": a.n, "seed": a.seed, "descriptor": desc.hash_hex() });
    let mut m = ManifestBuilder::new("dataset", config, Some(a.seed));
    if let Some(p) = &a.descriptor {
        m.input(p);
    }
    let corpus = Corpus::build(&desc, a.n, a.seed)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write(&a.out, corpus.to_bytes(&desc))?;
    m.output(&a.out);
    let manifest = m.write(&sidecar(&a.out))?;
    let [train, val, test] = [Split::Train, Split::Validation, Split::Test].map(|s| corpus.indices(s).len());
    Ok(format!(
        "wrote {} presets ({train}/{val}/{test}) to {} sha256 {}",
        corpus.len(),
        a.out.display(),
        manifest.outputs[0].sha256
    ))
}

/// Reads the optional config file and applies flag overrides.
pub fn train_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let mut cfg = match &a.config {
        None => TrainConfig::default(),
        Some(p) => {
            require(p)?;
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            let parsed = if p.extension().is_some_and(|x| x == "json") {
                serde_json::from_str(&text).map_err(|e| e.to_string())
            } else {
                toml::from_str(&text).map_err(|e| e.to_string())
            };
            parsed.map_err(|message| CliError::Path {
                path: p.clone(),
                message: first_line(&message),
            })?
        }
    };
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.lr_schedule {
        cfg.lr_schedule = match v {
            ScheduleArg::Constant => LrSchedule::Constant,
            ScheduleArg::Cosine => LrSchedule::Cosine,
        };
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.beta {
        cfg.model.beta = v;
    }
    if let Some(v) = a.weight_average {
        cfg.weight_average = Some(v);
    }
    if let Some(v) = a.mode {
        cfg.model.mode = match v {
            ModeArg::Bimodal => EncoderMode::Bimodal,
            ModeArg::PresetOnly => EncoderMode::PresetOnly,
            ModeArg::SoundMatching => EncoderMode::SoundMatching,
        };
    }
    if let Some(v) = a.numerical_head {
        cfg.model.numerical_head = match v {
            HeadArg::Dlm => NumericalHead::Dlm,
            HeadArg::Softmax => NumericalHead::Softmax,
        };
    }
    if let Some(v) = a.latent_dim {
        cfg.model.latent_dim = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(a: &TrainArgs) -> CliResult<String> {
    let cfg = train_config(a)?;
    let desc = load_descriptor(a.descriptor.as_deref())?;
    let corpus = read_corpus(&desc, &a.corpus)?;
    if let Some(r) = &a.resume {
        require(r)?;
    }
    let config = serde_json::to_value(&cfg).expect("config serialises");
    let mut m = ManifestBuilder::new("train", config, Some(cfg.seed));
    m.input(&a.corpus);
    for p in [&a.config, &a.descriptor, &a.resume].into_iter().flatten() {
        m.input(p);
    }
    create_dir(&a.out)?;
    let out = OutputDir(a.out.clone());
    let outcome = train(
        &desc,
        &corpus,
        &cfg,
        RunOptions {
            out: Some(&out),
            resume: a.resume.as_deref(),
            stop_after: a.stop_after,
        },
    )?;
    for p in [out.best(), out.last(), out.history()] {
        m.output(&p);
    }
    m.write(&a.out.join("manifest.json"))?;
    let last = outcome.history.last();
    Ok(format!(
        "trained {} epochs; last train {} validation {}; best epoch {}",
        outcome.history.len(),
        last.map_or(f64::NAN, |r| r.train.total),
        last.map_or(f64::NAN, |r| r.validation.total),
        outcome.best_epoch.map_or("none".to_string(), |e| e.to_string())
    ))
}

/// Report files written by `eval-interp`.
pub fn write_report(out: &Path, report: &InterpReport, candidate: Method, m: &mut ManifestBuilder) -> CliResult<()> {
    let csv = out.join("report.csv");
    let table = out.join("report.txt");
    write(&csv, report.to_csv())?;
    write(&table, report.to_table(candidate.name()))?;
    m.output(&csv);
    m.output(&table);
    Ok(())
}

fn eval_interp(a: &EvalArgs) -> CliResult<String> {
    let candidate: Method = a.candidate.into();
    create_dir(&a.out)?;
    if let Some(cache) = &a.from_features {
        require(cache)?;
        let text = std::fs::read_to_string(cache).map_err(|e| CliError::io(cache, e))?;
        let features = parse_features_csv(&text)?;
        let config = json!({ "candidate": candidate.name(), "from_features": true });
        let mut m = ManifestBuilder::new("eval-interp", config, None);
        m.input(cache);
        let report = report_from_features(&features, candidate)?;
        write_report(&a.out, &report, candidate, &mut m)?;
        m.write(&a.out.join("manifest.json"))?;
        return Ok(summary(&report, candidate));
    }

    let (ck_path, corpus_path) = match (&a.checkpoint, &a.corpus) {
        (Some(c), Some(k)) => (c, k),
        _ => return Err(CliError::Usage("--checkpoint and --corpus are required".into())),
    };
    let model = read_checkpoint(ck_path)?;
    let corpus = read_corpus(model.descriptor(), corpus_path)?;
    let pairs = build_pair_set(&corpus, a.pairs, a.seed)?;
    let config = json!({
        "pairs": a.pairs,
        "steps": a.steps,
        "seed": a.seed,
        "candidate": candidate.name(),
        "audio": !a.no_audio,
    });
    let mut m = ManifestBuilder::new("eval-interp", config, Some(a.seed));
    m.input(ck_path);
    m.input(corpus_path);

    let audio_dir = a.out.join("audio");
    if !a.no_audio {
        create_dir(&audio_dir)?;
    }
    let output = evaluate_interpolation(
        &model,
        &corpus,
        &pairs,
        &EvalOptions {
            steps: a.steps,
            candidate,
            audio_dir: (!a.no_audio).then_some(audio_dir.as_path()),
        },
    )?;

    let features = a.out.join("features.csv");
    write(&features, features_csv(&output.features))?;
    m.output(&features);
    let pairs_path = a.out.join("pairs.json");
    write(&pairs_path, serde_json::to_string_pretty(&pairs).expect("pairs serialise"))?;
    m.output(&pairs_path);
    let recon = evaluate_reconstruction(&model, &corpus, Split::Test)?;
    let recon_path = a.out.join("reconstruction.json");
    write(
        &recon_path,
        serde_json::to_string_pretty(&json!({
            "items": recon.items,
            "categorical_accuracy": recon.categorical_accuracy,
            "numerical_within_one_step": recon.numerical_within_one_step,
            "audio_mse": recon.audio_mse,
        }))
        .expect("metrics serialise"),
    )?;
    m.output(&recon_path);
    write_report(&a.out, &output.report, candidate, &mut m)?;
    if !a.no_audio {
        let mut files: Vec<PathBuf> = std::fs::read_dir(&audio_dir)
            .map_err(|e| CliError::io(&audio_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        files.sort();
        for f in &files {
            m.output(f);
        }
    }
    m.write(&a.out.join("manifest.json"))?;
    Ok(summary(&output.report, candidate))
}

fn summary(report: &InterpReport, candidate: Method) -> String {
    let (s, n) = (&report.smoothness_summary, &report.nonlinearity_summary);
    format!(
        "{} vs reference over {} pairs: smoothness {:+.2}% ({} improved), nonlinearity {:+.2}% ({} improved)",
        candidate.name(),
        report.pairs,
        s.average_variation_pct,
        s.improved,
        n.average_variation_pct,
        n.improved
    )
}

fn render_cmd(a: &RenderArgs) -> CliResult<String> {
    let desc = load_descriptor(a.descriptor.as_deref())?;
    let mut m = ManifestBuilder::new("render", json!({ "split": a.split, "limit": a.limit }), None);
    let (records, render_cfg): (Vec<PresetRecord>, _) = match (&a.presets, &a.corpus) {
        (Some(p), _) => {
            require(p)?;
            m.input(p);
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            (parse_presets(&desc, &text)?, Default::default())
        }
        (None, Some(c)) => {
            m.input(c);
            let corpus = read_corpus(&desc, c)?;
            let split: Split = a.split.parse()?;
            let records = corpus.indices(split).into_iter().map(|i| corpus.records[i].clone()).collect();
            (records, corpus.render)
        }
        (None, None) => return Err(CliError::Usage("one of --presets or --corpus is required".into())),
    };
    create_dir(&a.out)?;
    let take = a.limit.unwrap_or(records.len()).min(records.len());
    for r in &records[..take] {
        let path = a.out.join(format!("{}.wav", r.id));
        render(&desc, &r.preset, &render_cfg)?.write_wav(&path)?;
        m.output(&path);
    }
    m.write(&a.out.join("manifest.json"))?;
    Ok(format!("rendered {take} presets to {}", a.out.display()))
}
