//! Minibatch training with validation, checkpointing and resume.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use spinterp_nn::{adam_step, AdamConfig, AdamState, Checkpoint, NamedTensor, Tensor, TrainingSection};

use crate::corpus::{Corpus, Split};
use crate::error::{Error, Result};
use crate::model::{LossBreakdown, ModelConfig, SpinVae};
use crate::schema::SynthDescriptor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from the base rate to zero over all steps.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Decay of an exponential moving average of the weights. When set, the
    /// averaged weights are the ones evaluated, recorded and checkpointed.
    pub weight_average: Option<f64>,
    pub seed: u64,
    /// Fraction of all optimizer steps over which beta ramps up from 0.
    pub warmup_fraction: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::Constant,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            weight_average: None,
            seed: 0,
            warmup_fraction: 0.25,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive (got {})", self.learning_rate)));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1) (got {b})")));
            }
        }
        if let Some(d) = self.weight_average {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::Config(format!("weight_average must lie in [0, 1) (got {d})")));
            }
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warm-up fraction must lie in [0, 1] (got {})",
                self.warmup_fraction
            )));
        }
        self.model.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub beta: f64,
    pub train: LossBreakdown,
    pub validation: LossBreakdown,
}

pub const HISTORY_HEADER: &str =
    "epoch,beta,train_total,train_kl,train_audio,train_preset,val_total,val_kl,val_audio,val_preset";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in history {
        let (t, v) = (r.train, r.validation);
        out.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}\n",
            r.epoch, r.beta, t.total, t.kl, t.audio_nll, t.preset_nll, v.total, v.kl, v.audio_nll, v.preset_nll
        ));
    }
    out
}

/// Trainer state stored alongside the weights so a run can resume.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct TrainingMetadata {
    config: TrainConfig,
    history: Vec<EpochRecord>,
    best_epoch: Option<usize>,
    best_validation: Option<f64>,
}

pub struct TrainOutcome {
    /// Weights with the lowest validation total (the initialization when no
    /// epoch ran).
    pub best: SpinVae,
    pub last: SpinVae,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

/// Where checkpoints and the loss history go. Files: `best.ckpt`,
/// `last.ckpt`, `history.csv`.
#[derive(Clone, Debug)]
pub struct OutputDir(pub PathBuf);

impl OutputDir {
    pub fn best(&self) -> PathBuf {
        self.0.join("best.ckpt")
    }

    pub fn last(&self) -> PathBuf {
        self.0.join("last.ckpt")
    }

    pub fn history(&self) -> PathBuf {
        self.0.join("history.csv")
    }
}

fn beta_at(cfg: &TrainConfig, step: u64, total_steps: u64) -> f64 {
    let warm = cfg.warmup_fraction * total_steps as f64;
    if warm <= 0.0 {
        cfg.model.beta
    } else {
        cfg.model.beta * (step as f64 / warm).min(1.0)
    }
}

fn epoch_rngs(seed: u64, epoch: usize) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut shuffle = ChaCha8Rng::seed_from_u64(seed);
    shuffle.set_stream(2 * epoch as u64);
    let mut noise = ChaCha8Rng::seed_from_u64(seed);
    noise.set_stream(2 * epoch as u64 + 1);
    (shuffle, noise)
}

/// Loss averaged over a split with `z = mu` and the given beta.
pub fn evaluate_loss(model: &SpinVae, corpus: &Corpus, split: Split, beta: f64, batch_size: usize) -> Result<LossBreakdown> {
    let items = corpus.indices(split);
    if items.is_empty() {
        return Ok(LossBreakdown::default());
    }
    let mut acc = LossBreakdown::default();
    for chunk in items.chunks(batch_size.max(1)) {
        let l = model.loss(&corpus.batch(chunk)?, None, beta)?;
        accumulate(&mut acc, &l, chunk.len() as f64);
    }
    Ok(scaled(acc, 1.0 / items.len() as f64))
}

fn accumulate(acc: &mut LossBreakdown, l: &LossBreakdown, weight: f64) {
    acc.total += weight * l.total;
    acc.kl += weight * l.kl;
    acc.audio_nll += weight * l.audio_nll;
    acc.preset_nll += weight * l.preset_nll;
}

fn scaled(l: LossBreakdown, f: f64) -> LossBreakdown {
    LossBreakdown {
        total: l.total * f,
        kl: l.kl * f,
        audio_nll: l.audio_nll * f,
        preset_nll: l.preset_nll * f,
    }
}

/// Learning rate for the optimizer step with the given index.
pub fn learning_rate_at(cfg: &TrainConfig, step: u64, total_steps: u64) -> f64 {
    match cfg.lr_schedule {
        LrSchedule::Constant => cfg.learning_rate,
        LrSchedule::Cosine => {
            let frac = step as f64 / total_steps.max(1) as f64;
            0.5 * cfg.learning_rate * (1.0 + (std::f64::consts::PI * frac.min(1.0)).cos())
        }
    }
}

fn training_section(model: &SpinVae, raw: Option<&SpinVae>, adam: &AdamState, meta: &TrainingMetadata) -> TrainingSection {
    let mut tensors = Vec::with_capacity(3 * adam.first_moment.len());
    if let Some(raw) = raw {
        for (_, name, t) in raw.store().iter() {
            tensors.push(NamedTensor {
                name: format!("raw.{name}"),
                tensor: t.clone(),
            });
        }
    }
    for (i, (id, name, _)) in model.store().iter().enumerate() {
        debug_assert_eq!(id.index(), i);
        tensors.push(NamedTensor {
            name: format!("adam.m.{name}"),
            tensor: adam.first_moment[i].clone(),
        });
        tensors.push(NamedTensor {
            name: format!("adam.v.{name}"),
            tensor: adam.second_moment[i].clone(),
        });
    }
    TrainingSection {
        epochs_completed: meta.history.len() as u64,
        optimizer_step: adam.step,
        metadata: serde_json::to_string(meta).expect("metadata serialises"),
        tensors,
    }
}

fn find_tensor(section: &TrainingSection, key: &str, like: &Tensor) -> Result<Tensor> {
    let found = section
        .tensors
        .iter()
        .find(|n| n.name == key)
        .ok_or_else(|| Error::Config(format!("checkpoint lacks training tensor `{key}`")))?;
    if found.tensor.shape() != like.shape() {
        return Err(Error::Shape(format!("training tensor `{key}` has the wrong shape")));
    }
    Ok(found.tensor.clone())
}

/// Un-averaged weights saved next to averaged ones.
fn restore_raw(published: &SpinVae, section: &TrainingSection) -> Result<SpinVae> {
    let mut raw = published.clone();
    let ids: Vec<_> = published.store().ids().collect();
    for id in ids {
        let key = format!("raw.{}", published.store().name(id));
        *raw.store_mut().get_mut(id) = find_tensor(section, &key, published.store().get(id))?;
    }
    Ok(raw)
}

fn update_average(avg: &mut SpinVae, model: &SpinVae, decay: f64) {
    for id in model.store().ids() {
        let src = model.store().get(id).data();
        for (a, &x) in avg.store_mut().get_mut(id).data_mut().iter_mut().zip(src) {
            *a = decay * *a + (1.0 - decay) * x;
        }
    }
}

fn restore_adam(model: &SpinVae, section: &TrainingSection) -> Result<AdamState> {
    let mut adam = AdamState::new(model.store());
    adam.step = section.optimizer_step;
    for (i, (_, name, t)) in model.store().iter().enumerate() {
        adam.first_moment[i] = find_tensor(section, &format!("adam.m.{name}"), t)?;
        adam.second_moment[i] = find_tensor(section, &format!("adam.v.{name}"), t)?;
    }
    Ok(adam)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions<'a> {
    /// Write both checkpoints and the history here after every epoch.
    pub out: Option<&'a OutputDir>,
    /// Continue from a `last.ckpt` written by an earlier run with the same
    /// configuration.
    pub resume: Option<&'a Path>,
    /// Stop once this many epochs are complete, as if interrupted.
    pub stop_after: Option<usize>,
}

/// Trains on the corpus's training split.
pub fn train(descriptor: &SynthDescriptor, corpus: &Corpus, cfg: &TrainConfig, run: RunOptions<'_>) -> Result<TrainOutcome> {
    let RunOptions { out, resume, stop_after } = run;
    cfg.validate()?;
    corpus.check_descriptor(descriptor)?;
    let train_items = corpus.indices(Split::Train);
    if train_items.is_empty() {
        return Err(Error::InsufficientData("training split is empty".into()));
    }

    let mut model = SpinVae::new(descriptor, cfg.model.clone())?;
    let mut adam = AdamState::new(model.store());
    let mut meta = TrainingMetadata {
        config: cfg.clone(),
        history: Vec::new(),
        best_epoch: None,
        best_validation: None,
    };
    // With weight averaging `avg` holds the published weights and `model`
    // the optimizer's.
    let mut avg = cfg.weight_average.map(|_| model.clone());
    let mut best = model.clone();
    if let Some(path) = resume {
        let (loaded, ck) = SpinVae::load(path)?;
        loaded.check_descriptor(descriptor)?;
        let section = ck
            .training
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} has no training state", path.display())))?;
        let prior: TrainingMetadata = serde_json::from_str(&section.metadata)?;
        if prior.config != *cfg {
            return Err(Error::Config("resume requires the original training configuration".into()));
        }
        adam = restore_adam(&loaded, section)?;
        if avg.is_some() {
            model = restore_raw(&loaded, section)?;
            avg = Some(loaded);
        } else {
            model = loaded;
        }
        meta = prior;
        if let Some(dir) = out {
            if meta.best_epoch.is_some() && dir.best().exists() {
                best = SpinVae::load(&dir.best())?.0;
            }
        }
    }

    let steps_per_epoch = train_items.len().div_ceil(cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let full_beta = cfg.model.beta;
    let has_validation = !corpus.indices(Split::Validation).is_empty();

    let until = stop_after.map_or(cfg.epochs, |n| n.min(cfg.epochs));
    for epoch in meta.history.len()..until {
        let (mut shuffle, mut noise) = epoch_rngs(cfg.seed, epoch);
        let mut order = train_items.clone();
        order.shuffle(&mut shuffle);
        let mut beta = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = corpus.batch(chunk)?;
            beta = beta_at(cfg, adam.step, total_steps);
            let eps = model.sample_eps(chunk.len(), &mut noise);
            let (_, grads) = model.loss_and_grads(&batch, Some(&eps), beta, adam.step)?;
            let opt = AdamConfig {
                learning_rate: learning_rate_at(cfg, adam.step, total_steps),
                beta1: cfg.adam_beta1,
                beta2: cfg.adam_beta2,
                ..AdamConfig::default()
            };
            adam_step(model.store_mut(), &grads, &mut adam, &opt);
            if let (Some(a), Some(decay)) = (avg.as_mut(), cfg.weight_average) {
                update_average(a, &model, decay);
            }
        }
        let published = avg.as_ref().unwrap_or(&model);
        // Recorded with z = mu after the epoch's last update, so the history
        // is free of sampling noise.
        let train_loss = evaluate_loss(published, corpus, Split::Train, beta, cfg.batch_size)?;
        let validation = evaluate_loss(published, corpus, Split::Validation, full_beta, cfg.batch_size)?;
        meta.history.push(EpochRecord {
            epoch: epoch + 1,
            beta,
            train: train_loss,
            validation,
        });
        let score = if has_validation { validation.total } else { train_loss.total };
        if meta.best_validation.is_none_or(|b| score < b) {
            meta.best_validation = Some(score);
            meta.best_epoch = Some(epoch + 1);
            best = published.clone();
            if let Some(dir) = out {
                save(&best, &dir.best(), None)?;
            }
        }
        if let Some(dir) = out {
            write_last(dir, &model, avg.as_ref(), &adam, &meta)?;
        }
    }

    if let Some(dir) = out {
        if meta.best_epoch.is_none() {
            save(&best, &dir.best(), None)?;
        }
        write_last(dir, &model, avg.as_ref(), &adam, &meta)?;
    }
    Ok(TrainOutcome {
        best,
        last: avg.unwrap_or(model),
        history: meta.history,
        best_epoch: meta.best_epoch,
    })
}

fn write_last(dir: &OutputDir, model: &SpinVae, avg: Option<&SpinVae>, adam: &AdamState, meta: &TrainingMetadata) -> Result<()> {
    let section = match avg {
        Some(a) => training_section(a, Some(model), adam, meta),
        None => training_section(model, None, adam, meta),
    };
    save(avg.unwrap_or(model), &dir.last(), Some(section))?;
    write_history(&dir.history(), &meta.history)
}

fn save(model: &SpinVae, path: &Path, section: Option<TrainingSection>) -> Result<()> {
    model.save(path, section)
}

fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    std::fs::write(path, history_csv(history)).map_err(|e| Error::file(path, e))
}

/// Loss history recorded in a checkpoint's training section.
pub fn checkpoint_history(ck: &Checkpoint) -> Result<Vec<EpochRecord>> {
    match &ck.training {
        None => Ok(Vec::new()),
        Some(s) => Ok(serde_json::from_str::<TrainingMetadata>(&s.metadata)?.history),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionMetrics {
    pub items: usize,
    pub categorical_accuracy: f64,
    /// Fraction of numerical values decoded within one grid step.
    pub numerical_within_one_step: f64,
    /// Mean squared error of the decoded spectrogram per pixel.
    pub audio_mse: f64,
}

/// Encodes each item with `z = mu`, decodes, and compares with the truth.
pub fn evaluate_reconstruction(model: &SpinVae, corpus: &Corpus, split: Split) -> Result<ReconstructionMetrics> {
    model.check_descriptor_hash(&corpus.descriptor_hash)?;
    let desc = model.descriptor();
    let items = corpus.indices(split);
    let (mut cat_ok, mut cat_n, mut num_ok, mut num_n) = (0usize, 0usize, 0usize, 0usize);
    let mut sq = 0.0;
    let mut pixels = 0usize;
    for chunk in items.chunks(64) {
        let batch = corpus.batch(chunk)?;
        let codes = model.encode(&batch)?;
        let zs: Vec<Vec<f64>> = codes.into_iter().map(|c| c.mu).collect();
        let decoded = model.decode_preset(&zs)?;
        let audio = model.decode_audio(&zs)?;
        for (k, &item) in chunk.iter().enumerate() {
            let truth = &corpus.records[item].preset;
            let guess = decoded[k].to_preset(desc);
            for (i, spec) in desc.params.iter().enumerate() {
                match spec.grid() {
                    None => {
                        cat_n += 1;
                        cat_ok += (truth.class(i) == guess.class(i)) as usize;
                    }
                    Some(grid) => {
                        num_n += 1;
                        let steps = (grid.index_of(truth.get(i)).expect("on grid") as i64
                            - grid.index_of(guess.get(i)).expect("on grid") as i64)
                            .abs();
                        num_ok += (steps <= 1) as usize;
                    }
                }
            }
            let target = corpus.spectrogram(item);
            sq += audio[k].data.iter().zip(&target.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            pixels += target.data.len();
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(ReconstructionMetrics {
        items: items.len(),
        categorical_accuracy: ratio(cat_ok, cat_n),
        numerical_within_one_step: ratio(num_ok, num_n),
        audio_mse: if pixels == 0 { 0.0 } else { sq / pixels as f64 },
    })
}
