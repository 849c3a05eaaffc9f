//! The bimodal VAE.
//!
//! Presets are embedded as one token per parameter plus two learnable tokens
//! whose Transformer outputs give the preset branch's `(mu, log var)`. A
//! strided CNN gives the audio branch's pair; the two are added. The preset
//! decoder lets a learned query sequence cross-attend to memory tokens
//! projected from `z`, and a CNN decodes the spectrogram.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use spinterp_nn::{
    gaussian_nll, kl_standard_normal, AttentionConfig, Checkpoint, Conv2d, ConvBlock, DecoderLayer,
    EncoderLayer, Gradients, Graph, LayerNorm, Linear, NnError, ParamId, ParamStore, Tensor,
    TrainingSection, Var,
};

use crate::dlm::{mode_bin, DlmNll, DlmParams};
use crate::error::{Error, Result};
use crate::schema::{ensure_valid, ParamKind, Preset, SynthDescriptor};
use crate::spectrum::Spectrogram;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    Bimodal,
    PresetOnly,
    SoundMatching,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NumericalHead {
    Dlm,
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub width: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ff_hidden: usize,
    pub memory_tokens: usize,
    pub mixture_components: usize,
    pub numerical_head: NumericalHead,
    pub mode: EncoderMode,
    pub beta: f64,
    /// Channels after each stride-2 encoder block; the decoder mirrors them.
    pub cnn_channels: Vec<usize>,
    /// Side of the square spectrogram input.
    pub spec_size: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            width: 32,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            ff_hidden: 64,
            memory_tokens: 1,
            mixture_components: 3,
            numerical_head: NumericalHead::Dlm,
            mode: EncoderMode::Bimodal,
            beta: 2e-3,
            cnn_channels: vec![8, 16, 32, 32],
            spec_size: 64,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(2..=4).contains(&self.mixture_components) {
            return bad(format!(
                "mixture components must be 2, 3 or 4 (got {})",
                self.mixture_components
            ));
        }
        if self.latent_dim == 0 || self.width == 0 || self.memory_tokens == 0 || self.ff_hidden == 0 {
            return bad("latent_dim, width, memory_tokens and ff_hidden must be positive".into());
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad(format!("width {} not divisible by {} heads", self.width, self.heads));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be finite and non-negative (got {})", self.beta));
        }
        if self.cnn_channels.is_empty() {
            return bad("cnn_channels must not be empty".into());
        }
        let factor = 1usize << self.cnn_channels.len();
        if !self.spec_size.is_multiple_of(factor) || self.spec_size / factor == 0 {
            return bad(format!(
                "spec_size {} must be a multiple of 2^{}",
                self.spec_size,
                self.cnn_channels.len()
            ));
        }
        Ok(())
    }

    fn bottleneck_side(&self) -> usize {
        self.spec_size >> self.cnn_channels.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
    pub z: Vec<f64>,
}

/// `z = mu + exp(log_var / 2) * eps`.
pub fn reparameterize(mu: &[f64], log_var: &[f64], eps: &[f64]) -> Vec<f64> {
    mu.iter()
        .zip(log_var)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect()
}

/// `KL(N(mu, exp(log_var)) || N(0, I))`.
pub fn kl_divergence(mu: &[f64], log_var: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(log_var)
        .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

#[derive(Clone, Debug, PartialEq)]
pub enum HeadOutput {
    Categorical(Vec<f64>),
    Dlm(DlmParams),
    /// Numerical parameter decoded as `Q` classes.
    Softmax(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodedPreset {
    pub heads: Vec<HeadOutput>,
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..xs.len() {
        if xs[i] > xs[best] {
            best = i;
        }
    }
    best
}

impl DecodedPreset {
    /// Categorical argmax, DLM mode, or softmax argmax, each placed on the
    /// parameter's grid.
    pub fn to_preset(&self, descriptor: &SynthDescriptor) -> Preset {
        let values = descriptor
            .params
            .iter()
            .zip(&self.heads)
            .map(|(spec, head)| match (&spec.kind, head) {
                (ParamKind::Categorical { .. }, HeadOutput::Categorical(l)) => argmax(l) as f64,
                (ParamKind::Numerical { grid }, HeadOutput::Dlm(p)) => grid.value(mode_bin(p, *grid)),
                (ParamKind::Numerical { grid }, HeadOutput::Softmax(l)) => grid.value(argmax(l)),
                _ => unreachable!("heads are built from the descriptor"),
            })
            .collect();
        Preset::new(values)
    }
}

/// Model inputs for a minibatch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub presets: Vec<Preset>,
    /// `[B, 1, S, S]`.
    pub spectrograms: Tensor,
}

impl Batch {
    pub fn new(presets: Vec<Preset>, spectrograms: &[&Spectrogram]) -> Result<Self> {
        if presets.len() != spectrograms.len() || presets.is_empty() {
            return Err(Error::Shape(format!(
                "batch needs matching non-empty presets and spectrograms ({} vs {})",
                presets.len(),
                spectrograms.len()
            )));
        }
        let s = spectrograms[0].n_mels;
        let mut data = Vec::with_capacity(presets.len() * s * s);
        for sp in spectrograms {
            if sp.n_mels != s || sp.n_frames != s {
                return Err(Error::Shape(format!(
                    "spectrograms must be {s}x{s}, found {}x{}",
                    sp.n_mels, sp.n_frames
                )));
            }
            data.extend_from_slice(&sp.data);
        }
        Self::from_flat(presets, s, data)
    }

    pub fn from_flat(presets: Vec<Preset>, side: usize, data: Vec<f64>) -> Result<Self> {
        let b = presets.len();
        let spectrograms = Tensor::new(&[b, 1, side, side], data)?;
        Ok(Self {
            presets,
            spectrograms,
        })
    }

    pub fn len(&self) -> usize {
        self.presets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.presets.is_empty()
    }
}

/// Per-item averages over a batch. `total = beta * kl + audio_nll + preset_nll`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub kl: f64,
    pub audio_nll: f64,
    pub preset_nll: f64,
}

pub struct LossVars {
    pub total: Var,
    pub kl: Var,
    pub audio_nll: Option<Var>,
    pub preset_nll: Var,
    pub mu: Var,
    pub log_var: Var,
}

#[derive(Clone)]
enum Head {
    Categorical { linear: Linear },
    Dlm { linear: Linear, grid: crate::schema::QuantGrid },
    Softmax { linear: Linear },
}

#[derive(Clone)]
pub struct SpinVae {
    config: ModelConfig,
    descriptor: SynthDescriptor,
    store: ParamStore,

    position: ParamId,
    value_weight: ParamId,
    class_table: ParamId,
    class_offsets: Vec<Option<usize>>,
    total_classes: usize,
    e_mu: ParamId,
    e_sigma: ParamId,
    encoder: Vec<EncoderLayer>,
    encoder_norm: LayerNorm,
    mu_token: Linear,
    log_var_token: Linear,

    cnn_encoder: Vec<ConvBlock>,
    cnn_head: Linear,

    audio_in: Linear,
    audio_blocks: Vec<ConvBlock>,
    audio_out: Conv2d,

    memory: Linear,
    queries: ParamId,
    decoder: Vec<DecoderLayer>,
    decoder_norm: LayerNorm,
    heads: Vec<Head>,
}

/// Output-layer weights start small so initial predictions are close to
/// the bias values.
const HEAD_INIT_SCALE: f64 = 0.1;

/// Initial scale of every DLM component.
const DLM_INIT_SCALE: f64 = 0.1;

impl SpinVae {
    pub fn new(descriptor: &SynthDescriptor, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let p = descriptor.num_params();
        let d = config.width;
        let dz = config.latent_dim;
        let attn = AttentionConfig {
            width: d,
            heads: config.heads,
            layers: config.encoder_layers,
        };

        let position = store.uniform("embed.position", &[p, d], 0.1, &mut rng);
        let value_weight = store.uniform("embed.value", &[p, d], 1.0, &mut rng);
        let mut class_offsets = Vec::with_capacity(p);
        let mut total_classes = 0;
        for spec in &descriptor.params {
            match spec.kind {
                ParamKind::Categorical { num_classes } => {
                    class_offsets.push(Some(total_classes));
                    total_classes += num_classes;
                }
                ParamKind::Numerical { .. } => class_offsets.push(None),
            }
        }
        let class_table = store.uniform("embed.class", &[total_classes.max(1), d], 1.0, &mut rng);
        let e_mu = store.uniform("embed.e_mu", &[1, d], 1.0, &mut rng);
        let e_sigma = store.uniform("embed.e_sigma", &[1, d], 1.0, &mut rng);
        let encoder = (0..config.encoder_layers)
            .map(|l| EncoderLayer::new(&mut store, &format!("enc.{l}"), &attn, config.ff_hidden, &mut rng))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let encoder_norm = LayerNorm::new(&mut store, "enc.norm", d);
        let mu_token = Linear::new(&mut store, "enc.mu", d, dz, &mut rng);
        let log_var_token = Linear::new(&mut store, "enc.log_var", d, dz, &mut rng);

        let mut cnn_encoder = Vec::new();
        let mut in_ch = 1;
        for (i, &ch) in config.cnn_channels.iter().enumerate() {
            cnn_encoder.push(ConvBlock::new(&mut store, &format!("cnn_enc.{i}"), in_ch, ch, 2, false, &mut rng));
            in_ch = ch;
        }
        cnn_encoder.push(ConvBlock::new(&mut store, "cnn_enc.res", in_ch, in_ch, 1, false, &mut rng));
        let side = config.bottleneck_side();
        let flat = in_ch * side * side;
        let cnn_head = Linear::new(&mut store, "cnn_enc.head", flat, 2 * dz, &mut rng);

        let audio_in = Linear::new(&mut store, "cnn_dec.in", dz, flat, &mut rng);
        let mut audio_blocks = vec![ConvBlock::new(&mut store, "cnn_dec.res", in_ch, in_ch, 1, false, &mut rng)];
        let mut ch = in_ch;
        let rev: Vec<usize> = config.cnn_channels.iter().rev().cloned().collect();
        // One fewer upsampling block than encoder stages; the output conv
        // performs the last doubling.
        for (i, &next) in rev.iter().skip(1).enumerate() {
            audio_blocks.push(ConvBlock::new(&mut store, &format!("cnn_dec.{i}"), ch, next, 1, true, &mut rng));
            ch = next;
        }
        let audio_out = Conv2d::new(&mut store, "cnn_dec.out", ch, 1, 3, &mut rng);

        let memory = Linear::new(&mut store, "dec.memory", dz, config.memory_tokens * d, &mut rng);
        let queries = store.uniform("dec.queries", &[p, d], 1.0, &mut rng);
        let dec_attn = AttentionConfig {
            layers: config.decoder_layers,
            ..attn
        };
        let decoder = (0..config.decoder_layers)
            .map(|l| DecoderLayer::new(&mut store, &format!("dec.{l}"), &dec_attn, config.ff_hidden, &mut rng))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let decoder_norm = LayerNorm::new(&mut store, "dec.norm", d);

        let k = config.mixture_components;
        let mut heads = Vec::with_capacity(p);
        for spec in &descriptor.params {
            let name = format!("head.{}", spec.index);
            let head = match (spec.kind.clone(), config.numerical_head) {
                (ParamKind::Categorical { num_classes }, _) => Head::Categorical {
                    linear: Linear::new(&mut store, &name, d, num_classes, &mut rng),
                },
                (ParamKind::Numerical { grid }, NumericalHead::Softmax) => Head::Softmax {
                    linear: Linear::new(&mut store, &name, d, grid.steps(), &mut rng),
                },
                (ParamKind::Numerical { grid }, NumericalHead::Dlm) => {
                    let linear = Linear::new(&mut store, &name, d, 3 * k, &mut rng);
                    let bias = store.get_mut(linear.bias).data_mut();
                    for i in 0..k {
                        bias[k + i] = 0.1 + 0.8 * i as f64 / (k - 1) as f64;
                        bias[2 * k + i] = DLM_INIT_SCALE.ln();
                    }
                    Head::Dlm { linear, grid }
                }
            };
            let w = match &head {
                Head::Categorical { linear } | Head::Dlm { linear, .. } | Head::Softmax { linear } => linear.weight,
            };
            for x in store.get_mut(w).data_mut() {
                *x *= HEAD_INIT_SCALE;
            }
            heads.push(head);
        }

        Ok(Self {
            config,
            descriptor: descriptor.clone(),
            store,
            position,
            value_weight,
            class_table,
            class_offsets,
            total_classes,
            e_mu,
            e_sigma,
            encoder,
            encoder_norm,
            mu_token,
            log_var_token,
            cnn_encoder,
            cnn_head,
            audio_in,
            audio_blocks,
            audio_out,
            memory,
            queries,
            decoder,
            decoder_norm,
            heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn descriptor(&self) -> &SynthDescriptor {
        &self.descriptor
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn set_mode(&mut self, mode: EncoderMode) {
        self.config.mode = mode;
    }

    /// Errors unless `descriptor` matches the one the model was built for.
    pub fn check_descriptor(&self, descriptor: &SynthDescriptor) -> Result<()> {
        self.check_descriptor_hash(&descriptor.hash())
    }

    pub fn check_descriptor_hash(&self, hash: &[u8; 32]) -> Result<()> {
        if *hash != self.descriptor.hash() {
            return Err(Error::DescriptorMismatch {
                expected: self.descriptor.hash_hex(),
                found: hex::encode(hash),
            });
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let s = self.config.spec_size;
        let expect = [batch.len(), 1, s, s];
        if batch.spectrograms.shape() != expect {
            return Err(Error::Shape(format!(
                "spectrogram batch has shape {:?}, model expects {expect:?}",
                batch.spectrograms.shape()
            )));
        }
        for p in &batch.presets {
            ensure_valid(&self.descriptor, p)?;
        }
        Ok(())
    }

    /// Token sequence `[B, P + 2, d]`: parameter tokens then `e_mu`, `e_sigma`.
    pub fn embed(&self, g: &mut Graph, presets: &[Preset]) -> Var {
        let b = presets.len();
        let p = self.descriptor.num_params();
        let d = self.config.width;
        let c = self.total_classes.max(1);

        let mut one_hot = vec![0.0; b * p * c];
        let mut values = vec![0.0; b * p * d];
        for (bi, preset) in presets.iter().enumerate() {
            for (i, offset) in self.class_offsets.iter().enumerate() {
                let row = bi * p + i;
                match offset {
                    Some(o) => one_hot[row * c + o + preset.class(i)] = 1.0,
                    None => values[row * d..(row + 1) * d].fill(preset.get(i)),
                }
            }
        }
        let one_hot = g.constant(Tensor::new(&[b * p, c], one_hot).expect("sized above"));
        let values = g.constant(Tensor::new(&[b, p * d], values).expect("sized above"));

        let table = g.param(&self.store, self.class_table);
        let class_part = g.matmul(one_hot, table);
        let class_part = g.reshape(class_part, &[b, p * d]);
        let pos = g.param(&self.store, self.position);
        let pos = g.reshape(pos, &[p * d]);
        let w = g.param(&self.store, self.value_weight);
        let w = g.reshape(w, &[p * d]);
        let value_part = g.mul_row(values, w);
        let tokens = g.add_row(class_part, pos);
        let tokens = g.add(tokens, value_part);
        let tokens = g.reshape(tokens, &[b, p, d]);

        let e_mu = g.param(&self.store, self.e_mu);
        let e_sigma = g.param(&self.store, self.e_sigma);
        let extra = g.concat(&[e_mu, e_sigma], 1);
        let ones = g.constant(Tensor::full(&[b, 1], 1.0));
        let extra = g.matmul(ones, extra);
        let extra = g.reshape(extra, &[b, 2, d]);
        g.concat(&[tokens, extra], 1)
    }

    fn preset_branch(&self, g: &mut Graph, presets: &[Preset]) -> Result<(Var, Var)> {
        let b = presets.len();
        let p = self.descriptor.num_params();
        let d = self.config.width;
        let mut x = self.embed(g, presets);
        for layer in &self.encoder {
            x = layer.forward(g, &self.store, x)?;
        }
        let x = self.encoder_norm.forward(g, &self.store, x);
        let t_mu = g.narrow(x, 1, p, 1);
        let t_mu = g.reshape(t_mu, &[b, d]);
        let t_sigma = g.narrow(x, 1, p + 1, 1);
        let t_sigma = g.reshape(t_sigma, &[b, d]);
        Ok((
            self.mu_token.forward(g, &self.store, t_mu),
            self.log_var_token.forward(g, &self.store, t_sigma),
        ))
    }

    fn audio_branch(&self, g: &mut Graph, spectrograms: &Tensor) -> Result<(Var, Var)> {
        let b = spectrograms.shape()[0];
        let dz = self.config.latent_dim;
        let mut h = g.constant(spectrograms.clone());
        for block in &self.cnn_encoder {
            h = block.forward(g, &self.store, h)?;
        }
        let flat: usize = g.shape(h)[1..].iter().product();
        let h = g.reshape(h, &[b, flat]);
        let out = self.cnn_head.forward(g, &self.store, h);
        Ok((g.narrow(out, 1, 0, dz), g.narrow(out, 1, dz, dz)))
    }

    /// Posterior parameters `(mu, log var)`, each `[B, D]`, for `mode`.
    pub fn encode_graph(&self, g: &mut Graph, batch: &Batch, mode: EncoderMode) -> Result<(Var, Var)> {
        self.check_batch(batch)?;
        match mode {
            EncoderMode::PresetOnly => self.preset_branch(g, &batch.presets),
            EncoderMode::SoundMatching => self.audio_branch(g, &batch.spectrograms),
            EncoderMode::Bimodal => {
                let (mu_p, lv_p) = self.preset_branch(g, &batch.presets)?;
                let (mu_a, lv_a) = self.audio_branch(g, &batch.spectrograms)?;
                Ok((g.add(mu_p, mu_a), g.add(lv_p, lv_a)))
            }
        }
    }

    /// Predicted spectrograms `[B, 1, S, S]`.
    pub fn decode_audio_graph(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let b = g.shape(z)[0];
        let side = self.config.bottleneck_side();
        let ch = *self.config.cnn_channels.last().expect("validated non-empty");
        let h = self.audio_in.forward(g, &self.store, z);
        let mut h = g.reshape(h, &[b, ch, side, side]);
        for block in &self.audio_blocks {
            h = block.forward(g, &self.store, h)?;
        }
        let h = g.upsample2x(h);
        Ok(self.audio_out.forward(g, &self.store, h))
    }

    /// One head output per parameter, each `[B, out_i]`.
    pub fn decode_preset_graph(&self, g: &mut Graph, z: Var) -> Result<Vec<Var>> {
        let b = g.shape(z)[0];
        let p = self.descriptor.num_params();
        let d = self.config.width;
        let m = self.config.memory_tokens;
        let mem = self.memory.forward(g, &self.store, z);
        let mem = g.reshape(mem, &[b, m, d]);
        let q = g.param(&self.store, self.queries);
        let q = g.reshape(q, &[1, p * d]);
        let ones = g.constant(Tensor::full(&[b, 1], 1.0));
        let q = g.matmul(ones, q);
        let mut h = g.reshape(q, &[b, p, d]);
        for layer in &self.decoder {
            h = layer.forward(g, &self.store, h, mem)?;
        }
        let h = self.decoder_norm.forward(g, &self.store, h);
        let h = g.reshape(h, &[b, p * d]);
        Ok(self
            .heads
            .iter()
            .enumerate()
            .map(|(i, head)| {
                let token = g.narrow(h, 1, i * d, d);
                match head {
                    Head::Categorical { linear } | Head::Dlm { linear, .. } | Head::Softmax { linear } => {
                        linear.forward(g, &self.store, token)
                    }
                }
            })
            .collect())
    }

    fn preset_nll_graph(&self, g: &mut Graph, outputs: &[Var], presets: &[Preset]) -> Var {
        let k = self.config.mixture_components;
        let mut terms = Vec::with_capacity(outputs.len());
        for (i, (head, &out)) in self.heads.iter().zip(outputs).enumerate() {
            let nll = match head {
                Head::Categorical { .. } => {
                    let targets: Vec<usize> = presets.iter().map(|p| p.class(i)).collect();
                    g.cross_entropy(out, &targets)
                }
                Head::Softmax { .. } => {
                    let grid = self.descriptor.params[i].grid().expect("numerical");
                    let targets: Vec<usize> = presets.iter().map(|p| grid.nearest_index(p.get(i))).collect();
                    g.cross_entropy(out, &targets)
                }
                Head::Dlm { grid, .. } => {
                    let targets: Vec<usize> = presets.iter().map(|p| grid.nearest_index(p.get(i))).collect();
                    let logits = g.narrow(out, 1, 0, k);
                    let means = g.narrow(out, 1, k, k);
                    let scales = g.narrow(out, 1, 2 * k, k);
                    g.custom(&[logits, means, scales], Box::new(DlmNll { grid: *grid, targets }))
                }
            };
            terms.push(g.sum(nll));
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = g.add(total, t);
        }
        total
    }

    /// Builds the loss on `g`. `eps` is `[B, D]` standard-normal noise; pass
    /// `None` for `z = mu`.
    pub fn loss_graph(&self, g: &mut Graph, batch: &Batch, eps: Option<&Tensor>, beta: f64) -> Result<LossVars> {
        let b = batch.len();
        let (mu, log_var) = self.encode_graph(g, batch, self.config.mode)?;
        let z = match eps {
            None => mu,
            Some(e) => {
                if e.shape() != [b, self.config.latent_dim] {
                    return Err(Error::Shape(format!(
                        "eps has shape {:?}, expected [{b}, {}]",
                        e.shape(),
                        self.config.latent_dim
                    )));
                }
                let half = g.scale(log_var, 0.5);
                let std = g.exp(half);
                let e = g.constant(e.clone());
                let noise = g.mul(std, e);
                g.add(mu, noise)
            }
        };
        let inv_b = 1.0 / b as f64;
        let kl = kl_standard_normal(g, mu, log_var);
        let kl = g.scale(kl, inv_b);
        let outputs = self.decode_preset_graph(g, z)?;
        let preset_nll = self.preset_nll_graph(g, &outputs, &batch.presets);
        let preset_nll = g.scale(preset_nll, inv_b);
        let weighted_kl = g.scale(kl, beta);
        let audio_nll = match self.config.mode {
            EncoderMode::PresetOnly => None,
            _ => {
                let x_hat = self.decode_audio_graph(g, z)?;
                let a = gaussian_nll(g, x_hat, &batch.spectrograms)?;
                Some(g.scale(a, inv_b))
            }
        };
        let total = match audio_nll {
            Some(a) => g.add(weighted_kl, a),
            None => weighted_kl,
        };
        let total = g.add(total, preset_nll);
        Ok(LossVars {
            total,
            kl,
            audio_nll,
            preset_nll,
            mu,
            log_var,
        })
    }

    fn breakdown(g: &Graph, vars: &LossVars, step: u64) -> Result<LossBreakdown> {
        let value = |v: Var| g.value(v).item();
        let out = LossBreakdown {
            total: value(vars.total),
            kl: value(vars.kl),
            audio_nll: vars.audio_nll.map(value).unwrap_or(0.0),
            preset_nll: value(vars.preset_nll),
        };
        for (term, v) in [
            ("kl", out.kl),
            ("audio_nll", out.audio_nll),
            ("preset_nll", out.preset_nll),
            ("total", out.total),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    term: term.to_string(),
                    step,
                });
            }
        }
        if let Err(NnError::NonFinite { op, node }) = g.check_finite() {
            return Err(Error::NonFinite {
                term: format!("intermediate `{op}` (node {node})"),
                step,
            });
        }
        Ok(out)
    }

    /// Loss with `z = mu + sigma * eps` (or `z = mu` when `eps` is `None`).
    pub fn loss(&self, batch: &Batch, eps: Option<&Tensor>, beta: f64) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let vars = self.loss_graph(&mut g, batch, eps, beta)?;
        Self::breakdown(&g, &vars, 0)
    }

    /// Loss and parameter gradients; `step` is only used in diagnostics.
    pub fn loss_and_grads(
        &self,
        batch: &Batch,
        eps: Option<&Tensor>,
        beta: f64,
        step: u64,
    ) -> Result<(LossBreakdown, Gradients)> {
        let mut g = Graph::new();
        let vars = self.loss_graph(&mut g, batch, eps, beta)?;
        let out = Self::breakdown(&g, &vars, step)?;
        let grads = g.backward(vars.total, &self.store).map_err(|e| match e {
            NnError::NonFinite { op, node } => Error::NonFinite {
                term: format!("gradient of `{op}` (node {node})"),
                step,
            },
            other => other.into(),
        })?;
        Ok((out, grads))
    }

    /// Standard-normal noise `[B, D]`.
    pub fn sample_eps<R: Rng>(&self, batch_size: usize, rng: &mut R) -> Tensor {
        let n = batch_size * self.config.latent_dim;
        let data = (0..n).map(|_| standard_normal(rng)).collect();
        Tensor::new(&[batch_size, self.config.latent_dim], data).expect("sized above")
    }

    /// Posterior for each item under `mode`; `z` equals `mu`.
    pub fn encode_with_mode(&self, batch: &Batch, mode: EncoderMode) -> Result<Vec<LatentCode>> {
        let mut g = Graph::new();
        let (mu, log_var) = self.encode_graph(&mut g, batch, mode)?;
        g.check_finite()?;
        let dz = self.config.latent_dim;
        let mu = g.value(mu).data();
        let lv = g.value(log_var).data();
        Ok((0..batch.len())
            .map(|i| LatentCode {
                mu: mu[i * dz..(i + 1) * dz].to_vec(),
                log_var: lv[i * dz..(i + 1) * dz].to_vec(),
                z: mu[i * dz..(i + 1) * dz].to_vec(),
            })
            .collect())
    }

    pub fn encode(&self, batch: &Batch) -> Result<Vec<LatentCode>> {
        self.encode_with_mode(batch, self.config.mode)
    }

    fn z_tensor(&self, zs: &[Vec<f64>]) -> Result<Tensor> {
        let dz = self.config.latent_dim;
        if zs.is_empty() || zs.iter().any(|z| z.len() != dz) {
            return Err(Error::Shape(format!("every z must have dimension {dz}")));
        }
        Ok(Tensor::new(&[zs.len(), dz], zs.concat())?)
    }

    pub fn decode_preset(&self, zs: &[Vec<f64>]) -> Result<Vec<DecodedPreset>> {
        let zt = self.z_tensor(zs)?;
        let mut g = Graph::new();
        let z = g.constant(zt);
        let outputs = self.decode_preset_graph(&mut g, z)?;
        g.check_finite()?;
        let k = self.config.mixture_components;
        Ok((0..zs.len())
            .map(|row| DecodedPreset {
                heads: self
                    .heads
                    .iter()
                    .zip(&outputs)
                    .map(|(head, &out)| {
                        let t = g.value(out);
                        let n = t.shape()[1];
                        let r = &t.data()[row * n..(row + 1) * n];
                        match head {
                            Head::Categorical { .. } => HeadOutput::Categorical(r.to_vec()),
                            Head::Softmax { .. } => HeadOutput::Softmax(r.to_vec()),
                            Head::Dlm { .. } => HeadOutput::Dlm(
                                DlmParams::from_raw(&r[..k], &r[k..2 * k], &r[2 * k..]).expect("3K outputs"),
                            ),
                        }
                    })
                    .collect(),
            })
            .collect())
    }

    pub fn decode_audio(&self, zs: &[Vec<f64>]) -> Result<Vec<Spectrogram>> {
        let zt = self.z_tensor(zs)?;
        let mut g = Graph::new();
        let z = g.constant(zt);
        let x = self.decode_audio_graph(&mut g, z)?;
        g.check_finite()?;
        let s = self.config.spec_size;
        Ok(g.value(x)
            .data()
            .chunks(s * s)
            .map(|c| Spectrogram {
                n_mels: s,
                n_frames: s,
                data: c.to_vec(),
            })
            .collect())
    }

    /// Encode with `z = mu` and decode to presets on the grid.
    pub fn reconstruct(&self, batch: &Batch) -> Result<Vec<Preset>> {
        let codes = self.encode(batch)?;
        let zs: Vec<Vec<f64>> = codes.into_iter().map(|c| c.mu).collect();
        Ok(self
            .decode_preset(&zs)?
            .iter()
            .map(|d| d.to_preset(&self.descriptor))
            .collect())
    }

    pub fn to_checkpoint(&self, training: Option<TrainingSection>) -> Checkpoint {
        let config = serde_json::to_string(&CheckpointConfig {
            model: self.config.clone(),
            descriptor: self.descriptor.to_document(),
        })
        .expect("config serialises");
        Checkpoint {
            descriptor_hash: self.descriptor.hash(),
            config,
            tensors: Checkpoint::tensors_from_store(&self.store),
            training,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: CheckpointConfig = serde_json::from_str(&ck.config)?;
        let descriptor = SynthDescriptor::load(&cfg.descriptor)?;
        if descriptor.hash() != ck.descriptor_hash {
            return Err(Error::DescriptorMismatch {
                expected: hex::encode(ck.descriptor_hash),
                found: descriptor.hash_hex(),
            });
        }
        let mut model = Self::new(&descriptor, cfg.model)?;
        ck.load_into(&mut model.store)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path, training: Option<TrainingSection>) -> Result<()> {
        let bytes = self.to_checkpoint(training).to_bytes();
        std::fs::write(path, bytes).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, Checkpoint)> {
        let ck = read_checkpoint(path)?;
        Ok((Self::from_checkpoint(&ck)?, ck))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    Ok(Checkpoint::from_bytes(&bytes)?)
}

#[derive(Serialize, Deserialize)]
struct CheckpointConfig {
    model: ModelConfig,
    descriptor: String,
}

/// Box-Muller; deterministic given the generator state.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.random();
        if u1 > 0.0 {
            let u2: f64 = rng.random();
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}
