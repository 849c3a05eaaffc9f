//! Generated preset corpora with cached spectrograms and a fixed
//! train/validation/test split.
//!
//! File layout: a UTF-8 header, one preset line per item, a split line,
//! then `data <count>` followed by the spectrograms as little-endian f64.
//!
//! ```text
//! spinterp-corpus/1
//! descriptor <sha256 hex>
//! seed <u64>
//! count <n>
//! render <sample_rate> <duration> <note_frequency>
//! spectrogram <n_fft> <hop> <n_frames> <n_mels> <f_min> <f_max> <log_scale>
//! <id> <seed> <v_0> ... <v_{P-1}>      (n lines)
//! split <one of t/v/x per item>
//! data <n * n_mels * n_frames>
//! ```

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::parallel::parallel_map;
use crate::prior::sample_random_preset;
use crate::schema::{parse_preset_line, serialize_presets, PresetRecord, SynthDescriptor};
use crate::spectrum::{mel_spectrogram, SpecConfig, Spectrogram};
use crate::synth::{render, RenderConfig};

pub const CORPUS_SCHEMA: &str = "spinterp-corpus/1";
pub const MIN_CORPUS_SIZE: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    fn code(self) -> char {
        match self {
            Split::Train => 't',
            Split::Validation => 'v',
            Split::Test => 'x',
        }
    }

    fn from_code(c: char) -> Option<Self> {
        match c {
            't' => Some(Split::Train),
            'v' => Some(Split::Validation),
            'x' => Some(Split::Test),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// 80/10/10 by count: validation and test each get `n / 10`, training the
/// rest. Assignment follows a seeded permutation of the item order.
pub fn assign_splits(n: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    order.shuffle(&mut rng);
    let held = n / 10;
    let mut splits = vec![Split::Train; n];
    for &i in &order[..held] {
        splits[i] = Split::Validation;
    }
    for &i in &order[held..2 * held] {
        splits[i] = Split::Test;
    }
    splits
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub descriptor_hash: [u8; 32],
    pub seed: u64,
    pub render: RenderConfig,
    pub spec: SpecConfig,
    pub records: Vec<PresetRecord>,
    pub splits: Vec<Split>,
    /// `len * n_mels * n_frames` values, item-major.
    pub spectrograms: Vec<f64>,
}

impl Corpus {
    pub fn build(descriptor: &SynthDescriptor, n: usize, seed: u64) -> Result<Self> {
        Self::build_with(descriptor, n, seed, RenderConfig::default(), SpecConfig::default())
    }

    pub fn build_with(
        descriptor: &SynthDescriptor,
        n: usize,
        seed: u64,
        render_cfg: RenderConfig,
        spec: SpecConfig,
    ) -> Result<Self> {
        if n < MIN_CORPUS_SIZE {
            return Err(Error::InsufficientData(format!(
                "corpus needs at least {MIN_CORPUS_SIZE} presets, asked for {n}"
            )));
        }
        render_cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records: Vec<PresetRecord> = (0..n as u64)
            .map(|id| {
                let preset_seed: u64 = rng.random();
                PresetRecord {
                    id,
                    seed: preset_seed,
                    preset: sample_random_preset(descriptor, preset_seed),
                }
            })
            .collect();
        let specs = parallel_map(&records, |r| -> Result<Spectrogram> {
            let w = render(descriptor, &r.preset, &render_cfg)
                .map_err(|e| Error::Config(format!("rendering preset {} failed: {e}", r.id)))?;
            mel_spectrogram(&w, &spec, &render_cfg)
        });
        let mut spectrograms = Vec::with_capacity(n * spec.n_mels * spec.n_frames);
        for s in specs {
            spectrograms.extend_from_slice(&s?.data);
        }
        Ok(Self {
            descriptor_hash: descriptor.hash(),
            seed,
            render: render_cfg,
            spec,
            records,
            splits: assign_splits(n, seed),
            spectrograms,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn spec_len(&self) -> usize {
        self.spec.n_mels * self.spec.n_frames
    }

    pub fn spectrogram(&self, item: usize) -> Spectrogram {
        let len = self.spec_len();
        Spectrogram {
            n_mels: self.spec.n_mels,
            n_frames: self.spec.n_frames,
            data: self.spectrograms[item * len..(item + 1) * len].to_vec(),
        }
    }

    /// Item positions in a split, in corpus order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn check_descriptor(&self, descriptor: &SynthDescriptor) -> Result<()> {
        if self.descriptor_hash != descriptor.hash() {
            return Err(Error::DescriptorMismatch {
                expected: hex::encode(self.descriptor_hash),
                found: descriptor.hash_hex(),
            });
        }
        Ok(())
    }

    pub fn batch(&self, items: &[usize]) -> Result<Batch> {
        if self.spec.n_mels != self.spec.n_frames {
            return Err(Error::Shape(format!(
                "model input must be square, corpus has {}x{}",
                self.spec.n_mels, self.spec.n_frames
            )));
        }
        let len = self.spec_len();
        let mut data = Vec::with_capacity(items.len() * len);
        for &i in items {
            data.extend_from_slice(&self.spectrograms[i * len..(i + 1) * len]);
        }
        let presets = items.iter().map(|&i| self.records[i].preset.clone()).collect();
        Batch::from_flat(presets, self.spec.n_mels, data)
    }

    pub fn to_bytes(&self, descriptor: &SynthDescriptor) -> Vec<u8> {
        let s = &self.spec;
        let r = &self.render;
        let mut out = Vec::new();
        let header = format!(
            "{CORPUS_SCHEMA}\ndescriptor {}\nseed {}\ncount {}\nrender {:?} {:?} {:?}\n\
             spectrogram {} {} {} {} {:?} {:?} {:?}\n",
            hex::encode(self.descriptor_hash),
            self.seed,
            self.len(),
            r.sample_rate,
            r.duration,
            r.note_frequency,
            s.n_fft,
            s.hop,
            s.n_frames,
            s.n_mels,
            s.f_min,
            s.f_max,
            s.log_scale,
        );
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(serialize_presets(descriptor, &self.records).as_bytes());
        let split: String = self.splits.iter().map(|s| s.code()).collect();
        out.extend_from_slice(format!("split {split}\ndata {}\n", self.spectrograms.len()).as_bytes());
        for v in &self.spectrograms {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(descriptor: &SynthDescriptor, bytes: &[u8]) -> Result<Self> {
        let mut reader = LineReader { bytes, pos: 0, line: 0 };
        let schema = reader.line()?;
        if schema != CORPUS_SCHEMA {
            return Err(reader.error(format!("expected `{CORPUS_SCHEMA}`, found `{schema}`")));
        }
        let hash_hex = reader.field("descriptor")?;
        let hash = hex::decode(&hash_hex)
            .ok()
            .and_then(|h| <[u8; 32]>::try_from(h).ok())
            .ok_or_else(|| reader.error(format!("bad descriptor hash `{hash_hex}`")))?;
        if hash != descriptor.hash() {
            return Err(Error::DescriptorMismatch {
                expected: hash_hex,
                found: descriptor.hash_hex(),
            });
        }
        let seed = reader.parse_field::<u64>("seed")?;
        let count = reader.parse_field::<usize>("count")?;
        let render_fields = reader.numbers::<f64>("render", 3)?;
        let render = RenderConfig {
            sample_rate: render_fields[0],
            duration: render_fields[1],
            note_frequency: render_fields[2],
        };
        let sf = reader.numbers::<f64>("spectrogram", 7)?;
        let spec = SpecConfig {
            n_fft: sf[0] as usize,
            hop: sf[1] as usize,
            n_frames: sf[2] as usize,
            n_mels: sf[3] as usize,
            f_min: sf[4],
            f_max: sf[5],
            log_scale: sf[6],
        };
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let text = reader.line()?;
            records.push(parse_preset_line(descriptor, &text, reader.line)?);
        }
        let split_text = reader.field("split")?;
        let splits = split_text
            .chars()
            .map(|c| Split::from_code(c).ok_or_else(|| reader.error(format!("bad split code `{c}`"))))
            .collect::<Result<Vec<_>>>()?;
        if splits.len() != count {
            return Err(reader.error(format!("split has {} entries for {count} items", splits.len())));
        }
        let n_values = reader.parse_field::<usize>("data")?;
        let expected = count * spec.n_mels * spec.n_frames;
        let rest = &bytes[reader.pos..];
        if n_values != expected || rest.len() != 8 * expected {
            return Err(reader.error(format!(
                "spectrogram block holds {} bytes, header promises {n_values} values, shape implies {expected}",
                rest.len()
            )));
        }
        let spectrograms = rest
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(Self {
            descriptor_hash: hash,
            seed,
            render,
            spec,
            records,
            splits,
            spectrograms,
        })
    }

    pub fn write(&self, descriptor: &SynthDescriptor, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
        f.write_all(&self.to_bytes(descriptor)).map_err(|e| Error::file(path, e))
    }

    pub fn read(descriptor: &SynthDescriptor, path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(descriptor, &bytes)
    }

    pub fn sha256_hex(&self, descriptor: &SynthDescriptor) -> String {
        hex::encode(Sha256::digest(self.to_bytes(descriptor)))
    }
}

struct LineReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    line: usize,
}

impl LineReader<'_> {
    fn error(&self, message: String) -> Error {
        Error::Parse {
            line: self.line,
            message,
        }
    }

    fn line(&mut self) -> Result<String> {
        self.line += 1;
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| self.error("unexpected end of header".into()))?;
        self.pos += end + 1;
        String::from_utf8(rest[..end].to_vec()).map_err(|_| self.error("header is not UTF-8".into()))
    }

    fn field(&mut self, key: &str) -> Result<String> {
        let line = self.line()?;
        match line.split_once(' ') {
            Some((k, v)) if k == key => Ok(v.to_string()),
            _ => Err(self.error(format!("expected `{key} ...`, found `{line}`"))),
        }
    }

    fn parse_field<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let v = self.field(key)?;
        v.parse().map_err(|_| self.error(format!("bad {key} `{v}`")))
    }

    fn numbers<T: std::str::FromStr>(&mut self, key: &str, n: usize) -> Result<Vec<T>> {
        let v = self.field(key)?;
        let out: Vec<T> = v
            .split_whitespace()
            .map(|x| x.parse().map_err(|_| self.error(format!("bad {key} value `{x}`"))))
            .collect::<Result<_>>()?;
        if out.len() != n {
            return Err(self.error(format!("{key} needs {n} values, found {}", out.len())));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_counts() {
        for (n, expect) in [(1000, (800, 100, 100)), (64, (52, 6, 6)), (10, (8, 1, 1)), (2000, (1600, 200, 200))] {
            let s = assign_splits(n, 3);
            let count = |k| s.iter().filter(|&&x| x == k).count();
            assert_eq!((count(Split::Train), count(Split::Validation), count(Split::Test)), expect);
        }
        assert_eq!(assign_splits(100, 1), assign_splits(100, 1));
        assert_ne!(assign_splits(100, 1), assign_splits(100, 2));
    }

    #[test]
    fn round_trip_and_determinism() {
        let d = SynthDescriptor::builtin();
        let c = Corpus::build(&d, 12, 5).unwrap();
        let bytes = c.to_bytes(&d);
        assert_eq!(Corpus::build(&d, 12, 5).unwrap().to_bytes(&d), bytes);
        let back = Corpus::from_bytes(&d, &bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(&d), bytes);
        let mut truncated = bytes.clone();
        truncated.pop();
        assert!(Corpus::from_bytes(&d, &truncated).is_err());
    }

    #[test]
    fn too_small_is_rejected() {
        assert!(Corpus::build(&SynthDescriptor::builtin(), 9, 0).is_err());
    }

    #[test]
    fn batch_shapes() {
        let d = SynthDescriptor::builtin();
        let c = Corpus::build(&d, 10, 1).unwrap();
        let b = c.batch(&[0, 3]).unwrap();
        assert_eq!(b.spectrograms.shape(), &[2, 1, 64, 64]);
        assert_eq!(b.presets[1], c.records[3].preset);
        assert_eq!(&b.spectrograms.data()[4096..], &c.spectrogram(3).data[..]);
    }
}
