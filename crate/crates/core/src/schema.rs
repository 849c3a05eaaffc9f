//! Synthesizer parameter schema, preset values, quantization and the
//! line-oriented preset format.

use std::collections::HashMap;
use std::fmt;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DESCRIPTOR_SCHEMA: &str = "spinterp-descriptor/1";

/// Tolerance for "lies on the grid".
pub const GRID_TOL: f64 = 1e-9;

const BUILTIN_MINI_FM: &str = include_str!("../assets/mini_fm.toml");

/// `Q` evenly spaced points `i / (Q - 1)` on `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct QuantGrid {
    steps: usize,
}

impl QuantGrid {
    pub fn new(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Descriptor(format!(
                "grid cardinality < 2 (got {steps})"
            )));
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn bin_width(&self) -> f64 {
        1.0 / (self.steps - 1) as f64
    }

    pub fn value(&self, index: usize) -> f64 {
        index as f64 / (self.steps - 1) as f64
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.steps).map(|i| self.value(i)).collect()
    }

    /// Index of the nearest grid point; exact ties go to the higher point.
    /// Inputs outside `[0, 1]` clamp to the end points.
    pub fn nearest_index(&self, v: f64) -> usize {
        let last = self.steps - 1;
        if v.is_nan() || v <= 0.0 {
            return 0;
        }
        if v >= 1.0 {
            return last;
        }
        let lo = ((v * last as f64).floor() as usize).min(last - 1);
        // Compare against the same values `value()` produces so that the
        // result agrees with an exhaustive scan.
        let d_lo = (v - self.value(lo)).abs();
        let d_hi = (self.value(lo + 1) - v).abs();
        if d_hi <= d_lo {
            lo + 1
        } else {
            lo
        }
    }

    pub fn quantize(&self, v: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::OutOfRange {
                what: "quantize input",
                value: v,
            });
        }
        Ok(self.value(self.nearest_index(v)))
    }

    /// Grid index of `v` if it is within [`GRID_TOL`] of a grid point.
    pub fn index_of(&self, v: f64) -> Option<usize> {
        if !v.is_finite() {
            return None;
        }
        let i = self.nearest_index(v);
        ((v - self.value(i)).abs() < GRID_TOL).then_some(i)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ParamKind {
    Categorical { num_classes: usize },
    Numerical { grid: QuantGrid },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub index: usize,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn is_categorical(&self) -> bool {
        matches!(self.kind, ParamKind::Categorical { .. })
    }

    /// Number of distinct values the parameter can take.
    pub fn cardinality(&self) -> usize {
        match self.kind {
            ParamKind::Categorical { num_classes } => num_classes,
            ParamKind::Numerical { grid } => grid.steps(),
        }
    }

    pub fn grid(&self) -> Option<QuantGrid> {
        match self.kind {
            ParamKind::Numerical { grid } => Some(grid),
            ParamKind::Categorical { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDescriptor {
    pub name: String,
    pub version: String,
    pub params: Vec<ParamSpec>,
    pub algorithm_param: usize,
    pub num_algorithms: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DescriptorDoc {
    schema: String,
    name: String,
    version: String,
    algorithm_param: String,
    num_algorithms: usize,
    #[serde(default)]
    param: Vec<ParamDoc>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamDoc {
    name: String,
    index: usize,
    kind: String,
    classes: Option<usize>,
    steps: Option<usize>,
}

impl SynthDescriptor {
    /// The shipped four-operator descriptor.
    pub fn builtin() -> Self {
        Self::load(BUILTIN_MINI_FM).expect("built-in descriptor is valid")
    }

    pub fn builtin_document() -> &'static str {
        BUILTIN_MINI_FM
    }

    /// Parses and validates a descriptor document.
    pub fn load(text: &str) -> Result<Self> {
        let doc: DescriptorDoc =
            toml::from_str(text).map_err(|e| Error::Descriptor(e.to_string().trim().to_string()))?;
        if doc.schema != DESCRIPTOR_SCHEMA {
            return Err(Error::Descriptor(format!(
                "field `schema`: expected \"{DESCRIPTOR_SCHEMA}\", found \"{}\"",
                doc.schema
            )));
        }

        let mut by_index: HashMap<usize, &str> = HashMap::new();
        let mut by_name: HashMap<&str, usize> = HashMap::new();
        let mut params = Vec::with_capacity(doc.param.len());
        for p in &doc.param {
            if let Some(other) = by_index.insert(p.index, &p.name) {
                return Err(Error::Descriptor(format!(
                    "duplicate index {} used by `{other}` and `{}`",
                    p.index, p.name
                )));
            }
            if by_name.insert(&p.name, p.index).is_some() {
                return Err(Error::Descriptor(format!("duplicate name `{}`", p.name)));
            }
            let kind = match (p.kind.as_str(), p.classes, p.steps) {
                ("categorical", Some(c), None) => {
                    if c < 2 {
                        return Err(Error::Descriptor(format!(
                            "param `{}`: cardinality < 2 (classes = {c})",
                            p.name
                        )));
                    }
                    ParamKind::Categorical { num_classes: c }
                }
                ("numerical", None, Some(q)) => {
                    let grid = QuantGrid::new(q).map_err(|_| {
                        Error::Descriptor(format!(
                            "param `{}`: cardinality < 2 (steps = {q})",
                            p.name
                        ))
                    })?;
                    ParamKind::Numerical { grid }
                }
                ("categorical", _, _) => {
                    return Err(Error::Descriptor(format!(
                        "param `{}`: categorical needs `classes` and no `steps`",
                        p.name
                    )))
                }
                ("numerical", _, _) => {
                    return Err(Error::Descriptor(format!(
                        "param `{}`: numerical needs `steps` and no `classes`",
                        p.name
                    )))
                }
                (other, _, _) => {
                    return Err(Error::Descriptor(format!(
                        "param `{}`: unknown kind `{other}`",
                        p.name
                    )))
                }
            };
            params.push(ParamSpec {
                name: p.name.clone(),
                index: p.index,
                kind,
            });
        }
        if params.is_empty() {
            return Err(Error::Descriptor("no parameters".into()));
        }
        params.sort_by_key(|p| p.index);
        for (expected, p) in params.iter().enumerate() {
            if p.index != expected {
                return Err(Error::Descriptor(format!(
                    "indices must be 0..{} without gaps; missing {expected} (next is `{}` at {})",
                    params.len() - 1,
                    p.name,
                    p.index
                )));
            }
        }

        let algorithm_param = *by_name.get(doc.algorithm_param.as_str()).ok_or_else(|| {
            Error::Descriptor(format!(
                "algorithm_param `{}` is not a declared parameter",
                doc.algorithm_param
            ))
        })?;
        match params[algorithm_param].kind {
            ParamKind::Categorical { num_classes } if num_classes == doc.num_algorithms => {}
            _ => {
                return Err(Error::Descriptor(format!(
                    "algorithm_param `{}` must be categorical with {} classes",
                    doc.algorithm_param, doc.num_algorithms
                )))
            }
        }

        Ok(Self {
            name: doc.name,
            version: doc.version,
            params,
            algorithm_param,
            num_algorithms: doc.num_algorithms,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn categorical_indices(&self) -> Vec<usize> {
        self.params
            .iter()
            .filter(|p| p.is_categorical())
            .map(|p| p.index)
            .collect()
    }

    pub fn numerical_indices(&self) -> Vec<usize> {
        self.params
            .iter()
            .filter(|p| !p.is_categorical())
            .map(|p| p.index)
            .collect()
    }

    /// Canonical document; two descriptors are equal iff their canonical
    /// documents are.
    pub fn to_document(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("schema = \"{DESCRIPTOR_SCHEMA}\"\n"));
        s.push_str(&format!("name = {:?}\n", self.name));
        s.push_str(&format!("version = {:?}\n", self.version));
        s.push_str(&format!(
            "algorithm_param = {:?}\n",
            self.params[self.algorithm_param].name
        ));
        s.push_str(&format!("num_algorithms = {}\n", self.num_algorithms));
        for p in &self.params {
            s.push_str(&format!(
                "\n[[param]]\nname = {:?}\nindex = {}\n",
                p.name, p.index
            ));
            match p.kind {
                ParamKind::Categorical { num_classes } => {
                    s.push_str(&format!("kind = \"categorical\"\nclasses = {num_classes}\n"))
                }
                ParamKind::Numerical { grid } => {
                    s.push_str(&format!("kind = \"numerical\"\nsteps = {}\n", grid.steps()))
                }
            }
        }
        s
    }

    /// SHA-256 of the canonical document.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_document().as_bytes()).into()
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash())
    }

    pub fn validate(&self, preset: &Preset) -> Vec<Violation> {
        validate_preset(self, preset)
    }
}

/// Parameter values in descriptor order. Categorical entries hold the class
/// index as an integer-valued float; numerical entries hold grid values.
#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    values: Vec<f64>,
}

impl Preset {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.values[i]
    }

    /// Class index of a categorical entry.
    pub fn class(&self, i: usize) -> usize {
        self.values[i] as usize
    }

    /// Copy with entry `i` replaced.
    pub fn with(&self, i: usize, v: f64) -> Self {
        let mut values = self.values.clone();
        values[i] = v;
        Self { values }
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    WrongLength { expected: usize, found: usize },
    OffGrid { index: usize, name: String, value: f64 },
    ClassOutOfRange { index: usize, name: String, value: f64, num_classes: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::WrongLength { expected, found } => {
                write!(f, "wrong length: expected {expected} values, found {found}")
            }
            Violation::OffGrid { index, name, value } => {
                write!(f, "off-grid at param {index} ({name}): {value}")
            }
            Violation::ClassOutOfRange {
                index,
                name,
                value,
                num_classes,
            } => write!(
                f,
                "class out of range at param {index} ({name}): {value} not in 0..{num_classes}"
            ),
        }
    }
}

pub fn validate_preset(descriptor: &SynthDescriptor, preset: &Preset) -> Vec<Violation> {
    let p = descriptor.num_params();
    if preset.len() != p {
        return vec![Violation::WrongLength {
            expected: p,
            found: preset.len(),
        }];
    }
    let mut out = Vec::new();
    for (spec, &v) in descriptor.params.iter().zip(preset.values()) {
        match spec.kind {
            ParamKind::Categorical { num_classes } => {
                let ok = v.is_finite() && v.fract() == 0.0 && v >= 0.0 && v < num_classes as f64;
                if !ok {
                    out.push(Violation::ClassOutOfRange {
                        index: spec.index,
                        name: spec.name.clone(),
                        value: v,
                        num_classes,
                    });
                }
            }
            ParamKind::Numerical { grid } => {
                let ok = (0.0..=1.0).contains(&v) && grid.index_of(v).is_some();
                if !ok {
                    out.push(Violation::OffGrid {
                        index: spec.index,
                        name: spec.name.clone(),
                        value: v,
                    });
                }
            }
        }
    }
    out
}

/// Errors with every violation if the preset does not conform.
pub fn ensure_valid(descriptor: &SynthDescriptor, preset: &Preset) -> Result<()> {
    let v = validate_preset(descriptor, preset);
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidPreset(v))
    }
}

/// One line of a preset corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct PresetRecord {
    pub id: u64,
    pub seed: u64,
    pub preset: Preset,
}

/// Decimal rendering with 9 significant digits.
fn format_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let exponent = v.abs().log10().floor() as i32;
    let decimals = (8 - exponent).max(0) as usize;
    format!("{v:.decimals$}")
}

/// One record per line: `id seed v_0 ... v_{P-1}`.
pub fn serialize_presets(descriptor: &SynthDescriptor, records: &[PresetRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&format!("{} {}", r.id, r.seed));
        for (spec, &v) in descriptor.params.iter().zip(r.preset.values()) {
            out.push(' ');
            if spec.is_categorical() {
                out.push_str(&format!("{}", v as i64));
            } else {
                out.push_str(&format_sig9(v));
            }
        }
        out.push('\n');
    }
    out
}

/// Parses one record; `line_no` is 1-based and only used in errors.
/// Numerical values are snapped back onto their grid, so the printed
/// 9-digit decimals reproduce the exact grid values.
pub fn parse_preset_line(descriptor: &SynthDescriptor, line: &str, line_no: usize) -> Result<PresetRecord> {
    let err = |message: String| Error::Parse {
        line: line_no,
        message,
    };
    let fields: Vec<&str> = line.split_whitespace().collect();
    let p = descriptor.num_params();
    if fields.len() != p + 2 {
        return Err(err(format!(
            "expected id, seed and P = {p} values, found {} fields",
            fields.len()
        )));
    }
    let id = fields[0]
        .parse::<u64>()
        .map_err(|e| err(format!("bad id `{}`: {e}", fields[0])))?;
    let seed = fields[1]
        .parse::<u64>()
        .map_err(|e| err(format!("bad seed `{}`: {e}", fields[1])))?;
    let mut values = Vec::with_capacity(p);
    for (spec, text) in descriptor.params.iter().zip(&fields[2..]) {
        let raw: f64 = text
            .parse()
            .map_err(|e| err(format!("param {} ({}): bad number `{text}`: {e}", spec.index, spec.name)))?;
        let v = match spec.kind {
            ParamKind::Categorical { num_classes } => {
                if raw.fract() != 0.0 || raw < 0.0 || raw >= num_classes as f64 {
                    return Err(err(format!(
                        "param {} ({}): class {raw} not in 0..{num_classes}",
                        spec.index, spec.name
                    )));
                }
                raw
            }
            ParamKind::Numerical { grid } => {
                let i = grid.nearest_index(raw);
                if !(0.0..=1.0).contains(&raw) || (raw - grid.value(i)).abs() > 1e-7 {
                    return Err(err(format!(
                        "param {} ({}): {raw} is not on its {}-step grid",
                        spec.index,
                        spec.name,
                        grid.steps()
                    )));
                }
                grid.value(i)
            }
        };
        values.push(v);
    }
    Ok(PresetRecord {
        id,
        seed,
        preset: Preset::new(values),
    })
}

pub fn parse_presets(descriptor: &SynthDescriptor, document: &str) -> Result<Vec<PresetRecord>> {
    document
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_preset_line(descriptor, l, i + 1))
        .collect()
}
