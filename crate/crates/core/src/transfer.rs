//! STRN checkpoints, attention-kind conversion and parameter freezing.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! "STRN" | u32 version = 1 | u32 entry count
//! per entry:
//!   u32 name length | UTF-8 name | u8 dtype (1 = f32, 2 = f64) | u8 rank
//!   | u32 × rank dims | u64 data length in bytes | data
//! ```

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use crate::attention::AttentionKind;
use crate::model::{init_parameters, Model, ModelParams};
use crate::tensor::{DType, Element, Rng, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"STRN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Little-endian element bytes.
    pub data: Vec<u8>,
}

impl Entry {
    pub fn from_tensor<T: Element>(name: &str, t: &Tensor<T>) -> Self {
        let mut data = Vec::new();
        T::write_le(&t.data(), &mut data);
        Entry {
            name: name.to_string(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Element values, converted to `T` if stored at the other precision.
    pub fn values<T: Element>(&self) -> Vec<T> {
        match self.dtype {
            d if d == T::DTYPE => T::read_le(&self.data),
            DType::F32 => f32::read_le(&self.data).into_iter().map(|v| T::cast(v as f64)).collect(),
            DType::F64 => f64::read_le(&self.data).into_iter().map(T::cast).collect(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated checkpoint while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.name.as_str()).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dtype.code());
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&(e.data.len() as u64).to_le_bytes());
            out.extend_from_slice(&e.data);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("not a STRN checkpoint (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported STRN version {version}")));
        }
        let count = r.u32("entry count")?;
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(Error::Format(format!("duplicate tensor `{name}`")));
            }
            let code = r.u8("dtype")?;
            let dtype = DType::from_code(code)
                .ok_or_else(|| Error::Format(format!("`{name}`: unknown dtype code {code}")))?;
            let rank = r.u8("rank")? as usize;
            let shape = (0..rank).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let byte_len = r.u64("data length")?;
            let expected = shape.iter().product::<usize>() as u64 * dtype.size_bytes() as u64;
            if byte_len != expected {
                return Err(Error::Format(format!(
                    "`{name}`: {byte_len} data bytes for shape {shape:?} (expected {expected})"
                )));
            }
            let data = r.take(byte_len as usize, "tensor data")?.to_vec();
            entries.push(Entry {
                name,
                dtype,
                shape,
                data,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after last entry", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Every parameter in canonical order.
pub fn export_checkpoint<T: Element>(model: &Model<T>) -> Checkpoint {
    Checkpoint {
        entries: model
            .named_parameters()
            .iter()
            .map(|(name, t)| Entry::from_tensor(name, t))
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strictness {
    /// Every model parameter must be present and nothing else.
    Strict,
    /// Fill whatever matches; report the rest.
    Subset,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ImportReport {
    pub filled: Vec<String>,
    /// Model parameters the checkpoint did not provide.
    pub unfilled: Vec<String>,
    /// Checkpoint entries the model has no parameter for.
    pub ignored: Vec<String>,
}

/// Copies checkpoint tensors into the model. All checks run before any
/// parameter is written, so a failed import leaves the model untouched.
pub fn import_checkpoint<T: Element>(ck: &Checkpoint, model: &Model<T>, strictness: Strictness) -> Result<ImportReport> {
    let params = model.named_parameters();
    let by_name: HashMap<&str, &Entry> = ck.entries.iter().map(|e| (e.name.as_str(), e)).collect();
    let known: HashSet<&str> = params.iter().map(|(n, _)| n.as_str()).collect();
    let mut report = ImportReport::default();
    let mut writes = Vec::new();
    for (name, t) in &params {
        match by_name.get(name.as_str()) {
            Some(e) => {
                if e.shape != t.shape() {
                    return Err(Error::TensorShape {
                        name: name.clone(),
                        expected: t.shape().to_vec(),
                        found: e.shape.clone(),
                    });
                }
                writes.push((t, e.values::<T>()));
                report.filled.push(name.clone());
            }
            None => report.unfilled.push(name.clone()),
        }
    }
    report.ignored = ck.names().into_iter().filter(|n| !known.contains(n)).map(str::to_string).collect();
    if strictness == Strictness::Strict {
        if let Some(n) = report.unfilled.first() {
            return Err(Error::Format(format!("checkpoint lacks `{n}` ({} missing)", report.unfilled.len())));
        }
        if let Some(n) = report.ignored.first() {
            return Err(Error::Format(format!("checkpoint has unknown tensor `{n}`")));
        }
    }
    for (t, values) in writes {
        t.update_data(|d| d.copy_from_slice(&values));
    }
    Ok(report)
}

pub fn import_bytes<T: Element>(bytes: &[u8], model: &Model<T>, strictness: Strictness) -> Result<ImportReport> {
    import_checkpoint(&Checkpoint::from_bytes(bytes)?, model, strictness)
}

fn copy_tensor<T: Element>(t: &Tensor<T>) -> Tensor<T> {
    let c = Tensor::parameter(t.to_vec(), t.shape()).expect("shape of an existing tensor");
    c.set_requires_grad(t.requires_grad()).expect("fresh leaf");
    c
}

fn copy_params<T: Element>(p: &ModelParams<T>) -> ModelParams<T> {
    use crate::attention::{AttentionParams, Linear};
    use crate::model::{BlockParams, Norm};
    let lin = |l: &Linear<T>| Linear {
        weight: copy_tensor(&l.weight),
        bias: copy_tensor(&l.bias),
    };
    let norm = |n: &Norm<T>| Norm {
        gamma: copy_tensor(&n.gamma),
        beta: copy_tensor(&n.beta),
    };
    ModelParams {
        tok_embed: copy_tensor(&p.tok_embed),
        pos_embed: copy_tensor(&p.pos_embed),
        blocks: p
            .blocks
            .iter()
            .map(|b| BlockParams {
                attn: AttentionParams {
                    q: lin(&b.attn.q),
                    k: lin(&b.attn.k),
                    v: lin(&b.attn.v),
                    out: b.attn.out.as_ref().map(lin),
                },
                ln1: norm(&b.ln1),
                mlp_in: lin(&b.mlp_in),
                mlp_out: lin(&b.mlp_out),
                ln2: norm(&b.ln2),
            })
            .collect(),
        head_pre: p.head_pre.as_ref().map(lin),
        head: lin(&p.head),
    }
}

/// Same parameter values (copied, not shared) under another attention
/// formula. The scale mode switches to the new kind's default.
pub fn convert_attention_kind<T: Element>(model: &Model<T>, kind: AttentionKind) -> Result<Model<T>> {
    let mut cfg = model.cfg.clone();
    cfg.attention = kind;
    cfg.scale = kind.default_scale();
    cfg.validate()?;
    Ok(Model {
        cfg,
        params: copy_params(&model.params),
    })
}

/// Parameter-name patterns: `*` matches any run of characters (dots
/// included) and `{a,b}` matches any listed alternative.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezeSet {
    pub patterns: Vec<String>,
}

impl FreezeSet {
    pub fn new<S: Into<String>>(patterns: impl IntoIterator<Item = S>) -> Self {
        FreezeSet {
            patterns: patterns.into_iter().map(Into::into).collect(),
        }
    }

    /// The q, k and v projections of every block.
    pub fn qkv() -> Self {
        FreezeSet::new(["*.attn.{q,k,v}.*"])
    }

    /// `qkv` is shorthand for [`FreezeSet::qkv`]; otherwise a
    /// comma-separated pattern list outside braces.
    pub fn parse(s: &str) -> Self {
        if s == "qkv" {
            return Self::qkv();
        }
        let mut patterns = vec![String::new()];
        let mut depth = 0;
        for c in s.chars() {
            match c {
                '{' => depth += 1,
                '}' => depth -= 1,
                ',' if depth == 0 => {
                    patterns.push(String::new());
                    continue;
                }
                _ => {}
            }
            patterns.last_mut().unwrap().push(c);
        }
        FreezeSet::new(patterns.into_iter().filter(|p| !p.is_empty()))
    }

    pub fn matches(&self, name: &str) -> bool {
        self.patterns.iter().any(|p| glob_match(p, name))
    }
}

fn expand_braces(pattern: &str) -> Vec<String> {
    let Some(open) = pattern.find('{') else {
        return vec![pattern.to_string()];
    };
    let Some(close) = pattern[open..].find('}').map(|c| open + c) else {
        return vec![pattern.to_string()];
    };
    let (head, tail) = (&pattern[..open], &pattern[close + 1..]);
    pattern[open + 1..close]
        .split(',')
        .flat_map(|alt| expand_braces(&format!("{head}{alt}{tail}")))
        .collect()
}

fn wildcard(p: &[u8], s: &[u8]) -> bool {
    match p.split_first() {
        None => s.is_empty(),
        Some((b'*', rest)) => (0..=s.len()).any(|i| wildcard(rest, &s[i..])),
        Some((&c, rest)) => s.first() == Some(&c) && wildcard(rest, &s[1..]),
    }
}

pub fn glob_match(pattern: &str, name: &str) -> bool {
    expand_braces(pattern).iter().any(|p| wildcard(p.as_bytes(), name.as_bytes()))
}

/// Stops gradient flow into every matched parameter. Returns the names
/// frozen. A pattern that matches nothing is an error.
pub fn freeze<T: Element>(model: &Model<T>, fs: &FreezeSet) -> Result<Vec<String>> {
    let params = model.named_parameters();
    for p in &fs.patterns {
        if !params.iter().any(|(n, _)| glob_match(p, n)) {
            return Err(Error::FreezeNoMatch(p.clone()));
        }
    }
    let mut frozen = Vec::new();
    for (name, t) in &params {
        if fs.matches(name) {
            t.set_requires_grad(false)?;
            frozen.push(name.clone());
        }
    }
    Ok(frozen)
}

/// Redraws every trainable parameter from the initial distribution, leaving
/// frozen ones as they are.
pub fn reinit_trainable<T: Element>(model: &Model<T>, rng: &mut Rng) -> Result<()> {
    let fresh = Model {
        cfg: model.cfg.clone(),
        params: init_parameters::<T>(&model.cfg, rng)?,
    };
    for ((_, t), (_, f)) in model.named_parameters().iter().zip(fresh.named_parameters()) {
        if t.requires_grad() {
            let values = f.to_vec();
            t.update_data(|d| d.copy_from_slice(&values));
        }
    }
    Ok(())
}
