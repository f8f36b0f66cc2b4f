//! Binary checkpoints.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic     8 bytes   "LATALGN\0"
//! version   u32       FORMAT_VERSION
//! kind      u32 len + UTF-8   "ctc" | "imputer" | "teacher"
//! step      u64
//! echo      u32 len + UTF-8   `key = value` lines: model config, `vocab`,
//!                             then any extra (training) keys
//! blocks    u32 count, then per block:
//!             name  u32 len + UTF-8
//!             rank  u32 (always 2)
//!             dims  u64 rows, u64 cols
//!             data  rows * cols f64, row-major
//! ```
//!
//! Loading rebuilds the architecture from the echoed config and requires
//! every block to match it by name and shape.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::alignment::Vocab;
use crate::config::{parse_kv, render_kv, KeyValues};
use crate::error::{Error, Result};
use crate::model::{AlignmentModel, ModelConfig, Teacher};
use crate::transformer::ParamSet;

pub const MAGIC: &[u8; 8] = b"LATALGN\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Ctc,
    Imputer,
    Teacher,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Ctc => "ctc",
            ModelKind::Imputer => "imputer",
            ModelKind::Teacher => "teacher",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ctc" => Ok(ModelKind::Ctc),
            "imputer" => Ok(ModelKind::Imputer),
            "teacher" => Ok(ModelKind::Teacher),
            other => Err(Error::Checkpoint(format!("unknown model kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub version: u32,
    pub kind: ModelKind,
    pub step: u64,
    /// Everything echoed besides the model config and vocabulary.
    pub extra: KeyValues,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn encode<P: ParamSet>(
    kind: ModelKind,
    step: u64,
    config: &ModelConfig,
    vocab: &Vocab,
    extra: &KeyValues,
    params: &P,
) -> Vec<u8> {
    let mut echo: Vec<(String, String)> = config.to_kv();
    echo.push(("vocab".into(), vocab.user_tokens().join(" ")));
    echo.extend(extra.iter().map(|(k, v)| (k.clone(), v.clone())));
    let echo_text = render_kv(echo.iter().map(|(k, v)| (k, v)));

    let mut out = Vec::with_capacity(64 + 8 * params.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_str(&mut out, &kind.to_string());
    out.extend_from_slice(&step.to_le_bytes());
    put_str(&mut out, &echo_text);
    let mut count = 0u32;
    params.visit(&mut |_, _| count += 1);
    out.extend_from_slice(&count.to_le_bytes());
    params.visit(&mut |name, m| {
        put_str(&mut out, &name);
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(m.rows as u64).to_le_bytes());
        out.extend_from_slice(&(m.cols as u64).to_le_bytes());
        for v in &m.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("invalid UTF-8 before byte {}", self.pos)))
    }
}

struct Block {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

struct Decoded {
    header: Header,
    config: ModelConfig,
    vocab: Vocab,
    blocks: BTreeMap<String, Block>,
}

fn decode(bytes: &[u8]) -> Result<Decoded> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let kind: ModelKind = r.string()?.parse()?;
    let step = r.u64()?;
    let mut echo = parse_kv(&r.string()?, Path::new("<checkpoint echo>"))?;
    let tokens = echo
        .remove("vocab")
        .ok_or_else(|| Error::Checkpoint("config echo lacks a vocab entry".into()))?;
    let vocab = Vocab::new(tokens.split_whitespace())?;
    let mut config = ModelConfig::default();
    let model_keys: Vec<String> = config.to_kv().into_iter().map(|(k, _)| k).collect();
    let mut model_kv = KeyValues::new();
    for k in &model_keys {
        let v = echo
            .remove(k)
            .ok_or_else(|| Error::Checkpoint(format!("config echo lacks {k}")))?;
        model_kv.insert(k.clone(), v);
    }
    config.apply_kv(&model_kv)?;

    let count = r.u32()?;
    let mut blocks = BTreeMap::new();
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()?;
        if rank != 2 {
            return Err(Error::Checkpoint(format!("block {name} has rank {rank}")));
        }
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Checkpoint(format!("block {name} is too large")))?;
        let data = r
            .take(n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        blocks.insert(name, Block { rows, cols, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last block",
            bytes.len() - r.pos
        )));
    }
    Ok(Decoded {
        header: Header {
            version,
            kind,
            step,
            extra: echo,
        },
        config,
        vocab,
        blocks,
    })
}

fn fill<P: ParamSet>(params: &mut P, mut blocks: BTreeMap<String, Block>) -> Result<()> {
    let mut problem: Option<String> = None;
    params.visit_mut(&mut |name, m| {
        if problem.is_some() {
            return;
        }
        match blocks.remove(&name) {
            None => problem = Some(format!("missing block {name}")),
            Some(b) if (b.rows, b.cols) != m.shape() => {
                problem = Some(format!(
                    "block {name} is {}x{} but the config expects {}x{}",
                    b.rows, b.cols, m.rows, m.cols
                ))
            }
            Some(b) => m.data = b.data,
        }
    });
    if let Some(p) = problem {
        return Err(Error::Checkpoint(p));
    }
    if let Some(name) = blocks.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected block {name}")));
    }
    Ok(())
}

pub fn save_model(
    path: impl AsRef<Path>,
    model: &AlignmentModel,
    kind: ModelKind,
    step: u64,
    extra: &KeyValues,
) -> Result<()> {
    if kind == ModelKind::Teacher {
        return Err(Error::Checkpoint("an alignment model cannot be saved as a teacher".into()));
    }
    let bytes = encode(kind, step, &model.config, &model.vocab, extra, &model.params);
    crate::io::write_atomic(path, &bytes)
}

pub fn save_teacher(
    path: impl AsRef<Path>,
    teacher: &Teacher,
    step: u64,
    extra: &KeyValues,
) -> Result<()> {
    let bytes = encode(
        ModelKind::Teacher,
        step,
        &teacher.config,
        &teacher.vocab,
        extra,
        &teacher.params,
    );
    crate::io::write_atomic(path, &bytes)
}

fn read(path: &Path) -> Result<Decoded> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(AlignmentModel, Header)> {
    let d = read(path.as_ref())?;
    if d.header.kind == ModelKind::Teacher {
        return Err(Error::Checkpoint(format!(
            "{} holds a teacher, not a CTC or Imputer model",
            path.as_ref().display()
        )));
    }
    let mut model = AlignmentModel::new(d.config, d.vocab, 0)?;
    fill(&mut model.params, d.blocks)?;
    Ok((model, d.header))
}

pub fn load_teacher(path: impl AsRef<Path>) -> Result<(Teacher, Header)> {
    let d = read(path.as_ref())?;
    if d.header.kind != ModelKind::Teacher {
        return Err(Error::Checkpoint(format!(
            "{} holds a {} model, not a teacher",
            path.as_ref().display(),
            d.header.kind
        )));
    }
    let mut teacher = Teacher::new(d.config, d.vocab, 0)?;
    fill(&mut teacher.params, d.blocks)?;
    Ok((teacher, d.header))
}
