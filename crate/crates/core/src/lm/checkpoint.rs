//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FICL" | version u32 | layers, model_dim, heads, context_len, vocab_size,
//! concept_base, concept_slots (u32 each) | section count u32 |
//! sections: tag [u8; 4] | payload length u64 | payload
//! ```
//!
//! Model checkpoints carry `PARM` (every tensor, row-major f32), `VOCB`
//! (tokenizer JSON) and optionally `FPRT` (config fingerprint).

use std::fs;
use std::path::Path;

use super::model::LMParams;
use super::tokenizer::Tokenizer;
use super::LMConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FICL";
pub const VERSION: u32 = 1;

pub const PARAMS: [u8; 4] = *b"PARM";
pub const VOCAB: [u8; 4] = *b"VOCB";
pub const FINGERPRINT: [u8; 4] = *b"FPRT";

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub config: LMConfig,
    pub sections: Vec<([u8; 4], Vec<u8>)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Container {
    pub fn new(config: LMConfig) -> Self {
        Self {
            config,
            sections: Vec::new(),
        }
    }

    pub fn push(&mut self, tag: [u8; 4], payload: Vec<u8>) {
        self.sections.push((tag, payload));
    }

    pub fn section(&self, tag: [u8; 4]) -> Option<&[u8]> {
        self.sections
            .iter()
            .find(|(t, _)| *t == tag)
            .map(|(_, p)| p.as_slice())
    }

    pub fn require(&self, tag: [u8; 4]) -> Result<&[u8]> {
        self.section(tag).ok_or_else(|| {
            Error::Checkpoint(format!("missing section {}", String::from_utf8_lossy(&tag)))
        })
    }

    pub fn fingerprint(&self) -> Option<String> {
        self.section(FINGERPRINT)
            .map(|b| String::from_utf8_lossy(b).into_owned())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [
            c.layers,
            c.model_dim,
            c.heads,
            c.context_len,
            c.vocab_size,
            c.concept_base,
            c.concept_slots,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (tag, payload) in &self.sections {
            out.extend_from_slice(tag);
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(payload);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut f = [0usize; 7];
        for x in &mut f {
            *x = r.u32()? as usize;
        }
        let config = LMConfig {
            layers: f[0],
            model_dim: f[1],
            heads: f[2],
            context_len: f[3],
            vocab_size: f[4],
            concept_base: f[5],
            concept_slots: f[6],
        };
        let n = r.u32()?;
        let mut sections = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
            let len = r.u64()? as usize;
            sections.push((tag, r.take(len)?.to_vec()));
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { config, sections })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

pub fn f32s_to_bytes(values: impl IntoIterator<Item = f32>) -> Vec<u8> {
    values.into_iter().flat_map(f32::to_le_bytes).collect()
}

pub fn bytes_to_f32s(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Checkpoint("tensor payload not a multiple of 4 bytes".into()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn model_container(tok: &Tokenizer, params: &LMParams<f32>, fingerprint: Option<&str>) -> Container {
    let mut c = Container::new(params.config);
    c.push(
        PARAMS,
        f32s_to_bytes(params.tensors().into_iter().flatten().copied()),
    );
    c.push(VOCAB, serde_json::to_vec(tok).expect("tokenizer serializes"));
    if let Some(fp) = fingerprint {
        c.push(FINGERPRINT, fp.as_bytes().to_vec());
    }
    c
}

pub fn save_model(
    path: impl AsRef<Path>,
    tok: &Tokenizer,
    params: &LMParams<f32>,
    fingerprint: Option<&str>,
) -> Result<()> {
    model_container(tok, params, fingerprint).write(path)
}

pub fn model_from_container(c: &Container) -> Result<(Tokenizer, LMParams<f32>)> {
    c.config.validate()?;
    let values = bytes_to_f32s(c.require(PARAMS)?)?;
    let mut params = LMParams::<f32>::zeros(c.config);
    let expected: usize = params.tensors().iter().map(|t| t.len()).sum();
    if values.len() != expected {
        return Err(Error::Checkpoint(format!(
            "expected {expected} parameters, found {}",
            values.len()
        )));
    }
    let mut rest = values.as_slice();
    for t in params.tensors_mut() {
        let (head, tail) = rest.split_at(t.len());
        t.copy_from_slice(head);
        rest = tail;
    }
    let tok: Tokenizer = serde_json::from_slice(c.require(VOCAB)?)?;
    let tok = tok.reindexed();
    if tok.vocab_size() != c.config.vocab_size {
        return Err(Error::Checkpoint("vocabulary size disagrees with header".into()));
    }
    Ok((tok, params))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(Tokenizer, LMParams<f32>, Option<String>)> {
    let c = Container::read(path)?;
    let (tok, params) = model_from_container(&c)?;
    Ok((tok, params, c.fingerprint()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_exact_round_trip() {
        let tok = Tokenizer::build(["a b c d"], 2);
        let cfg = LMConfig {
            layers: 2,
            model_dim: 8,
            heads: 2,
            context_len: 16,
            vocab_size: tok.vocab_size(),
            concept_base: 4,
            concept_slots: 2,
        };
        let params = LMParams::<f32>::init(cfg, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ficl");
        save_model(&path, &tok, &params, Some("abc123")).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"FICL");
        let (tok2, params2, fp) = load_model(&path).unwrap();
        assert_eq!(fp.as_deref(), Some("abc123"));
        assert_eq!(tok2.encode("a b"), tok.encode("a b"));
        for (a, b) in params.tensors().iter().zip(params2.tensors()) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        save_model(dir.path().join("n.ficl"), &tok2, &params2, Some("abc123")).unwrap();
        assert_eq!(fs::read(dir.path().join("n.ficl")).unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        assert!(Container::from_bytes(b"NOPE").is_err());
        let mut c = Container::new(LMConfig {
            vocab_size: 8,
            ..Default::default()
        })
        .to_bytes();
        c.push(0);
        assert!(Container::from_bytes(&c).is_err());
    }
}
