//! Binary checkpoints: the magic `MNEME1`, a u64-LE length-prefixed JSON
//! header holding the config and vocabulary, then one record per weight
//! (u64 name length, name bytes, u64 rank, u64 dims, raw LE f64 data)
//! until end of file.

use std::io::{Read, Write};
use std::path::Path;

use mneme_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ParamStore};
use crate::corpus::Vocab;
use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"MNEME1";
/// Refuse absurd lengths from corrupt files before allocating.
const MAX_FIELD: u64 = 1 << 32;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vec<String>,
}

/// A model together with the vocabulary it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocab,
}

fn put_u64<W: Write>(w: &mut W, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn write_checkpoint<W: Write>(mut w: W, model: &Model, vocab: &Vocab) -> Result<()> {
    let io = |e: std::io::Error| Error::Format(format!("write failed: {e}"));
    let header = serde_json::to_vec(&Header { config: model.config.clone(), vocab: vocab.words().to_vec() })?;
    w.write_all(MAGIC).map_err(io)?;
    put_u64(&mut w, header.len() as u64).map_err(io)?;
    w.write_all(&header).map_err(io)?;
    for (name, t) in model.params.iter() {
        put_u64(&mut w, name.len() as u64).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        put_u64(&mut w, t.rank() as u64).map_err(io)?;
        for &d in t.shape() {
            put_u64(&mut w, d as u64).map_err(io)?;
        }
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        w.write_all(&bytes).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn save_checkpoint(path: &Path, model: &Model, vocab: &Vocab) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(std::io::BufWriter::new(f), model, vocab)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated checkpoint while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        if v > MAX_FIELD {
            return Err(Error::Format(format!("implausible {what} {v}")));
        }
        Ok(v as usize)
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| Error::Format(format!("read failed: {e}")))?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    let magic = c.take(MAGIC.len(), "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "not a checkpoint or unsupported version (magic {:?})",
            String::from_utf8_lossy(magic)
        )));
    }
    let n = c.len("header length")?;
    let header: Header = serde_json::from_slice(c.take(n, "header")?)
        .map_err(|e| Error::Format(format!("bad header: {e}")))?;
    header.config.validate()?;
    let mut named = Vec::new();
    while !c.done() {
        let n = c.len("name length")?;
        let name = String::from_utf8(c.take(n, "name")?.to_vec())
            .map_err(|_| Error::Format("weight name is not UTF-8".into()))?;
        let rank = c.len("rank")?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.len("dimension")?);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.filter(|&n| n as u64 <= MAX_FIELD).ok_or_else(|| Error::Format("weight too large".into()))?;
        let raw = c.take(numel * 8, &name)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        named.push((name, t));
    }
    let params = ParamStore::from_named(&header.config, named)?;
    let model = Model::from_parts(header.config, params)?;
    Ok(Checkpoint { model, vocab: Vocab::from_words(header.vocab) })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    fn tiny() -> (Model, Vocab) {
        let vocab = Vocab::build(["a", "b", "c"]);
        let cfg = ModelConfig {
            variant: Variant::Dynamic,
            hidden_dim: 8,
            memory_dim: 8,
            ffn_dim: 16,
            self_heads: 2,
            cross_heads: 2,
            vocab_size: vocab.len(),
            seed: 3,
            ..Default::default()
        };
        (Model::new(cfg).unwrap(), vocab)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (model, vocab) = tiny();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &model, &vocab).unwrap();
        let back = read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(back.vocab, vocab);
        assert_eq!(back.model.config, model.config);
        for ((n1, a), (n2, b)) in model.params.iter().zip(back.model.params.iter()) {
            assert_eq!(n1, n2);
            let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same, "{n1}");
        }
        let mut again = Vec::new();
        write_checkpoint(&mut again, &back.model, &back.vocab).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn truncation_and_bad_magic_are_format_errors() {
        let (model, vocab) = tiny();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &model, &vocab).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(read_checkpoint(cut), Err(Error::Format(_))));
        let mut wrong = bytes.clone();
        wrong[5] = b'2';
        assert!(matches!(read_checkpoint(wrong.as_slice()), Err(Error::Format(_))));
        let missing = &bytes[..bytes.len() - 8 * 8 - 8 - 8 - "update.b".len()];
        assert!(read_checkpoint(missing).is_err());
    }
}
