//! Checkpoint container: a text manifest followed by little-endian `f32` blobs.
//!
//! ```text
//! cyclese-checkpoint 1
//! meta <count>
//! <key>=<value>            (one per line)
//! tensors <count>
//! <name>\t<d0>x<d1>x...\t<byte offset>
//! end
//! <blob bytes>
//! ```
//!
//! Offsets are relative to the first byte after the `end` line. Values are
//! written with `f32::to_le_bytes`, so save → load is bit-exact.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "cyclese-checkpoint 1";

/// Named tensors plus string metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.push((key.into(), value.to_string()));
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut header = String::new();
        header.push_str(MAGIC);
        header.push('\n');
        header.push_str(&format!("meta {}\n", self.meta.len()));
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(bad(format!("metadata entry {k:?} cannot be encoded")));
            }
            header.push_str(&format!("{k}={v}\n"));
        }
        header.push_str(&format!("tensors {}\n", self.tensors.len()));
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            if name.is_empty() || name.contains(['\t', '\n']) {
                return Err(bad(format!("tensor name {name:?} cannot be encoded")));
            }
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("{name}\t{}\t{offset}\n", dims.join("x")));
            offset += t.numel() * 4;
        }
        header.push_str("end\n");
        w.write_all(header.as_bytes())?;
        for (_, t) in &self.tensors {
            let mut bytes = Vec::with_capacity(t.numel() * 4);
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&bytes)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        let mut next_line = |r: &mut BufReader<_>| -> Result<String> {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(bad("unexpected end of manifest"));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };
        if next_line(&mut r)? != MAGIC {
            return Err(bad("not a checkpoint file (bad magic line)"));
        }
        let count = |l: String, key: &str| -> Result<usize> {
            l.strip_prefix(key)
                .and_then(|n| n.trim().parse().ok())
                .ok_or_else(|| bad(format!("expected `{key} <count>`, got {l:?}")))
        };
        let n_meta = count(next_line(&mut r)?, "meta")?;
        let mut meta = Vec::with_capacity(n_meta);
        for _ in 0..n_meta {
            let l = next_line(&mut r)?;
            let (k, v) = l.split_once('=').ok_or_else(|| bad(format!("bad metadata line {l:?}")))?;
            meta.push((k.to_string(), v.to_string()));
        }
        let n_tensors = count(next_line(&mut r)?, "tensors")?;
        let mut entries = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let l = next_line(&mut r)?;
            let parts: Vec<&str> = l.split('\t').collect();
            let [name, dims, offset] = parts[..] else {
                return Err(bad(format!("bad tensor line {l:?}")));
            };
            let shape = dims
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad(format!("bad shape {dims:?}")))?;
            let offset: usize = offset.parse().map_err(|_| bad(format!("bad offset {offset:?}")))?;
            entries.push((name.to_string(), shape, offset));
        }
        if next_line(&mut r)? != "end" {
            return Err(bad("missing `end` line"));
        }
        let mut blob = Vec::new();
        r.read_to_end(&mut blob)?;
        let mut tensors = Vec::with_capacity(entries.len());
        for (name, shape, offset) in entries {
            let n: usize = shape.iter().product();
            let bytes = blob
                .get(offset..offset + n * 4)
                .ok_or_else(|| bad(format!("blob for {name} out of range")))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path.as_ref())?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path.as_ref())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in proptest::collection::vec(-1e6f32..1e6, 1..64), k in "[a-z]{1,8}") {
            let n = values.len();
            let mut ck = Checkpoint::new();
            ck.push_meta(k.clone(), "v=1");
            ck.push_tensor("a/b", Tensor::new(&[n], values.clone()).unwrap());
            ck.push_tensor("scalar", Tensor::scalar(-0.0));
            let mut buf = Vec::new();
            ck.write_to(&mut buf).unwrap();
            let back = Checkpoint::read_from(&buf[..]).unwrap();
            prop_assert_eq!(back.meta(&k), Some("v=1"));
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(back.tensor("a/b").unwrap()), bits(ck.tensor("a/b").unwrap()));
            prop_assert_eq!(back.tensor("scalar").unwrap().item().to_bits(), (-0.0f32).to_bits());
        }
    }

    #[test]
    fn rejects_foreign_files() {
        assert!(Checkpoint::read_from(&b"hello\n"[..]).is_err());
    }
}
