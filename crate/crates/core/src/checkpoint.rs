//! Parameter checkpoints: a plain-text header followed by little-endian f64 data.
//!
//! ```text
//! FEDMOE-CHECKPOINT 1
//! tensors 2
//! tensor layer0.router 8,32 0 2048
//! tensor head.weight 32,4 2048 1024
//! end
//! <raw bytes>
//! ```
//!
//! Offsets and lengths are in bytes, relative to the first byte after the
//! `end` line.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "FEDMOE-CHECKPOINT 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new(names: Vec<String>, tensors: Vec<Tensor>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::Input(format!(
                "{} names for {} tensors",
                names.len(),
                tensors.len()
            )));
        }
        if let Some(n) = names.iter().find(|n| n.is_empty() || n.contains(char::is_whitespace)) {
            return Err(Error::Input(format!("tensor name `{n}` must be non-empty without spaces")));
        }
        Ok(Self { names, tensors })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("{MAGIC}\ntensors {}\n", self.tensors.len());
        let mut offset = 0usize;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let len = t.numel() * 8;
            let _ = writeln!(header, "tensor {name} {} {offset} {len}", shape.join(","));
            offset += len;
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        out.reserve(offset);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Input(format!("checkpoint: {msg}"));
        let mut pos = 0usize;
        let mut next_line = || -> Result<String> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header".into()))?;
            pos += end + 1;
            String::from_utf8(rest[..end].to_vec()).map_err(|_| bad("header is not UTF-8".into()))
        };
        if next_line()? != MAGIC {
            return Err(bad("missing magic line".into()));
        }
        let count_line = next_line()?;
        let count: usize = count_line
            .strip_prefix("tensors ")
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| bad(format!("bad count line `{count_line}`")))?;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let line = next_line()?;
            let parts: Vec<&str> = line.split(' ').collect();
            if parts.len() != 5 || parts[0] != "tensor" {
                return Err(bad(format!("bad tensor line `{line}`")));
            }
            let shape: Vec<usize> = parts[2]
                .split(',')
                .map(|d| d.parse().map_err(|_| bad(format!("bad shape `{}`", parts[2]))))
                .collect::<Result<_>>()?;
            let offset: usize = parts[3].parse().map_err(|_| bad(format!("bad offset in `{line}`")))?;
            let len: usize = parts[4].parse().map_err(|_| bad(format!("bad length in `{line}`")))?;
            entries.push((parts[1].to_string(), shape, offset, len));
        }
        if next_line()? != "end" {
            return Err(bad("missing end line".into()));
        }
        let body = &bytes[pos..];
        let mut names = Vec::with_capacity(count);
        let mut tensors = Vec::with_capacity(count);
        for (name, shape, offset, len) in entries {
            let numel: usize = shape.iter().product();
            if len != numel * 8 || offset.checked_add(len).is_none_or(|e| e > body.len()) {
                return Err(bad(format!("tensor `{name}` extends past the data or disagrees with its shape")));
            }
            let data = body[offset..offset + len]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(Tensor::new(shape, data)?);
            names.push(name);
        }
        Ok(Self { names, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Input(msg) => Error::Input(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
