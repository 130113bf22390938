//! Parameter checkpoint files.
//!
//! Layout: a text header, then the raw little-endian `f64` payload.
//!
//! ```text
//! pfd-checkpoint 1
//! meta {"...": ...}
//! param <name> <dim>x<dim>... <byte offset> <value count>
//! ...
//! end
//! <payload>
//! ```
//!
//! Byte offsets are relative to the start of the payload.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &str = "pfd-checkpoint 1";

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Free-form single-line metadata (the model configuration as JSON).
    pub meta: String,
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(meta: impl Into<String>) -> Self {
        Self {
            meta: meta.into(),
            entries: Vec::new(),
        }
    }

    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for (_, name, value) in store.iter() {
            self.entries.push((format!("{prefix}{name}"), value.clone()));
        }
    }

    /// Copies entries named `prefix + name` into `store`; every store entry must be present.
    pub fn fill_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let key = format!("{prefix}{}", store.name(id));
            let (_, t) = self
                .entries
                .iter()
                .find(|(n, _)| *n == key)
                .ok_or_else(|| bad(format!("missing parameter {key}")))?;
            if t.shape() != store.get(id).shape() {
                return Err(bad(format!("{key}: shape {:?} vs {:?}", t.shape(), store.get(id).shape())));
            }
            *store.get_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        if self.meta.contains('\n') {
            return Err(bad("metadata must be a single line"));
        }
        let mut header = format!("{MAGIC}\nmeta {}\n", self.meta);
        let mut offset = 0usize;
        for (name, t) in &self.entries {
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(bad(format!("invalid parameter name {name:?}")));
            }
            let dims = if t.shape().is_empty() {
                "scalar".to_string()
            } else {
                t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
            };
            header.push_str(&format!("param {name} {dims} {offset} {}\n", t.numel()));
            offset += t.numel() * 8;
        }
        header.push_str("end\n");
        w.write_all(header.as_bytes())?;
        for (_, t) in &self.entries {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        let next_line = |r: &mut BufReader<_>, line: &mut String| -> Result<()> {
            line.clear();
            if r.read_line(line)? == 0 {
                return Err(bad("unexpected end of header"));
            }
            Ok(())
        };
        next_line(&mut r, &mut line)?;
        if line.trim_end() != MAGIC {
            return Err(bad(format!("bad magic {:?}", line.trim_end())));
        }
        next_line(&mut r, &mut line)?;
        let meta = line
            .trim_end_matches('\n')
            .strip_prefix("meta ")
            .ok_or_else(|| bad("missing meta line"))?
            .to_string();
        let mut specs = Vec::new();
        loop {
            next_line(&mut r, &mut line)?;
            let l = line.trim_end();
            if l == "end" {
                break;
            }
            let f: Vec<&str> = l.split(' ').collect();
            if f.len() != 5 || f[0] != "param" {
                return Err(bad(format!("bad header line {l:?}")));
            }
            let shape: Vec<usize> = if f[2] == "scalar" {
                Vec::new()
            } else {
                f[2].split('x')
                    .map(|d| d.parse().map_err(|_| bad(format!("bad dims {}", f[2]))))
                    .collect::<Result<_>>()?
            };
            let offset: usize = f[3].parse().map_err(|_| bad("bad offset"))?;
            let count: usize = f[4].parse().map_err(|_| bad("bad count"))?;
            if shape.iter().product::<usize>() != count {
                return Err(bad(format!("{}: dims {} disagree with count {count}", f[1], f[2])));
            }
            specs.push((f[1].to_string(), shape, offset, count));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let mut entries = Vec::with_capacity(specs.len());
        for (name, shape, offset, count) in specs {
            let end = offset + count * 8;
            if end > payload.len() {
                return Err(bad(format!("{name}: payload truncated")));
            }
            let data = payload[offset..end]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            entries.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { meta, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}
