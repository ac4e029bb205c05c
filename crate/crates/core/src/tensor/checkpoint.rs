//! Text checkpoint format.
//!
//! ```text
//! KIND-CKPT-1
//! meta <key> <value...>
//! param <name> <trainable:0|1> <rank> <dim>...
//! <values, space separated, shortest round-trip decimal>
//! ```
//!
//! Metadata keys are written in sorted order and floats use Rust's shortest
//! round-trip formatting, so equal models serialize to identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "KIND-CKPT-1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(CHECKPOINT_MAGIC);
        out.push('\n');
        for (k, v) in &self.meta {
            let _ = writeln!(out, "meta {k} {v}");
        }
        for p in self.params.iter() {
            let shape = p.tensor.shape();
            let _ = write!(out, "param {} {} {}", p.name, u8::from(p.trainable), shape.len());
            for d in shape {
                let _ = write!(out, " {d}");
            }
            out.push('\n');
            let mut first = true;
            for v in p.tensor.values() {
                if !first {
                    out.push(' ');
                }
                first = false;
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(l) if l.trim_end() == CHECKPOINT_MAGIC => {}
            other => {
                return Err(Error::Parse(format!(
                    "missing checkpoint header {CHECKPOINT_MAGIC}, found {:?}",
                    other.unwrap_or("")
                )))
            }
        }
        let mut ck = Checkpoint::default();
        while let Some(line) = lines.next() {
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                ck.meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = line.strip_prefix("param ") {
                let fields: Vec<&str> = rest.split_whitespace().collect();
                let bad = || Error::Parse(format!("malformed param line: {line}"));
                if fields.len() < 3 {
                    return Err(bad());
                }
                let name = fields[0];
                let trainable = fields[1] == "1";
                let rank: usize = fields[2].parse().map_err(|_| bad())?;
                if fields.len() != 3 + rank {
                    return Err(bad());
                }
                let shape = fields[3..]
                    .iter()
                    .map(|d| d.parse::<usize>().map_err(|_| bad()))
                    .collect::<Result<Vec<_>>>()?;
                let values_line = lines.next().ok_or_else(bad)?;
                let values = values_line
                    .split_whitespace()
                    .map(|v| v.parse::<f64>().map_err(|_| Error::Parse(format!("bad value {v} in {name}"))))
                    .collect::<Result<Vec<_>>>()?;
                let id = ck.params.insert(name, Tensor::new(shape, values)?)?;
                ck.params.get_mut(id).trainable = trainable;
            } else {
                return Err(Error::Parse(format!("unexpected checkpoint line: {line}")));
            }
        }
        Ok(ck)
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        self.meta
            .get(key)
            .ok_or_else(|| Error::Parse(format!("checkpoint lacks meta {key}")))?
            .parse()
            .map_err(|_| Error::Parse(format!("meta {key} is not a number")))
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta
            .get(key)
            .ok_or_else(|| Error::Parse(format!("checkpoint lacks meta {key}")))?
            .parse()
            .map_err(|_| Error::Parse(format!("meta {key} is not an integer")))
    }
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    std::fs::write(path, ck.to_text())?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_text(&std::fs::read_to_string(path)?)
}
