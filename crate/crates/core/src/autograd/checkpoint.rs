//! Self-describing text checkpoint.
//!
//! ```text
//! pmformer-checkpoint v1
//! meta <key> <value...>
//! param <name> <ndim> <dim0> <dim1> ...
//! <row-major values separated by spaces>
//! ```
//!
//! Values are written in shortest round-trip form, so a load reproduces every
//! parameter bit for bit and equal parameters give byte-identical files.

use std::fmt::Write as _;
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "pmformer-checkpoint v1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(params: ParamStore) -> Self {
        Self {
            meta: Vec::new(),
            params,
        }
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.meta.push((key.into(), value.to_string()));
        self
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .meta(key)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing meta field {key}")))?;
        raw.parse()
            .map_err(|_| Error::Format(format!("bad value for {key}: {raw:?}")))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(MAGIC);
        out.push('\n');
        for (k, v) in &self.meta {
            let _ = writeln!(out, "meta {k} {v}");
        }
        for id in self.params.ids() {
            let t = self.params.value(id);
            let _ = write!(out, "param {} {}", self.params.name(id), t.ndim());
            for d in t.shape() {
                let _ = write!(out, " {d}");
            }
            out.push('\n');
            let vals: Vec<String> = t.data().iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&vals.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == MAGIC => {}
            _ => return Err(Error::Format(format!("missing header {MAGIC:?}"))),
        }
        let mut ck = Checkpoint::default();
        while let Some((i, line)) = lines.next() {
            let bad = |m: &str| Error::Format(format!("line {}: {m}", i + 1));
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                ck.meta.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = line.strip_prefix("param ") {
                let mut parts = rest.split_whitespace();
                let name = parts.next().ok_or_else(|| bad("missing parameter name"))?;
                let nums: Vec<usize> = parts
                    .map(|p| p.parse().map_err(|_| bad("bad shape")))
                    .collect::<Result<_>>()?;
                let (&ndim, shape) = nums.split_first().ok_or_else(|| bad("missing ndim"))?;
                if shape.len() != ndim {
                    return Err(bad("shape length does not match ndim"));
                }
                let (_, data_line) = lines.next().ok_or_else(|| bad("missing values"))?;
                let data: Vec<f64> = data_line
                    .split_whitespace()
                    .map(|v| v.parse().map_err(|_| bad("bad value")))
                    .collect::<Result<_>>()?;
                if ck.params.id(name).is_some() {
                    return Err(bad("duplicate parameter"));
                }
                ck.params.add(name, Tensor::new(shape, data)?);
            } else {
                return Err(bad("unrecognized line"));
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn text_round_trip_is_exact(vals in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::ZERO, 1..40)) {
            let mut p = ParamStore::new();
            p.add("w", Tensor::new(&[vals.len()], vals.clone()).unwrap());
            p.add("s", Tensor::scalar(vals[0]));
            let ck = Checkpoint::new(p).with_meta("channels", "open,high low");
            let back = Checkpoint::from_text(&ck.to_text()).unwrap();
            prop_assert_eq!(back.meta("channels"), Some("open,high low"));
            let w = back.params.value(back.params.id("w").unwrap());
            for (a, b) in w.data().iter().zip(&vals) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            prop_assert_eq!(back.to_text(), ck.to_text());
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_text("hello").is_err());
        let text = format!("{MAGIC}\nparam w 1 3\n1 2\n");
        assert!(Checkpoint::from_text(&text).is_err());
    }
}
