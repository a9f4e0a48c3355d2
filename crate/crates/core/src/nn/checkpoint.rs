//! Plain-text weight container shared by every trainable model.
//!
//! ```text
//! radiosynth-weights 1
//! kind denoiser
//! config {"widths":[16,32,64],...}
//! tensors 2
//! tensor conv_in.w 16x1x3x3
//! live 0.01 -0.2 ...
//! ema 0.01 -0.19 ...
//! ...
//! ```

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::{Error, Result, Scalar};

const MAGIC: &str = "radiosynth-weights";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub kind: String,
    pub config: serde_json::Value,
    pub live: ParamStore<T>,
    pub ema: Option<ParamStore<T>>,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn join<T: Scalar>(vals: &[T]) -> String {
    let mut s = String::with_capacity(vals.len() * 12);
    for (i, v) in vals.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        write!(s, "{v}").expect("write to string");
    }
    s
}

fn parse_vals<T: Scalar>(line: &str, n: usize) -> Result<Vec<T>> {
    let vals: Vec<T> = line
        .split_ascii_whitespace()
        .map(|tok| T::from_str(tok).map_err(|_| fmt_err(format!("bad number {tok:?}"))))
        .collect::<Result<_>>()?;
    if vals.len() != n {
        return Err(fmt_err(format!("expected {n} values, found {}", vals.len())));
    }
    Ok(vals)
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{MAGIC} {CHECKPOINT_VERSION}").unwrap();
        writeln!(out, "kind {}", self.kind).unwrap();
        writeln!(out, "config {}", self.config).unwrap();
        writeln!(out, "tensors {}", self.live.len()).unwrap();
        for id in self.live.ids() {
            let t = self.live.tensor(id);
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            writeln!(out, "tensor {} {}", self.live.name(id), shape.join("x")).unwrap();
            writeln!(out, "live {}", join(t.data())).unwrap();
            match &self.ema {
                Some(e) => writeln!(out, "ema {}", join(e.tensor(id).data())).unwrap(),
                None => writeln!(out, "ema -").unwrap(),
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut field = |key: &str| -> Result<&str> {
            let line = lines.next().ok_or_else(|| fmt_err(format!("missing {key:?} line")))?;
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' ').or(if r.is_empty() { Some("") } else { None }))
                .ok_or_else(|| fmt_err(format!("expected {key:?}, found {line:?}")))
        };
        let version = field(MAGIC)?;
        if version != CHECKPOINT_VERSION.to_string() {
            return Err(fmt_err(format!("unsupported checkpoint version {version}")));
        }
        let kind = field("kind")?.to_string();
        let config = serde_json::from_str(field("config")?).map_err(|e| fmt_err(format!("config: {e}")))?;
        let count = usize::from_str(field("tensors")?).map_err(|_| fmt_err("bad tensor count"))?;
        let mut live = ParamStore::new();
        let mut ema = ParamStore::new();
        let mut has_ema = None;
        for _ in 0..count {
            let head = field("tensor")?;
            let (name, shape) = head.rsplit_once(' ').ok_or_else(|| fmt_err("bad tensor header"))?;
            let shape: Vec<usize> = shape
                .split('x')
                .map(|d| d.parse().map_err(|_| fmt_err(format!("bad shape {shape:?}"))))
                .collect::<Result<_>>()?;
            let n = shape.iter().product();
            live.add(name, Tensor::new(shape.clone(), parse_vals(field("live")?, n)?)?);
            let e = field("ema")?;
            let present = e != "-";
            if *has_ema.get_or_insert(present) != present {
                return Err(fmt_err("EMA weights present for some tensors only"));
            }
            if present {
                ema.add(name, Tensor::new(shape, parse_vals(e, n)?)?);
            }
        }
        Ok(Self {
            kind,
            config,
            live,
            ema: (has_ema == Some(true)).then_some(ema),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Fails unless the container holds a model of `kind`.
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(fmt_err(format!("checkpoint holds a {:?} model, expected {kind:?}", self.kind)));
        }
        Ok(())
    }
}
