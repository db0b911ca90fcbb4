//! Named parameter sets and their checkpoint format.
//!
//! A [`ParamSet`] is an insertion-ordered map from parameter name to graph
//! node. The shared initializer holds leaf nodes; task-adapted sets produced
//! during meta-training hold interior nodes that stay differentiable.
//!
//! Checkpoint layout: a text header (format version, dtype, one
//! `tensor <name> <rank> <dims...>` line per entry, then `end`) followed by
//! the raw little-endian payloads in header order.

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use thiserror::Error;

use crate::autodiff::Var;
use crate::scalar::Scalar;
use crate::tensor::{Result as TensorResult, Tensor};

const CKPT_MAGIC: &str = "metakws-ckpt";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint dtype is {found}, expected {expected}")]
    Dtype { found: String, expected: String },
    #[error("checkpoint payload truncated: wanted {wanted} bytes, got {got}")]
    Truncated { wanted: usize, got: usize },
}

#[derive(Clone)]
pub struct ParamSet<T: Scalar> {
    entries: IndexMap<String, Var<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    /// Inserts a named parameter. Panics on duplicate names: parameter maps
    /// are built once by the model constructor and never rekeyed.
    pub fn insert(&mut self, name: impl Into<String>, var: Var<T>) {
        let name = name.into();
        let prev = self.entries.insert(name.clone(), var);
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn get(&self, name: &str) -> Option<&Var<T>> {
        self.entries.get(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn vars(&self) -> Vec<Var<T>> {
        self.entries.values().cloned().collect()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.entries.values().map(|v| v.value().len()).sum()
    }

    /// Fresh differentiable leaves carrying the current values. Used when a
    /// checkpoint is loaded or an adapted set becomes the new starting point.
    pub fn reparam(&self) -> Self {
        let mut out = Self::new();
        for (name, var) in &self.entries {
            out.insert(name.clone(), Var::param(var.value().clone()));
        }
        out
    }

    /// `theta - lr * grad`, built with graph ops so the result remains
    /// differentiable with respect to the inputs.
    pub fn step(&self, grads: &[Var<T>], lr: T) -> TensorResult<Self> {
        assert_eq!(grads.len(), self.len());
        let mut out = Self::new();
        for ((name, var), g) in self.entries.iter().zip(grads) {
            out.insert(name.clone(), var.sub(&g.mul_scalar(lr))?);
        }
        Ok(out)
    }

    /// True when every parameter value is finite.
    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|v| v.value().all_finite())
    }

    pub fn save(&self, path: &Path) -> std::result::Result<(), CheckpointError> {
        let mut header = String::new();
        header.push_str(&format!("{CKPT_MAGIC} v{CKPT_VERSION}\n"));
        header.push_str(&format!("dtype {}\n", T::DTYPE));
        for (name, var) in &self.entries {
            header.push_str(&format!("tensor {name} {}", var.shape().len()));
            for d in var.shape() {
                header.push_str(&format!(" {d}"));
            }
            header.push('\n');
        }
        header.push_str("end\n");

        let mut payload = Vec::new();
        for var in self.entries.values() {
            for &v in var.value().data() {
                v.write_le(&mut payload);
            }
        }

        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(header.as_bytes())?;
        f.write_all(&payload)?;
        Ok(())
    }

    pub fn load(path: &Path) -> std::result::Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;

        // The header is ASCII lines up to and including "end\n".
        let mut pos = 0usize;
        let mut lines = Vec::new();
        loop {
            let nl = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| CheckpointError::Header("missing end marker".into()))?;
            let line = std::str::from_utf8(&bytes[pos..pos + nl])
                .map_err(|_| CheckpointError::Header("non-utf8 header".into()))?
                .to_string();
            pos += nl + 1;
            if line == "end" {
                break;
            }
            lines.push(line);
        }
        let mut it = lines.iter();
        let magic = it
            .next()
            .ok_or_else(|| CheckpointError::Header("empty header".into()))?;
        if magic != &format!("{CKPT_MAGIC} v{CKPT_VERSION}") {
            return Err(CheckpointError::Header(format!("bad magic line: {magic}")));
        }
        let dtype_line = it
            .next()
            .ok_or_else(|| CheckpointError::Header("missing dtype".into()))?;
        let found = dtype_line
            .strip_prefix("dtype ")
            .ok_or_else(|| CheckpointError::Header(format!("bad dtype line: {dtype_line}")))?;
        if found != T::DTYPE {
            return Err(CheckpointError::Dtype {
                found: found.to_string(),
                expected: T::DTYPE.to_string(),
            });
        }

        let mut out = Self::new();
        for line in it {
            let mut tok = line.split_whitespace();
            if tok.next() != Some("tensor") {
                return Err(CheckpointError::Header(format!("bad tensor line: {line}")));
            }
            let name = tok
                .next()
                .ok_or_else(|| CheckpointError::Header(format!("bad tensor line: {line}")))?;
            let rank: usize = tok
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| CheckpointError::Header(format!("bad rank in: {line}")))?;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(
                    tok.next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| CheckpointError::Header(format!("bad dims in: {line}")))?,
                );
            }
            let n: usize = shape.iter().product();
            let wanted = n * T::BYTES;
            if pos + wanted > bytes.len() {
                return Err(CheckpointError::Truncated {
                    wanted,
                    got: bytes.len().saturating_sub(pos),
                });
            }
            let mut data = Vec::with_capacity(n);
            for i in 0..n {
                data.push(T::read_le(&bytes[pos + i * T::BYTES..]));
            }
            pos += wanted;
            let tensor = Tensor::from_vec(shape, data)
                .map_err(|e| CheckpointError::Header(e.to_string()))?;
            out.insert(name.to_string(), Var::param(tensor));
        }
        Ok(out)
    }
}
