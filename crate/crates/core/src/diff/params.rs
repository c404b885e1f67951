//! Named parameter storage, gradient buffers and the checkpoint container.
//!
//! Checkpoints are plain text: a magic line, free-form `key=value` metadata,
//! then one line per parameter holding its name, shape and the IEEE-754 bit
//! patterns of its row-major values in hex. Reading a checkpoint back yields
//! bit-identical parameters.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use super::Matrix;
use crate::error::{Error, Result};

const MAGIC: &str = "pmp-checkpoint v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter drawn uniformly from `[-b, b]` with
    /// `b = sqrt(3 / fan_in)`, i.e. variance `1 / fan_in`.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = (3.0 / fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.add(name, Matrix::from_vec(rows, cols, data))
    }

    pub fn add(&mut self, name: &str, value: Matrix) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|m| m.as_slice().len()).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            values: self
                .values
                .iter()
                .map(|m| Matrix::zeros(m.rows(), m.cols()))
                .collect(),
        }
    }

    pub fn save(&self, path: &Path, meta: &BTreeMap<String, String>) -> Result<()> {
        fs::write(path, self.to_text(meta)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|(line, msg)| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        })
    }

    pub fn to_text(&self, meta: &BTreeMap<String, String>) -> String {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        for (k, v) in meta {
            out.push_str(&format!("meta {k}={v}\n"));
        }
        for (name, m) in self.names.iter().zip(&self.values) {
            out.push_str(&format!("param {name} {} {}", m.rows(), m.cols()));
            for v in m.as_slice() {
                out.push_str(&format!(" {:016x}", v.to_bits()));
            }
            out.push('\n');
        }
        out
    }

    /// Parses the text container; errors carry a 1-based line number.
    pub fn from_text(text: &str) -> std::result::Result<(Self, BTreeMap<String, String>), (usize, String)> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, MAGIC)) => {}
            _ => return Err((1, format!("expected header {MAGIC:?}"))),
        }
        let mut params = ParamSet::new();
        let mut meta = BTreeMap::new();
        for (i, line) in lines {
            let lineno = i + 1;
            let mut parts = line.split_whitespace();
            match parts.next() {
                None => continue,
                Some("meta") => {
                    let kv = line["meta ".len()..].trim();
                    let (k, v) = kv
                        .split_once('=')
                        .ok_or((lineno, "meta line without '='".to_string()))?;
                    meta.insert(k.to_string(), v.to_string());
                }
                Some("param") => {
                    let bad = |what: &str| (lineno, format!("malformed param line: {what}"));
                    let name = parts.next().ok_or_else(|| bad("name"))?;
                    let rows: usize = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| bad("rows"))?;
                    let cols: usize = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| bad("cols"))?;
                    let data = parts
                        .map(|s| u64::from_str_radix(s, 16).map(f64::from_bits))
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| bad("value"))?;
                    if data.len() != rows * cols {
                        return Err(bad("value count does not match shape"));
                    }
                    if params.id(name).is_some() {
                        return Err(bad("duplicate name"));
                    }
                    params.add(name, Matrix::from_vec(rows, cols, data));
                }
                Some(other) => return Err((lineno, format!("unknown record {other:?}"))),
            }
        }
        Ok((params, meta))
    }
}

/// Gradient buffers aligned with a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    values: Vec<Matrix>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub(crate) fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.values {
            a.scale(s);
        }
    }

    /// Euclidean norm over every entry of every gradient.
    pub fn norm(&self) -> f64 {
        self.values.iter().flat_map(|m| m.as_slice()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Matrix> {
        self.values.iter()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}
