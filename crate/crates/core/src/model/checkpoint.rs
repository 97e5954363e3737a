//! Binary checkpoint format.
//!
//! ```text
//! "STBD" | version u32 | tensor count u32
//! per tensor: name len u32 | utf-8 name | rank u32 | dims u32 * rank | f32 * numel
//! metadata len u32 | utf-8 "key=value\n" lines
//! ```
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Scalar};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"STBD";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
    pub metadata: BTreeMap<String, String>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(what.to_string()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<String> {
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Data(format!("{what} is not valid UTF-8")))
    }
}

impl Checkpoint {
    pub fn from_params<T: Scalar>(
        params: &ParamStore<T>,
        metadata: impl IntoIterator<Item = (String, String)>,
    ) -> Self {
        Checkpoint {
            tensors: params
                .iter()
                .map(|(name, t)| NamedTensor {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    values: t.data().iter().map(|v| v.to_f32().expect("finite")).collect(),
                })
                .collect(),
            metadata: metadata.into_iter().collect(),
        }
    }

    /// Overwrites `params` with this checkpoint's values after checking that
    /// both hold the same tensor names in the same order with equal shapes.
    pub fn copy_into<T: Scalar>(&self, params: &mut ParamStore<T>) -> Result<()> {
        self.check_compatible(params)?;
        for ((_, dst), src) in params.iter_mut().zip(&self.tensors) {
            dst.data_mut()
                .iter_mut()
                .zip(&src.values)
                .for_each(|(d, &s)| *d = T::of(s as f64));
        }
        Ok(())
    }

    pub fn check_compatible<T: Scalar>(&self, params: &ParamStore<T>) -> Result<()> {
        for (i, (name, t)) in params.iter().enumerate() {
            let Some(found) = self.tensors.get(i) else {
                return Err(Error::TensorName(name.to_string()));
            };
            if found.name != name {
                return Err(Error::TensorName(found.name.clone()));
            }
            if found.shape != t.shape() {
                return Err(Error::TensorShape {
                    name: found.name.clone(),
                    expected: t.shape().to_vec(),
                    found: found.shape.clone(),
                });
            }
        }
        if let Some(extra) = self.tensors.get(params.len()) {
            return Err(Error::TensorName(extra.name.clone()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let numel: usize = t.shape.iter().product();
            if numel != t.values.len() {
                return Err(Error::TensorShape {
                    name: t.name.clone(),
                    expected: t.shape.clone(),
                    found: vec![t.values.len()],
                });
            }
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Data(format!("metadata entry `{k}` cannot be encoded")));
            }
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for i in 0..count {
            let len = r.u32("tensor name length")? as usize;
            let name = r.utf8(len, "tensor name")?;
            let rank = r.u32("tensor rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u32("tensor dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4, &format!("values of tensor {i} `{name}`"))?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if tensors.iter().any(|t: &NamedTensor| t.name == name) {
                return Err(Error::TensorName(name));
            }
            tensors.push(NamedTensor {
                name,
                shape,
                values,
            });
        }
        let len = r.u32("metadata length")? as usize;
        let meta = r.utf8(len, "metadata")?;
        let mut metadata = BTreeMap::new();
        for line in meta.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("malformed metadata line `{line}`")))?;
            metadata.insert(k.to_string(), v.to_string());
        }
        if r.pos != buf.len() {
            return Err(Error::Data(format!(
                "{} trailing bytes after checkpoint metadata",
                buf.len() - r.pos
            )));
        }
        Ok(Checkpoint { tensors, metadata })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Elementwise mean of several checkpoints with identical tensor sets.
    /// The result's metadata lists the sources under `averaged_from` and keeps
    /// the first source's `model.*` topology entries.
    pub fn average(sources: &[(String, Checkpoint)]) -> Result<Checkpoint> {
        let Some((_, first)) = sources.first() else {
            return Err(Error::Usage("averaging needs at least one checkpoint".into()));
        };
        for (_, c) in &sources[1..] {
            for (a, b) in first.tensors.iter().zip(&c.tensors) {
                if a.name != b.name {
                    return Err(Error::TensorName(b.name.clone()));
                }
                if a.shape != b.shape {
                    return Err(Error::TensorShape {
                        name: a.name.clone(),
                        expected: a.shape.clone(),
                        found: b.shape.clone(),
                    });
                }
            }
            if c.tensors.len() != first.tensors.len() {
                let k = first.tensors.len().min(c.tensors.len());
                let extra = first.tensors.get(k).or(c.tensors.get(k)).expect("longer side");
                return Err(Error::TensorName(extra.name.clone()));
            }
        }
        let n = sources.len() as f64;
        let tensors = first
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let values = (0..t.values.len())
                    .map(|j| {
                        let sum: f64 = sources.iter().map(|(_, c)| c.tensors[i].values[j] as f64).sum();
                        (sum / n) as f32
                    })
                    .collect();
                NamedTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    values,
                }
            })
            .collect();
        let names: Vec<&str> = sources.iter().map(|(n, _)| n.as_str()).collect();
        let mut metadata: BTreeMap<String, String> = sources[0]
            .1
            .metadata
            .iter()
            .filter(|(k, _)| k.starts_with("model."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        metadata.insert("averaged_from".to_string(), names.join(","));
        Ok(Checkpoint { tensors, metadata })
    }
}
