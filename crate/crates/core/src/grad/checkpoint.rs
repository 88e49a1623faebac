//! Named parameter storage and its checkpoint file format.
//!
//! A checkpoint is a flat list of `(name, shape, values)` records:
//!
//! ```text
//! magic    8 bytes  "MQTCKPT\x01"
//! count    u32 LE
//! record*  name_len u32 LE, name bytes (UTF-8),
//!          ndim u32 LE, ndim × u32 LE dims,
//!          prod(dims) × f64 LE values
//! ```
//!
//! Values round-trip bit-exactly.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::tape::{Tape, Var};
use super::tensor::{GradError, Tensor};

const MAGIC: &[u8; 8] = b"MQTCKPT\x01";

/// Ordered, named parameter set. Insertion order is the checkpoint order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) {
        assert!(
            !self.index.contains_key(name),
            "ParamStore::add: duplicate parameter name {:?}",
            name
        );
        self.index.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let idx = self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {:?}", name));
        &self.tensors[*idx]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    /// Register every parameter as its own leaf on `tape`.
    pub fn bind(&self, tape: &Tape) -> BoundParams {
        let vars = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| (n.clone(), tape.leaf(t.clone())))
            .collect();
        BoundParams { vars }
    }

    /// Bind all parameters as views into one flat leaf vector, preserving
    /// store order. Used by the finite-difference harness, which checks one
    /// parameter vector at a time.
    pub fn bind_from_flat(&self, flat: &Var) -> BoundParams {
        assert_eq!(flat.numel(), self.total_values(), "flat leaf size mismatch");
        let mut vars = HashMap::new();
        let mut off = 0;
        for (n, t) in self.names.iter().zip(&self.tensors) {
            let v = flat.slice(0, off, t.numel()).reshape(t.shape());
            vars.insert(n.clone(), v);
            off += t.numel();
        }
        BoundParams { vars }
    }

    /// Concatenate every parameter into one flat vector (store order).
    pub fn flatten(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.total_values());
        for t in &self.tensors {
            data.extend_from_slice(t.data());
        }
        Tensor::from_vec(data)
    }

    /// Overwrite all parameters from a flat vector (store order).
    pub fn unflatten_into(&mut self, flat: &Tensor) {
        assert_eq!(flat.numel(), self.total_values(), "flat size mismatch");
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat.data()[off..off + n]);
            off += n;
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), GradError> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in self.iter() {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, GradError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };

        let magic = cur.take(8)?;
        if magic != MAGIC {
            return Err(GradError::Format(format!("bad magic {:?}", &magic[..8.min(magic.len())])));
        }
        let count = cur.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|e| GradError::Format(format!("non-utf8 name: {}", e)))?;
            let ndim = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
            }
            store.add(&name, Tensor::new(shape, data)?);
        }
        if cur.pos != bytes.len() {
            return Err(GradError::Format(format!("{} trailing bytes", bytes.len() - cur.pos)));
        }
        Ok(store)
    }
}

/// Per-tape parameter handles from one [`ParamStore::bind`] call.
pub struct BoundParams {
    vars: HashMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> &Var {
        self.vars.get(name).unwrap_or_else(|| panic!("unbound parameter {:?}", name))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], GradError> {
        if self.pos + n > self.bytes.len() {
            return Err(GradError::Format("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, GradError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
