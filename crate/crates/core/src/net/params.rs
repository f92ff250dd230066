//! Named parameter storage with matching gradient buffers, plus the binary
//! checkpoint format.

use std::collections::HashMap;
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::tensor::Tensor5;

/// One parameter value: a rank-5 tensor (conv/deconv filters) or a rank-1
/// vector (biases, batch-norm channel parameters and running statistics).
#[derive(Debug, Clone)]
pub enum PValue {
    Tensor(Tensor5),
    Vector(Vec<f32>),
}

impl PValue {
    pub fn as_slice(&self) -> &[f32] {
        match self {
            PValue::Tensor(t) => t.data(),
            PValue::Vector(v) => v,
        }
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        match self {
            PValue::Tensor(t) => t.data_mut(),
            PValue::Vector(v) => v,
        }
    }

    pub fn numel(&self) -> usize {
        self.as_slice().len()
    }

    fn dims(&self) -> Vec<usize> {
        match self {
            PValue::Tensor(t) => {
                let (n, c, d, h, w) = t.dims();
                vec![n, c, d, h, w]
            }
            PValue::Vector(v) => vec![v.len()],
        }
    }

    fn zeros_like(&self) -> PValue {
        match self {
            PValue::Tensor(t) => {
                let (n, c, d, h, w) = t.dims();
                PValue::Tensor(Tensor5::zeros(n, c, d, h, w))
            }
            PValue::Vector(v) => PValue::Vector(vec![0.0; v.len()]),
        }
    }
}

/// Ordered collection of named parameters; every entry owns a gradient buffer
/// of identical shape. Insertion order is the deterministic order used by
/// checkpoints and the optimizer.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    index: HashMap<String, usize>,
    values: Vec<PValue>,
    grads: Vec<PValue>,
    trainable: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: PValue, trainable: bool) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.grads.push(value.zeros_like());
        self.values.push(value);
        self.trainable.push(trainable);
    }

    fn idx(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable[self.idx(name)]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor(&self, name: &str) -> &Tensor5 {
        match &self.values[self.idx(name)] {
            PValue::Tensor(t) => t,
            PValue::Vector(_) => panic!("parameter {name} is a vector, expected tensor"),
        }
    }

    pub fn vector(&self, name: &str) -> &[f32] {
        match &self.values[self.idx(name)] {
            PValue::Vector(v) => v,
            PValue::Tensor(_) => panic!("parameter {name} is a tensor, expected vector"),
        }
    }

    pub fn set_vector(&mut self, name: &str, v: &[f32]) {
        let i = self.idx(name);
        match &mut self.values[i] {
            PValue::Vector(dst) => {
                assert_eq!(dst.len(), v.len(), "size change for {name}");
                dst.copy_from_slice(v);
            }
            PValue::Tensor(_) => panic!("parameter {name} is a tensor, expected vector"),
        }
    }

    pub fn value_slice(&self, name: &str) -> &[f32] {
        self.values[self.idx(name)].as_slice()
    }

    pub fn value_slice_mut(&mut self, name: &str) -> &mut [f32] {
        let i = self.idx(name);
        self.values[i].as_mut_slice()
    }

    pub fn grad_slice(&self, name: &str) -> &[f32] {
        self.grads[self.idx(name)].as_slice()
    }

    /// Accumulates `delta` into a parameter's gradient buffer.
    pub fn add_grad(&mut self, name: &str, delta: &[f32]) {
        let i = self.idx(name);
        let g = self.grads[i].as_mut_slice();
        assert_eq!(g.len(), delta.len(), "gradient size mismatch for {name}");
        for (gv, &dv) in g.iter_mut().zip(delta) {
            *gv += dv;
        }
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.iter_mut() {
            g.as_mut_slice().fill(0.0);
        }
    }

    /// Scales every gradient buffer, e.g. to average over a batch.
    pub fn scale_grads(&mut self, factor: f32) {
        for g in self.grads.iter_mut() {
            for v in g.as_mut_slice() {
                *v *= factor;
            }
        }
    }

    /// Visits each trainable parameter as (name, value, gradient) flat slices,
    /// in insertion order.
    pub fn for_each_trainable<F>(&mut self, mut f: F)
    where
        F: FnMut(&str, &mut [f32], &[f32]),
    {
        for i in 0..self.names.len() {
            if self.trainable[i] {
                f(&self.names[i], self.values[i].as_mut_slice(), self.grads[i].as_slice());
            }
        }
    }

    /// Total element count of trainable parameters.
    pub fn param_count(&self) -> usize {
        self.values
            .iter()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .map(|(v, _)| v.numel())
            .sum()
    }

    /// Total element count including non-trainable state (running statistics).
    pub fn state_count(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    /// Writes the VPCK checkpoint: magic, version, then each parameter in
    /// insertion order as (name-length u16, name, rank u8, dims u32, f32 LE data).
    pub fn save_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"VPCK")?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_u32::<LittleEndian>(self.names.len() as u32)?;
        for (name, value) in self.names.iter().zip(&self.values) {
            let bytes = name.as_bytes();
            w.write_u16::<LittleEndian>(bytes.len() as u16)?;
            w.write_all(bytes)?;
            let dims = value.dims();
            w.write_u8(dims.len() as u8)?;
            for d in &dims {
                w.write_u32::<LittleEndian>(*d as u32)?;
            }
            for &v in value.as_slice() {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    /// Loads a VPCK checkpoint into this store. Every file entry must match an
    /// existing parameter in name and shape, and cover the store exactly.
    pub fn load_checkpoint<R: Read>(&mut self, mut r: R) -> Result<()> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|e| Error::Format(format!("checkpoint too short for magic: {e}")))?;
        if &magic != b"VPCK" {
            return Err(Error::Format(format!(
                "bad checkpoint magic {:?}, expected \"VPCK\"",
                String::from_utf8_lossy(&magic)
            )));
        }
        let version = r
            .read_u32::<LittleEndian>()
            .map_err(|e| Error::Format(format!("checkpoint truncated at version: {e}")))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = r
            .read_u32::<LittleEndian>()
            .map_err(|e| Error::Format(format!("checkpoint truncated at count: {e}")))?
            as usize;
        if count != self.names.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {count} parameters, network has {}",
                self.names.len()
            )));
        }
        for _ in 0..count {
            let name_len = r
                .read_u16::<LittleEndian>()
                .map_err(|e| Error::Format(format!("checkpoint truncated at name length: {e}")))?
                as usize;
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf)
                .map_err(|e| Error::Format(format!("checkpoint truncated in name: {e}")))?;
            let name = String::from_utf8(name_buf)
                .map_err(|e| Error::Format(format!("parameter name is not UTF-8: {e}")))?;
            let rank = r
                .read_u8()
                .map_err(|e| Error::Format(format!("checkpoint truncated at rank: {e}")))?
                as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.read_u32::<LittleEndian>().map_err(|e| {
                    Error::Format(format!("checkpoint truncated in dims: {e}"))
                })? as usize);
            }
            let Some(&i) = self.index.get(&name) else {
                return Err(Error::Checkpoint(format!(
                    "checkpoint parameter {name} not present in network"
                )));
            };
            if self.values[i].dims() != dims {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?} in checkpoint, {:?} in network",
                    dims,
                    self.values[i].dims()
                )));
            }
            let dst = self.values[i].as_mut_slice();
            for v in dst.iter_mut() {
                *v = r.read_f32::<LittleEndian>().map_err(|e| {
                    Error::Format(format!("checkpoint truncated in payload of {name}: {e}"))
                })?;
            }
        }
        Ok(())
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;
