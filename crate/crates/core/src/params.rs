//! Named parameter sets owned by each network.

use alloc::string::String;
use alloc::vec::Vec;

use crate::tensor::Tensor;

/// Identifies a network inside a model (used for freezing and gradient routing).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NetId(pub u8);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub net: NetId,
    pub index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Running statistics; updated from forward passes only.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub kind: ParamKind,
    /// 1-based layer index inside the owning network, 0 for network-level tensors.
    pub layer: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    net: NetId,
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new(net: NetId) -> Self {
        ParamSet { net, params: Vec::new() }
    }

    pub fn net(&self) -> NetId {
        self.net
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor, kind: ParamKind, layer: usize) -> usize {
        self.params.push(Param { name: name.into(), tensor, kind, layer });
        self.params.len() - 1
    }

    pub fn key(&self, index: usize) -> ParamKey {
        ParamKey { net: self.net, index }
    }

    pub fn get(&self, index: usize) -> &Param {
        &self.params[index]
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.params[index].tensor
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.params[index].tensor
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.kind == ParamKind::Trainable).map(|p| p.tensor.len()).sum()
    }

    /// FNV-1a over every tensor's bit pattern, buffers included.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for v in p.tensor.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}
